//! Audio ingestion: WAV reading/writing, stereo downmix and resampling to the
//! toolkit-wide 16 kHz mono format.

use std::f64::consts::PI;
use std::path::Path;

use thiserror::Error;

/// Sample rate every signal is converted to on ingestion.
pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
    #[error("unsupported wav format: {0}")]
    UnsupportedFormat(String),
    #[error("non-finite sample at index {0}")]
    NonFiniteSample(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A mono sample buffer with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Largest absolute sample value.
    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |p, &s| p.max(s.abs()))
    }

    pub fn check_finite(&self) -> Result<(), AudioError> {
        match self.samples.iter().position(|s| !s.is_finite()) {
            Some(i) => Err(AudioError::NonFiniteSample(i)),
            None => Ok(()),
        }
    }
}

/// Read a RIFF WAV file (PCM 16-bit or 32-bit float). Stereo is downmixed by
/// averaging the channels; the native sample rate is kept.
pub fn read_wav(path: &Path) -> Result<AudioSignal, AudioError> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(AudioError::UnsupportedFormat(format!(
            "{} channels (expected mono or stereo)",
            channels
        )));
    }

    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => {
            reader.samples::<f32>().collect::<Result<_, _>>()?
        }
        (fmt, bits) => {
            return Err(AudioError::UnsupportedFormat(format!(
                "{:?} {} bit (expected PCM16 or float32)",
                fmt, bits
            )))
        }
    };

    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(2)
            .map(|c| 0.5 * (c[0] + c[1]))
            .collect()
    };

    Ok(AudioSignal::new(samples, spec.sample_rate))
}

/// Write a mono 32-bit float WAV.
pub fn write_wav_f32(path: &Path, signal: &AudioSignal) -> Result<(), AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &signal.samples {
        writer.write_sample(s)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Write a mono 16-bit PCM WAV.
pub fn write_wav_i16(path: &Path, signal: &AudioSignal) -> Result<(), AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &signal.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}

const RESAMPLE_TAPS: usize = 64;
const KAISER_BETA: f64 = 8.0;

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half_x2 = (x / 2.0) * (x / 2.0);
    for k in 1..64 {
        term *= half_x2 / ((k * k) as f64);
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Windowed-sinc resampler (Kaiser window, beta 8, 64 taps).
///
/// For downsampling, the sinc cutoff is scaled to the output Nyquist.
pub fn resample(signal: &AudioSignal, target_rate: u32) -> AudioSignal {
    if signal.sample_rate == target_rate || signal.is_empty() {
        return AudioSignal::new(signal.samples.clone(), target_rate);
    }
    let ratio = signal.sample_rate as f64 / target_rate as f64; // input samples per output sample
    let cutoff = (1.0 / ratio).min(1.0);
    let half = (RESAMPLE_TAPS / 2) as i64;
    let out_len = (signal.samples.len() as f64 / ratio).floor() as usize;
    let i0_beta = bessel_i0(KAISER_BETA);
    let n = signal.samples.len() as i64;

    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        let t = m as f64 * ratio;
        let center = t.floor() as i64;
        let mut acc = 0.0f64;
        for j in (center - half + 1)..=(center + half) {
            if j < 0 || j >= n {
                continue;
            }
            let dx = t - j as f64;
            let w = dx / half as f64;
            if w.abs() >= 1.0 {
                continue;
            }
            let window = bessel_i0(KAISER_BETA * (1.0 - w * w).sqrt()) / i0_beta;
            acc += signal.samples[j as usize] as f64 * cutoff * sinc(cutoff * dx) * window;
        }
        out.push(acc as f32);
    }
    AudioSignal::new(out, target_rate)
}

/// Read a WAV, downmix to mono, resample to 16 kHz and verify finiteness.
pub fn ingest_wav(path: &Path) -> Result<AudioSignal, AudioError> {
    let raw = read_wav(path)?;
    raw.check_finite()?;
    let sig = resample(&raw, SAMPLE_RATE);
    sig.check_finite()?;
    Ok(sig)
}
