//! Self-contained synthetic corpus generator.
//!
//! "Speakers" are band-limited noise sources with speaker-specific passbands
//! and speech-like on/off gating, so the full pipeline (VAD, trimming,
//! mixing, counting) can run without any real recordings. Noise files for
//! k = 0 samples are broadband, ungated, and spectrally smooth, so they look
//! nothing like a gated narrowband speaker.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::audio::{self, AudioSignal, SAMPLE_RATE};
use crate::seeds;

#[derive(Debug, Error)]
pub enum ToyCorpusError {
    #[error("need at least one speaker")]
    NoSpeakers,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("audio error: {0}")]
    Audio(#[from] audio::AudioError),
}

#[derive(Debug, Clone)]
pub struct ToyCorpusConfig {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub utterance_s: f64,
    pub n_noise_files: usize,
    pub noise_s: f64,
    pub seed: u64,
    /// Prefix for speaker ids; lets disjoint splits share one naming scheme.
    pub id_prefix: String,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            n_speakers: 12,
            utterances_per_speaker: 3,
            utterance_s: 9.0,
            n_noise_files: 4,
            noise_s: 12.0,
            seed: 0,
            id_prefix: "spk".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub speech_manifest: PathBuf,
    pub noise_manifest: PathBuf,
}

/// Stationary noise with support limited to [lo_hz, hi_hz], synthesized in
/// the frequency domain; RMS-normalized to 1.
fn band_noise(n: usize, lo_hz: f64, hi_hz: f64, rng: &mut impl Rng) -> Vec<f64> {
    let df = SAMPLE_RATE as f64 / n as f64;
    let lo_bin = (lo_hz / df).ceil() as usize;
    let hi_bin = ((hi_hz / df).floor() as usize).min(n / 2 - 1);
    let mut spec = vec![Complex::new(0.0f64, 0.0); n];
    for k in lo_bin..=hi_bin.max(lo_bin) {
        let amp = rng.random_range(0.5..1.0);
        let phase = rng.random_range(0.0..TAU);
        let v = Complex::from_polar(amp, phase);
        spec[k] = v;
        spec[n - k] = v.conj();
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut spec);
    let mut out: Vec<f64> = spec.iter().map(|c| c.re).collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        for v in out.iter_mut() {
            *v /= rms;
        }
    }
    out
}

/// Broadband noise with a gentle low-frequency tilt; RMS-normalized to 1.
fn broadband_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let df = SAMPLE_RATE as f64 / n as f64;
    let lo_bin = (60.0 / df).ceil() as usize;
    let hi_bin = ((7600.0 / df).floor() as usize).min(n / 2 - 1);
    let mut spec = vec![Complex::new(0.0f64, 0.0); n];
    for k in lo_bin..=hi_bin {
        let f_hz = k as f64 * df;
        let tilt = 1.0 / (1.0 + f_hz / 400.0).sqrt();
        let phase = rng.random_range(0.0..TAU);
        let v = Complex::from_polar(tilt, phase);
        spec[k] = v;
        spec[n - k] = v.conj();
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut spec);
    let mut out: Vec<f64> = spec.iter().map(|c| c.re).collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    for v in out.iter_mut() {
        *v /= rms;
    }
    out
}

/// Speech-like on/off gating with 10 ms raised-cosine edges. Starts on.
fn gate_envelope(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let ramp = (0.010 * sr) as usize;
    let mut env = vec![0.0f64; n];
    let mut pos = 0usize;
    let mut on = true;
    while pos < n {
        let dur_s = if on {
            rng.random_range(0.35..1.2)
        } else {
            rng.random_range(0.15..0.6)
        };
        let dur = ((dur_s * sr) as usize).max(ramp * 2);
        let end = (pos + dur).min(n);
        if on {
            for i in pos..end {
                let x = if i < pos + ramp {
                    (i - pos) as f64 / ramp as f64
                } else if i + ramp > end {
                    (end - i) as f64 / ramp as f64
                } else {
                    1.0
                };
                env[i] = 0.5 - 0.5 * (std::f64::consts::PI * x).cos();
            }
        }
        pos = end;
        on = !on;
    }
    env
}

/// One synthetic utterance for a speaker with the given passband.
fn synth_utterance(
    duration_s: f64,
    lo_hz: f64,
    hi_hz: f64,
    rng: &mut impl Rng,
) -> AudioSignal {
    let n = (duration_s * SAMPLE_RATE as f64) as usize;
    let carrier = band_noise(n, lo_hz, hi_hz, rng);
    let env = gate_envelope(n, rng);
    let am_freq = rng.random_range(2.0..6.0);
    let am_phase = rng.random_range(0.0..TAU);
    let target_rms = 0.15;

    let mut samples: Vec<f32> = carrier
        .iter()
        .zip(&env)
        .enumerate()
        .map(|(i, (c, e))| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let wobble = 1.0 + 0.15 * (TAU * am_freq * t + am_phase).sin();
            (c * e * wobble * target_rms) as f32
        })
        .collect();
    let peak = samples.iter().fold(0.0f32, |p, &s| p.max(s.abs()));
    if peak > 0.95 {
        let g = 0.95 / peak;
        for s in samples.iter_mut() {
            *s *= g;
        }
    }
    AudioSignal::new(samples, SAMPLE_RATE)
}

/// Number of slots in the shared passband grid.
const BAND_GRID: usize = 14;

/// Every speaker, in every split, draws its passband from one fixed
/// log-spaced grid (with a small jitter), so mixtures from disjoint speaker
/// sets still occupy familiar frequencies. Within one corpus the drawn slots
/// are distinct.
fn assign_passbands(n: usize, rng: &mut impl Rng) -> Vec<(f64, f64)> {
    let (lo, hi) = (400.0f64, 6000.0f64);
    let mut slots: Vec<usize> = (0..BAND_GRID).collect();
    slots.shuffle(rng);
    (0..n)
        .map(|i| {
            let slot = slots[i % BAND_GRID];
            let frac = slot as f64 / (BAND_GRID - 1) as f64;
            let center = lo * (hi / lo).powf(frac) * rng.random_range(0.97..1.03);
            let half = (center * rng.random_range(0.16..0.22)).max(125.0);
            ((center - half).max(150.0), (center + half).min(7600.0))
        })
        .collect()
}

/// Generate speaker WAVs, noise WAVs and the two corpus manifests.
pub fn generate(out_dir: &Path, cfg: &ToyCorpusConfig) -> Result<ToyCorpus, ToyCorpusError> {
    if cfg.n_speakers == 0 {
        return Err(ToyCorpusError::NoSpeakers);
    }
    std::fs::create_dir_all(out_dir)?;

    let mut band_rng = seeds::rng(seeds::substream(cfg.seed, "passbands"));
    let bands = assign_passbands(cfg.n_speakers, &mut band_rng);

    let mut speech_map: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (s, &(lo_hz, hi_hz)) in bands.iter().enumerate() {
        let speaker_id = format!("{}{:03}", cfg.id_prefix, s);
        let spk_dir = out_dir.join("speakers").join(&speaker_id);
        std::fs::create_dir_all(&spk_dir)?;
        let mut paths = Vec::new();
        for u in 0..cfg.utterances_per_speaker {
            let mut rng = seeds::rng(seeds::substream_n(
                cfg.seed,
                &format!("utt-{speaker_id}"),
                u as u64,
            ));
            let dur = cfg.utterance_s * rng.random_range(0.85..1.15);
            let sig = synth_utterance(dur, lo_hz, hi_hz, &mut rng);
            let rel = format!("speakers/{speaker_id}/utt{u:02}.wav");
            audio::write_wav_i16(&out_dir.join(&rel), &sig)?;
            paths.push(rel);
        }
        speech_map.insert(speaker_id, paths);
    }
    let speech_manifest = out_dir.join("manifest.json");
    std::fs::write(&speech_manifest, serde_json::to_string_pretty(&speech_map).unwrap())?;

    let noise_dir = out_dir.join("noise");
    std::fs::create_dir_all(&noise_dir)?;
    let mut noise_paths = Vec::new();
    for i in 0..cfg.n_noise_files {
        let mut rng = seeds::rng(seeds::substream_n(cfg.seed, "noise", i as u64));
        let n = (cfg.noise_s * SAMPLE_RATE as f64) as usize;
        let raw = broadband_noise(n, &mut rng);
        let level = rng.random_range(0.03..0.12);
        let samples: Vec<f32> = raw.iter().map(|&v| (v * level) as f32).collect();
        let rel = format!("noise/noise{i:02}.wav");
        audio::write_wav_i16(
            &out_dir.join(&rel),
            &AudioSignal::new(samples, SAMPLE_RATE),
        )?;
        noise_paths.push(rel);
    }
    let mut noise_map = BTreeMap::new();
    noise_map.insert("noise".to_string(), noise_paths);
    let noise_manifest = out_dir.join("noise_manifest.json");
    std::fs::write(&noise_manifest, serde_json::to_string_pretty(&noise_map).unwrap())?;

    Ok(ToyCorpus { speech_manifest, noise_manifest })
}
