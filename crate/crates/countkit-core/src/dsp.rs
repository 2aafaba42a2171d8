//! Time-frequency feature extraction.
//!
//! Four input representations share one framing geometry: 25 ms Hann windows
//! (400 samples at 16 kHz) with a 10 ms hop (160 samples), reflect-padded by
//! 120 samples on each side so a 5 s signal yields exactly 500 frames.
//!
//! - `stft`: one-sided STFT magnitude, 201 bins
//! - `logstft`: ln(1 + stft)
//! - `mel40`: 40 HTK-scale triangular filters applied to the magnitude spectra
//! - `mfcc20`: first 20 coefficients of an orthonormal DCT-II over log mel energies

use ndarray::{Array1, Array2};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioSignal;

pub const SAMPLE_RATE: u32 = 16_000;
/// Analysis window length in samples (25 ms).
pub const FRAME_LEN: usize = 400;
/// Hop between frames in samples (10 ms).
pub const HOP: usize = 160;
/// FFT size; equal to the window length, giving 201 one-sided bins.
pub const FFT_SIZE: usize = 400;
/// Reflect padding applied to each side before framing.
pub const PAD: usize = 120;
pub const N_BINS: usize = FFT_SIZE / 2 + 1;
pub const N_MELS: usize = 40;
pub const N_MFCC: usize = 20;
/// Floor added to mel energies before the log in the MFCC path.
pub const MFCC_LOG_FLOOR: f64 = 1e-10;

pub const HOP_S: f64 = 0.010;
pub const FRAME_LEN_S: f64 = 0.025;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("signal too short: {0} samples, need at least {FRAME_LEN}")]
    SignalTooShort(usize),
    #[error("expected sample rate {SAMPLE_RATE}, got {0}")]
    WrongSampleRate(u32),
}

/// The four input representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Stft,
    LogStft,
    Mel40,
    Mfcc20,
}

impl FeatureKind {
    /// Feature dimension (columns of the output matrix).
    pub fn dim(&self) -> usize {
        match self {
            FeatureKind::Stft | FeatureKind::LogStft => N_BINS,
            FeatureKind::Mel40 => N_MELS,
            FeatureKind::Mfcc20 => N_MFCC,
        }
    }

    pub fn all() -> [FeatureKind; 4] {
        [
            FeatureKind::Stft,
            FeatureKind::LogStft,
            FeatureKind::Mel40,
            FeatureKind::Mfcc20,
        ]
    }
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FeatureKind::Stft => "stft",
            FeatureKind::LogStft => "logstft",
            FeatureKind::Mel40 => "mel40",
            FeatureKind::Mfcc20 => "mfcc20",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stft" => Ok(FeatureKind::Stft),
            "logstft" => Ok(FeatureKind::LogStft),
            "mel40" => Ok(FeatureKind::Mel40),
            "mfcc20" => Ok(FeatureKind::Mfcc20),
            other => Err(format!("unknown feature kind '{other}'")),
        }
    }
}

/// A D x F time-frequency matrix. Rows are frames.
#[derive(Debug, Clone)]
pub struct TFRepresentation {
    pub data: Array2<f64>,
    pub kind: FeatureKind,
    pub hop_s: f64,
    pub frame_len_s: f64,
}

impl TFRepresentation {
    fn new(data: Array2<f64>, kind: FeatureKind) -> Self {
        Self { data, kind, hop_s: HOP_S, frame_len_s: FRAME_LEN_S }
    }

    pub fn num_frames(&self) -> usize {
        self.data.nrows()
    }
}

/// Number of frames produced for a signal of `n` samples (including the
/// reflect padding): `1 + floor((n + 2*PAD - FRAME_LEN) / HOP)`.
pub fn num_frames(n: usize) -> Result<usize, DspError> {
    if n < FRAME_LEN {
        return Err(DspError::SignalTooShort(n));
    }
    Ok(1 + (n + 2 * PAD - FRAME_LEN) / HOP)
}

/// Periodic Hann window of length `FRAME_LEN`.
fn hann_window() -> Vec<f64> {
    (0..FRAME_LEN)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / FRAME_LEN as f64).cos()))
        .collect()
}

/// Reflect-pad (mirror about the edge sample, excluding it) by `PAD` on each side.
fn reflect_pad(samples: &[f32]) -> Vec<f64> {
    let n = samples.len();
    debug_assert!(n > PAD);
    let mut out = Vec::with_capacity(n + 2 * PAD);
    for i in 0..PAD {
        out.push(samples[PAD - i] as f64);
    }
    out.extend(samples.iter().map(|&s| s as f64));
    for i in 0..PAD {
        out.push(samples[n - 2 - i] as f64);
    }
    out
}

fn check_input(signal: &AudioSignal) -> Result<(), DspError> {
    if signal.sample_rate != SAMPLE_RATE {
        return Err(DspError::WrongSampleRate(signal.sample_rate));
    }
    if signal.len() < FRAME_LEN {
        return Err(DspError::SignalTooShort(signal.len()));
    }
    Ok(())
}

/// One-sided STFT magnitude, D x 201.
pub fn stft_magnitude(signal: &AudioSignal) -> Result<TFRepresentation, DspError> {
    check_input(signal)?;
    let padded = reflect_pad(&signal.samples);
    let d = num_frames(signal.len())?;
    let window = hann_window();

    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_SIZE);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    let mut out = Array2::<f64>::zeros((d, N_BINS));

    for (t, mut row) in out.outer_iter_mut().enumerate() {
        let start = t * HOP;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, r) in row.iter_mut().enumerate() {
            *r = buf[k].norm();
        }
    }
    Ok(TFRepresentation::new(out, FeatureKind::Stft))
}

/// ln(1 + m) applied elementwise to the STFT magnitude.
pub fn log_stft(signal: &AudioSignal) -> Result<TFRepresentation, DspError> {
    let mut rep = stft_magnitude(signal)?;
    rep.data.mapv_inplace(|m| (1.0 + m).ln());
    rep.kind = FeatureKind::LogStft;
    Ok(rep)
}

/// HTK mel scale: 2595 * log10(1 + f / 700).
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank as a 201 x 40 matrix so that
/// `mel = stft.dot(&filterbank)`.
///
/// Corner frequencies are equally spaced on the HTK mel scale across
/// 0..8000 Hz and snapped to the nearest FFT bin; each triangle peaks at
/// exactly 1.0 on its center bin.
pub fn mel_filterbank() -> Array2<f64> {
    let mel_max = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
    let bin_hz = SAMPLE_RATE as f64 / FFT_SIZE as f64;
    let corners: Vec<usize> = (0..N_MELS + 2)
        .map(|i| {
            let mel = mel_max * i as f64 / (N_MELS + 1) as f64;
            let bin = (mel_to_hz(mel) / bin_hz).round() as usize;
            bin.min(N_BINS - 1)
        })
        .collect();

    let mut fb = Array2::<f64>::zeros((N_BINS, N_MELS));
    for m in 0..N_MELS {
        let (left, center, right) = (corners[m], corners[m + 1], corners[m + 2]);
        debug_assert!(left < center && center < right, "degenerate mel triangle");
        for k in left..=center {
            fb[[k, m]] = (k - left) as f64 / (center - left) as f64;
        }
        for k in center..=right {
            fb[[k, m]] = (right - k) as f64 / (right - center) as f64;
        }
        fb[[center, m]] = 1.0;
    }
    fb
}

/// Mel-band energies: STFT magnitude mapped through the 40-filter bank, D x 40.
pub fn mel40(signal: &AudioSignal) -> Result<TFRepresentation, DspError> {
    let stft = stft_magnitude(signal)?;
    let fb = mel_filterbank();
    let data = stft.data.dot(&fb);
    Ok(TFRepresentation::new(data, FeatureKind::Mel40))
}

/// Orthonormal DCT-II matrix mapping `N_MELS` log energies to `N_MFCC` coefficients.
fn dct_matrix() -> Array2<f64> {
    let n = N_MELS as f64;
    let mut m = Array2::<f64>::zeros((N_MELS, N_MFCC));
    for k in 0..N_MFCC {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for j in 0..N_MELS {
            m[[j, k]] =
                scale * (std::f64::consts::PI * k as f64 * (2 * j + 1) as f64 / (2.0 * n)).cos();
        }
    }
    m
}

/// First 20 mel-frequency cepstral coefficients, D x 20.
pub fn mfcc20(signal: &AudioSignal) -> Result<TFRepresentation, DspError> {
    let mel = mel40(signal)?;
    let log_mel = mel.data.mapv(|e| (e + MFCC_LOG_FLOOR).ln());
    let data = log_mel.dot(&dct_matrix());
    Ok(TFRepresentation::new(data, FeatureKind::Mfcc20))
}

/// Extract the requested representation.
pub fn extract(kind: FeatureKind, signal: &AudioSignal) -> Result<TFRepresentation, DspError> {
    match kind {
        FeatureKind::Stft => stft_magnitude(signal),
        FeatureKind::LogStft => log_stft(signal),
        FeatureKind::Mel40 => mel40(signal),
        FeatureKind::Mfcc20 => mfcc20(signal),
    }
}

/// Temporal mean of each mel channel; the feature behind the VQ baseline.
pub fn mel_mean(signal: &AudioSignal) -> Result<Array1<f64>, DspError> {
    let mel = mel40(signal)?;
    let d = mel.num_frames() as f64;
    Ok(mel.data.sum_axis(ndarray::Axis(0)) / d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Axis;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn tone(freq: f64, dur_s: f64, amp: f64) -> AudioSignal {
        let n = (SAMPLE_RATE as f64 * dur_s) as usize;
        let samples = (0..n)
            .map(|i| (amp * (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).cos()) as f32)
            .collect();
        AudioSignal::new(samples, SAMPLE_RATE)
    }

    fn zeros(n: usize) -> AudioSignal {
        AudioSignal::new(vec![0.0; n], SAMPLE_RATE)
    }

    /// Direct DFT magnitude of one windowed frame; independent of the FFT path.
    fn dft_frame_magnitude(frame: &[f64]) -> Vec<f64> {
        let window = hann_window();
        (0..N_BINS)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &x) in frame.iter().enumerate() {
                    let ph = 2.0 * PI * k as f64 * n as f64 / FFT_SIZE as f64;
                    re += x * window[n] * ph.cos();
                    im -= x * window[n] * ph.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    #[test]
    fn five_second_signal_gives_500_frames() {
        let sig = tone(440.0, 5.0, 0.5);
        assert_eq!(sig.len(), 80_000);
        let rep = stft_magnitude(&sig).unwrap();
        assert_eq!(rep.data.dim(), (500, 201));
    }

    #[test]
    fn zero_signal_gives_zero_matrix() {
        let rep = stft_magnitude(&zeros(80_000)).unwrap();
        assert_eq!(rep.data.iter().filter(|&&v| v != 0.0).count(), 0);
        let rep = log_stft(&zeros(8000)).unwrap();
        assert_eq!(rep.data.iter().filter(|&&v| v != 0.0).count(), 0);
        let rep = mel40(&zeros(8000)).unwrap();
        assert_eq!(rep.data.iter().filter(|&&v| v != 0.0).count(), 0);
    }

    #[test]
    fn too_short_signal_is_rejected() {
        assert!(matches!(
            stft_magnitude(&zeros(399)),
            Err(DspError::SignalTooShort(399))
        ));
    }

    #[test]
    fn cosine_peaks_at_expected_bin() {
        // 1 kHz with a 400-point FFT at 16 kHz falls exactly on bin 25.
        let sig = tone(1000.0, 1.0, 1.0);
        let rep = stft_magnitude(&sig).unwrap();
        let d = rep.num_frames();
        for t in 2..d - 2 {
            let row = rep.data.row(t);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, 25, "frame {t}");
        }

        // Cross-check one interior frame against a direct DFT oracle.
        let padded = reflect_pad(&sig.samples);
        let t = 10;
        let oracle = dft_frame_magnitude(&padded[t * HOP..t * HOP + FRAME_LEN]);
        for (k, &m) in oracle.iter().enumerate() {
            assert_abs_diff_eq!(rep.data[[t, k]], m, epsilon = 1e-8);
        }
    }

    #[test]
    fn log_stft_is_log1p_of_stft() {
        let sig = tone(700.0, 0.5, 0.8);
        let lin = stft_magnitude(&sig).unwrap();
        let log = log_stft(&sig).unwrap();
        for (a, b) in lin.data.iter().zip(log.data.iter()) {
            assert_abs_diff_eq!((1.0 + a).ln(), *b, epsilon = 1e-12);
        }
        // Monotone transform keeps the argmax bin.
        let t = 20;
        let am = |row: ndarray::ArrayView1<f64>| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(am(lin.data.row(t)), am(log.data.row(t)));
    }

    #[test]
    fn filterbank_triangles_are_well_formed() {
        let fb = mel_filterbank();
        assert_eq!(fb.dim(), (N_BINS, N_MELS));
        for m in 0..N_MELS {
            let col = fb.column(m);
            let nonzero: Vec<usize> = col
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0.0)
                .map(|(k, _)| k)
                .collect();
            assert!(!nonzero.is_empty(), "filter {m} has empty support");
            // contiguous support
            for w in nonzero.windows(2) {
                assert_eq!(w[1], w[0] + 1, "filter {m} support has a gap");
            }
            // peak exactly 1.0
            let peak = col.iter().cloned().fold(0.0, f64::max);
            assert_eq!(peak, 1.0, "filter {m} peak");
            for &v in col.iter() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        // Adjacent filters cross at half height: on the span between the
        // centers of filters m and m+1 the two responses sum to 1 exactly.
        for m in 0..N_MELS - 1 {
            let center = |i: usize| {
                fb.column(i)
                    .iter()
                    .enumerate()
                    .find(|(_, &v)| v == 1.0)
                    .unwrap()
                    .0
            };
            let (c0, c1) = (center(m), center(m + 1));
            for k in c0 + 1..c1 {
                let sum = fb[[k, m]] + fb[[k, m + 1]];
                assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mel_equals_stft_times_filterbank() {
        let sig = tone(1234.0, 0.5, 0.6);
        let stft = stft_magnitude(&sig).unwrap();
        let mel = mel40(&sig).unwrap();
        let expect = stft.data.dot(&mel_filterbank());
        for (a, b) in mel.data.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
        assert!(mel.data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn white_noise_excites_every_mel_channel() {
        use rand::Rng;
        let mut rng = crate::seeds::rng(11);
        let samples: Vec<f32> = (0..32_000).map(|_| rng.random_range(-0.5..0.5)).collect();
        let sig = AudioSignal::new(samples, SAMPLE_RATE);
        let mel = mel40(&sig).unwrap();
        assert!(mel.num_frames() >= 100);
        let means = mel.data.mean_axis(Axis(0)).unwrap();
        for (m, &v) in means.iter().enumerate() {
            assert!(v > 0.0, "channel {m} mean {v}");
        }
    }

    #[test]
    fn mfcc_of_flat_mel_is_impulse_at_zero() {
        // A zero signal has constant log-mel = ln(floor), so only c0 survives.
        let rep = mfcc20(&zeros(8000)).unwrap();
        let c0_expect = MFCC_LOG_FLOOR.ln() * (N_MELS as f64).sqrt();
        for row in rep.data.outer_iter() {
            assert_abs_diff_eq!(row[0], c0_expect, epsilon = 1e-9);
            for k in 1..N_MFCC {
                assert_abs_diff_eq!(row[k], 0.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn dct_matches_brute_force_oracle() {
        use rand::Rng;
        let mut rng = crate::seeds::rng(3);
        let v: Vec<f64> = (0..N_MELS).map(|_| rng.random_range(0.1..4.0)).collect();

        // Brute-force orthonormal DCT-II.
        let n = N_MELS as f64;
        let oracle: Vec<f64> = (0..N_MFCC)
            .map(|k| {
                let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                scale
                    * v.iter()
                        .enumerate()
                        .map(|(j, &x)| {
                            x * (PI * k as f64 * (2.0 * j as f64 + 1.0) / (2.0 * n)).cos()
                        })
                        .sum::<f64>()
            })
            .collect();

        let m = dct_matrix();
        let row = ndarray::Array1::from_vec(v).dot(&m);
        for (a, b) in row.iter().zip(&oracle) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn all_representations_share_frame_count() {
        let sig = tone(900.0, 1.3, 0.4);
        let d = stft_magnitude(&sig).unwrap().num_frames();
        assert_eq!(log_stft(&sig).unwrap().num_frames(), d);
        assert_eq!(mel40(&sig).unwrap().num_frames(), d);
        assert_eq!(mfcc20(&sig).unwrap().num_frames(), d);
        assert_eq!(num_frames(sig.len()).unwrap(), d);
    }

    #[test]
    fn stft_is_homogeneous_under_gain() {
        let sig = tone(600.0, 0.5, 0.2);

        // Power-of-two gains commute through the pipeline exactly.
        let scaled = AudioSignal::new(sig.samples.iter().map(|&s| 2.0 * s).collect(), SAMPLE_RATE);
        let a = stft_magnitude(&sig).unwrap();
        let b = stft_magnitude(&scaled).unwrap();
        for (x, y) in a.data.iter().zip(b.data.iter()) {
            assert!((y - 2.0 * x).abs() <= 1e-12 * y.abs().max(1e-300), "{x} vs {y}");
        }

        // Arbitrary gains round the f32 samples, so near-zero bins carry an
        // absolute error proportional to the frame scale; measure relative to
        // the largest frame norm.
        let g = 3.5f32;
        let scaled = AudioSignal::new(sig.samples.iter().map(|&s| g * s).collect(), SAMPLE_RATE);
        let b = stft_magnitude(&scaled).unwrap();
        let scale = a
            .data
            .outer_iter()
            .map(|r| r.dot(&r).sqrt())
            .fold(0.0f64, f64::max)
            * g as f64;
        for (x, y) in a.data.iter().zip(b.data.iter()) {
            let diff = (y - g as f64 * x).abs();
            assert!(diff <= 1e-6 * scale, "diff {diff} vs scale {scale}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn frame_count_matches_formula(n in 400usize..30_000) {
            let sig = zeros(n);
            let rep = stft_magnitude(&sig).unwrap();
            prop_assert_eq!(rep.num_frames(), 1 + (n + 2 * PAD - FRAME_LEN) / HOP);
        }
    }
}
