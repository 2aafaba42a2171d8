//! Energy-based voice activity detection.
//!
//! Frames are 10 ms (160 samples, non-overlapping). A frame is active when its
//! RMS, in dB relative to the signal's 95th-percentile frame RMS, exceeds the
//! threshold; activity is then extended by a hangover to bridge short gaps.
//! Referencing the threshold to the signal's own level makes the detector
//! gain-invariant.

use std::path::Path;

use thiserror::Error;

use crate::audio::AudioSignal;

/// Samples per VAD frame (10 ms at 16 kHz).
pub const FRAME_SAMPLES: usize = 160;
pub const HOP_S: f64 = 0.010;

pub const DEFAULT_THRESHOLD_DB: f64 = -40.0;
pub const DEFAULT_HANGOVER: usize = 8;

#[derive(Debug, Error)]
pub enum VadError {
    #[error("no active frame in track")]
    AllSilent,
    #[error("vad track has {track} frames but the signal has {expected}")]
    LengthMismatch { track: usize, expected: usize },
    #[error("invalid character '{0}' in vad annotation")]
    ParseError(char),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-frame binary speech activity at a 10 ms hop.
#[derive(Debug, Clone, PartialEq)]
pub struct VadTrack {
    pub activity: Vec<u8>,
    pub hop_s: f64,
}

impl VadTrack {
    pub fn new(activity: Vec<u8>) -> Self {
        debug_assert!(activity.iter().all(|&v| v <= 1));
        Self { activity, hop_s: HOP_S }
    }

    pub fn len(&self) -> usize {
        self.activity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.activity.is_empty()
    }

    pub fn active_frames(&self) -> usize {
        self.activity.iter().map(|&v| v as usize).sum()
    }

    pub fn first_active(&self) -> Option<usize> {
        self.activity.iter().position(|&v| v == 1)
    }

    pub fn last_active(&self) -> Option<usize> {
        self.activity.iter().rposition(|&v| v == 1)
    }
}

/// VAD parameters shared by the synthesis pipeline.
#[derive(Debug, Clone, Copy)]
pub struct VadConfig {
    pub threshold_db: f64,
    pub hangover_frames: usize,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self { threshold_db: DEFAULT_THRESHOLD_DB, hangover_frames: DEFAULT_HANGOVER }
    }
}

fn frame_rms(samples: &[f32]) -> f64 {
    let e: f64 = samples.iter().map(|&s| s as f64 * s as f64).sum();
    (e / samples.len() as f64).sqrt()
}

/// Nearest-rank 95th percentile.
fn percentile_95(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((0.95 * sorted.len() as f64).ceil() as usize).max(1) - 1;
    sorted[rank]
}

/// Mark frames whose RMS exceeds `threshold_db` relative to the signal's
/// 95th-percentile frame RMS, then extend each active run by
/// `hangover_frames`. An empty signal yields an empty track.
pub fn energy_vad(signal: &AudioSignal, threshold_db: f64, hangover_frames: usize) -> VadTrack {
    let n_frames = signal.len() / FRAME_SAMPLES;
    if n_frames == 0 {
        return VadTrack::new(Vec::new());
    }

    let rms: Vec<f64> = (0..n_frames)
        .map(|i| frame_rms(&signal.samples[i * FRAME_SAMPLES..(i + 1) * FRAME_SAMPLES]))
        .collect();
    let reference = percentile_95(&rms);
    let gate = reference * 10f64.powf(threshold_db / 20.0);

    let mut activity = vec![0u8; n_frames];
    if reference > 0.0 {
        for (a, &r) in activity.iter_mut().zip(&rms) {
            if r > gate {
                *a = 1;
            }
        }
    }

    // hangover: keep frames active for a while after each active run
    let mut remaining = 0usize;
    for a in activity.iter_mut() {
        if *a == 1 {
            remaining = hangover_frames;
        } else if remaining > 0 {
            *a = 1;
            remaining -= 1;
        }
    }
    VadTrack::new(activity)
}

pub fn energy_vad_with(signal: &AudioSignal, cfg: &VadConfig) -> VadTrack {
    energy_vad(signal, cfg.threshold_db, cfg.hangover_frames)
}

/// Remove leading and trailing inactive frames (and their samples); interior
/// silence is preserved.
pub fn trim_silence(
    signal: &AudioSignal,
    track: &VadTrack,
) -> Result<(AudioSignal, VadTrack), VadError> {
    let expected = signal.len() / FRAME_SAMPLES;
    if track.len() != expected {
        return Err(VadError::LengthMismatch { track: track.len(), expected });
    }
    let first = track.first_active().ok_or(VadError::AllSilent)?;
    let last = track.last_active().unwrap();

    let samples = signal.samples[first * FRAME_SAMPLES..(last + 1) * FRAME_SAMPLES].to_vec();
    let activity = track.activity[first..=last].to_vec();
    Ok((
        AudioSignal::new(samples, signal.sample_rate),
        VadTrack::new(activity),
    ))
}

/// Parse an external annotation: one '0'/'1' per frame, whitespace ignored.
pub fn load_external_vad(path: &Path) -> Result<VadTrack, VadError> {
    let text = std::fs::read_to_string(path)?;
    let mut activity = Vec::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '0' => activity.push(0),
            '1' => activity.push(1),
            c if c.is_whitespace() => {}
            c => return Err(VadError::ParseError(c)),
        }
    }
    Ok(VadTrack::new(activity))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tone_frames(n_frames: usize, amp: f32) -> Vec<f32> {
        (0..n_frames * FRAME_SAMPLES)
            .map(|i| {
                amp * (2.0 * std::f32::consts::PI * 1000.0 * i as f32 / 16000.0).sin()
            })
            .collect()
    }

    #[test]
    fn silence_yields_all_zero_track() {
        let sig = AudioSignal::new(vec![0.0; 16000], 16000);
        let track = energy_vad(&sig, DEFAULT_THRESHOLD_DB, DEFAULT_HANGOVER);
        assert_eq!(track.len(), 100);
        assert_eq!(track.active_frames(), 0);
    }

    #[test]
    fn full_scale_tone_is_all_active() {
        let sig = AudioSignal::new(tone_frames(100, 1.0), 16000);
        let track = energy_vad(&sig, DEFAULT_THRESHOLD_DB, DEFAULT_HANGOVER);
        assert_eq!(track.active_frames(), 100);
    }

    #[test]
    fn empty_signal_yields_empty_track() {
        let sig = AudioSignal::new(Vec::new(), 16000);
        assert!(energy_vad(&sig, DEFAULT_THRESHOLD_DB, DEFAULT_HANGOVER).is_empty());
    }

    #[test]
    fn hangover_extends_active_run_by_exactly_eight_frames() {
        // 1 s tone + 1 s silence + 1 s tone.
        let mut samples = tone_frames(100, 0.8);
        samples.extend(vec![0.0; 100 * FRAME_SAMPLES]);
        samples.extend(tone_frames(100, 0.8));
        let sig = AudioSignal::new(samples, 16000);
        let track = energy_vad(&sig, DEFAULT_THRESHOLD_DB, 8);

        // Hand-computed: frames 0..100 active, hangover keeps 100..108 active,
        // frames 108..200 inactive, 200..300 active.
        for t in 0..108 {
            assert_eq!(track.activity[t], 1, "frame {t}");
        }
        for t in 108..200 {
            assert_eq!(track.activity[t], 0, "frame {t}");
        }
        for t in 200..300 {
            assert_eq!(track.activity[t], 1, "frame {t}");
        }
    }

    #[test]
    fn energy_vad_is_gain_invariant() {
        let mut samples = tone_frames(40, 0.01);
        samples.extend(vec![0.0; 30 * FRAME_SAMPLES]);
        samples.extend(tone_frames(30, 0.02));
        let sig = AudioSignal::new(samples.clone(), 16000);
        let a = energy_vad(&sig, DEFAULT_THRESHOLD_DB, DEFAULT_HANGOVER);
        for g in [0.05f32, 0.5, 4.0] {
            let scaled =
                AudioSignal::new(samples.iter().map(|&s| g * s).collect(), 16000);
            let b = energy_vad(&scaled, DEFAULT_THRESHOLD_DB, DEFAULT_HANGOVER);
            assert_eq!(a, b, "gain {g}");
        }
    }

    #[test]
    fn trim_keeps_only_speech_span() {
        let mut samples = vec![0.0f32; 20 * FRAME_SAMPLES];
        samples.extend(tone_frames(50, 0.7));
        samples.extend(vec![0.0; 30 * FRAME_SAMPLES]);
        let sig = AudioSignal::new(samples, 16000);
        let track = energy_vad(&sig, DEFAULT_THRESHOLD_DB, 0);
        let (trimmed, ttrack) = trim_silence(&sig, &track).unwrap();
        assert_eq!(ttrack.len(), 50);
        assert_eq!(trimmed.len(), 50 * FRAME_SAMPLES);
        assert_eq!(ttrack.active_frames(), 50);
    }

    #[test]
    fn trim_preserves_interior_silence() {
        let mut samples = tone_frames(30, 0.7);
        samples.extend(vec![0.0; 40 * FRAME_SAMPLES]);
        samples.extend(tone_frames(30, 0.7));
        let sig = AudioSignal::new(samples, 16000);
        let track = energy_vad(&sig, DEFAULT_THRESHOLD_DB, 0);
        let (trimmed, ttrack) = trim_silence(&sig, &track).unwrap();
        assert_eq!(trimmed.len(), sig.len());
        assert_eq!(ttrack.len(), 100);
        assert_eq!(ttrack.active_frames(), 60);
    }

    #[test]
    fn trim_of_all_active_is_identity_and_idempotent() {
        let sig = AudioSignal::new(tone_frames(25, 0.7), 16000);
        let track = energy_vad(&sig, DEFAULT_THRESHOLD_DB, 0);
        assert_eq!(track.active_frames(), 25);
        let (t1, k1) = trim_silence(&sig, &track).unwrap();
        assert_eq!(t1.samples, sig.samples);
        let (t2, k2) = trim_silence(&t1, &k1).unwrap();
        assert_eq!(t2.samples, t1.samples);
        assert_eq!(k2, k1);
    }

    #[test]
    fn trim_all_silent_errors() {
        let sig = AudioSignal::new(vec![0.0; 10 * FRAME_SAMPLES], 16000);
        let track = energy_vad(&sig, DEFAULT_THRESHOLD_DB, DEFAULT_HANGOVER);
        assert!(matches!(trim_silence(&sig, &track), Err(VadError::AllSilent)));
    }

    #[test]
    fn external_vad_parses_and_rejects() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.vad");
        writeln!(std::fs::File::create(&good).unwrap(), "111000").unwrap();
        let track = load_external_vad(&good).unwrap();
        assert_eq!(track.activity, vec![1, 1, 1, 0, 0, 0]);

        let empty = dir.path().join("empty.vad");
        std::fs::File::create(&empty).unwrap();
        assert!(load_external_vad(&empty).unwrap().is_empty());

        let bad = dir.path().join("bad.vad");
        writeln!(std::fs::File::create(&bad).unwrap(), "102").unwrap();
        assert!(matches!(
            load_external_vad(&bad),
            Err(VadError::ParseError('2'))
        ));
    }
}
