//! Labeled mixture synthesis.
//!
//! Speaker tracks are built by concatenating VAD-trimmed utterances until a
//! target duration is reached, scaled to equal RMS over their active samples
//! (0 dB SNR between all sources), summed, and peak-normalized. The ground
//! truth count `k` is the maximum number of simultaneously active speakers
//! across 10 ms frames of the stacked per-speaker activity matrix.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::audio::{self, AudioSignal};
use crate::seeds;
use crate::vad::{self, VadConfig, VadTrack, FRAME_SAMPLES};

/// Peak amplitude mixtures are normalized to.
pub const PEAK_TARGET: f64 = 0.99;

#[derive(Debug, Error)]
pub enum MixerError {
    #[error("empty track list")]
    EmptyTrackList,
    #[error("track length mismatch: {0} vs {1} samples")]
    LengthMismatch(usize, usize),
    #[error("corpus exhausted: {0}")]
    CorpusExhausted(String),
    #[error("speaker '{0}' not found in pool")]
    UnknownSpeaker(String),
    #[error("could not realize target count {target} after {attempts} attempts")]
    GenerationFailed { target: usize, attempts: usize },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("audio error: {0}")]
    Audio(#[from] audio::AudioError),
    #[error("vad error: {0}")]
    Vad(#[from] vad::VadError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One speaker and its utterance files.
#[derive(Debug, Clone)]
pub struct Speaker {
    pub id: String,
    pub utterances: Vec<PathBuf>,
}

/// A corpus of single-speaker recordings, loaded from a JSON manifest mapping
/// speaker id to a list of WAV paths (relative paths resolve against the
/// manifest's directory).
#[derive(Debug, Clone)]
pub struct SpeakerPool {
    pub root: PathBuf,
    pub speakers: Vec<Speaker>,
}

fn resolve(root: &Path, raw: &str) -> PathBuf {
    let p = PathBuf::from(raw);
    if p.is_absolute() {
        p
    } else {
        root.join(p)
    }
}

impl SpeakerPool {
    pub fn from_manifest(path: &Path) -> Result<Self, MixerError> {
        let text = std::fs::read_to_string(path)?;
        let map: BTreeMap<String, Vec<String>> = serde_json::from_str(&text)
            .map_err(|e| MixerError::Manifest(format!("{}: {e}", path.display())))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let speakers: Vec<Speaker> = map
            .into_iter()
            .map(|(id, utts)| Speaker {
                id,
                utterances: utts.iter().map(|u| resolve(&root, u)).collect(),
            })
            .collect();
        if speakers.is_empty() {
            return Err(MixerError::Manifest(format!(
                "{}: no speakers",
                path.display()
            )));
        }
        for s in &speakers {
            if s.utterances.is_empty() {
                return Err(MixerError::Manifest(format!(
                    "speaker '{}' has no utterances",
                    s.id
                )));
            }
        }
        Ok(Self { root, speakers })
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }
}

/// A flat pool of non-speech recordings for k = 0 samples; same manifest
/// format as [`SpeakerPool`] (ids are scene names).
#[derive(Debug, Clone)]
pub struct NoisePool {
    pub files: Vec<PathBuf>,
}

impl NoisePool {
    pub fn from_manifest(path: &Path) -> Result<Self, MixerError> {
        let pool = SpeakerPool::from_manifest(path)?;
        let files = pool.speakers.into_iter().flat_map(|s| s.utterances).collect();
        Ok(Self { files })
    }
}

/// A mixture with its per-speaker activity matrix (L x T frames) and the
/// realized maximum concurrency `k`.
#[derive(Debug, Clone)]
pub struct LabeledMixture {
    pub audio: AudioSignal,
    pub per_speaker_vad: Array2<u8>,
    pub k: usize,
    pub k_max: usize,
}

/// Maximum over frames of the number of simultaneously active speakers.
pub fn compute_k(vad_matrix: ArrayView2<u8>) -> usize {
    let (_l, t) = vad_matrix.dim();
    let mut k = 0usize;
    for j in 0..t {
        let concurrent: usize = vad_matrix.column(j).iter().map(|&v| v as usize).sum();
        k = k.max(concurrent);
    }
    k
}

/// External annotation path for an utterance: the utterance file name with
/// `.vad` appended (e.g. `utt01.wav.vad`). When present it overrides the
/// energy VAD; one '0'/'1' per 10 ms frame of the 16 kHz-resampled audio.
pub fn external_vad_path(utterance: &Path) -> Option<PathBuf> {
    let mut name = utterance.file_name()?.to_os_string();
    name.push(".vad");
    let candidate = utterance.with_file_name(name);
    candidate.exists().then_some(candidate)
}

/// Concatenate trimmed utterances of one speaker (drawing with replacement
/// once the material runs out) until `target_duration_s` is reached, then
/// truncate to the exact duration.
pub fn build_speaker_track(
    speaker: &Speaker,
    target_duration_s: f64,
    rng_seed: u64,
    vad_cfg: &VadConfig,
) -> Result<(AudioSignal, VadTrack), MixerError> {
    let target_samples = (target_duration_s * audio::SAMPLE_RATE as f64).round() as usize;
    let mut rng = seeds::rng(rng_seed);

    let mut order: Vec<usize> = (0..speaker.utterances.len()).collect();
    order.shuffle(&mut rng);

    let mut samples: Vec<f32> = Vec::with_capacity(target_samples + FRAME_SAMPLES);
    let mut activity: Vec<u8> = Vec::new();
    let mut drawn = 0usize;
    let mut skipped_silent = 0usize;

    while samples.len() < target_samples {
        // first a full pass without replacement, then uniform redraws
        let idx = if drawn < order.len() {
            order[drawn]
        } else {
            rng.random_range(0..speaker.utterances.len())
        };
        drawn += 1;

        let utt = audio::ingest_wav(&speaker.utterances[idx])?;
        let track = match external_vad_path(&speaker.utterances[idx]) {
            Some(path) => vad::load_external_vad(&path)?,
            None => vad::energy_vad_with(&utt, vad_cfg),
        };
        match vad::trim_silence(&utt, &track) {
            Ok((trimmed, ttrack)) => {
                samples.extend_from_slice(&trimmed.samples);
                activity.extend_from_slice(&ttrack.activity);
            }
            Err(vad::VadError::AllSilent) => {
                skipped_silent += 1;
                if skipped_silent >= speaker.utterances.len() && samples.is_empty() {
                    return Err(MixerError::CorpusExhausted(format!(
                        "speaker '{}' has only silent material",
                        speaker.id
                    )));
                }
            }
            Err(e) => return Err(e.into()),
        }
    }

    samples.truncate(target_samples);
    activity.truncate(target_samples / FRAME_SAMPLES);
    Ok((
        AudioSignal::new(samples, audio::SAMPLE_RATE),
        VadTrack::new(activity),
    ))
}

/// RMS over the samples covered by active frames.
fn active_rms(signal: &AudioSignal, track: &VadTrack) -> f64 {
    let mut energy = 0.0f64;
    let mut count = 0usize;
    for (f, &a) in track.activity.iter().enumerate() {
        if a == 1 {
            let span = &signal.samples[f * FRAME_SAMPLES..(f + 1) * FRAME_SAMPLES];
            energy += span.iter().map(|&s| s as f64 * s as f64).sum::<f64>();
            count += span.len();
        }
    }
    if count == 0 {
        0.0
    } else {
        (energy / count as f64).sqrt()
    }
}

/// Scale every track so its active-region RMS matches the first track's.
/// Tracks with no active samples are left untouched.
pub fn equalize_rms(tracks: &[(AudioSignal, VadTrack)]) -> Vec<AudioSignal> {
    let reference = tracks
        .iter()
        .map(|(s, t)| active_rms(s, t))
        .find(|&r| r > 0.0)
        .unwrap_or(0.0);
    tracks
        .iter()
        .map(|(sig, track)| {
            let rms = active_rms(sig, track);
            if rms > 0.0 && reference > 0.0 {
                let g = (reference / rms) as f32;
                AudioSignal::new(sig.samples.iter().map(|&s| g * s).collect(), sig.sample_rate)
            } else {
                sig.clone()
            }
        })
        .collect()
}

/// Mix equal-length tracks at 0 dB SNR (equal active-region RMS), sum,
/// peak-normalize to 0.99 and label with the realized maximum concurrency.
pub fn mix(tracks: &[(AudioSignal, VadTrack)]) -> Result<LabeledMixture, MixerError> {
    if tracks.is_empty() {
        return Err(MixerError::EmptyTrackList);
    }
    let n = tracks[0].0.len();
    for (sig, _) in tracks.iter() {
        if sig.len() != n {
            return Err(MixerError::LengthMismatch(n, sig.len()));
        }
    }

    let scaled = equalize_rms(tracks);
    let mut sum = vec![0.0f64; n];
    for sig in &scaled {
        for (acc, &s) in sum.iter_mut().zip(&sig.samples) {
            *acc += s as f64;
        }
    }
    let peak = sum.iter().fold(0.0f64, |p, &s| p.max(s.abs()));
    let gain = if peak > 0.0 { PEAK_TARGET / peak } else { 1.0 };
    let samples: Vec<f32> = sum.iter().map(|&s| (s * gain) as f32).collect();

    let t_frames = n / FRAME_SAMPLES;
    let mut vad_matrix = Array2::<u8>::zeros((tracks.len(), t_frames));
    for (l, (_, track)) in tracks.iter().enumerate() {
        for (j, &a) in track.activity.iter().take(t_frames).enumerate() {
            vad_matrix[[l, j]] = a;
        }
    }
    let k = compute_k(vad_matrix.view());

    Ok(LabeledMixture {
        audio: AudioSignal::new(samples, tracks[0].0.sample_rate),
        per_speaker_vad: vad_matrix,
        k,
        k_max: tracks.len(),
    })
}

/// A noise excerpt labeled k = 0 with an empty activity matrix. The excerpt is
/// tiled if the source is shorter than the requested duration and is never
/// all-zero audio.
pub fn make_negative_sample(
    noise: &NoisePool,
    duration_s: f64,
    rng_seed: u64,
) -> Result<LabeledMixture, MixerError> {
    if noise.files.is_empty() {
        return Err(MixerError::CorpusExhausted("noise corpus is empty".into()));
    }
    let target = (duration_s * audio::SAMPLE_RATE as f64).round() as usize;
    let mut rng = seeds::rng(rng_seed);

    for _attempt in 0..16 {
        let idx = rng.random_range(0..noise.files.len());
        let sig = audio::ingest_wav(&noise.files[idx])?;
        if sig.is_empty() {
            continue;
        }
        let mut samples = Vec::with_capacity(target);
        if sig.len() >= target {
            let start = rng.random_range(0..=sig.len() - target);
            samples.extend_from_slice(&sig.samples[start..start + target]);
        } else {
            while samples.len() < target {
                samples.extend_from_slice(&sig.samples);
            }
            samples.truncate(target);
        }
        let peak = samples.iter().fold(0.0f32, |p, &s| p.max(s.abs()));
        if peak == 0.0 {
            continue; // all-zero excerpt; redraw
        }
        let gain = PEAK_TARGET as f32 / peak;
        for s in samples.iter_mut() {
            *s *= gain;
        }
        return Ok(LabeledMixture {
            audio: AudioSignal::new(samples, audio::SAMPLE_RATE),
            per_speaker_vad: Array2::<u8>::zeros((0, target / FRAME_SAMPLES)),
            k: 0,
            k_max: 0,
        });
    }
    Err(MixerError::CorpusExhausted(
        "could not draw a non-silent noise excerpt".into(),
    ))
}

/// Build one mixture of `target_k` concurrent speakers: draw `target_k`
/// distinct speakers, build their tracks and retry with fresh seeds until the
/// realized maximum concurrency equals `target_k`. `target_k == 0` draws a
/// negative sample instead.
pub fn realize_mixture(
    pool: &SpeakerPool,
    noise: &NoisePool,
    target_k: usize,
    duration_s: f64,
    seed: u64,
    vad_cfg: &VadConfig,
) -> Result<LabeledMixture, MixerError> {
    if target_k == 0 {
        return make_negative_sample(noise, duration_s, seed);
    }
    if target_k > pool.len() {
        return Err(MixerError::CorpusExhausted(format!(
            "need {target_k} speakers, pool has {}",
            pool.len()
        )));
    }
    const MAX_ATTEMPTS: usize = 100;
    for attempt in 0..MAX_ATTEMPTS {
        let attempt_seed = seeds::substream_n(seed, "attempt", attempt as u64);
        let mut rng = seeds::rng(attempt_seed);
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(target_k);

        let mut tracks = Vec::with_capacity(target_k);
        for (slot, &si) in idx.iter().enumerate() {
            let track_seed = seeds::substream_n(attempt_seed, "track", slot as u64);
            tracks.push(build_speaker_track(
                &pool.speakers[si],
                duration_s,
                track_seed,
                vad_cfg,
            )?);
        }
        let mixture = mix(&tracks)?;
        if mixture.k == target_k {
            return Ok(mixture);
        }
    }
    Err(MixerError::GenerationFailed { target: target_k, attempts: MAX_ATTEMPTS })
}
