//! Dataset preparation: normalization, class balancing, excerpting, batching.
//!
//! The training pipeline is: extract features once per mixture, then per epoch
//! draw a fresh 5 s excerpt from each mixture (its label is re-evaluated on
//! the cropped activity matrix), frame-normalize the excerpt, standardize per
//! feature dimension with statistics fitted on the training split, and group
//! into mini-batches in a reshuffled order.
//!
//! Frame normalization divides a matrix by the mean Euclidean norm of its
//! frames, which cancels any global gain applied to the source audio.

use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioSignal;
use crate::dsp::{FeatureKind, TFRepresentation};
use crate::mixer::{self, LabeledMixture, MixerError, NoisePool, SpeakerPool};
use crate::seeds;
use crate::store::{self, MixtureMeta, StoreError};
use crate::vad::{VadConfig, FRAME_SAMPLES};

/// Excerpt length fed to the network, in seconds.
pub const EXCERPT_S: f64 = 5.0;
/// Excerpt length in 10 ms frames.
pub const EXCERPT_FRAMES: usize = 500;

const STD_FLOOR: f64 = 1e-8;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("degenerate input: mean frame norm below {NORM_FLOOR}")]
    DegenerateInput,
    #[error("feature kind mismatch: stats are for {stats}, input is {input}")]
    FeatureKindMismatch { stats: FeatureKind, input: FeatureKind },
    #[error("mixture too short: {have_s:.3} s, need {need_s:.3} s")]
    TooShort { have_s: f64, need_s: f64 },
    #[error("per-class count must be positive")]
    EmptyPlan,
    #[error("store error: {0}")]
    Store(#[from] StoreError),
    #[error("mixer error: {0}")]
    Mixer(#[from] MixerError),
    #[error("tensor file error: {0}")]
    Tensor(#[from] crate::tensorfile::TensorFileError),
}

/// Per-dimension standardization statistics, fitted on the training split
/// after frame normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub feature_kind: FeatureKind,
    pub per_dimension_mean: Vec<f64>,
    pub per_dimension_std: Vec<f64>,
}

impl NormalizationStats {
    /// Fit mean and standard deviation per feature dimension over all frames
    /// of the given matrices (each is frame-normalized first). Standard
    /// deviations are floored at 1e-8.
    pub fn fit(
        matrices: impl Iterator<Item = Array2<f32>>,
        kind: FeatureKind,
    ) -> Result<Self, DatasetError> {
        let dim = kind.dim();
        let mut count = 0u64;
        let mut sum = vec![0.0f64; dim];
        let mut sumsq = vec![0.0f64; dim];
        for m in matrices {
            assert_eq!(m.ncols(), dim, "matrix width does not match feature kind");
            let mut normed = m.mapv(|v| v as f64);
            frame_norm_in_place(&mut normed);
            for row in normed.outer_iter() {
                for (j, &v) in row.iter().enumerate() {
                    sum[j] += v;
                    sumsq[j] += v * v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(DatasetError::EmptyPlan);
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sumsq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| ((sq / n - m * m).max(0.0)).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { feature_kind: kind, per_dimension_mean: mean, per_dimension_std: std })
    }

    pub fn save(&self, path: &Path) -> Result<(), std::io::Error> {
        std::fs::write(path, serde_json::to_string(self).unwrap())
    }

    pub fn load(path: &Path) -> Result<Self, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }
}

/// Generation plan parameters: `per_class` mixtures for every k in 0..=k_max.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub per_class: usize,
    pub k_max: usize,
    pub excerpt_s: f64,
    pub source_duration_s: f64,
    pub batch_size: usize,
}

impl DatasetSpec {
    pub fn new(per_class: usize, k_max: usize, source_duration_s: f64) -> Self {
        Self {
            per_class,
            k_max,
            excerpt_s: EXCERPT_S,
            source_duration_s,
            batch_size: 32,
        }
    }

    pub fn total(&self) -> usize {
        self.per_class * (self.k_max + 1)
    }
}

/// One mixture-generation job. `l` speakers are drawn and the job is retried
/// with fresh seeds until the realized concurrency equals `target_k`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GenJob {
    pub id: usize,
    pub target_k: usize,
    pub l: usize,
    pub seed: u64,
}

/// Exactly `per_class` jobs per class, ids in class-major order.
pub fn balanced_plan(spec: &DatasetSpec, seed: u64) -> Result<Vec<GenJob>, DatasetError> {
    if spec.per_class == 0 {
        return Err(DatasetError::EmptyPlan);
    }
    let mut jobs = Vec::with_capacity(spec.total());
    for target_k in 0..=spec.k_max {
        for _ in 0..spec.per_class {
            let id = jobs.len();
            jobs.push(GenJob {
                id,
                target_k,
                l: target_k,
                seed: seeds::substream_n(seed, "job", id as u64),
            });
        }
    }
    Ok(jobs)
}

/// Execute a generation plan into a mixture dataset directory. With `jobs > 1`
/// mixtures are generated in parallel; every mixture derives from its own
/// seeded stream, so the output is byte-identical to a serial run.
pub fn synthesize_dataset(
    pool: &SpeakerPool,
    noise: &NoisePool,
    plan: &[GenJob],
    duration_s: f64,
    vad_cfg: &VadConfig,
    dir: &Path,
    jobs: usize,
) -> Result<Vec<MixtureMeta>, DatasetError> {
    store::init_mixture_dir(dir)?;

    let run = |job: &GenJob| -> Result<MixtureMeta, DatasetError> {
        let mixture =
            mixer::realize_mixture(pool, noise, job.target_k, duration_s, job.seed, vad_cfg)?;
        store::write_mixture(dir, job.id, &mixture)?;
        Ok(MixtureMeta { id: job.id, k: mixture.k, l: job.l, seed: job.seed })
    };

    let mut metas: Vec<MixtureMeta> = if jobs > 1 {
        let pool_builder = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().unwrap();
        pool_builder.install(|| {
            use rayon::prelude::*;
            plan.par_iter().map(run).collect::<Result<Vec<_>, _>>()
        })?
    } else {
        plan.iter().map(run).collect::<Result<Vec<_>, _>>()?
    };

    metas.sort_by_key(|m| m.id);
    store::write_labels(dir, &metas)?;
    Ok(metas)
}

/// Divide by the mean Euclidean norm of the rows; no-op when the matrix is
/// (numerically) all zeros.
pub(crate) fn frame_norm_in_place(x: &mut Array2<f64>) -> f64 {
    let d = x.nrows();
    if d == 0 {
        return 0.0;
    }
    let mean_norm = x.outer_iter().map(|row| row.dot(&row).sqrt()).sum::<f64>() / d as f64;
    if mean_norm >= NORM_FLOOR {
        x.mapv_inplace(|v| v / mean_norm);
    }
    mean_norm
}

pub(crate) fn frame_norm_in_place_f32(x: &mut Array2<f32>) -> f64 {
    let d = x.nrows();
    if d == 0 {
        return 0.0;
    }
    let mean_norm = x
        .outer_iter()
        .map(|row| row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt())
        .sum::<f64>()
        / d as f64;
    if mean_norm >= NORM_FLOOR {
        let g = (1.0 / mean_norm) as f32;
        x.mapv_inplace(|v| v * g);
    }
    mean_norm
}

/// Normalize a representation to the average Euclidean norm of its frames.
pub fn frame_norm(rep: &TFRepresentation) -> Result<TFRepresentation, DatasetError> {
    let mut out = rep.clone();
    let mean_norm = frame_norm_in_place(&mut out.data);
    if mean_norm < NORM_FLOOR {
        return Err(DatasetError::DegenerateInput);
    }
    Ok(out)
}

/// Per-dimension (x - mean) / std using training statistics.
pub fn standardize(
    rep: &TFRepresentation,
    stats: &NormalizationStats,
) -> Result<Array2<f64>, DatasetError> {
    if stats.feature_kind != rep.kind {
        return Err(DatasetError::FeatureKindMismatch {
            stats: stats.feature_kind,
            input: rep.kind,
        });
    }
    let mean = Array1::from_vec(stats.per_dimension_mean.clone());
    let std = Array1::from_vec(stats.per_dimension_std.clone());
    Ok((&rep.data - &mean) / &std)
}

pub(crate) fn standardize_in_place_f32(x: &mut Array2<f32>, stats: &NormalizationStats) {
    debug_assert_eq!(x.ncols(), stats.per_dimension_mean.len());
    let mean: Vec<f32> = stats.per_dimension_mean.iter().map(|&v| v as f32).collect();
    let inv_std: Vec<f32> = stats.per_dimension_std.iter().map(|&v| 1.0 / v as f32).collect();
    for mut row in x.outer_iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean[j]) * inv_std[j];
        }
    }
}

/// A raw-audio excerpt with its re-evaluated label.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub audio: AudioSignal,
    pub vad: Array2<u8>,
    pub k: usize,
}

/// Crop a uniformly positioned excerpt (sample granularity) and re-evaluate
/// the label on the cropped activity matrix; the result may be lower than the
/// parent's k.
pub fn random_excerpt(
    mixture: &LabeledMixture,
    excerpt_s: f64,
    rng: &mut impl Rng,
) -> Result<LabeledSample, DatasetError> {
    let want = (excerpt_s * mixture.audio.sample_rate as f64).round() as usize;
    let have = mixture.audio.len();
    if want > have {
        return Err(DatasetError::TooShort {
            have_s: mixture.audio.duration_s(),
            need_s: excerpt_s,
        });
    }
    let offset = rng.random_range(0..=have - want);
    let samples = mixture.audio.samples[offset..offset + want].to_vec();

    let (l, t_src) = mixture.per_speaker_vad.dim();
    let t_out = want / FRAME_SAMPLES;
    let mut vad = Array2::<u8>::zeros((l, t_out));
    for j in 0..t_out {
        let lo = (offset + j * FRAME_SAMPLES) / FRAME_SAMPLES;
        let hi = ((offset + (j + 1) * FRAME_SAMPLES - 1) / FRAME_SAMPLES).min(t_src.saturating_sub(1));
        for i in 0..l {
            let active = (lo..=hi).any(|s| mixture.per_speaker_vad[[i, s]] != 0);
            vad[[i, j]] = active as u8;
        }
    }
    let k = mixer::compute_k(vad.view());
    Ok(LabeledSample {
        audio: AudioSignal::new(samples, mixture.audio.sample_rate),
        vad,
        k,
    })
}

/// A featurized mixture held in memory for training or evaluation.
#[derive(Debug, Clone)]
pub struct FeatureItem {
    pub id: usize,
    pub k_full: usize,
    pub features: Array2<f32>,
    pub vad: Array2<u8>,
}

/// All featurized mixtures of one dataset split.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    pub kind: FeatureKind,
    pub items: Vec<FeatureItem>,
}

impl FeatureStore {
    /// Load a featurized dataset directory (features/, vad/, labels.jsonl).
    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let metas = store::read_labels(dir)?;
        let mut kind = None;
        let mut items = Vec::with_capacity(metas.len());
        for meta in &metas {
            let (features, k) = crate::tensorfile::read_feature_f32(&store::feature_path(dir, meta.id))?;
            match kind {
                None => kind = Some(k),
                Some(existing) => {
                    if existing != k {
                        return Err(DatasetError::FeatureKindMismatch {
                            stats: existing,
                            input: k,
                        });
                    }
                }
            }
            let vad = store::read_vad_bits(&store::vad_path(dir, meta.id))?;
            items.push(FeatureItem { id: meta.id, k_full: meta.k, features, vad });
        }
        let kind = kind.ok_or(DatasetError::EmptyPlan)?;
        Ok(Self { kind, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Per-epoch plan: shuffled item order with freshly drawn excerpt offsets
    /// (in frames). Deterministic in `epoch_seed`.
    pub fn epoch_plan(&self, excerpt_frames: usize, epoch_seed: u64) -> Vec<(usize, usize)> {
        let mut rng = seeds::rng(epoch_seed);
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        order.shuffle(&mut rng);
        order
            .into_iter()
            .map(|idx| {
                let d_full = self.items[idx].features.nrows();
                let max_off = d_full.saturating_sub(excerpt_frames);
                let off = if max_off == 0 { 0 } else { rng.random_range(0..=max_off) };
                (idx, off)
            })
            .collect()
    }

    /// Fixed plan (identity order, offset 0) for validation and test splits.
    pub fn fixed_plan(&self, _excerpt_frames: usize) -> Vec<(usize, usize)> {
        (0..self.items.len()).map(|idx| (idx, 0)).collect()
    }

    /// Label of the excerpt starting at `offset` frames.
    pub fn label_at(&self, idx: usize, offset: usize, excerpt_frames: usize) -> usize {
        let item = &self.items[idx];
        let t = item.vad.ncols();
        let hi = (offset + excerpt_frames).min(t);
        if item.vad.nrows() == 0 || offset >= t {
            return 0;
        }
        mixer::compute_k(item.vad.slice(ndarray::s![.., offset..hi]))
    }

    /// Assemble a time-major (D, B, F) mini-batch: crop, frame-normalize,
    /// standardize, and gather labels.
    pub fn make_minibatch(
        &self,
        entries: &[(usize, usize)],
        excerpt_frames: usize,
        stats: &NormalizationStats,
    ) -> (Array3<f32>, Vec<usize>) {
        let f = self.kind.dim();
        let b = entries.len();
        let mut x = Array3::<f32>::zeros((excerpt_frames, b, f));
        let mut ks = Vec::with_capacity(b);
        for (slot, &(idx, off)) in entries.iter().enumerate() {
            let item = &self.items[idx];
            let mut crop = item
                .features
                .slice(ndarray::s![off..off + excerpt_frames, ..])
                .to_owned();
            frame_norm_in_place_f32(&mut crop);
            standardize_in_place_f32(&mut crop, stats);
            x.slice_mut(ndarray::s![.., slot, ..]).assign(&crop);
            ks.push(self.label_at(idx, off, excerpt_frames));
        }
        (x, ks)
    }
}
