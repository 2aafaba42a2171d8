//! Evaluation: MAE with per-class confidence intervals, row-normalized
//! confusion matrices, seed aggregation, and the vector-quantizer baseline
//! (nearest-centroid count prediction over temporally averaged mel features,
//! fitted with Lloyd's k-means).

use ndarray::{ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, FeatureStore, NormalizationStats};
use crate::decision::{self, DecisionError, PoissonRule};
use crate::model::{self, ModelError, ModelParams};
use crate::seeds;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    EmptyInput,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("true label {0} exceeds k_max {1}")]
    LabelOutOfRange(usize, usize),
    #[error("need at least {need} training points, got {got}")]
    TooFewPoints { need: usize, got: usize },
}

/// MAE and confusion statistics over a prediction set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub k_max: usize,
    /// Samples per true class (averaged across seeds after aggregation).
    pub n_per_k: Vec<f64>,
    pub per_k_mae: Vec<f64>,
    /// 95% confidence interval half-widths (1.96 * stderr of |error|).
    pub ci95: Vec<f64>,
    pub overall_mae: f64,
    /// Sample standard deviation of the absolute errors.
    pub overall_std: f64,
    /// Row-normalized confusion matrix, rows = true k, columns = estimated k
    /// (clamped to k_max). Rows of absent classes are all zero.
    pub confusion: Vec<Vec<f64>>,
}

fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n <= 1 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    var.sqrt()
}

/// Evaluate (true k, estimated k) pairs.
pub fn evaluate(predictions: &[(usize, usize)], k_max: usize) -> Result<EvalReport, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let classes = k_max + 1;
    let mut per_class_errors: Vec<Vec<f64>> = vec![Vec::new(); classes];
    let mut confusion_counts = vec![vec![0usize; classes]; classes];
    let mut all_errors = Vec::with_capacity(predictions.len());

    for &(k, k_hat) in predictions {
        if k > k_max {
            return Err(EvalError::LabelOutOfRange(k, k_max));
        }
        let err = (k_hat as f64 - k as f64).abs();
        per_class_errors[k].push(err);
        all_errors.push(err);
        confusion_counts[k][k_hat.min(k_max)] += 1;
    }

    let n_per_k: Vec<f64> = per_class_errors.iter().map(|e| e.len() as f64).collect();
    let per_k_mae: Vec<f64> = per_class_errors
        .iter()
        .map(|e| {
            if e.is_empty() {
                0.0
            } else {
                e.iter().sum::<f64>() / e.len() as f64
            }
        })
        .collect();
    let ci95: Vec<f64> = per_class_errors
        .iter()
        .map(|e| {
            if e.len() <= 1 {
                0.0
            } else {
                1.96 * sample_std(e) / (e.len() as f64).sqrt()
            }
        })
        .collect();

    let confusion: Vec<Vec<f64>> = confusion_counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            if total == 0 {
                vec![0.0; classes]
            } else {
                row.iter().map(|&c| c as f64 / total as f64).collect()
            }
        })
        .collect();

    Ok(EvalReport {
        k_max,
        n_per_k,
        per_k_mae,
        ci95,
        overall_mae: all_errors.iter().sum::<f64>() / all_errors.len() as f64,
        overall_std: sample_std(&all_errors),
        confusion,
    })
}

/// Elementwise mean of reports from different seeds.
pub fn aggregate_runs(reports: &[EvalReport]) -> Result<EvalReport, EvalError> {
    let first = reports.first().ok_or(EvalError::EmptyInput)?;
    let classes = first.k_max + 1;
    for r in reports {
        if r.k_max != first.k_max {
            return Err(EvalError::ShapeMismatch(format!(
                "k_max {} vs {}",
                r.k_max, first.k_max
            )));
        }
    }
    let n = reports.len() as f64;
    let mean_vec = |f: &dyn Fn(&EvalReport) -> &Vec<f64>| -> Vec<f64> {
        (0..classes)
            .map(|j| reports.iter().map(|r| f(r)[j]).sum::<f64>() / n)
            .collect()
    };
    Ok(EvalReport {
        k_max: first.k_max,
        n_per_k: mean_vec(&|r| &r.n_per_k),
        per_k_mae: mean_vec(&|r| &r.per_k_mae),
        ci95: mean_vec(&|r| &r.ci95),
        overall_mae: reports.iter().map(|r| r.overall_mae).sum::<f64>() / n,
        overall_std: reports.iter().map(|r| r.overall_std).sum::<f64>() / n,
        confusion: (0..classes)
            .map(|i| {
                (0..classes)
                    .map(|j| reports.iter().map(|r| r.confusion[i][j]).sum::<f64>() / n)
                    .collect()
            })
            .collect(),
    })
}

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("decision error: {0}")]
    Decision(#[from] DecisionError),
    #[error("dataset error: {0}")]
    Dataset(#[from] DatasetError),
    #[error("item {id} has {frames} frames, need {need}")]
    TooShort { id: usize, frames: usize, need: usize },
}

/// Run a model over every item of a featurized split (first `seq_len` frames
/// of each item) and pair the recomputed true label with the decided count.
pub fn predict_store(
    params: &ModelParams<f32>,
    store: &FeatureStore,
    stats: &NormalizationStats,
    rule: PoissonRule,
) -> Result<Vec<(usize, usize)>, PredictError> {
    if stats.feature_kind != store.kind {
        return Err(PredictError::Dataset(DatasetError::FeatureKindMismatch {
            stats: stats.feature_kind,
            input: store.kind,
        }));
    }
    let excerpt = params.shape.seq_len;
    for item in &store.items {
        if item.features.nrows() < excerpt {
            return Err(PredictError::TooShort {
                id: item.id,
                frames: item.features.nrows(),
                need: excerpt,
            });
        }
    }
    let plan = store.fixed_plan(excerpt);
    let mut out = Vec::with_capacity(plan.len());
    for chunk in plan.chunks(crate::training::MICRO_BATCH) {
        let (x, ks) = store.make_minibatch(chunk, excerpt, stats);
        let outputs = model::forward_batch(params, x.view())?;
        for (o, k) in outputs.iter().zip(ks) {
            let est = decision::decide_with(o, rule)?;
            out.push((k, est.k_hat));
        }
    }
    Ok(out)
}

/// Nearest-centroid count predictor over fixed-length feature vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VqBaseline {
    /// (k_max + 1) x dim centroid matrix.
    pub centroids: Vec<Vec<f64>>,
    /// Count label of each centroid (rounded mean of member counts).
    pub counts: Vec<usize>,
}

fn sq_dist(a: ArrayView1<f64>, b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's iterations from a given initialization. Returns
/// (centroids, assignments, SSE history). Empty clusters are re-seeded to a
/// random data point.
fn lloyd(
    data: ArrayView2<f64>,
    mut centroids: Vec<Vec<f64>>,
    max_iter: usize,
    rng: &mut impl Rng,
) -> (Vec<Vec<f64>>, Vec<usize>, Vec<f64>) {
    let n = data.nrows();
    let dim = data.ncols();
    let k = centroids.len();
    let mut assign = vec![0usize; n];
    let mut sse_history = Vec::new();

    for _ in 0..max_iter {
        // assignment step (ties toward the lower centroid index)
        let mut changed = false;
        let mut sse = 0.0;
        for i in 0..n {
            let row = data.row(i);
            let mut best = 0usize;
            let mut best_d = sq_dist(row, &centroids[0]);
            for (c, centroid) in centroids.iter().enumerate().skip(1) {
                let d = sq_dist(row, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
            sse += best_d;
        }
        sse_history.push(sse);

        // update step
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, &v) in sums[assign[i]].iter_mut().zip(data.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // degenerate cluster: re-seed to a random data point
                let pick = rng.random_range(0..n);
                centroids[c] = data.row(pick).to_vec();
                changed = true;
            } else {
                for (ctr, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *ctr = s / counts[c] as f64;
                }
            }
        }
        if !changed && sse_history.len() > 1 {
            break;
        }
    }
    (centroids, assign, sse_history)
}

/// Fit the VQ baseline: k-means with `k_max + 1` centroids over mixture-level
/// mel means, best SSE over `restarts` seeded restarts; each centroid is
/// labeled with the rounded mean count of its members.
pub fn vq_fit(
    features: ArrayView2<f64>,
    labels: &[usize],
    k_max: usize,
    restarts: usize,
    seed: u64,
) -> Result<VqBaseline, EvalError> {
    let n = features.nrows();
    let k = k_max + 1;
    if n != labels.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "{n} feature rows vs {} labels",
            labels.len()
        )));
    }
    if n < k {
        return Err(EvalError::TooFewPoints { need: k, got: n });
    }

    let mut best: Option<(f64, Vec<Vec<f64>>, Vec<usize>)> = None;
    for r in 0..restarts.max(1) {
        let mut rng = seeds::rng(seeds::substream_n(seed, "vq-restart", r as u64));
        // Forgy init: k distinct data points
        let mut idx: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut rng);
        let init: Vec<Vec<f64>> = idx[..k].iter().map(|&i| features.row(i).to_vec()).collect();

        let (centroids, assign, history) = lloyd(features, init, 100, &mut rng);
        let sse = *history.last().unwrap();
        if best.as_ref().is_none_or(|(b, _, _)| sse < *b) {
            best = Some((sse, centroids, assign));
        }
    }
    let (_, centroids, assign) = best.unwrap();

    let mut counts = vec![0usize; k];
    let mut sums = vec![0.0f64; k];
    let mut members = vec![0usize; k];
    for (i, &c) in assign.iter().enumerate() {
        sums[c] += labels[i] as f64;
        members[c] += 1;
    }
    for c in 0..k {
        let label = if members[c] == 0 {
            0
        } else {
            (sums[c] / members[c] as f64).round() as usize
        };
        counts[c] = label.min(k_max);
    }
    Ok(VqBaseline { centroids, counts })
}

impl VqBaseline {
    /// Count label of the nearest centroid (ties toward the lower index).
    pub fn predict(&self, feature: ArrayView1<f64>) -> usize {
        let mut best = 0usize;
        let mut best_d = sq_dist(feature, &self.centroids[0]);
        for (c, centroid) in self.centroids.iter().enumerate().skip(1) {
            let d = sq_dist(feature, centroid);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        self.counts[best]
    }
}

/// Free-function form of [`VqBaseline::predict`].
pub fn vq_predict(baseline: &VqBaseline, feature: ArrayView1<f64>) -> usize {
    baseline.predict(feature)
}
