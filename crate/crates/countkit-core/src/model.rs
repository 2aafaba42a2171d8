//! The count-estimation network: three stacked bi-directional LSTM layers
//! (per-direction sizes 30, 20, 40), temporal max pooling with window 2 over
//! the last layer's full output sequence, and a dense layer feeding one of
//! three output heads (softmax classification, linear Gaussian regression,
//! exponential Poisson regression).
//!
//! Forward and backward passes are implemented from scratch. Sequences are
//! processed time-major as (D, B, F) so the input-to-gate transform of a whole
//! sequence collapses into a single matrix product; only the recurrent term is
//! applied step by step. Training runs in f32; tests run the same code in f64,
//! where gradients are checked against central finite differences.

use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::FeatureKind;
use crate::seeds;
use crate::tensorfile;

/// Element type of the network: f32 for training, f64 for gradient tests.
pub trait Scalar:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Float
    + FromPrimitive
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
fn fl<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("literal conversion")
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {k} out of range (k_max {k_max})")]
    LabelOutOfRange { k: usize, k_max: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("tensor file error: {0}")]
    Tensor(#[from] tensorfile::TensorFileError),
}

/// Output head: activation + loss pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    #[serde(rename = "classification")]
    Classification,
    #[serde(rename = "gauss")]
    GaussianRegression,
    #[serde(rename = "poisson")]
    PoissonRegression,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            HeadKind::Classification => "classification",
            HeadKind::GaussianRegression => "gauss",
            HeadKind::PoissonRegression => "poisson",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for HeadKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "classification" => Ok(HeadKind::Classification),
            "gauss" => Ok(HeadKind::GaussianRegression),
            "poisson" => Ok(HeadKind::PoissonRegression),
            other => Err(format!("unknown head '{other}'")),
        }
    }
}

/// Raw network output, tagged by head kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "head", content = "value")]
pub enum HeadOutput {
    /// Class probabilities over k = 0..=k_max.
    #[serde(rename = "classification")]
    Classification(Vec<f64>),
    /// Unbounded real estimate.
    #[serde(rename = "gauss")]
    Gaussian(f64),
    /// Poisson rate λ > 0.
    #[serde(rename = "poisson")]
    Poisson(f64),
}

/// Architecture description; fixes every tensor shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub input_dim: usize,
    pub seq_len: usize,
    /// Per-direction hidden sizes of the three BLSTM layers.
    pub hidden: [usize; 3],
    pub head: HeadKind,
    pub k_max: usize,
}

/// The standard architecture for a given feature kind and head.
pub const HIDDEN_SIZES: [usize; 3] = [30, 20, 40];

impl ModelShape {
    pub fn new(
        input_dim: usize,
        seq_len: usize,
        hidden: [usize; 3],
        head: HeadKind,
        k_max: usize,
    ) -> Result<Self, ModelError> {
        if input_dim == 0 || seq_len < 2 || hidden.iter().any(|&h| h == 0) {
            return Err(ModelError::ShapeMismatch(format!(
                "invalid shape: input_dim {input_dim}, seq_len {seq_len}, hidden {hidden:?}"
            )));
        }
        Ok(Self { input_dim, seq_len, hidden, head, k_max })
    }

    pub fn standard(kind: FeatureKind, head: HeadKind, k_max: usize, seq_len: usize) -> Self {
        Self::new(kind.dim(), seq_len, HIDDEN_SIZES, head, k_max).unwrap()
    }

    /// Output width of layer `l` (forward ‖ backward concatenation).
    pub fn layer_out(&self, l: usize) -> usize {
        2 * self.hidden[l]
    }

    pub fn layer_in(&self, l: usize) -> usize {
        if l == 0 {
            self.input_dim
        } else {
            self.layer_out(l - 1)
        }
    }

    /// Sequence length after temporal max pooling with window 2.
    pub fn pooled_len(&self) -> usize {
        self.seq_len.div_ceil(2)
    }

    pub fn dense_in(&self) -> usize {
        self.pooled_len() * self.layer_out(2)
    }

    pub fn output_dim(&self) -> usize {
        match self.head {
            HeadKind::Classification => self.k_max + 1,
            _ => 1,
        }
    }
}

/// One direction of one LSTM layer. Gate rows are stacked [input, forget,
/// cell, output], each `hidden` wide.
#[derive(Debug, Clone)]
pub struct DirParams<T> {
    pub w_ih: Array2<T>, // (4H, I)
    pub w_hh: Array2<T>, // (4H, H)
    pub b: Array1<T>,    // (4H)
}

#[derive(Debug, Clone)]
pub struct LayerParams<T> {
    pub fwd: DirParams<T>,
    pub bwd: DirParams<T>,
}

/// All network weights. The same structure doubles as the gradient container.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub shape: ModelShape,
    pub layers: Vec<LayerParams<T>>,
    pub dense_w: Array2<T>, // (out, dense_in)
    pub dense_b: Array1<T>,
}

pub type ModelGrads<T> = ModelParams<T>;

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(shape: &ModelShape) -> Self {
        let layers = (0..3)
            .map(|l| {
                let (i, h) = (shape.layer_in(l), shape.hidden[l]);
                let dir = || DirParams {
                    w_ih: Array2::zeros((4 * h, i)),
                    w_hh: Array2::zeros((4 * h, h)),
                    b: Array1::zeros(4 * h),
                };
                LayerParams { fwd: dir(), bwd: dir() }
            })
            .collect();
        Self {
            shape: *shape,
            layers,
            dense_w: Array2::zeros((shape.output_dim(), shape.dense_in())),
            dense_b: Array1::zeros(shape.output_dim()),
        }
    }

    /// Flat views of every weight group, in a fixed order shared with
    /// [`tensor_slices_mut`](Self::tensor_slices_mut).
    pub fn tensor_slices(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::with_capacity(3 * 6 + 2);
        for (l, layer) in self.layers.iter().enumerate() {
            for (dir_name, dir) in [("fwd", &layer.fwd), ("bwd", &layer.bwd)] {
                out.push((format!("layer{l}.{dir_name}.w_ih"), dir.w_ih.as_slice().unwrap()));
                out.push((format!("layer{l}.{dir_name}.w_hh"), dir.w_hh.as_slice().unwrap()));
                out.push((format!("layer{l}.{dir_name}.b"), dir.b.as_slice().unwrap()));
            }
        }
        out.push(("dense.w".into(), self.dense_w.as_slice().unwrap()));
        out.push(("dense.b".into(), self.dense_b.as_slice().unwrap()));
        out
    }

    pub fn tensor_slices_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = Vec::with_capacity(3 * 6 + 2);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (dir_name, dir) in [("fwd", &mut layer.fwd), ("bwd", &mut layer.bwd)] {
                out.push((format!("layer{l}.{dir_name}.w_ih"), dir.w_ih.as_slice_mut().unwrap()));
                out.push((format!("layer{l}.{dir_name}.w_hh"), dir.w_hh.as_slice_mut().unwrap()));
                out.push((format!("layer{l}.{dir_name}.b"), dir.b.as_slice_mut().unwrap()));
            }
        }
        out.push(("dense.w".into(), self.dense_w.as_slice_mut().unwrap()));
        out.push(("dense.b".into(), self.dense_b.as_slice_mut().unwrap()));
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.tensor_slices_mut().into_iter().zip(other.tensor_slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = *x + *y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for (_, a) in self.tensor_slices_mut() {
            for x in a.iter_mut() {
                *x = *x * factor;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensor_slices().iter().all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }
}

/// Glorot-uniform initialization (bound sqrt(6 / (fan_in + fan_out))) with
/// forget-gate biases set to 1 and all other biases zero. Weights are sampled
/// in f64 and cast, so f32 and f64 models share the same initialization.
pub fn init<T: Scalar>(shape: &ModelShape, rng_seed: u64) -> ModelParams<T> {
    use rand::Rng;
    let mut rng = seeds::rng(rng_seed);
    let mut params = ModelParams::<T>::zeros(shape);

    let mut fill = |m: &mut Array2<T>, fan_in: usize, fan_out: usize| {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in m.iter_mut() {
            *v = fl(rng.random_range(-bound..bound));
        }
    };

    for l in 0..3 {
        let (i, h) = (shape.layer_in(l), shape.hidden[l]);
        for dir_idx in 0..2 {
            let dir = if dir_idx == 0 {
                &mut params.layers[l].fwd
            } else {
                &mut params.layers[l].bwd
            };
            fill(&mut dir.w_ih, i, 4 * h);
            fill(&mut dir.w_hh, h, 4 * h);
            // forget-gate rows [h, 2h)
            for j in h..2 * h {
                dir.b[j] = T::one();
            }
        }
    }
    fill(&mut params.dense_w, shape.dense_in(), shape.output_dim());
    params
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

struct DirCache<T> {
    i: Array3<T>,
    f: Array3<T>,
    g: Array3<T>,
    o: Array3<T>,
    c: Array3<T>,
    tc: Array3<T>,
    h: Array3<T>,
}

struct LayerCache<T> {
    fwd: DirCache<T>,
    bwd: DirCache<T>,
    /// Concatenated output sequence (D, B, 2H); input to the next layer.
    out: Array3<T>,
}

/// Forward intermediates for one mini-batch, consumed by the backward pass.
pub struct BatchCache<T> {
    layers: Vec<LayerCache<T>>,
    pooled_flat: Array2<T>, // (B, P * W)
    logits: Array2<T>,      // (B, out)
}

/// Run one LSTM direction over a time-major input sequence.
///
/// `forward_time` selects the traversal order; outputs are stored at absolute
/// time indices either way.
fn lstm_dir_forward<T: Scalar>(
    p: &DirParams<T>,
    x_seq: ArrayView3<T>, // (D, B, I)
    forward_time: bool,
) -> DirCache<T> {
    let (d, b, i_dim) = x_seq.dim();
    let h = p.w_hh.ncols();
    let g4 = 4 * h;

    // Input transform for the whole sequence in one product.
    let x2d = x_seq.into_shape_with_order((d * b, i_dim)).unwrap();
    let mut z_all = x2d.dot(&p.w_ih.t()); // (D*B, 4H)
    for mut row in z_all.outer_iter_mut() {
        ndarray::Zip::from(&mut row).and(&p.b).for_each(|z, &b| *z = *z + b);
    }

    let mut cache = DirCache {
        i: Array3::zeros((d, b, h)),
        f: Array3::zeros((d, b, h)),
        g: Array3::zeros((d, b, h)),
        o: Array3::zeros((d, b, h)),
        c: Array3::zeros((d, b, h)),
        tc: Array3::zeros((d, b, h)),
        h: Array3::zeros((d, b, h)),
    };

    let mut h_cur = Array2::<T>::zeros((b, h));
    let mut c_cur = vec![T::zero(); b * h];

    for step in 0..d {
        let t = if forward_time { step } else { d - 1 - step };
        {
            let mut z_t = z_all.slice_mut(s![t * b..(t + 1) * b, ..]);
            if step > 0 {
                general_mat_mul(T::one(), &h_cur, &p.w_hh.t(), T::one(), &mut z_t);
            }
        }
        let z_t = z_all.slice(s![t * b..(t + 1) * b, ..]);
        let zs = z_t.to_slice().unwrap();

        let i_t = cache.i.index_axis_mut(Axis(0), t).into_slice().unwrap();
        let f_t = cache.f.index_axis_mut(Axis(0), t).into_slice().unwrap();
        let g_t = cache.g.index_axis_mut(Axis(0), t).into_slice().unwrap();
        let o_t = cache.o.index_axis_mut(Axis(0), t).into_slice().unwrap();
        let c_t = cache.c.index_axis_mut(Axis(0), t).into_slice().unwrap();
        let tc_t = cache.tc.index_axis_mut(Axis(0), t).into_slice().unwrap();
        let h_t = cache.h.index_axis_mut(Axis(0), t).into_slice().unwrap();
        let h_cur_s = h_cur.as_slice_mut().unwrap();

        for (bb, z_row) in zs.chunks_exact(g4).enumerate() {
            let base = bb * h;
            let (zi, rest) = z_row.split_at(h);
            let (zf, rest) = rest.split_at(h);
            let (zg, zo) = rest.split_at(h);
            for j in 0..h {
                let idx = base + j;
                let ig = sigmoid(zi[j]);
                let fg = sigmoid(zf[j]);
                let gg = zg[j].tanh();
                let og = sigmoid(zo[j]);
                let c_new = fg * c_cur[idx] + ig * gg;
                let tc = c_new.tanh();
                let h_new = og * tc;
                i_t[idx] = ig;
                f_t[idx] = fg;
                g_t[idx] = gg;
                o_t[idx] = og;
                c_t[idx] = c_new;
                tc_t[idx] = tc;
                h_t[idx] = h_new;
                h_cur_s[idx] = h_new;
                c_cur[idx] = c_new;
            }
        }
    }
    cache
}

/// Backward through one LSTM direction. Returns (dW_ih, dW_hh, db, dX);
/// dX is skipped (empty) for the input layer, where no consumer needs it.
fn lstm_dir_backward<T: Scalar>(
    p: &DirParams<T>,
    x_seq: ArrayView3<T>,
    cache: &DirCache<T>,
    dh_above: &Array3<T>, // (D, B, H) gradient on this direction's outputs
    forward_time: bool,
    need_dx: bool,
) -> (Array2<T>, Array2<T>, Array1<T>, Array3<T>) {
    let (d, b, i_dim) = x_seq.dim();
    let h = p.w_hh.ncols();
    let g4 = 4 * h;

    let mut dz_all = Array2::<T>::zeros((d * b, g4));
    let mut dh_next = vec![T::zero(); b * h];
    let mut dc_next = vec![T::zero(); b * h];
    let mut dh_buf = Array2::<T>::zeros((b, h));

    for step in 0..d {
        // reverse of the processing order
        let t = if forward_time { d - 1 - step } else { step };
        let t_prev = if forward_time {
            t.checked_sub(1)
        } else if t + 1 < d {
            Some(t + 1)
        } else {
            None
        };

        let i_t = cache.i.index_axis(Axis(0), t).to_slice().unwrap();
        let f_t = cache.f.index_axis(Axis(0), t).to_slice().unwrap();
        let g_t = cache.g.index_axis(Axis(0), t).to_slice().unwrap();
        let o_t = cache.o.index_axis(Axis(0), t).to_slice().unwrap();
        let tc_t = cache.tc.index_axis(Axis(0), t).to_slice().unwrap();
        let da_t = dh_above.index_axis(Axis(0), t).to_slice().unwrap();
        let c_prev = t_prev.map(|tp| cache.c.index_axis(Axis(0), tp).to_slice().unwrap());

        {
            let mut dz_t = dz_all.slice_mut(s![t * b..(t + 1) * b, ..]);
            let dz = dz_t.as_slice_mut().unwrap();
            for (bb, dz_row) in dz.chunks_exact_mut(g4).enumerate() {
                let base = bb * h;
                let (dzi, rest) = dz_row.split_at_mut(h);
                let (dzf, rest) = rest.split_at_mut(h);
                let (dzg, dzo) = rest.split_at_mut(h);
                for j in 0..h {
                    let idx = base + j;
                    let dh = da_t[idx] + dh_next[idx];
                    let tc = tc_t[idx];
                    let dc = dh * o_t[idx] * (T::one() - tc * tc) + dc_next[idx];
                    let cp = c_prev.map_or(T::zero(), |cp| cp[idx]);

                    dzi[j] = dc * g_t[idx] * i_t[idx] * (T::one() - i_t[idx]);
                    dzf[j] = dc * cp * f_t[idx] * (T::one() - f_t[idx]);
                    dzg[j] = dc * i_t[idx] * (T::one() - g_t[idx] * g_t[idx]);
                    dzo[j] = dh * tc * o_t[idx] * (T::one() - o_t[idx]);

                    dc_next[idx] = dc * f_t[idx];
                }
            }
        }

        // gradient flowing to the predecessor step's hidden state
        let dz_t = dz_all.slice(s![t * b..(t + 1) * b, ..]);
        general_mat_mul(T::one(), &dz_t, &p.w_hh, T::zero(), &mut dh_buf);
        dh_next.copy_from_slice(dh_buf.as_slice().unwrap());
    }

    // Weight gradients collapse into whole-sequence products.
    let x2d = x_seq.into_shape_with_order((d * b, i_dim)).unwrap();
    let dw_ih = dz_all.t().dot(&x2d);

    let h2d = cache.h.view().into_shape_with_order((d * b, h)).unwrap();
    let mut dw_hh = Array2::<T>::zeros((g4, h));
    if d > 1 {
        // pair every step with its processing-order predecessor
        let (dz_rows, h_rows) = if forward_time {
            (dz_all.slice(s![b.., ..]), h2d.slice(s![..(d - 1) * b, ..]))
        } else {
            (dz_all.slice(s![..(d - 1) * b, ..]), h2d.slice(s![b.., ..]))
        };
        general_mat_mul(T::one(), &dz_rows.t(), &h_rows, T::zero(), &mut dw_hh);
    }

    let db = dz_all.sum_axis(Axis(0));
    let dx = if need_dx {
        let dx2d = dz_all.dot(&p.w_ih);
        dx2d.into_shape_with_order((d, b, i_dim)).unwrap()
    } else {
        Array3::zeros((0, 0, 0))
    };
    (dw_ih, dw_hh, db, dx)
}

/// Elementwise temporal max over non-overlapping windows of 2 frames; an odd
/// tail frame passes through.
fn pool_forward<T: Scalar>(y: &Array3<T>) -> Array3<T> {
    let (d, b, w) = y.dim();
    let p_len = d.div_ceil(2);
    let mut pooled = Array3::<T>::zeros((p_len, b, w));
    for p in 0..p_len {
        let a = y.index_axis(Axis(0), 2 * p);
        if 2 * p + 1 < d {
            let bb = y.index_axis(Axis(0), 2 * p + 1);
            let mut dst = pooled.index_axis_mut(Axis(0), p);
            ndarray::Zip::from(&mut dst).and(&a).and(&bb).for_each(|m, &x, &y| {
                *m = if x >= y { x } else { y };
            });
        } else {
            pooled.index_axis_mut(Axis(0), p).assign(&a);
        }
    }
    pooled
}

/// Route pooled gradients back to the frame that produced the max; ties go to
/// the earlier frame.
fn pool_backward<T: Scalar>(y: &Array3<T>, d_pooled: &Array3<T>) -> Array3<T> {
    let (d, b, w) = y.dim();
    let mut dy = Array3::<T>::zeros((d, b, w));
    let p_len = d_pooled.dim().0;
    for p in 0..p_len {
        let dp = d_pooled.index_axis(Axis(0), p);
        if 2 * p + 1 < d {
            let a = y.index_axis(Axis(0), 2 * p);
            let bb = y.index_axis(Axis(0), 2 * p + 1);
            let (mut da, tail) = dy.view_mut().split_at(Axis(0), 2 * p + 1);
            let mut da = da.index_axis_mut(Axis(0), 2 * p);
            let mut db_ = tail;
            let mut db_ = db_.index_axis_mut(Axis(0), 0);
            ndarray::Zip::from(&mut da)
                .and(&mut db_)
                .and(&a)
                .and(&bb)
                .and(&dp)
                .for_each(|da, db, &x, &y, &g| {
                    if x >= y {
                        *da = g;
                    } else {
                        *db = g;
                    }
                });
        } else {
            dy.index_axis_mut(Axis(0), 2 * p).assign(&dp);
        }
    }
    dy
}

fn check_batch_shape<T: Scalar>(
    params: &ModelParams<T>,
    x: &ArrayView3<T>,
) -> Result<(), ModelError> {
    let (d, _b, f) = x.dim();
    if f != params.shape.input_dim || d != params.shape.seq_len {
        return Err(ModelError::ShapeMismatch(format!(
            "input is {d}x{f}, model expects {}x{}",
            params.shape.seq_len, params.shape.input_dim
        )));
    }
    Ok(())
}

/// Forward pass over a time-major (D, B, F) batch, keeping intermediates.
pub fn forward_batch_cached<T: Scalar>(
    params: &ModelParams<T>,
    x: ArrayView3<T>,
) -> Result<BatchCache<T>, ModelError> {
    check_batch_shape(params, &x)?;
    let x_std = x.as_standard_layout();
    let x = x_std.view();
    let (d, b, _f) = x.dim();

    let mut layers: Vec<LayerCache<T>> = Vec::with_capacity(3);
    for l in 0..3 {
        let input = if l == 0 {
            x.view()
        } else {
            layers[l - 1].out.view()
        };
        let h = params.shape.hidden[l];
        let fwd = lstm_dir_forward(&params.layers[l].fwd, input, true);
        let bwd = lstm_dir_forward(&params.layers[l].bwd, input, false);
        let mut out = Array3::<T>::zeros((d, b, 2 * h));
        out.slice_mut(s![.., .., ..h]).assign(&fwd.h);
        out.slice_mut(s![.., .., h..]).assign(&bwd.h);
        layers.push(LayerCache { fwd, bwd, out });
    }

    let pooled = pool_forward(&layers[2].out);
    let (p_len, _, w) = pooled.dim();
    // flatten (P, B, W) -> (B, P*W), frame-major per sample
    let mut pooled_flat = Array2::<T>::zeros((b, p_len * w));
    for p in 0..p_len {
        let src = pooled.index_axis(Axis(0), p);
        pooled_flat.slice_mut(s![.., p * w..(p + 1) * w]).assign(&src);
    }

    let mut logits = pooled_flat.dot(&params.dense_w.t());
    for mut row in logits.outer_iter_mut() {
        ndarray::Zip::from(&mut row)
            .and(&params.dense_b)
            .for_each(|z, &b| *z = *z + b);
    }

    Ok(BatchCache { layers, pooled_flat, logits })
}

/// Stable softmax over one logits row.
fn softmax_row<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
    let exps: Vec<f64> = row
        .iter()
        .map(|&z| (z - max).to_f64().unwrap().exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn head_outputs<T: Scalar>(head: HeadKind, logits: &Array2<T>) -> Vec<HeadOutput> {
    logits
        .outer_iter()
        .map(|row| match head {
            HeadKind::Classification => {
                HeadOutput::Classification(softmax_row(row.to_slice().unwrap()))
            }
            HeadKind::GaussianRegression => HeadOutput::Gaussian(row[0].to_f64().unwrap()),
            HeadKind::PoissonRegression => HeadOutput::Poisson(row[0].to_f64().unwrap().exp()),
        })
        .collect()
}

pub(crate) fn ln_factorial(k: usize) -> f64 {
    (1..=k).map(|i| (i as f64).ln()).sum()
}

/// Per-sample losses and the gradient w.r.t. the dense-layer outputs.
fn head_loss_grad<T: Scalar>(
    head: HeadKind,
    logits: &Array2<T>,
    ks: &[usize],
    k_max: usize,
) -> Result<(Vec<f64>, Array2<T>), ModelError> {
    let (b, out) = logits.dim();
    assert_eq!(b, ks.len());
    let mut dlogits = Array2::<T>::zeros((b, out));
    let mut losses = Vec::with_capacity(b);

    for (bb, (row, &k)) in logits.outer_iter().zip(ks).enumerate() {
        match head {
            HeadKind::Classification => {
                if k >= out {
                    return Err(ModelError::LabelOutOfRange { k, k_max });
                }
                let p = softmax_row(row.to_slice().unwrap());
                losses.push(-p[k].ln());
                for (j, &pj) in p.iter().enumerate() {
                    let target = if j == k { 1.0 } else { 0.0 };
                    dlogits[[bb, j]] = fl(pj - target);
                }
            }
            HeadKind::GaussianRegression => {
                let y = row[0].to_f64().unwrap();
                let err = y - k as f64;
                losses.push(err * err);
                dlogits[[bb, 0]] = fl(2.0 * err);
            }
            HeadKind::PoissonRegression => {
                let z = row[0].to_f64().unwrap();
                let lambda = z.exp();
                losses.push(lambda - k as f64 * z + ln_factorial(k));
                dlogits[[bb, 0]] = fl(lambda - k as f64);
            }
        }
    }
    Ok((losses, dlogits))
}

/// Backward pass from precomputed dense-output gradients.
fn backward_from_dlogits<T: Scalar>(
    params: &ModelParams<T>,
    x: ArrayView3<T>,
    cache: &BatchCache<T>,
    dlogits: &Array2<T>,
) -> ModelGrads<T> {
    let (d, b, _f) = x.dim();
    let w_last = params.shape.layer_out(2);
    let p_len = params.shape.pooled_len();

    let mut grads = ModelGrads::<T>::zeros(&params.shape);
    grads.dense_w = dlogits.t().dot(&cache.pooled_flat);
    grads.dense_b = dlogits.sum_axis(Axis(0));

    let dflat = dlogits.dot(&params.dense_w); // (B, P*W)
    let mut d_pooled = Array3::<T>::zeros((p_len, b, w_last));
    for p in 0..p_len {
        d_pooled
            .index_axis_mut(Axis(0), p)
            .assign(&dflat.slice(s![.., p * w_last..(p + 1) * w_last]));
    }

    let mut d_out = pool_backward(&cache.layers[2].out, &d_pooled);

    for l in (0..3).rev() {
        let h = params.shape.hidden[l];
        let input = if l == 0 { x.view() } else { cache.layers[l - 1].out.view() };

        let dh_fwd = d_out.slice(s![.., .., ..h]).to_owned();
        let dh_bwd = d_out.slice(s![.., .., h..]).to_owned();

        let (dw_ih_f, dw_hh_f, db_f, dx_f) = lstm_dir_backward(
            &params.layers[l].fwd,
            input,
            &cache.layers[l].fwd,
            &dh_fwd,
            true,
            l > 0,
        );
        let (dw_ih_b, dw_hh_b, db_b, dx_b) = lstm_dir_backward(
            &params.layers[l].bwd,
            input,
            &cache.layers[l].bwd,
            &dh_bwd,
            false,
            l > 0,
        );

        grads.layers[l].fwd.w_ih = dw_ih_f;
        grads.layers[l].fwd.w_hh = dw_hh_f;
        grads.layers[l].fwd.b = db_f;
        grads.layers[l].bwd.w_ih = dw_ih_b;
        grads.layers[l].bwd.w_hh = dw_hh_b;
        grads.layers[l].bwd.b = db_b;

        if l > 0 {
            d_out = dx_f;
            ndarray::Zip::from(&mut d_out).and(&dx_b).for_each(|a, &b| *a = *a + b);
        }
    }
    let _ = (d, b);
    grads
}

/// Forward a batch and return one head output per sample.
pub fn forward_batch<T: Scalar>(
    params: &ModelParams<T>,
    x: ArrayView3<T>,
) -> Result<Vec<HeadOutput>, ModelError> {
    let cache = forward_batch_cached(params, x)?;
    Ok(head_outputs(params.shape.head, &cache.logits))
}

/// Forward a single D x F sample.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    x: ArrayView2<T>,
) -> Result<HeadOutput, ModelError> {
    let x3 = x.insert_axis(Axis(1)); // (D, 1, F)
    Ok(forward_batch(params, x3)?.pop().unwrap())
}

/// Loss of a head output against the true count. The Poisson loss includes
/// the ln k! constant, so reported values are full negative log-likelihoods.
pub fn loss(output: &HeadOutput, k: usize) -> Result<f64, ModelError> {
    match output {
        HeadOutput::Classification(p) => {
            if k >= p.len() {
                return Err(ModelError::LabelOutOfRange { k, k_max: p.len().saturating_sub(1) });
            }
            Ok(-p[k].ln())
        }
        HeadOutput::Gaussian(y) => Ok((y - k as f64) * (y - k as f64)),
        HeadOutput::Poisson(lambda) => Ok(lambda - k as f64 * lambda.ln() + ln_factorial(k)),
    }
}

/// Summed loss and summed gradients over a time-major batch.
pub fn loss_and_grads_batch<T: Scalar>(
    params: &ModelParams<T>,
    x: ArrayView3<T>,
    ks: &[usize],
) -> Result<(f64, ModelGrads<T>), ModelError> {
    let x_std = x.as_standard_layout();
    let x = x_std.view();
    let cache = forward_batch_cached(params, x)?;
    let (losses, dlogits) = head_loss_grad(params.shape.head, &cache.logits, ks, params.shape.k_max)?;
    let grads = backward_from_dlogits(params, x, &cache, &dlogits);
    Ok((losses.iter().sum(), grads))
}

/// Summed loss only (validation path).
pub fn loss_batch<T: Scalar>(
    params: &ModelParams<T>,
    x: ArrayView3<T>,
    ks: &[usize],
) -> Result<f64, ModelError> {
    let cache = forward_batch_cached(params, x)?;
    let (losses, _) = head_loss_grad(params.shape.head, &cache.logits, ks, params.shape.k_max)?;
    Ok(losses.iter().sum())
}

/// Exact gradient of the single-sample loss w.r.t. every weight.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    x: ArrayView2<T>,
    k: usize,
) -> Result<ModelGrads<T>, ModelError> {
    let x3 = x.insert_axis(Axis(1));
    let (_, grads) = loss_and_grads_batch(params, x3, &[k])?;
    Ok(grads)
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    head_kind: HeadKind,
    k_max: usize,
    feature_kind: FeatureKind,
    layer_sizes: [usize; 3],
    stats_file: String,
}

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const CHECKPOINT_WEIGHTS: &str = "weights.ctk";

/// Write checkpoint manifest + weight blob into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    params: &ModelParams<f32>,
    feature_kind: FeatureKind,
    stats_file: &str,
) -> Result<(), ModelError> {
    std::fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest {
        head_kind: params.shape.head,
        k_max: params.shape.k_max,
        feature_kind,
        layer_sizes: params.shape.hidden,
        stats_file: stats_file.to_string(),
    };
    std::fs::write(
        dir.join(CHECKPOINT_MANIFEST),
        serde_json::to_string_pretty(&manifest).unwrap(),
    )?;

    let named: Vec<(String, ndarray::ArrayD<f32>)> = params
        .tensor_slices()
        .into_iter()
        .zip(tensor_shapes(params))
        .map(|((name, slice), shape)| {
            (name, ndarray::ArrayD::from_shape_vec(shape, slice.to_vec()).unwrap())
        })
        .collect();
    let views: Vec<(String, ndarray::ArrayViewD<f32>)> =
        named.iter().map(|(n, a)| (n.clone(), a.view())).collect();
    tensorfile::write_named_tensors(&dir.join(CHECKPOINT_WEIGHTS), &views)?;
    Ok(())
}

fn tensor_shapes<T: Scalar>(params: &ModelParams<T>) -> Vec<ndarray::IxDyn> {
    let mut shapes = Vec::new();
    for layer in &params.layers {
        for dir in [&layer.fwd, &layer.bwd] {
            shapes.push(ndarray::IxDyn(&[dir.w_ih.nrows(), dir.w_ih.ncols()]));
            shapes.push(ndarray::IxDyn(&[dir.w_hh.nrows(), dir.w_hh.ncols()]));
            shapes.push(ndarray::IxDyn(&[dir.b.len()]));
        }
    }
    shapes.push(ndarray::IxDyn(&[params.dense_w.nrows(), params.dense_w.ncols()]));
    shapes.push(ndarray::IxDyn(&[params.dense_b.len()]));
    shapes
}

/// Load a checkpoint. The sequence length is recovered from the dense layer
/// (inputs are fixed-length excerpts, so the pooled length is `dense_in / W`).
pub fn load_checkpoint(
    dir: &Path,
) -> Result<(ModelParams<f32>, FeatureKind, PathBuf), ModelError> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let tensors = tensorfile::read_named_tensors(&dir.join(CHECKPOINT_WEIGHTS))?;

    let dense_w = tensors
        .iter()
        .find(|(n, _)| n == "dense.w")
        .ok_or_else(|| ModelError::Checkpoint("missing dense.w".into()))?;
    let dense_in = dense_w.1.shape()[1];
    let w_last = 2 * manifest.layer_sizes[2];
    let seq_len = 2 * (dense_in / w_last);

    let shape = ModelShape::new(
        manifest.feature_kind.dim(),
        seq_len,
        manifest.layer_sizes,
        manifest.head_kind,
        manifest.k_max,
    )?;
    let mut params = ModelParams::<f32>::zeros(&shape);
    for (name, slice) in params.tensor_slices_mut() {
        let (_, arr) = tensors
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))?;
        if arr.len() != slice.len() {
            return Err(ModelError::Checkpoint(format!(
                "tensor {name} has {} values, expected {}",
                arr.len(),
                slice.len()
            )));
        }
        for (dst, src) in slice.iter_mut().zip(arr.iter()) {
            *dst = *src;
        }
    }
    Ok((params, manifest.feature_kind, dir.join(manifest.stats_file)))
}
