//! Speaker-count estimation toolkit.
//!
//! Everything needed to go from a corpus of single-speaker recordings to a
//! trained count estimator: cocktail-party mixture synthesis with per-speaker
//! activity labels, time-frequency feature extraction, a from-scratch
//! bi-directional LSTM with three interchangeable count heads, ADAM training
//! with early stopping, decision functions mapping head outputs to integer
//! counts, and an evaluation harness (MAE, confusion matrices, VQ baseline).
//!
//! The crate is organized by pipeline stage:
//!
//! - [`audio`]: WAV ingestion, resampling to 16 kHz, the [`AudioSignal`] type
//! - [`dsp`]: STFT / log-STFT / mel / MFCC extraction with fixed 25 ms / 10 ms framing
//! - [`vad`]: energy-based voice activity detection and silence trimming
//! - [`mixer`]: labeled mixture synthesis and the max-concurrency label
//! - [`dataset`]: normalization, class balancing, per-epoch excerpting and batching
//! - [`model`]: the BLSTM network, losses and exact gradients
//! - [`training`]: ADAM loop with validation-based early stopping
//! - [`decision`]: argmax / rounding / Poisson-median decision functions
//! - [`eval`]: MAE reports, confusion matrices, vector-quantizer baseline
//! - [`toycorpus`]: self-contained synthetic corpus generator for tests and demos
//! - [`store`]: on-disk dataset layouts and the "CTK1" tensor file format

pub mod audio;
pub mod dataset;
pub mod decision;
pub mod dsp;
pub mod eval;
pub mod mixer;
pub mod model;
pub mod seeds;
pub mod store;
pub mod tensorfile;
pub mod toycorpus;
pub mod training;
pub mod vad;

pub use audio::AudioSignal;
pub use dataset::{DatasetSpec, NormalizationStats};
pub use decision::CountEstimate;
pub use dsp::{FeatureKind, TFRepresentation};
pub use eval::{EvalReport, VqBaseline};
pub use mixer::{LabeledMixture, SpeakerPool};
pub use model::{HeadKind, HeadOutput, ModelParams, ModelShape};
pub use training::{TrainConfig, TrainLog};
pub use vad::VadTrack;
