//! Command line surface of the `countkit` binary.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use countkit_core::decision::PoissonRule;
use countkit_core::dsp::FeatureKind;
use countkit_core::model::HeadKind;

#[derive(Parser, Debug)]
#[command(
    name = "countkit",
    version,
    about = "Speaker-count estimation toolkit: synthesize labeled mixtures, extract features, train and evaluate count estimators"
)]
pub struct Cli {
    /// Key=value config file; flags given on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize a labeled mixture dataset from a speaker corpus.
    Synth(SynthArgs),
    /// Extract time-frequency features for a mixture dataset.
    Featurize(FeaturizeArgs),
    /// Train a count estimator on featurized data.
    Train(TrainArgs),
    /// Predict the speaker count of a single WAV file.
    Predict(PredictArgs),
    /// Evaluate a checkpoint on a featurized test set.
    Eval(EvalArgs),
    /// Generate a synthetic speaker/noise corpus for tests and demos.
    ToyCorpus(ToyCorpusArgs),
    /// Run the full desk-scale pipeline (corpus, synth, featurize, train all
    /// heads over several seeds, evaluate, baselines) and write report.json.
    ToyExperiment(ToyExperimentArgs),
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    /// Speaker corpus manifest (JSON: speaker id -> list of WAV paths).
    #[arg(long, value_name = "MANIFEST")]
    pub corpus: PathBuf,
    /// Noise corpus manifest for k = 0 samples (same JSON format).
    #[arg(long, value_name = "MANIFEST")]
    pub noise: PathBuf,
    /// Largest speaker count to generate.
    #[arg(long, default_value_t = 10)]
    pub kmax: usize,
    /// Mixtures per class k in 0..=kmax.
    #[arg(long, default_value_t = 1820)]
    pub per_k: usize,
    /// Mixture duration in seconds.
    #[arg(long, default_value_t = 10.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// VAD threshold in dB relative to the 95th-percentile frame level.
    #[arg(long, default_value_t = -40.0)]
    pub vad_threshold_db: f64,
    /// VAD hangover in 10 ms frames.
    #[arg(long, default_value_t = 8)]
    pub vad_hangover: usize,
    /// Worker fan-out (1 = serial; output is identical either way).
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug, Clone)]
pub struct FeaturizeArgs {
    /// Input representation.
    #[arg(long)]
    pub feature: FeatureKind,
    /// Mixture dataset directory.
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    /// Featurized dataset directory to create.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Normalization statistics JSON path.
    #[arg(long, value_name = "FILE")]
    pub stats: Option<PathBuf>,
    /// Fit standardization statistics on this split and write them to --stats.
    #[arg(long, default_value_t = false)]
    pub fit_stats: bool,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Featurized training dataset directory.
    #[arg(long, value_name = "DIR")]
    pub features: PathBuf,
    /// Featurized validation dataset directory (disjoint speakers).
    #[arg(long, value_name = "DIR")]
    pub val: PathBuf,
    /// Output head.
    #[arg(long)]
    pub head: HeadKind,
    #[arg(long, default_value_t = 10)]
    pub kmax: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint directory to create.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Normalization statistics fitted on the training split.
    #[arg(long, value_name = "FILE")]
    pub stats: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Upper bound on training epochs (hard cap 50).
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    /// Early-stopping patience in epochs.
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Mini-batch gradient fan-out (results are worker-count independent).
    #[arg(long, default_value_t = 1)]
    pub train_workers: usize,
}

#[derive(Args, Debug, Clone)]
pub struct PredictArgs {
    /// Checkpoint directory written by `countkit train`.
    #[arg(long, value_name = "DIR")]
    pub ckpt: PathBuf,
    /// Input WAV (any rate/width; at least 5 s after resampling).
    #[arg(long, value_name = "FILE")]
    pub wav: PathBuf,
    /// Decision rule for the Poisson head.
    #[arg(long, value_enum, default_value = "median")]
    pub poisson_decision: PoissonDecisionArg,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    pub ckpt: PathBuf,
    /// Featurized test dataset directory.
    #[arg(long, value_name = "DIR")]
    pub test: PathBuf,
    /// Report JSON output path.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Directory for per-k MAE and confusion CSVs.
    #[arg(long, value_name = "DIR")]
    pub csv: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "median")]
    pub poisson_decision: PoissonDecisionArg,
}

#[derive(clap::ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoissonDecisionArg {
    Median,
    Mode,
}

impl From<PoissonDecisionArg> for PoissonRule {
    fn from(v: PoissonDecisionArg) -> Self {
        match v {
            PoissonDecisionArg::Median => PoissonRule::Median,
            PoissonDecisionArg::Mode => PoissonRule::Mode,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct ToyCorpusArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 12)]
    pub speakers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub utterances: usize,
    #[arg(long, default_value_t = 9.0)]
    pub utterance_s: f64,
    #[arg(long, default_value_t = 4)]
    pub noise_files: usize,
    #[arg(long, default_value_t = 12.0)]
    pub noise_s: f64,
}

#[derive(Args, Debug, Clone)]
pub struct ToyExperimentArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub kmax: usize,
    /// Total training mixtures (must divide evenly into kmax + 1 classes).
    #[arg(long, default_value_t = 400)]
    pub train_mixtures: usize,
    #[arg(long, default_value_t = 100)]
    pub val_mixtures: usize,
    #[arg(long, default_value_t = 100)]
    pub test_mixtures: usize,
    /// Comma-separated heads to train (classification,gauss,poisson).
    #[arg(long, default_value = "classification,gauss,poisson", value_delimiter = ',')]
    pub heads: Vec<HeadKind>,
    /// Independent training runs per head, averaged in the report.
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value = "stft")]
    pub feature: FeatureKind,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Training mixture duration; excerpts are 5 s.
    #[arg(long, default_value_t = 10.0)]
    pub duration: f64,
    /// Fan-out for synthesis/featurization and across training runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Mini-batch gradient fan-out within each run.
    #[arg(long, default_value_t = 1)]
    pub train_workers: usize,
}
