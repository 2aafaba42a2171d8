//! The desk-scale experiment: synthetic corpus, balanced mixtures, STFT
//! features, all requested heads trained over several seeds, evaluation
//! against the VQ and constant mean-estimator baselines, one report.json.
//!
//! The report contains no wall times or absolute paths, so a repeated run
//! with the same seed produces byte-identical bytes.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use countkit_core::dataset::{self, balanced_plan, DatasetSpec, FeatureStore, NormalizationStats};
use countkit_core::decision::PoissonRule;
use countkit_core::dsp::{self, FeatureKind};
use countkit_core::eval::{self, EvalReport};
use countkit_core::mixer::{NoisePool, SpeakerPool};
use countkit_core::model::{self, HeadKind, ModelShape};
use countkit_core::toycorpus::{self, ToyCorpusConfig};
use countkit_core::training::{self, TrainConfig};
use countkit_core::vad::VadConfig;
use countkit_core::{audio, seeds, store};

use crate::args::{FeaturizeArgs, ToyExperimentArgs};
use crate::manifest::ManifestBuilder;
use crate::CliError;

pub const VQ_RESTARTS: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub k_max: usize,
    pub train_mixtures: usize,
    pub val_mixtures: usize,
    pub test_mixtures: usize,
    pub heads: Vec<HeadKind>,
    pub seeds_per_head: usize,
    pub epochs: usize,
    pub patience: usize,
    pub feature: FeatureKind,
    pub learning_rate: f64,
    pub train_duration_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadResult {
    pub head: HeadKind,
    pub per_seed_mae: Vec<f64>,
    pub per_seed_best_epoch: Vec<usize>,
    pub per_seed_stopped_epoch: Vec<usize>,
    /// Mean over seeds of the per-seed overall test MAE.
    pub mean_mae: f64,
    pub aggregate: EvalReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineResult {
    pub mae: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Orderings {
    /// classification mean MAE <= gaussian mean MAE (when both heads ran).
    pub classification_le_gauss: Option<bool>,
    /// network (classification head) MAE strictly below the VQ baseline.
    pub network_lt_vq: bool,
    /// VQ baseline beats or ties the constant mean estimator.
    pub vq_le_mean_estimator: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub heads: Vec<HeadResult>,
    pub vq: BaselineResult,
    pub mean_estimator: BaselineResult,
    pub mean_estimator_k: usize,
    pub orderings: Orderings,
}

struct Split {
    name: &'static str,
    mixtures: usize,
    duration_s: f64,
    speakers: usize,
    noise_files: usize,
}

fn generate_split_corpus(
    out: &Path,
    split: &Split,
    seed: u64,
) -> Result<(SpeakerPool, NoisePool), CliError> {
    let cfg = ToyCorpusConfig {
        n_speakers: split.speakers,
        utterances_per_speaker: 3,
        utterance_s: 9.0,
        n_noise_files: split.noise_files,
        noise_s: 12.0,
        seed,
        id_prefix: format!("{}-", split.name),
    };
    let corpus = toycorpus::generate(&out.join("corpus").join(split.name), &cfg)
        .map_err(CliError::user)?;
    Ok((
        SpeakerPool::from_manifest(&corpus.speech_manifest).map_err(CliError::user)?,
        NoisePool::from_manifest(&corpus.noise_manifest).map_err(CliError::user)?,
    ))
}

fn mel_mean_features(
    data_dir: &Path,
    metas: &[store::MixtureMeta],
) -> Result<(Array2<f64>, Vec<usize>), CliError> {
    let mut features = Array2::<f64>::zeros((metas.len(), dsp::N_MELS));
    let mut labels = Vec::with_capacity(metas.len());
    for (row, meta) in metas.iter().enumerate() {
        let sig = audio::ingest_wav(&store::audio_path(data_dir, meta.id))?;
        let mean = dsp::mel_mean(&sig)?;
        features.row_mut(row).assign(&mean);
        labels.push(meta.k);
    }
    Ok((features, labels))
}

pub fn run_toy_experiment(args: &ToyExperimentArgs) -> Result<ExperimentReport, CliError> {
    let classes = args.kmax + 1;
    for (name, total) in [
        ("train-mixtures", args.train_mixtures),
        ("val-mixtures", args.val_mixtures),
        ("test-mixtures", args.test_mixtures),
    ] {
        if total == 0 || total % classes != 0 {
            return Err(CliError::User(format!(
                "--{name} ({total}) must be a positive multiple of kmax+1 ({classes})"
            )));
        }
    }
    if args.heads.is_empty() || args.seeds == 0 {
        return Err(CliError::User("need at least one head and one seed".into()));
    }

    let mut manifest = ManifestBuilder::new("toy-experiment");
    manifest.seed(args.seed).output(&args.out);

    let out = &args.out;
    std::fs::create_dir_all(out)?;

    let splits = [
        Split {
            name: "train",
            mixtures: args.train_mixtures,
            duration_s: args.duration,
            speakers: 16.max(args.kmax),
            noise_files: 4,
        },
        Split {
            name: "val",
            mixtures: args.val_mixtures,
            duration_s: dataset::EXCERPT_S,
            speakers: 4.max(args.kmax),
            noise_files: 2,
        },
        Split {
            name: "test",
            mixtures: args.test_mixtures,
            duration_s: dataset::EXCERPT_S,
            speakers: 4.max(args.kmax),
            noise_files: 2,
        },
    ];

    // 1. disjoint corpora, labeled mixtures, features for every split.
    // The toy speakers gate on and off with 10 ms cosine ramps and true
    // silence in between, so a short hangover suffices; the default 80 ms
    // would append phantom activity to every gate-off and blur the labels.
    let vad_cfg = VadConfig { hangover_frames: 2, ..VadConfig::default() };
    for split in &splits {
        println!("[toy-experiment] synthesizing {} split ({} mixtures)", split.name, split.mixtures);
        let corpus_seed = seeds::substream(args.seed, &format!("corpus-{}", split.name));
        let (pool, noise) = generate_split_corpus(out, split, corpus_seed)?;

        let spec = DatasetSpec::new(split.mixtures / classes, args.kmax, split.duration_s);
        let plan = balanced_plan(&spec, seeds::substream(args.seed, &format!("synth-{}", split.name)))
            .map_err(CliError::user)?;
        dataset::synthesize_dataset(
            &pool,
            &noise,
            &plan,
            split.duration_s,
            &vad_cfg,
            &out.join("data").join(split.name),
            args.jobs,
        )?;

        let featurize_args = FeaturizeArgs {
            feature: args.feature,
            input: out.join("data").join(split.name),
            out: out.join("feats").join(split.name),
            stats: (split.name == "train").then(|| out.join("stats.json")),
            fit_stats: split.name == "train",
            jobs: args.jobs,
        };
        crate::commands::featurize(&featurize_args)?;
    }

    let stats = NormalizationStats::load(&out.join("stats.json")).map_err(CliError::user)?;
    let train_store = FeatureStore::load(&out.join("feats").join("train")).map_err(CliError::user)?;
    let val_store = FeatureStore::load(&out.join("feats").join("val")).map_err(CliError::user)?;
    let test_store = FeatureStore::load(&out.join("feats").join("test")).map_err(CliError::user)?;

    // 2. train every head over the requested seeds and evaluate on the test set
    let runs: Vec<(HeadKind, usize)> = args
        .heads
        .iter()
        .flat_map(|&h| (0..args.seeds).map(move |s| (h, s)))
        .collect();

    let run_one = |&(head, seed_idx): &(HeadKind, usize)| -> Result<(EvalReport, usize, usize), CliError> {
        let shape = ModelShape::standard(args.feature, head, args.kmax, dataset::EXCERPT_FRAMES);
        let cfg = TrainConfig {
            learning_rate: args.lr,
            max_epochs: args.epochs,
            patience: args.patience,
            batch_size: 32,
            seed: seeds::substream_n(args.seed, &format!("train-{head}"), seed_idx as u64),
            ..Default::default()
        };
        cfg.validate().map_err(CliError::user)?;
        let outcome = training::train(&shape, &train_store, &val_store, &stats, &cfg, args.train_workers)?;

        let ckpt_dir = out.join("ckpt").join(head.to_string()).join(format!("seed{seed_idx}"));
        std::fs::create_dir_all(&ckpt_dir)?;
        model::save_checkpoint(&ckpt_dir, &outcome.params, args.feature, "stats.json")?;
        std::fs::copy(out.join("stats.json"), ckpt_dir.join("stats.json"))?;
        outcome.log.write_jsonl(&ckpt_dir.join("train_log.jsonl"))?;

        let predictions = eval::predict_store(&outcome.params, &test_store, &stats, PoissonRule::Median)?;
        let report = eval::evaluate(&predictions, args.kmax).map_err(CliError::user)?;
        crate::commands::write_report_files(&report, &ckpt_dir.join("eval.json"), None)?;
        println!(
            "[toy-experiment] {head} seed {seed_idx}: stopped {} best {} test MAE {:.4}",
            outcome.log.stopped_epoch, outcome.log.best_epoch, report.overall_mae
        );
        Ok((report, outcome.log.best_epoch, outcome.log.stopped_epoch))
    };

    let results: Vec<(EvalReport, usize, usize)> = if args.jobs > 1 {
        let pool = crate::commands::rayon_pool(args.jobs)?;
        pool.install(|| {
            use rayon::prelude::*;
            runs.par_iter().map(run_one).collect::<Result<Vec<_>, _>>()
        })?
    } else {
        runs.iter().map(|r| run_one(r)).collect::<Result<Vec<_>, _>>()?
    };

    let mut heads = Vec::with_capacity(args.heads.len());
    for (h_idx, &head) in args.heads.iter().enumerate() {
        let slice = &results[h_idx * args.seeds..(h_idx + 1) * args.seeds];
        let reports: Vec<EvalReport> = slice.iter().map(|(r, _, _)| r.clone()).collect();
        let per_seed_mae: Vec<f64> = reports.iter().map(|r| r.overall_mae).collect();
        heads.push(HeadResult {
            head,
            mean_mae: per_seed_mae.iter().sum::<f64>() / per_seed_mae.len() as f64,
            per_seed_mae,
            per_seed_best_epoch: slice.iter().map(|(_, b, _)| *b).collect(),
            per_seed_stopped_epoch: slice.iter().map(|(_, _, s)| *s).collect(),
            aggregate: eval::aggregate_runs(&reports).map_err(CliError::user)?,
        });
    }

    // 3. baselines on the same test set
    println!("[toy-experiment] fitting VQ baseline");
    let train_metas = store::read_labels(&out.join("data").join("train")).map_err(CliError::user)?;
    let test_metas = store::read_labels(&out.join("data").join("test")).map_err(CliError::user)?;
    let (train_mel, train_labels) = mel_mean_features(&out.join("data").join("train"), &train_metas)?;
    let (test_mel, test_labels) = mel_mean_features(&out.join("data").join("test"), &test_metas)?;

    let vq = eval::vq_fit(
        train_mel.view(),
        &train_labels,
        args.kmax,
        VQ_RESTARTS,
        seeds::substream(args.seed, "vq"),
    )
    .map_err(CliError::user)?;
    let vq_preds: Vec<(usize, usize)> = test_labels
        .iter()
        .enumerate()
        .map(|(i, &k)| (k, vq.predict(test_mel.row(i))))
        .collect();
    let vq_report = eval::evaluate(&vq_preds, args.kmax).map_err(CliError::user)?;

    let mean_k = args.kmax / 2;
    let mean_preds: Vec<(usize, usize)> = test_labels.iter().map(|&k| (k, mean_k)).collect();
    let mean_report = eval::evaluate(&mean_preds, args.kmax).map_err(CliError::user)?;

    // 4. orderings and report
    let cls = heads.iter().find(|h| h.head == HeadKind::Classification);
    let gauss = heads.iter().find(|h| h.head == HeadKind::GaussianRegression);
    let network_mae = cls.map(|h| h.mean_mae).unwrap_or(heads[0].mean_mae);
    let orderings = Orderings {
        classification_le_gauss: match (cls, gauss) {
            (Some(c), Some(g)) => Some(c.mean_mae <= g.mean_mae),
            _ => None,
        },
        network_lt_vq: network_mae < vq_report.overall_mae,
        vq_le_mean_estimator: vq_report.overall_mae <= mean_report.overall_mae,
    };

    let report = ExperimentReport {
        config: ExperimentConfig {
            seed: args.seed,
            k_max: args.kmax,
            train_mixtures: args.train_mixtures,
            val_mixtures: args.val_mixtures,
            test_mixtures: args.test_mixtures,
            heads: args.heads.clone(),
            seeds_per_head: args.seeds,
            epochs: args.epochs,
            patience: args.patience,
            feature: args.feature,
            learning_rate: args.lr,
            train_duration_s: args.duration,
        },
        heads,
        vq: BaselineResult { mae: vq_report.overall_mae, report: vq_report },
        mean_estimator: BaselineResult { mae: mean_report.overall_mae, report: mean_report },
        mean_estimator_k: mean_k,
        orderings,
    };

    std::fs::write(
        report_path(out),
        serde_json::to_string_pretty(&report).unwrap(),
    )?;
    manifest.write(out)?;
    println!("[toy-experiment] report written to {}", report_path(out).display());
    Ok(report)
}

pub fn report_path(out: &Path) -> PathBuf {
    out.join("report.json")
}
