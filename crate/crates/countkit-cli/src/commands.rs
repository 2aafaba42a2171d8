//! Implementations of the individual subcommands.

use std::path::Path;

use countkit_core::dataset::{self, balanced_plan, DatasetSpec, FeatureStore, NormalizationStats};
use countkit_core::dsp;
use countkit_core::eval::{self, EvalReport};
use countkit_core::mixer::{NoisePool, SpeakerPool};
use countkit_core::model::{self, ModelShape};
use countkit_core::toycorpus::{self, ToyCorpusConfig};
use countkit_core::training::{self, TrainConfig};
use countkit_core::vad::VadConfig;
use countkit_core::{audio, decision, seeds, store, tensorfile};

use crate::args::*;
use crate::manifest::ManifestBuilder;
use crate::CliError;

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("synth");
    manifest
        .seed(args.seed)
        .input(&args.corpus)
        .input(&args.noise)
        .output(&args.out)
        .arg("kmax", args.kmax)
        .arg("per-k", args.per_k)
        .arg("duration", args.duration)
        .arg("vad-threshold-db", args.vad_threshold_db)
        .arg("vad-hangover", args.vad_hangover)
        .arg("jobs", args.jobs);

    let pool = SpeakerPool::from_manifest(&args.corpus).map_err(CliError::user)?;
    let noise = NoisePool::from_manifest(&args.noise).map_err(CliError::user)?;
    if args.kmax > pool.len() {
        return Err(CliError::User(format!(
            "kmax {} exceeds the corpus speaker count {}",
            args.kmax,
            pool.len()
        )));
    }
    let spec = DatasetSpec::new(args.per_k, args.kmax, args.duration);
    let plan = balanced_plan(&spec, seeds::substream(args.seed, "synth")).map_err(CliError::user)?;
    let vad_cfg = VadConfig {
        threshold_db: args.vad_threshold_db,
        hangover_frames: args.vad_hangover,
    };
    let metas = dataset::synthesize_dataset(
        &pool,
        &noise,
        &plan,
        args.duration,
        &vad_cfg,
        &args.out,
        args.jobs,
    )?;
    manifest.arg("mixtures", metas.len());
    manifest.write(&args.out)?;
    println!(
        "synthesized {} mixtures (k 0..={}) into {}",
        metas.len(),
        args.kmax,
        args.out.display()
    );
    Ok(())
}

/// Extract features for every mixture of a dataset dir into the featurized
/// layout; optionally fit standardization statistics on the result.
pub fn featurize(args: &FeaturizeArgs) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("featurize");
    manifest
        .input(&args.input)
        .output(&args.out)
        .arg("feature", args.feature)
        .arg("fit-stats", args.fit_stats)
        .arg("jobs", args.jobs);

    if args.fit_stats && args.stats.is_none() {
        return Err(CliError::User("--fit-stats requires --stats".into()));
    }

    let metas = store::read_labels(&args.input).map_err(CliError::user)?;
    std::fs::create_dir_all(args.out.join("features"))?;
    std::fs::create_dir_all(args.out.join("vad"))?;

    let run = |meta: &store::MixtureMeta| -> Result<(), CliError> {
        let sig = audio::ingest_wav(&store::audio_path(&args.input, meta.id))?;
        let rep = dsp::extract(args.feature, &sig)?;
        tensorfile::write_feature(&store::feature_path(&args.out, meta.id), &rep)?;
        std::fs::copy(
            store::vad_path(&args.input, meta.id),
            store::vad_path(&args.out, meta.id),
        )?;
        Ok(())
    };

    if args.jobs > 1 {
        let pool = rayon_pool(args.jobs)?;
        pool.install(|| {
            use rayon::prelude::*;
            metas.par_iter().map(run).collect::<Result<Vec<_>, _>>()
        })?;
    } else {
        for meta in &metas {
            run(meta)?;
        }
    }
    store::write_labels(&args.out, &metas).map_err(CliError::user)?;

    if args.fit_stats {
        let stats_path = args.stats.as_ref().unwrap();
        let stats = NormalizationStats::fit(
            metas.iter().map(|m| {
                tensorfile::read_feature_f32(&store::feature_path(&args.out, m.id))
                    .expect("just-written feature file")
                    .0
            }),
            args.feature,
        )?;
        if let Some(parent) = stats_path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        stats.save(stats_path)?;
        manifest.output(stats_path);
    }
    manifest.write(&args.out)?;
    println!(
        "featurized {} mixtures ({}) into {}",
        metas.len(),
        args.feature,
        args.out.display()
    );
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("train");
    manifest
        .seed(args.seed)
        .input(&args.features)
        .input(&args.val)
        .input(&args.stats)
        .output(&args.out)
        .arg("head", args.head)
        .arg("kmax", args.kmax)
        .arg("lr", args.lr)
        .arg("epochs", args.epochs)
        .arg("patience", args.patience)
        .arg("batch-size", args.batch_size)
        .arg("train-workers", args.train_workers);

    let train_store = FeatureStore::load(&args.features).map_err(CliError::user)?;
    let val_store = FeatureStore::load(&args.val).map_err(CliError::user)?;
    let stats = NormalizationStats::load(&args.stats).map_err(CliError::user)?;
    if stats.feature_kind != train_store.kind || train_store.kind != val_store.kind {
        return Err(CliError::User(format!(
            "feature kinds disagree: stats {}, train {}, val {}",
            stats.feature_kind, train_store.kind, val_store.kind
        )));
    }

    let shape = ModelShape::standard(
        train_store.kind,
        args.head,
        args.kmax,
        dataset::EXCERPT_FRAMES,
    );
    let cfg = TrainConfig {
        learning_rate: args.lr,
        max_epochs: args.epochs,
        patience: args.patience,
        batch_size: args.batch_size,
        seed: args.seed,
        ..Default::default()
    };
    cfg.validate().map_err(CliError::user)?;

    let outcome = training::train(&shape, &train_store, &val_store, &stats, &cfg, args.train_workers)?;

    std::fs::create_dir_all(&args.out)?;
    model::save_checkpoint(&args.out, &outcome.params, train_store.kind, "stats.json")?;
    std::fs::copy(&args.stats, args.out.join("stats.json"))?;
    outcome.log.write_jsonl(&args.out.join("train_log.jsonl"))?;
    manifest.arg("best-epoch", outcome.log.best_epoch);
    manifest.arg("stopped-epoch", outcome.log.stopped_epoch);
    manifest.write(&args.out)?;
    println!(
        "trained {} head to epoch {} (best {}), checkpoint at {}",
        args.head,
        outcome.log.stopped_epoch,
        outcome.log.best_epoch,
        args.out.display()
    );
    Ok(())
}

pub fn predict(args: &PredictArgs) -> Result<(), CliError> {
    let (params, kind, stats_path) = model::load_checkpoint(&args.ckpt).map_err(CliError::user)?;
    let stats = NormalizationStats::load(&stats_path).map_err(CliError::user)?;

    let sig = audio::ingest_wav(&args.wav).map_err(CliError::user)?;
    let rep = dsp::extract(kind, &sig).map_err(CliError::user)?;
    if rep.num_frames() < params.shape.seq_len {
        return Err(CliError::User(format!(
            "input yields {} frames, model needs {} ({} s of audio)",
            rep.num_frames(),
            params.shape.seq_len,
            params.shape.seq_len as f64 * dsp::HOP_S
        )));
    }
    let cropped = rep.data.slice(ndarray::s![..params.shape.seq_len, ..]).to_owned();
    let mut rep = countkit_core::dsp::TFRepresentation {
        data: cropped,
        kind,
        hop_s: dsp::HOP_S,
        frame_len_s: dsp::FRAME_LEN_S,
    };
    rep = dataset::frame_norm(&rep).map_err(CliError::user)?;
    let standardized = dataset::standardize(&rep, &stats).map_err(CliError::user)?;
    let x = standardized.mapv(|v| v as f32);

    let output = model::forward(&params, x.view())?;
    let estimate = decision::decide_with(&output, args.poisson_decision.into())?;
    println!("{}", serde_json::to_string(&estimate).unwrap());
    Ok(())
}

/// Shared by `eval` and the toy experiment: predictions -> report + CSVs.
pub fn write_report_files(
    report: &EvalReport,
    out: &Path,
    csv_dir: Option<&Path>,
) -> Result<(), CliError> {
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out, serde_json::to_string_pretty(report).unwrap())?;
    if let Some(dir) = csv_dir {
        std::fs::create_dir_all(dir)?;
        let mut per_k = String::from("k,n,mae,ci95\n");
        for k in 0..=report.k_max {
            per_k.push_str(&format!(
                "{},{},{},{}\n",
                k, report.n_per_k[k], report.per_k_mae[k], report.ci95[k]
            ));
        }
        std::fs::write(dir.join("per_k_mae.csv"), per_k)?;

        let mut confusion = String::new();
        for row in &report.confusion {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            confusion.push_str(&line.join(","));
            confusion.push('\n');
        }
        std::fs::write(dir.join("confusion.csv"), confusion)?;
    }
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("eval");
    manifest.input(&args.ckpt).input(&args.test).output(&args.out);

    let (params, _kind, stats_path) = model::load_checkpoint(&args.ckpt).map_err(CliError::user)?;
    let stats = NormalizationStats::load(&stats_path).map_err(CliError::user)?;
    let test_store = FeatureStore::load(&args.test).map_err(CliError::user)?;

    let predictions =
        eval::predict_store(&params, &test_store, &stats, args.poisson_decision.into())?;
    let report = eval::evaluate(&predictions, params.shape.k_max).map_err(CliError::user)?;
    write_report_files(&report, &args.out, args.csv.as_deref())?;

    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        manifest.write(dir)?;
    }
    println!(
        "evaluated {} samples: overall MAE {:.4}",
        predictions.len(),
        report.overall_mae
    );
    Ok(())
}

pub fn toy_corpus(args: &ToyCorpusArgs) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("toy-corpus");
    manifest
        .seed(args.seed)
        .output(&args.out)
        .arg("speakers", args.speakers)
        .arg("utterances", args.utterances);

    let cfg = ToyCorpusConfig {
        n_speakers: args.speakers,
        utterances_per_speaker: args.utterances,
        utterance_s: args.utterance_s,
        n_noise_files: args.noise_files,
        noise_s: args.noise_s,
        seed: args.seed,
        id_prefix: "spk".into(),
    };
    let corpus = toycorpus::generate(&args.out, &cfg).map_err(CliError::user)?;
    manifest.write(&args.out)?;
    println!(
        "toy corpus written: {} (speech), {} (noise)",
        corpus.speech_manifest.display(),
        corpus.noise_manifest.display()
    );
    Ok(())
}

pub(crate) fn rayon_pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))
}
