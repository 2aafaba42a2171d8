//! Cross-module pipeline checks: gain invariance of the normalized features,
//! byte determinism of parallel synthesis, and end-to-end dataset plumbing.

use countkit_core::dataset::{self, balanced_plan, DatasetSpec, FeatureStore};
use countkit_core::dsp::{self, FeatureKind};
use countkit_core::mixer::{NoisePool, SpeakerPool};
use countkit_core::toycorpus::{self, ToyCorpusConfig};
use countkit_core::vad::VadConfig;
use countkit_core::{audio, seeds, store, tensorfile};

fn small_corpus(dir: &std::path::Path, seed: u64) -> (SpeakerPool, NoisePool) {
    let corpus = toycorpus::generate(
        dir,
        &ToyCorpusConfig {
            n_speakers: 4,
            utterances_per_speaker: 2,
            utterance_s: 4.0,
            n_noise_files: 2,
            noise_s: 4.0,
            seed,
            id_prefix: "spk".into(),
        },
    )
    .unwrap();
    (
        SpeakerPool::from_manifest(&corpus.speech_manifest).unwrap(),
        NoisePool::from_manifest(&corpus.noise_manifest).unwrap(),
    )
}

#[test]
fn frame_normalized_features_are_gain_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let (pool, noise) = small_corpus(dir.path(), 11);

    let spec = DatasetSpec::new(2, 2, 3.0);
    let plan = balanced_plan(&spec, seeds::substream(11, "synth")).unwrap();
    let data_dir = dir.path().join("data");
    dataset::synthesize_dataset(&pool, &noise, &plan, 3.0, &VadConfig::default(), &data_dir, 1)
        .unwrap();

    let metas = store::read_labels(&data_dir).unwrap();
    for kind in [FeatureKind::Stft, FeatureKind::Mel40] {
        for meta in metas.iter().take(4) {
            let sig = audio::ingest_wav(&store::audio_path(&data_dir, meta.id)).unwrap();
            let base = dsp::extract(kind, &sig).unwrap();
            let base = dataset::frame_norm(&base).unwrap();
            let unit = base
                .data
                .outer_iter()
                .map(|r| r.dot(&r).sqrt())
                .fold(0.0f64, f64::max)
                .max(1.0);

            for g in [0.1f32, 0.5, 2.0] {
                let scaled = audio::AudioSignal::new(
                    sig.samples.iter().map(|&s| g * s).collect(),
                    sig.sample_rate,
                );
                let rep = dsp::extract(kind, &scaled).unwrap();
                let rep = dataset::frame_norm(&rep).unwrap();
                let max_diff = base
                    .data
                    .iter()
                    .zip(rep.data.iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                assert!(
                    max_diff <= 1e-5 * unit,
                    "{kind} id {} gain {g}: max diff {max_diff:e}",
                    meta.id
                );
            }
        }
    }
}

#[test]
fn parallel_and_serial_synthesis_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (pool, noise) = small_corpus(dir.path(), 5);

    let spec = DatasetSpec::new(2, 2, 2.0);
    let plan = balanced_plan(&spec, seeds::substream(5, "synth")).unwrap();

    let serial = dir.path().join("serial");
    let parallel = dir.path().join("parallel");
    dataset::synthesize_dataset(&pool, &noise, &plan, 2.0, &VadConfig::default(), &serial, 1)
        .unwrap();
    dataset::synthesize_dataset(&pool, &noise, &plan, 2.0, &VadConfig::default(), &parallel, 3)
        .unwrap();

    for meta in store::read_labels(&serial).unwrap() {
        let a = std::fs::read(store::audio_path(&serial, meta.id)).unwrap();
        let b = std::fs::read(store::audio_path(&parallel, meta.id)).unwrap();
        assert_eq!(a, b, "audio {}", meta.id);
        let a = std::fs::read(store::vad_path(&serial, meta.id)).unwrap();
        let b = std::fs::read(store::vad_path(&parallel, meta.id)).unwrap();
        assert_eq!(a, b, "vad {}", meta.id);
    }
    assert_eq!(
        std::fs::read(serial.join("labels.jsonl")).unwrap(),
        std::fs::read(parallel.join("labels.jsonl")).unwrap()
    );
}

#[test]
fn synthesized_labels_are_balanced_and_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let (pool, noise) = small_corpus(dir.path(), 23);

    let spec = DatasetSpec::new(3, 2, 2.5);
    let plan = balanced_plan(&spec, seeds::substream(23, "synth")).unwrap();
    let data_dir = dir.path().join("data");
    let metas = dataset::synthesize_dataset(
        &pool,
        &noise,
        &plan,
        2.5,
        &VadConfig::default(),
        &data_dir,
        1,
    )
    .unwrap();

    // exactly flat histogram over k
    for k in 0..=2usize {
        assert_eq!(metas.iter().filter(|m| m.k == k).count(), 3, "class {k}");
    }

    // stored VAD matrices reproduce the stored labels, and audio peaks are in (0, 1]
    for meta in &metas {
        let vad = store::read_vad_bits(&store::vad_path(&data_dir, meta.id)).unwrap();
        assert_eq!(countkit_core::mixer::compute_k(vad.view()), meta.k);
        let sig = audio::ingest_wav(&store::audio_path(&data_dir, meta.id)).unwrap();
        let peak = sig.peak();
        assert!(peak > 0.0 && peak <= 1.0, "id {} peak {peak}", meta.id);
    }
}

#[test]
fn featurized_dataset_roundtrips_through_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let (pool, noise) = small_corpus(dir.path(), 31);

    let spec = DatasetSpec::new(2, 1, 2.0);
    let plan = balanced_plan(&spec, seeds::substream(31, "synth")).unwrap();
    let data_dir = dir.path().join("data");
    dataset::synthesize_dataset(&pool, &noise, &plan, 2.0, &VadConfig::default(), &data_dir, 1)
        .unwrap();

    // featurize by hand into the featurized layout
    let feat_dir = dir.path().join("feats");
    std::fs::create_dir_all(feat_dir.join("features")).unwrap();
    std::fs::create_dir_all(feat_dir.join("vad")).unwrap();
    let metas = store::read_labels(&data_dir).unwrap();
    for meta in &metas {
        let sig = audio::ingest_wav(&store::audio_path(&data_dir, meta.id)).unwrap();
        let rep = dsp::extract(FeatureKind::Mfcc20, &sig).unwrap();
        tensorfile::write_feature(&store::feature_path(&feat_dir, meta.id), &rep).unwrap();
        std::fs::copy(
            store::vad_path(&data_dir, meta.id),
            store::vad_path(&feat_dir, meta.id),
        )
        .unwrap();
    }
    store::write_labels(&feat_dir, &metas).unwrap();

    let fs = FeatureStore::load(&feat_dir).unwrap();
    assert_eq!(fs.kind, FeatureKind::Mfcc20);
    assert_eq!(fs.len(), metas.len());
    for (item, meta) in fs.items.iter().zip(&metas) {
        assert_eq!(item.k_full, meta.k);
        assert_eq!(item.features.ncols(), 20);
        // 2 s at a 10 ms hop
        assert_eq!(item.vad.ncols(), 200);
    }
}
