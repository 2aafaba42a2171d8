//! Benchmarks for the hot paths: feature extraction, VAD, forward/backward
//! passes at the production batch shape, and the Poisson decision rules.

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::{Array2, Array3};

use countkit_core::dsp;
use countkit_core::model::{self, HeadKind, ModelShape};
use countkit_core::vad;
use countkit_core::{decision, seeds, AudioSignal};

fn five_second_tone() -> AudioSignal {
    let n = 80_000;
    let samples = (0..n)
        .map(|i| 0.5 * (2.0 * std::f32::consts::PI * 440.0 * i as f32 / 16000.0).sin())
        .collect();
    AudioSignal::new(samples, 16000)
}

fn bench_dsp(c: &mut Criterion) {
    let sig = five_second_tone();
    c.bench_function("stft_5s", |b| b.iter(|| dsp::stft_magnitude(&sig).unwrap()));
    c.bench_function("mel40_5s", |b| b.iter(|| dsp::mel40(&sig).unwrap()));
    c.bench_function("mfcc20_5s", |b| b.iter(|| dsp::mfcc20(&sig).unwrap()));
}

fn bench_vad(c: &mut Criterion) {
    let sig = five_second_tone();
    c.bench_function("energy_vad_5s", |b| {
        b.iter(|| vad::energy_vad(&sig, vad::DEFAULT_THRESHOLD_DB, vad::DEFAULT_HANGOVER))
    });
}

fn bench_model(c: &mut Criterion) {
    use rand::Rng;
    let shape = ModelShape::standard(dsp::FeatureKind::Stft, HeadKind::Classification, 3, 500);
    let params = model::init::<f32>(&shape, 1);
    let mut rng = seeds::rng(2);
    let x = Array3::<f32>::from_shape_fn((500, 32, 201), |_| rng.random_range(-1.0..1.0));
    let ks: Vec<usize> = (0..32).map(|i| i % 4).collect();

    c.bench_function("forward_batch32_stft", |b| {
        b.iter(|| model::forward_batch(&params, x.view()).unwrap())
    });
    c.bench_function("forward_backward_batch32_stft", |b| {
        b.iter(|| model::loss_and_grads_batch(&params, x.view(), &ks).unwrap())
    });

    let single = Array2::<f32>::from_shape_fn((500, 201), |_| rng.random_range(-1.0..1.0));
    c.bench_function("forward_single_stft", |b| {
        b.iter(|| model::forward(&params, single.view()).unwrap())
    });
}

fn bench_decision(c: &mut Criterion) {
    c.bench_function("poisson_median_exact_grid", |b| {
        b.iter(|| {
            let mut acc = 0usize;
            for i in 1..=400 {
                acc += decision::poisson_median_exact(i as f64 * 0.05);
            }
            acc
        })
    });
}

criterion_group!(benches, bench_dsp, bench_vad, bench_model, bench_decision);
criterion_main!(benches);
