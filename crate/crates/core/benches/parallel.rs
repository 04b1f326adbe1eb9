//! Parallel versus sequential execution of the per-sample hot paths.
//!
//! Run with: cargo bench -p raa-core
//! With one rayon thread both variants do the same work; the gap only shows
//! on multi-core machines.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use raa_core::data;
use raa_core::model::{model_forward, ModelConfig, ModelParams};
use raa_core::par;
use raa_core::raa::{raa_forward, Mode, RaaConfig, RaaParams};
use raa_core::trainer::prepare_batch;
use raa_core::Tensor;

const VARIANTS: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let config = RaaConfig::new(32, 32);
    let params = RaaParams::init(&config, &mut rng).unwrap();
    let shape = [16, 16, 16, 32];
    let x = Tensor::new(shape.to_vec(), (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap();
    let mut group = c.benchmark_group("raa_forward_16x16x16");
    for (name, on) in VARIANTS {
        par::set_parallel(on);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| raa_forward(&x, &params, &config, Mode::Train).unwrap())
        });
    }
    group.finish();
    par::set_parallel(true);
}

fn model(c: &mut Criterion) {
    let config = ModelConfig::default();
    let params = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(43)).unwrap();
    let samples = data::generate(16, 64, 42).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let x = prepare_batch(&refs).unwrap();
    let mut group = c.benchmark_group("model_forward_batch16");
    group.sample_size(20);
    for (name, on) in VARIANTS {
        par::set_parallel(on);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| model_forward(&x, &params, &config, Mode::Train).unwrap())
        });
    }
    group.finish();
    par::set_parallel(true);
}

criterion_group!(benches, attention, model);
criterion_main!(benches);
