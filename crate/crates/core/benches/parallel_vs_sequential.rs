//! Data-parallel hot paths against a single-threaded run of the same code.
//!
//! With the default `parallel` feature the "sequential" variant runs inside a
//! one-thread rayon pool. Building with `--no-default-features` compiles the
//! plain iterator fallback instead; compare the two builds with criterion
//! baselines:
//!
//! ```text
//! cargo bench -p tcc-core --bench parallel_vs_sequential -- --save-baseline par
//! cargo bench -p tcc-core --bench parallel_vs_sequential --no-default-features -- --baseline par
//! ```

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use tcc::data::{generate_synthetic, FeatureSequence, SyntheticConfig};
use tcc::eval::pairwise_alignment;
use tcc::tape::Tape;
use tcc::train::{batch_loss, LossKind, TrainConfig, TrainState, Trainer};
use tcc::Tensor;

fn sequences(n: usize) -> Vec<FeatureSequence> {
    generate_synthetic(&SyntheticConfig {
        num_sequences: n,
        seed: 1,
        ..Default::default()
    })
    .unwrap()
}

fn loss_and_backward(trainer: &Trainer) -> f64 {
    let (batch, seed) = trainer.batch_for(0).unwrap();
    let tape = Tape::new();
    let theta = trainer.state.params.register(&tape);
    let loss = batch_loss(&tape, &trainer.state, &theta, None, &batch, seed).unwrap();
    let grads = tape.backward(&loss).unwrap();
    theta.flat_grad(&grads).iter().sum()
}

#[cfg(feature = "parallel")]
fn variants() -> Vec<(&'static str, Option<rayon::ThreadPool>)> {
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    vec![("parallel", None), ("sequential", Some(one))]
}

#[cfg(not(feature = "parallel"))]
fn variants() -> Vec<(&'static str, Option<()>)> {
    vec![("sequential", None)]
}

#[cfg(feature = "parallel")]
fn within<R: Send>(pool: &Option<rayon::ThreadPool>, f: impl FnOnce() -> R + Send) -> R {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn within<R>(_: &Option<()>, f: impl FnOnce() -> R) -> R {
    f()
}

fn bench(c: &mut Criterion) {
    let seqs = sequences(10);
    let cfg = TrainConfig::new(LossKind::TccRegression, 16);
    let trainer = Trainer::new(TrainState::init(&cfg).unwrap(), seqs.iter().collect()).unwrap();
    let embs: Vec<Tensor> = seqs
        .iter()
        .map(|s| trainer.state.params.embed_sequence(s).unwrap())
        .collect();
    let refs: Vec<&Tensor> = embs.iter().collect();

    let mut group = c.benchmark_group("batch_loss_backward");
    for (name, pool) in variants() {
        group.bench_function(name, |b| {
            b.iter(|| within(&pool, || black_box(loss_and_backward(&trainer))))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("pairwise_alignment_10_seqs");
    for (name, pool) in variants() {
        group.bench_function(name, |b| {
            b.iter(|| within(&pool, || black_box(pairwise_alignment(&refs).unwrap())))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
