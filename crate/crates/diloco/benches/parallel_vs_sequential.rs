//! Loss/gradient throughput: fixed-chunk map (rayon when the `parallel`
//! feature is on) vs the always-available sequential path. Both produce
//! bit-identical numbers; this measures what the parallelism buys.
//!
//! `cargo bench` times the default (parallel) build; rerun with
//! `cargo bench --no-default-features` to see the fully sequential crate.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use diloco::data::{sample_batch, synth, Shard};
use diloco::model::{init_params, loss_and_grad, loss_and_grad_serial, ModelConfig};
use diloco::rng::{stream, StreamPurpose};

fn bench_loss_and_grad(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let corpus = synth::generate(64, 4, 600, 5);
    let shard = Shard::whole(&corpus);
    let params = init_params(&cfg, 1);

    let mut group = c.benchmark_group("loss_and_grad");
    group.sample_size(20);
    for rows in [32usize, 128] {
        let mut r = stream(9, StreamPurpose::WorkerData, 0, 0);
        let batch = sample_batch(&corpus, &shard, rows, cfg.context_len, &mut r).unwrap();
        group.bench_with_input(BenchmarkId::new("mapped", rows), &batch, |b, batch| {
            b.iter(|| loss_and_grad(&params, &cfg, batch).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", rows), &batch, |b, batch| {
            b.iter(|| loss_and_grad_serial(&params, &cfg, batch).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_loss_and_grad);
criterion_main!(benches);
