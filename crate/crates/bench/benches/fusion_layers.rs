//! Full-stack timings per fusion mode: offline forward over an interleaved
//! stream, one warm-cache decode step, and one window ingest.

use casa_bench::{all_modes, image_rows, packed_stream, stack};
use casa_core::fusion::ForwardOptions;
use casa_core::streaming::StreamSession;
use casa_core::RngStream;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward");
    for (name, mode) in all_modes() {
        let st = stack::<f32>(mode, 11);
        let seq = packed_stream::<f32>(4, 7);
        g.bench_with_input(BenchmarkId::from_parameter(name), &(), |b, _| {
            b.iter(|| {
                let pass = st.forward(black_box(&seq), &ForwardOptions::default()).unwrap();
                black_box(pass.logits)
            })
        });
    }
    g.finish();
}

fn decode_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("decode_step");
    for (name, mode) in all_modes() {
        let st = stack::<f32>(mode, 11);
        // Warm session: one window ingested, a few text tokens decoded.
        let mut rng = RngStream::new(3);
        let img = image_rows::<f32>(&mut rng, 4);
        g.bench_with_input(BenchmarkId::from_parameter(name), &(), |b, _| {
            b.iter_batched(
                || {
                    let mut sess = StreamSession::new(&st);
                    sess.ingest_image(&img).unwrap();
                    for t in 1..5 {
                        sess.decode_step(t).unwrap();
                    }
                    sess
                },
                |mut sess| {
                    let (logits, _) = sess.decode_step(black_box(9)).unwrap();
                    black_box(logits)
                },
                criterion::BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

fn ingest_image(c: &mut Criterion) {
    let mut g = c.benchmark_group("ingest_image");
    for (name, mode) in all_modes() {
        let st = stack::<f32>(mode, 11);
        let mut rng = RngStream::new(3);
        let img = image_rows::<f32>(&mut rng, 4);
        g.bench_with_input(BenchmarkId::from_parameter(name), &(), |b, _| {
            b.iter_batched(
                || {
                    let mut sess = StreamSession::new(&st);
                    for t in 1..5 {
                        sess.decode_step(t).unwrap();
                    }
                    sess
                },
                |mut sess| {
                    let row = sess.ingest_image(black_box(&img)).unwrap();
                    black_box(row.casa_window_scalars)
                },
                criterion::BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = forward, decode_step, ingest_image
}
criterion_main!(benches);
