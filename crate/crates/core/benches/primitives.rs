//! Hot paths timed on rayon's global pool and on a one-thread pool.
//!
//! Built without the `parallel` feature both variants run sequentially.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::{ThreadPool, ThreadPoolBuilder};
use stereo_depth::data::{generate_sample, DisparityKind, SynthParams};
use stereo_depth::metrics::{evaluate_samples, Method};
use stereo_depth::net::NetworkParams;
use stereo_depth::ops::{BnMode, ConvGeom};
use stereo_depth::warp::warp_horizontal;
use stereo_depth::{Tape, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn pools() -> Vec<(&'static str, Option<ThreadPool>)> {
    vec![
        ("global", None),
        (
            "one-thread",
            Some(ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ),
    ]
}

fn on<R: Send>(pool: &Option<ThreadPool>, f: impl FnOnce() -> R + Send) -> R {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

fn conv(c: &mut Criterion) {
    let x = random(&[4, 32, 32, 64], 1);
    let w = random(&[32, 32, 3, 3], 2);
    let b = random(&[32], 3);
    let mut g = c.benchmark_group("conv2d 4x32x32x64");
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                on(&pool, || {
                    let mut tape = Tape::new();
                    let (x, w, b) = (
                        tape.constant(x.clone()),
                        tape.variable(w.clone()),
                        tape.constant(b.clone()),
                    );
                    let y = tape.conv2d(x, w, b, ConvGeom::SAME3).unwrap();
                    let m = tape.mean(y).unwrap();
                    black_box(tape.gradients(m).unwrap());
                })
            })
        });
    }
    g.finish();
}

fn warp(c: &mut Criterion) {
    let src = random(&[16, 3, 96, 192], 4);
    let disp = random(&[16, 1, 96, 192], 5).map(|v| v * 12.0);
    let mut g = c.benchmark_group("warp 16x3x96x192");
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                on(&pool, || {
                    black_box(warp_horizontal(&src, &disp, 1.0).unwrap())
                })
            })
        });
    }
    g.finish();
}

fn training_step(c: &mut Criterion) {
    let net = NetworkParams::<f32>::build(0.125, 12.0, 0).unwrap();
    let left = random(&[4, 3, 32, 64], 6);
    let right = random(&[4, 3, 32, 64], 7);
    let mut g = c.benchmark_group("siamese forward+backward, scale 0.125, 4x64x32");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                on(&pool, || {
                    let mut store = net.store.clone();
                    let mut tape = Tape::new();
                    let (l, r) = (tape.constant(left.clone()), tape.constant(right.clone()));
                    let (ol, or) = net.forward_siamese(&mut tape, l, r, BnMode::Train).unwrap();
                    let s = tape.add(ol.disparity, or.disparity).unwrap();
                    let m = tape.mean(s).unwrap();
                    tape.backward(m, &mut store).unwrap();
                    black_box(store);
                })
            })
        });
    }
    g.finish();
}

fn evaluation(c: &mut Criterion) {
    let params = SynthParams {
        width: 64,
        height: 32,
        ..SynthParams::default()
    };
    let samples: Vec<_> = (0..8)
        .map(|k| {
            generate_sample(&params, &DisparityKind::Constant(4.0), k, format!("s{k}")).unwrap()
        })
        .collect();
    let method = Method::BlockMatch {
        max_disp: 12,
        window: 9,
    };
    let mut g = c.benchmark_group("block-match evaluation, 8 samples");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                on(&pool, || {
                    black_box(evaluate_samples(&method, &samples, 12.0, false).unwrap())
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, conv, warp, training_step, evaluation);
criterion_main!(benches);
