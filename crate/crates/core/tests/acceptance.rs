//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Failures are reported but do not fail `cargo test` unless
//! `ACCEPTANCE_STRICT=1` is set.

mod common;

use std::path::Path;
use std::time::Instant;

use common::{primitives, rng, uniform, SEEDS, TOLERANCE};
use stereo_depth::data::{
    generate_dataset, interior_columns, DatasetSpec, DisparityKind, StereoSample, SynthParams,
};
use stereo_depth::loss::{consistency_loss, weighted_sum, LossWeights};
use stereo_depth::metrics::{evaluate_samples, ssim, EvalReport, Method};
use stereo_depth::net::{Arch, Checkpoint, NetworkParams};
use stereo_depth::optim::{lr_at, Adam, AdamConfig};
use stereo_depth::train::{TrainConfig, Trainer};
use stereo_depth::warp::{warp_horizontal, DispSign};
use stereo_depth::{ParamStore, Result, Tape, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// In/out channels of every learnable layer, in network order.
const LAYERS: [(usize, usize); 28] = [
    (3, 64),
    (64, 64),
    (64, 128),
    (128, 128),
    (128, 256),
    (256, 256),
    (256, 256),
    (256, 512),
    (512, 512),
    (512, 512),
    (512, 512),
    (512, 512),
    (512, 512),
    (512, 512),
    (512, 512),
    (512, 512),
    (512, 512),
    (512, 512),
    (512, 512),
    (512, 256),
    (256, 256),
    (256, 256),
    (256, 128),
    (128, 128),
    (128, 64),
    (64, 64),
    (64, 3),
    (3, 1),
];

fn parameter_count() -> Result<Outcome> {
    let start = Instant::now();
    let net = NetworkParams::<f32>::build(1.0, 57.6, 0)?;
    let weights = net.counts().weights;
    let secs = start.elapsed().as_secs_f64();
    let oracle: usize = LAYERS.iter().map(|&(i, o)| i * o * 9).sum();
    let rel = (weights as f64 - 31.8e6).abs() / 31.8e6;
    Ok(outcome(
        weights == oracle && oracle == 31_780_251 && rel < 1e-3 && secs < 1.0,
        format!(
            "{weights} kernel weights, per-layer sum {oracle}, {:.3}% from 31.8M, {secs:.2} s",
            rel * 100.0
        ),
    ))
}

fn gradient_checks() -> Result<Outcome> {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    let mut checked = 0;
    for (name, check) in primitives() {
        for seed in 0..SEEDS {
            let err = check(seed)?;
            checked += 1;
            if err > worst.0 {
                worst = (err, name);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        worst.0 < TOLERANCE && secs < 120.0,
        format!(
            "{checked} instances ({} primitives x {SEEDS} seeds), worst relative error {:.2e} ({}), {secs:.1} s",
            checked / SEEDS as usize,
            worst.0,
            worst.1
        ),
    ))
}

/// Row-wise linear interpolation written out independently of the crate.
fn reference_warp(src: &[f32], disp: &[f32], h: usize, w: usize, sign: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(src.len());
    let planes = src.len() / (h * w);
    for p in 0..planes {
        for y in 0..h {
            for x in 0..w {
                let s = (x as f64 + sign * disp[y * w + x] as f64).clamp(0.0, (w - 1) as f64);
                let x0 = s.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let f = s - x0 as f64;
                let row = &src[(p * h + y) * w..][..w];
                out.push((1.0 - f) * row[x0] as f64 + f * row[x1] as f64);
            }
        }
    }
    out
}

fn warp_identities() -> Result<Outcome> {
    let mut r = rng(3);
    let src = uniform(&mut r, &[2, 3, 8, 24], 0.0, 1.0);
    let mut zero_exact = true;
    let mut shift_exact = true;
    for sign in [DispSign::Positive, DispSign::Negative] {
        zero_exact &= warp_horizontal(&src, &Tensor::zeros([2, 1, 8, 24]), sign.value())? == src;
        for d in 1..=4usize {
            let out = warp_horizontal(&src, &Tensor::full([2, 1, 8, 24], d as f64), sign.value())?;
            for plane in 0..6 * 8 {
                for x in interior_columns(24, d as f64) {
                    let from = if sign == DispSign::Positive {
                        x + d
                    } else {
                        x - d
                    };
                    shift_exact &= out.data()[plane * 24 + x] == src.data()[plane * 24 + from];
                }
            }
        }
    }

    // Every sample of the toy, held-out and extra datasets, in both sign
    // conventions.
    let mut samples = toy_train()?;
    samples.extend(held_out()?);
    for sign in [DispSign::Positive, DispSign::Negative] {
        for (k, kind) in [
            DisparityKind::Boxes,
            DisparityKind::Ramp { lo: 0.5, hi: 11.5 },
            DisparityKind::Mixed,
        ]
        .into_iter()
        .enumerate()
        {
            let params = SynthParams {
                disp_sign: sign,
                ..toy_params()
            };
            samples.extend(spec(params, kind, 8, 40 + k as u64, "extra").samples()?);
        }
    }
    let mut worst = 0.0f64;
    for s in &samples {
        let (h, w) = (s.height(), s.width());
        let gt = s
            .gt_disparity
            .as_ref()
            .expect("generated samples carry ground truth");
        let recon = reference_warp(s.right.data(), gt.data(), h, w, s.disp_sign.value());
        let cols = interior_columns(w, 12.0);
        let (mut sum, mut n) = (0.0, 0usize);
        for row in 0..3 * h {
            for x in cols.clone() {
                let k = row * w + x;
                sum += (recon[k] - s.left.data()[k] as f64).abs();
                n += 1;
            }
        }
        worst = worst.max(sum / n as f64);
    }
    Ok(outcome(
        zero_exact && shift_exact && worst < 1e-6,
        format!(
            "zero warp bit-exact: {zero_exact}, integer shifts exact inside: {shift_exact}, generator vs reference warp worst interior L1 {worst:.2e} over {} samples",
            samples.len()
        ),
    ))
}

fn toy_params() -> SynthParams {
    SynthParams {
        width: 64,
        height: 32,
        ..SynthParams::default()
    }
}

fn spec(
    params: SynthParams,
    kind: DisparityKind,
    count: usize,
    seed: u64,
    split: &str,
) -> DatasetSpec {
    DatasetSpec {
        params,
        kind,
        count,
        seed,
        split: split.into(),
    }
}

fn toy_train() -> Result<Vec<StereoSample>> {
    spec(toy_params(), DisparityKind::Mixed, 64, 1, "train").samples()
}

/// Constant-disparity samples generated from seeds the training set never
/// uses.
fn held_out() -> Result<Vec<StereoSample>> {
    let mut out = Vec::new();
    for d in [2.0, 4.0, 6.0] {
        out.extend(
            spec(
                toy_params(),
                DisparityKind::Constant(d),
                4,
                99 + d as u64,
                &format!("test-d{d}"),
            )
            .samples()?,
        );
    }
    Ok(out)
}

struct ToyRun {
    first_loss: f64,
    last_loss: f64,
    before: EvalReport,
    after: EvalReport,
    secs: f64,
}

fn train_toy(arch: Arch) -> Result<ToyRun> {
    let start = Instant::now();
    let test = held_out()?;
    let config = TrainConfig {
        arch,
        scale: 0.125,
        batch_size: Some(16),
        lr: 1e-3,
        lr_halving_epochs: 0,
        epochs: usize::MAX,
        max_steps: Some(200),
        seed: 0,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config, toy_train()?, 12.0)?;
    let before = evaluate_samples(
        &Method::Model {
            params: &trainer.params,
            arch,
        },
        &test,
        12.0,
        false,
    )?;
    let mut losses = Vec::new();
    trainer.run(
        |rec| {
            losses.push(rec.terms.total);
            Ok(())
        },
        |_| Ok(()),
    )?;
    let after = evaluate_samples(
        &Method::Model {
            params: &trainer.params,
            arch,
        },
        &test,
        12.0,
        false,
    )?;
    Ok(ToyRun {
        first_loss: losses[0],
        last_loss: *losses.last().expect("200 steps ran"),
        before,
        after,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn toy_training(run: &ToyRun) -> Outcome {
    let err = run.after.mean_abs_disp_err_px.unwrap_or(f64::INFINITY);
    let a = run.last_loss < 0.5 * run.first_loss;
    let b = err < 1.5;
    let c = run.after.mean_ssim > run.before.mean_ssim;
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    outcome(
        a && b && c,
        format!(
            "(a) loss {:.4} -> {:.4} {}; (b) held-out interior error {err:.3} px (< 1.5) {}; (c) SSIM {:.4} -> {:.4} {}; {:.0} s",
            run.first_loss,
            run.last_loss,
            mark(a),
            mark(b),
            run.before.mean_ssim,
            run.after.mean_ssim,
            mark(c),
            run.secs
        ),
    )
}

fn siamese_vs_basic(siamese: &ToyRun) -> Result<Outcome> {
    let basic = train_toy(Arch::Basic)?;
    let left_mean = |r: &EvalReport| {
        r.per_sample
            .iter()
            .map(|s| s.ssim_left.clamp(0.0, 1.0))
            .sum::<f64>()
            / r.n as f64
    };
    Ok(outcome(
        siamese.after.mean_ssim >= basic.after.mean_ssim - 0.02,
        format!(
            "mean SSIM siamese {:.4} vs basic {:.4} (left view only: {:.4} vs {:.4}), {:.0} s",
            siamese.after.mean_ssim,
            basic.after.mean_ssim,
            left_mean(&siamese.after),
            left_mean(&basic.after),
            basic.secs
        ),
    ))
}

fn loss_arithmetic() -> Result<Outcome> {
    let mut tape = Tape::<f64>::new();
    let parts = [0.2, 0.4, 0.1].map(|v| tape.scalar_constant(v));
    let w = LossWeights::default();
    let total = weighted_sum(
        &mut tape,
        &[
            (parts[0], w.alpha_l),
            (parts[1], w.alpha_r),
            (parts[2], w.alpha_c),
        ],
    )?;
    let total = tape.value(total).item();
    let mut zero = true;
    for c in [0.0, 0.37, 2.5, 5.0] {
        for sign in [DispSign::Positive, DispSign::Negative] {
            let d = tape.constant(Tensor::full([2, 1, 6, 16], c));
            let l = consistency_loss(&mut tape, d, d, sign)?;
            zero &= tape.value(l).item() == 0.0;
        }
    }
    Ok(outcome(
        total == 0.4 && zero && (w.alpha_l, w.alpha_r, w.alpha_c) == (0.5, 0.5, 1.0),
        format!("combined loss {total:?} (weights {}, {}, {}), consistency on equal constant fields exactly 0: {zero}", w.alpha_l, w.alpha_r, w.alpha_c),
    ))
}

fn quadratic_distance() -> Result<(f64, Option<usize>)> {
    let mut store = ParamStore::new();
    let id = store.insert("w", Tensor::scalar(0.0f64))?;
    let mut adam = Adam::new(&store, AdamConfig::default());
    let mut reached = None;
    for step in 1..=500 {
        store.zero_grad();
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let d = tape.add_scalar(w, -3.0)?;
        let sq = tape.mul(d, d)?;
        let loss = tape.mean(sq)?;
        tape.backward(loss, &mut store)?;
        adam.step(&mut store, 0.1)?;
        if reached.is_none() && (store.value(id).item() - 3.0).abs() < 0.01 {
            reached = Some(step);
        }
    }
    Ok(((store.value(id).item() - 3.0).abs(), reached))
}

fn optimizer() -> Result<Outcome> {
    let lrs = (lr_at(0, 1e-4), lr_at(5, 1e-4), lr_at(12, 1e-4));
    let exact = lrs == (1e-4, 5e-5, 2.5e-5);
    let (dist, reached) = quadratic_distance()?;
    Ok(outcome(
        exact && reached.is_some() && dist < 0.01,
        format!(
            "lr_at(0, 5, 12) = {:e}, {:e}, {:e}; (w - 3)^2 from w = 0 at lr 0.1: |w - 3| < 0.01 after {} steps, {dist:.1e} after 500",
            lrs.0,
            lrs.1,
            lrs.2,
            reached.map_or("never".into(), |s| s.to_string())
        ),
    ))
}

fn ssim_oracle() -> Result<Outcome> {
    let mut r = rng(8);
    let x = uniform(&mut r, &[3, 24, 32], 0.0, 1.0);
    let self_err = (ssim(&x, &x)? - 1.0).abs();
    // Constant images: both variances and the covariance vanish, so only
    // the luminance term remains. Constants K1 = 0.01, dynamic range 1.
    let c1 = (0.01f64 * 1.0).powi(2);
    let closed = (2.0 * 0.5 * 0.6 + c1) / (0.5f64.powi(2) + 0.6f64.powi(2) + c1);
    let measured = ssim(
        &Tensor::full([1, 16, 16], 0.5f64),
        &Tensor::full([1, 16, 16], 0.6f64),
    )?;
    let mut symmetric = true;
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let a = uniform(&mut r, &[3, 16, 20], 0.0, 1.0);
        let b = uniform(&mut r, &[3, 16, 20], 0.0, 1.0);
        symmetric &= ssim(&a, &b)? == ssim(&b, &a)?;
    }
    Ok(outcome(
        self_err < 1e-9 && (measured - closed).abs() < 1e-4 && symmetric,
        format!(
            "|ssim(x, x) - 1| = {self_err:.1e}; constant 0.5 vs 0.6: {measured:.7}, closed form {closed:.7}; symmetric on 10 pairs: {symmetric}"
        ),
    ))
}

fn same_files(a: &Path, b: &Path) -> std::io::Result<bool> {
    let mut names: Vec<_> = std::fs::read_dir(a)?
        .map(|e| e.map(|e| e.file_name()))
        .collect::<std::io::Result<_>>()?;
    names.sort();
    for name in &names {
        if std::fs::read(a.join(name))? != std::fs::read(b.join(name))? {
            return Ok(false);
        }
    }
    Ok(!names.is_empty() && names.len() == std::fs::read_dir(b)?.count())
}

fn io_err(path: impl Into<std::path::PathBuf>, cause: std::io::Error) -> stereo_depth::Error {
    stereo_depth::Error::Io {
        path: path.into(),
        cause,
    }
}

fn short_run(seed: u64) -> Result<Trainer> {
    let config = TrainConfig {
        scale: 0.0625,
        batch_size: Some(4),
        max_steps: Some(3),
        seed,
        ..TrainConfig::default()
    };
    let data = spec(toy_params(), DisparityKind::Mixed, 8, seed, "train").samples()?;
    let mut t = Trainer::new(config, data, 12.0)?;
    t.run(|_| Ok(()), |_| Ok(()))?;
    Ok(t)
}

fn determinism() -> Result<Outcome> {
    let dir = tempfile::tempdir().map_err(|e| io_err(std::env::temp_dir(), e))?;
    let ds = spec(toy_params(), DisparityKind::Mixed, 12, 7, "train");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    generate_dataset(&a, &ds)?;
    generate_dataset(&b, &ds)?;
    let datasets = same_files(&a, &b).map_err(|e| io_err(&a, e))?;

    let (t1, t2) = (short_run(5)?, short_run(5)?);
    let checkpoints = t1.checkpoint().to_bytes()? == t2.checkpoint().to_bytes()?;

    let image = uniform(&mut rng(2), &[2, 3, 32, 64], 0.0, 1.0).cast::<f32>();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let inference = bits(&t1.params.predict(&image)?) == bits(&t2.params.predict(&image)?);

    let (p, q) = (dir.path().join("p.stdl"), dir.path().join("q.stdl"));
    t1.checkpoint().save(&p)?;
    let loaded = NetworkParams::from_checkpoint(&Checkpoint::load(&p)?)?;
    loaded.params.save(&q, loaded.adam.as_ref(), loaded.meta)?;
    let read = |f: &Path| std::fs::read(f).map_err(|e| io_err(f, e));
    let roundtrip = read(&p)? == read(&q)?;
    let reloaded = bits(&loaded.params.predict(&image)?) == bits(&t1.params.predict(&image)?);
    Ok(outcome(
        datasets && checkpoints && inference && roundtrip && reloaded,
        format!(
            "datasets identical: {datasets}, checkpoints identical: {checkpoints}, inference identical: {inference}, save/load/save byte-identical: {roundtrip}, reloaded inference identical: {reloaded}"
        ),
    ))
}

fn report(n: usize, name: &str, result: Result<Outcome>) -> bool {
    let o = result.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
    println!(
        "criterion {n} {} {name}: {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    o.pass
}

fn main() {
    let started = Instant::now();
    let mut passed = Vec::new();
    passed.push(report(1, "parameter count", parameter_count()));
    passed.push(report(2, "gradient checks", gradient_checks()));
    passed.push(report(3, "warp identities", warp_identities()));
    let siamese = train_toy(Arch::Siamese);
    match &siamese {
        Ok(run) => {
            passed.push(report(4, "toy training", Ok(toy_training(run))));
            passed.push(report(5, "siamese vs basic", siamese_vs_basic(run)));
        }
        Err(e) => {
            let failed = || Ok(outcome(false, format!("error: {e}")));
            passed.push(report(4, "toy training", failed()));
            passed.push(report(5, "siamese vs basic", failed()));
        }
    }
    passed.push(report(6, "loss arithmetic", loss_arithmetic()));
    passed.push(report(7, "optimizer and schedule", optimizer()));
    passed.push(report(8, "ssim oracle", ssim_oracle()));
    passed.push(report(9, "determinism and serialization", determinism()));

    let failed: Vec<String> = passed
        .iter()
        .enumerate()
        .filter(|(_, &ok)| !ok)
        .map(|(k, _)| (k + 1).to_string())
        .collect();
    println!(
        "acceptance: {}/{} criteria pass{} ({:.0} s)",
        passed.len() - failed.len(),
        passed.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failing: {}", failed.join(", "))
        },
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() && std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v != "0") {
        std::process::exit(1);
    }
}
