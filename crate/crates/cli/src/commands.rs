use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use stereo_depth::data::pnm::write_atomic;
use stereo_depth::data::{
    generate_dataset, load_image, resize_bilinear, save_disparity, save_image, Dataset,
    DatasetSpec, StereoSample, SynthParams,
};
use stereo_depth::loss::LossWeights;
use stereo_depth::metrics::{evaluate, reconstruct_left, EvalReport, Method};
use stereo_depth::net::{Checkpoint, LoadedCheckpoint, NetworkParams, POOLS};
use stereo_depth::train::{train_on_disk, RunPaths, TrainConfig};

use crate::opts::{EvalOpts, GenDataOpts, InferOpts, MethodArg, TrainOpts};
use crate::Failure;

/// Adds `"{verb} {path}"` as context unless the error already names the
/// path.
trait OnPath<T> {
    fn on_path(self, verb: &str, path: &Path) -> anyhow::Result<T>;
}

impl<T> OnPath<T> for stereo_depth::Result<T> {
    fn on_path(self, verb: &str, path: &Path) -> anyhow::Result<T> {
        self.map_err(|e| {
            let shown = path.display().to_string();
            let named = e.to_string().contains(&shown);
            let e = anyhow::Error::new(e);
            if named {
                e
            } else {
                e.context(format!("{verb} {shown}"))
            }
        })
    }
}

fn ignored(flag: &str, value: Option<impl std::fmt::Debug>, command: &str) {
    if value.is_some() {
        log::warn!("--{flag} has no effect on {command}");
    }
}

pub fn gen_data(o: GenDataOpts) -> Result<(), Failure> {
    ignored("scale", o.scale, "gen-data");
    let spec = DatasetSpec {
        params: SynthParams {
            width: o.width,
            height: o.height,
            d_max: o.d_max,
            disp_sign: o.disp_sign,
            blur_sigma: o.blur_sigma,
            texture_gain: o.texture_gain,
        },
        kind: o.kind,
        count: o.count,
        seed: o.seed,
        split: o.split,
    };
    spec.validate().map_err(Failure::usage)?;
    let m = generate_dataset(&o.out, &spec).on_path("writing", &o.out)?;
    println!(
        "wrote {} samples ({}x{}) to {}",
        m.ids.len(),
        m.width,
        m.height,
        o.out.display()
    );
    Ok(())
}

pub fn train(o: TrainOpts) -> Result<(), Failure> {
    let base = TrainConfig::default();
    let config = TrainConfig {
        arch: o.arch,
        scale: o.scale.unwrap_or(base.scale),
        epochs: o.epochs.unwrap_or(base.epochs),
        batch_size: o.batch_size,
        lr: o.lr.unwrap_or(base.lr),
        lr_halving_epochs: o.lr_halving_epochs.unwrap_or(base.lr_halving_epochs),
        max_steps: o.max_steps,
        d_max: o.d_max,
        loss_weights: LossWeights {
            alpha_l: o.alpha_l.unwrap_or(base.loss_weights.alpha_l),
            alpha_r: o.alpha_r.unwrap_or(base.loss_weights.alpha_r),
            alpha_c: o.alpha_c.unwrap_or(base.loss_weights.alpha_c),
        },
        seed: o.seed.unwrap_or(base.seed),
        bn_mode: o.bn_mode.unwrap_or(base.bn_mode),
        disp_sign: o.disp_sign,
        adam: base.adam,
    };
    config.validate().map_err(Failure::usage)?;
    let paths = RunPaths {
        log: o.log.unwrap_or_else(|| o.checkpoint.with_extension("csv")),
        data: o.data,
        checkpoint: o.checkpoint,
        resume: o.resume,
    };
    let summary = train_on_disk(&config, &paths).context("training failed")?;
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into());
    println!(
        "trained {} steps ({} epochs), loss {} -> {}, checkpoint {}, log {}",
        summary.steps,
        summary.epochs,
        fmt(summary.first_loss),
        fmt(summary.last_loss),
        paths.checkpoint.display(),
        paths.log.display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path, scale: Option<f64>) -> anyhow::Result<LoadedCheckpoint> {
    let ck = Checkpoint::load(path).on_path("loading", path)?;
    let loaded = NetworkParams::from_checkpoint(&ck).on_path("reading", path)?;
    if let Some(s) = scale {
        anyhow::ensure!(
            (s - loaded.params.spec.scale).abs() < 1e-12,
            "{} holds a scale {} network, --scale asks for {s}",
            path.display(),
            loaded.params.spec.scale
        );
    }
    Ok(loaded)
}

/// Nearest multiple of the network's size granularity, at least one block.
fn network_size(n: usize) -> usize {
    let m = 1 << POOLS;
    ((n + m / 2) / m).max(1) * m
}

pub fn infer(o: InferOpts) -> Result<(), Failure> {
    if o.recon.is_some() && o.right.is_none() {
        return Err(Failure::usage("--recon needs --right"));
    }
    ignored("seed", o.seed, "infer");
    let loaded = load_checkpoint(&o.checkpoint, o.scale)?;
    if let Some(d) = o.d_max {
        if (d - loaded.params.d_max).abs() > 1e-12 {
            return Err(anyhow::anyhow!(
                "{} was trained with d_max {}, --d-max asks for {d}",
                o.checkpoint.display(),
                loaded.params.d_max
            )
            .into());
        }
    }
    let left = load_image(&o.input).on_path("reading", &o.input)?;
    let (c, h, w) = (left.shape()[0], left.shape()[1], left.shape()[2]);
    if c != 3 {
        return Err(anyhow::anyhow!(
            "{}: expected an RGB image, got {c} channel(s)",
            o.input.display()
        )
        .into());
    }
    let start = Instant::now();
    let (nh, nw) = (network_size(h), network_size(w));
    let disp = if (nh, nw) == (h, w) {
        loaded.params.predict(&left)?.reshape([1, h, w])?
    } else {
        log::info!("resizing {w}x{h} to {nw}x{nh} for the network");
        let small = loaded
            .params
            .predict(&resize_bilinear(&left, nw, nh)?)?
            .reshape([1, nh, nw])?;
        // Horizontal disparity scales with the width.
        resize_bilinear(&small, w, h)?.map(|v| v * w as f32 / nw as f32)
    };
    let ms = start.elapsed().as_secs_f64() * 1e3;
    save_disparity(&disp, &o.output).on_path("writing", &o.output)?;
    if let (Some(right_path), Some(recon_path)) = (&o.right, &o.recon) {
        let right = load_image(right_path).on_path("reading", right_path)?;
        let sample = StereoSample {
            id: String::new(),
            left,
            right,
            gt_disparity: None,
            disp_sign: o.disp_sign,
        };
        let recon = reconstruct_left(&sample, &disp)
            .with_context(|| format!("reconstructing from {}", right_path.display()))?;
        save_image(&recon, recon_path).on_path("writing", recon_path)?;
    }
    println!("{}: {w}x{h}, {ms:.1} ms", o.input.display());
    Ok(())
}

fn block_match_method(o: &EvalOpts, ds: &Dataset) -> Method<'static> {
    let d_max = o.d_max.unwrap_or(ds.manifest.d_max);
    Method::BlockMatch {
        max_disp: o
            .max_disp
            .unwrap_or(d_max.ceil() as usize)
            .min(ds.manifest.width.saturating_sub(1)),
        window: o.window,
    }
}

fn table(reports: &[EvalReport]) -> String {
    let mut s = format!(
        "{:<12} {:>5} {:>9} {:>9} {:>11}\n",
        "method", "n", "mean_ssim", "std_ssim", "mean_err_px"
    );
    for r in reports {
        let err = r
            .mean_abs_disp_err_px
            .map(|e| format!("{e:.4}"))
            .unwrap_or_else(|| "-".into());
        s += &format!(
            "{:<12} {:>5} {:>9.4} {:>9.4} {:>11}\n",
            r.method, r.n, r.mean_ssim, r.std_ssim, err
        );
    }
    s
}

pub fn eval(o: EvalOpts) -> Result<(), Failure> {
    ignored("seed", o.seed, "eval");
    ignored("disp-sign", o.disp_sign, "eval (the manifest sets it)");
    if o.window.is_multiple_of(2) {
        return Err(Failure::usage(format!(
            "--window must be odd, got {}",
            o.window
        )));
    }
    let method = o.method.unwrap_or(if o.checkpoint.is_some() {
        MethodArg::Model
    } else {
        MethodArg::BlockMatch
    });
    let needs_model = o.compare || method == MethodArg::Model;
    if needs_model && o.checkpoint.is_none() {
        return Err(Failure::usage(
            "the model method and --compare need --checkpoint",
        ));
    }
    let ds = Dataset::open(&o.data).on_path("opening", &o.data)?;
    let loaded = match (&o.checkpoint, needs_model) {
        (Some(p), true) => Some(load_checkpoint(p, o.scale)?),
        _ => None,
    };
    let model = loaded.as_ref().map(|l| Method::Model {
        params: &l.params,
        arch: o.arch.unwrap_or(l.meta.arch),
    });
    let run =
        |m: &Method| evaluate(m, &ds, o.timing).with_context(|| format!("evaluating {}", m.tag()));
    let json = if o.compare {
        let baseline = if matches!(method, MethodArg::Model) {
            block_match_method(&o, &ds)
        } else {
            chosen(method, &o, &ds, None)
        };
        let reports = vec![run(&model.expect("checked above"))?, run(&baseline)?];
        print!("{}", table(&reports));
        serde_json::to_string_pretty(&reports)
    } else {
        let m = chosen(method, &o, &ds, model);
        serde_json::to_string_pretty(&run(&m)?)
    }
    .context("serializing the report")?;
    match &o.output {
        Some(p) => write_atomic(p, format!("{json}\n").as_bytes()).on_path("writing", p)?,
        None if !o.compare => println!("{json}"),
        None => {}
    }
    Ok(())
}

fn chosen<'a>(
    method: MethodArg,
    o: &EvalOpts,
    ds: &Dataset,
    model: Option<Method<'a>>,
) -> Method<'a> {
    match method {
        MethodArg::Model => model.expect("model loaded when requested"),
        MethodArg::BlockMatch => block_match_method(o, ds),
        MethodArg::Oracle => Method::Oracle,
        MethodArg::Zero => Method::Zero,
    }
}
