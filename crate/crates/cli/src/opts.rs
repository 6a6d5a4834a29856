//! Command-line flags and their resolution against an optional JSON config
//! file. Flags win over config values, which win over built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use stereo_depth::data::DisparityKind;
use stereo_depth::net::Arch;
use stereo_depth::ops::BnMode;
use stereo_depth::warp::DispSign;

use crate::Failure;

#[derive(Parser, Debug)]
#[command(
    name = "stereo-depth",
    version,
    about = "Self-supervised stereo depth estimation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic stereo dataset.
    GenData(GenDataArgs),
    /// Train a network on a dataset directory.
    Train(TrainArgs),
    /// Predict the disparity map of one image.
    Infer(InferArgs),
    /// Score a model or a baseline on a dataset.
    Eval(EvalArgs),
}

/// Flags shared by every command.
#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct Common {
    /// JSON file whose keys are flag names (without the leading dashes).
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disparity sign convention, +1 or -1.
    #[arg(long, allow_hyphen_values = true, value_name = "SIGN")]
    pub disp_sign: Option<DispSign>,
    /// Channel-width factor of the network.
    #[arg(long)]
    pub scale: Option<f64>,
    /// Disparity bound in pixels.
    #[arg(long)]
    pub d_max: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct GenDataArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// constant:D, ramp:LO:HI, boxes or mixed.
    #[arg(long)]
    pub kind: Option<DisparityKind>,
    /// Sample id prefix, e.g. train or test.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub blur_sigma: Option<f64>,
    #[arg(long)]
    pub texture_gain: Option<f64>,
}

#[derive(Deserialize, Debug)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct GenDataOpts {
    pub out: PathBuf,
    #[serde(default = "defaults::count")]
    pub count: usize,
    #[serde(default = "defaults::width")]
    pub width: usize,
    #[serde(default = "defaults::height")]
    pub height: usize,
    #[serde(default = "defaults::kind")]
    pub kind: DisparityKind,
    #[serde(default = "defaults::split")]
    pub split: String,
    #[serde(default = "defaults::blur_sigma")]
    pub blur_sigma: f64,
    #[serde(default)]
    pub texture_gain: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub disp_sign: DispSign,
    #[serde(default = "defaults::d_max")]
    pub d_max: f64,
    pub scale: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint written after every epoch.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// CSV loss log; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from this checkpoint, appending to the log.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// basic or siamese.
    #[arg(long)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Halve the learning rate every N epochs; 0 keeps it constant.
    #[arg(long)]
    pub lr_halving_epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub alpha_l: Option<f64>,
    #[arg(long)]
    pub alpha_r: Option<f64>,
    #[arg(long)]
    pub alpha_c: Option<f64>,
    /// Batch-norm statistics used during training steps: train or infer.
    #[arg(long, value_parser = parse_bn_mode)]
    pub bn_mode: Option<BnMode>,
}

#[derive(Deserialize, Debug)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainOpts {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub log: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    #[serde(default)]
    pub arch: Arch,
    pub scale: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lr_halving_epochs: Option<usize>,
    pub max_steps: Option<usize>,
    pub d_max: Option<f64>,
    pub alpha_l: Option<f64>,
    pub alpha_r: Option<f64>,
    pub alpha_c: Option<f64>,
    pub seed: Option<u64>,
    pub bn_mode: Option<BnMode>,
    pub disp_sign: Option<DispSign>,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct InferArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Left image (PPM).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Disparity output, 16-bit PGM in 1/256 px.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Right image, needed for --recon.
    #[arg(long)]
    pub right: Option<PathBuf>,
    /// Write the left view reconstructed from --right here (PPM).
    #[arg(long)]
    pub recon: Option<PathBuf>,
}

#[derive(Deserialize, Debug)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct InferOpts {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub output: PathBuf,
    pub right: Option<PathBuf>,
    pub recon: Option<PathBuf>,
    #[serde(default)]
    pub disp_sign: DispSign,
    pub scale: Option<f64>,
    pub d_max: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    Model,
    BlockMatch,
    Oracle,
    Zero,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Trained network; required for the model method and --compare.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Override the architecture stored in the checkpoint.
    #[arg(long)]
    pub arch: Option<Arch>,
    /// Block-matching search range; defaults to the disparity bound.
    #[arg(long)]
    pub max_disp: Option<usize>,
    /// Block-matching window side (odd).
    #[arg(long)]
    pub window: Option<usize>,
    /// Score the model and block matching and print a table.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub compare: bool,
    /// Record wall time per image in the report.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub timing: bool,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Deserialize, Debug)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct EvalOpts {
    pub data: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub method: Option<MethodArg>,
    pub arch: Option<Arch>,
    pub max_disp: Option<usize>,
    #[serde(default = "defaults::window")]
    pub window: usize,
    #[serde(default)]
    pub compare: bool,
    #[serde(default)]
    pub timing: bool,
    pub output: Option<PathBuf>,
    pub scale: Option<f64>,
    pub d_max: Option<f64>,
    pub disp_sign: Option<DispSign>,
    pub seed: Option<u64>,
}

mod defaults {
    use stereo_depth::data::DisparityKind;

    pub fn kind() -> DisparityKind {
        DisparityKind::Mixed
    }
    pub fn count() -> usize {
        64
    }
    pub fn width() -> usize {
        192
    }
    pub fn height() -> usize {
        96
    }
    pub fn split() -> String {
        "train".into()
    }
    pub fn blur_sigma() -> f64 {
        2.0
    }
    pub fn d_max() -> f64 {
        12.0
    }
    pub fn window() -> usize {
        9
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

fn parse_bn_mode(s: &str) -> Result<BnMode, String> {
    serde_json::from_value(Value::String(s.into()))
        .map_err(|_| format!("expected train or infer, got {s:?}"))
}

fn read_config(path: &Path) -> Result<Map<String, Value>, Failure> {
    let text =
        fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m
            .into_iter()
            .map(|(k, v)| (k.replace('_', "-"), v))
            .collect()),
        Ok(_) => Err(Failure::usage(format!(
            "{}: config must be a JSON object",
            path.display()
        ))),
        Err(e) => Err(Failure::usage(format!("{}: {e}", path.display()))),
    }
}

/// Overlays the flags that were given onto the config file and deserializes
/// the result. Unknown keys and missing required values are usage errors.
pub fn resolve<A: Serialize, O: DeserializeOwned>(
    args: &A,
    config: Option<&Path>,
) -> Result<O, Failure> {
    let mut merged = match config {
        Some(p) => read_config(p)?,
        None => Map::new(),
    };
    let Value::Object(flags) =
        serde_json::to_value(args).map_err(|e| Failure::usage(e.to_string()))?
    else {
        unreachable!("argument structs serialize to objects");
    };
    merged.extend(flags.into_iter().filter(|(_, v)| !v.is_null()));
    serde_json::from_value(Value::Object(merged)).map_err(|e| {
        let origin = config
            .map(|p| format!(" (flags and {})", p.display()))
            .unwrap_or_default();
        Failure::usage(format!("{e}{origin}"))
    })
}
