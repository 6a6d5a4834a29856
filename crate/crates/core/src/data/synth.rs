//! Synthetic rectified stereo pairs with known disparity.
//!
//! The right view is a blurred-noise texture. A disparity field is drawn on
//! the left grid and the left view is produced by warping the right view
//! with it, so the photometric model holds exactly by construction.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::POOLS;
use crate::tensor::Tensor;
use crate::warp::{warp_horizontal, DispSign};

/// Ground-truth disparity values are snapped to this grid so the 16-bit
/// fixed-point files store them exactly.
const DISP_QUANTUM: f64 = 1.0 / 256.0;

fn snap(d: f64) -> f64 {
    (d / DISP_QUANTUM).round() * DISP_QUANTUM
}

/// Ground-truth disparity layout.
#[derive(Clone, Debug, PartialEq)]
pub enum DisparityKind {
    /// The same disparity everywhere.
    Constant(f64),
    /// Disparity varying linearly from `lo` on the top row to `hi` on the
    /// bottom row.
    Ramp { lo: f64, hi: f64 },
    /// A background plane with a few fronto-parallel rectangles in front.
    Boxes,
    /// Cycles through constant 2, 4, 6 and a 2→6 ramp by sample index.
    Mixed,
}

impl DisparityKind {
    /// The concrete kind used for sample `index` of a dataset.
    pub fn resolve(&self, index: usize) -> DisparityKind {
        match self {
            DisparityKind::Mixed => match index % 4 {
                0 => DisparityKind::Constant(2.0),
                1 => DisparityKind::Constant(4.0),
                2 => DisparityKind::Constant(6.0),
                _ => DisparityKind::Ramp { lo: 2.0, hi: 6.0 },
            },
            other => other.clone(),
        }
    }

    /// Largest disparity the kind can produce, if known up front.
    fn max_value(&self) -> Option<f64> {
        match *self {
            DisparityKind::Constant(d) => Some(d),
            DisparityKind::Ramp { lo, hi } => Some(lo.max(hi)),
            DisparityKind::Mixed => Some(6.0),
            DisparityKind::Boxes => None,
        }
    }

    fn min_value(&self) -> Option<f64> {
        match *self {
            DisparityKind::Constant(d) => Some(d),
            DisparityKind::Ramp { lo, hi } => Some(lo.min(hi)),
            DisparityKind::Mixed => Some(2.0),
            DisparityKind::Boxes => None,
        }
    }

    /// Checks that every value lies in `[0, d_max)` and inside the image.
    pub fn validate(&self, width: usize, d_max: f64) -> Result<()> {
        if let (Some(lo), Some(hi)) = (self.min_value(), self.max_value()) {
            if !(lo >= 0.0 && hi.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "disparity kind {self} has negative or non-finite values"
                )));
            }
            if hi >= d_max || hi >= width as f64 {
                return Err(Error::InvalidArgument(format!(
                    "disparity {hi} of kind {self} is out of bounds: must be below d_max {d_max} and width {width}"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for DisparityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DisparityKind::Constant(d) => write!(f, "constant:{d}"),
            DisparityKind::Ramp { lo, hi } => write!(f, "ramp:{lo}:{hi}"),
            DisparityKind::Boxes => f.write_str("boxes"),
            DisparityKind::Mixed => f.write_str("mixed"),
        }
    }
}

impl FromStr for DisparityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::InvalidArgument(format!(
                "disparity kind must be constant:D, ramp:LO:HI, boxes or mixed, got {s:?}"
            ))
        };
        let num = |t: &str| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(bad)
        };
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["constant", d] => Ok(DisparityKind::Constant(num(d)?)),
            ["ramp", lo, hi] => Ok(DisparityKind::Ramp {
                lo: num(lo)?,
                hi: num(hi)?,
            }),
            ["boxes"] => Ok(DisparityKind::Boxes),
            ["mixed"] => Ok(DisparityKind::Mixed),
            _ => Err(bad()),
        }
    }
}

impl Serialize for DisparityKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DisparityKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Geometry and appearance shared by every sample of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub width: usize,
    pub height: usize,
    pub d_max: f64,
    pub disp_sign: DispSign,
    /// Standard deviation of the Gaussian blur applied to the noise at
    /// zero disparity.
    pub blur_sigma: f64,
    /// Relative growth of the blur per pixel of disparity:
    /// `σ(D) = blur_sigma · (1 + texture_gain · D)`. Nearer surfaces (larger
    /// disparity) then show coarser texture, which gives a single view a
    /// depth cue. Zero makes the texture independent of depth.
    pub texture_gain: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            width: 192,
            height: 96,
            d_max: 12.0,
            disp_sign: DispSign::Positive,
            blur_sigma: 2.0,
            texture_gain: 0.0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let m = 1usize << POOLS;
        if self.width == 0
            || self.height == 0
            || !self.width.is_multiple_of(m)
            || !self.height.is_multiple_of(m)
        {
            return Err(Error::IndivisibleSize {
                height: self.height,
                width: self.width,
                multiple: m,
            });
        }
        if !(self.d_max > 0.0 && self.d_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "d_max must be positive, got {}",
                self.d_max
            )));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "blur sigma must be non-negative, got {}",
                self.blur_sigma
            )));
        }
        if !(self.texture_gain >= 0.0 && self.texture_gain.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "texture gain must be non-negative, got {}",
                self.texture_gain
            )));
        }
        Ok(())
    }
}

/// Columns whose samples never touch the clamped border for any disparity
/// below `d_max`, in either sign convention.
pub fn interior_columns(width: usize, d_max: f64) -> Range<usize> {
    let m = d_max.ceil().max(0.0) as usize;
    m.min(width)..width.saturating_sub(m).max(m.min(width))
}

/// A rectified stereo pair with optional ground truth on the left grid.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub left: Tensor<f32>,
    /// `[3, H, W]` in `[0, 1]`.
    pub right: Tensor<f32>,
    /// `[1, H, W]` in pixels.
    pub gt_disparity: Option<Tensor<f32>>,
    pub disp_sign: DispSign,
}

impl StereoSample {
    pub fn width(&self) -> usize {
        self.left.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.left.shape()[1]
    }
}

/// Adds a leading unit batch axis.
pub fn batched(t: &Tensor<f32>) -> Tensor<f32> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshape(shape).expect("same element count")
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter().map(|v| (v / s) as f32).collect()
}

/// Separable blur of one `h × w` plane with edge replication, using the
/// kernel `kernels[kidx[p]]` at pixel `p`.
fn blur_plane(plane: &mut [f32], h: usize, w: usize, kernels: &[Vec<f32>], kidx: &[usize]) {
    let tap = |k: &[f32], n: usize, at: usize, get: &dyn Fn(usize) -> f32| -> f32 {
        let r = (k.len() / 2) as isize;
        k.iter()
            .enumerate()
            .map(|(t, kv)| {
                kv * get((at as isize + t as isize - r).clamp(0, n as isize - 1) as usize)
            })
            .sum()
    };
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = tap(&kernels[kidx[y * w + x]], w, x, &|xs| plane[y * w + xs]);
        }
    }
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = tap(&kernels[kidx[y * w + x]], h, y, &|ys| tmp[ys * w + x]);
        }
    }
}

/// Blurred uniform noise, each channel stretched to `[0, 1]` and quantized
/// to 8 bits. The blur width at each pixel follows the disparity there.
fn texture(rng: &mut ChaCha8Rng, p: &SynthParams, disp: &[f32]) -> Tensor<f32> {
    let (h, w) = (p.height, p.width);
    // one kernel per distinct disparity value
    let mut levels: Vec<f32> = disp.to_vec();
    levels.sort_by(f32::total_cmp);
    levels.dedup();
    let kernels: Vec<Vec<f32>> = levels
        .iter()
        .map(|&d| gaussian_kernel(p.blur_sigma * (1.0 + p.texture_gain * d as f64)))
        .collect();
    let kidx: Vec<usize> = disp
        .iter()
        .map(|d| {
            levels
                .binary_search_by(|l| l.total_cmp(d))
                .expect("level present")
        })
        .collect();
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        let mut plane: Vec<f32> = (0..h * w).map(|_| rng.gen::<f32>()).collect();
        blur_plane(&mut plane, h, w, &kernels, &kidx);
        let (lo, hi) = plane
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        let span = if hi > lo { hi - lo } else { 1.0 };
        data.extend(
            plane
                .iter()
                .map(|&v| ((v - lo) / span * 255.0).round() / 255.0),
        );
    }
    Tensor::from_vec([3, h, w], data).expect("3 planes")
}

fn disparity_field(
    kind: &DisparityKind,
    p: &SynthParams,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f32>> {
    let (h, w) = (p.height, p.width);
    let values: Vec<f64> = match *kind {
        DisparityKind::Constant(d) => vec![snap(d); h * w],
        DisparityKind::Ramp { lo, hi } => (0..h)
            .flat_map(|y| {
                let t = if h > 1 {
                    y as f64 / (h - 1) as f64
                } else {
                    0.0
                };
                std::iter::repeat_n(snap(lo + (hi - lo) * t), w)
            })
            .collect(),
        DisparityKind::Boxes => {
            let top = (p.d_max - 1.0).min(w as f64 - 1.0).max(0.0);
            let mut field = vec![snap(rng.gen_range(0.15..0.45) * top); h * w];
            for _ in 0..rng.gen_range(2..=4) {
                let bw = rng.gen_range(w / 6..=w / 3).max(1);
                let bh = rng.gen_range(h / 6..=h / 3).max(1);
                let x0 = rng.gen_range(0..=w - bw);
                let y0 = rng.gen_range(0..=h - bh);
                let d = snap(rng.gen_range(0.5..0.9) * top);
                for y in y0..y0 + bh {
                    field[y * w + x0..y * w + x0 + bw].fill(d);
                }
            }
            field
        }
        DisparityKind::Mixed => {
            return Err(Error::InvalidArgument(
                "mixed must be resolved to a concrete kind per sample".into(),
            ))
        }
    };
    if let Some(bad) = values
        .iter()
        .find(|&&d| !(d >= 0.0 && d < p.d_max && d < w as f64))
    {
        return Err(Error::InvalidArgument(format!(
            "disparity {bad} is out of bounds: must be in [0, {}) and below width {w}",
            p.d_max
        )));
    }
    Ok(values.into_iter().map(|d| d as f32).collect())
}

/// Generates one sample. Identical arguments give bit-identical samples.
pub fn generate_sample(
    params: &SynthParams,
    kind: &DisparityKind,
    texture_seed: u64,
    id: impl Into<String>,
) -> Result<StereoSample> {
    params.validate()?;
    kind.validate(params.width, params.d_max)?;
    let (h, w) = (params.height, params.width);
    let mut rng = ChaCha8Rng::seed_from_u64(texture_seed);
    let field = disparity_field(kind, params, &mut rng)?;
    let right = texture(&mut rng, params, &field);
    let disp = Tensor::from_vec([1, h, w], field)?;
    let left = warp_horizontal(&batched(&right), &batched(&disp), params.disp_sign.value())?
        .reshape([3, h, w])?;
    Ok(StereoSample {
        id: id.into(),
        left,
        right,
        gt_disparity: Some(disp),
        disp_sign: params.disp_sign,
    })
}
