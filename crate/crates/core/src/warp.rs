//! Differentiable horizontal warping of rectified stereo views.
//!
//! For rectified pairs corresponding points share a row, so resampling a
//! view by a disparity field is 1-D linear interpolation along each row:
//!
//! ```text
//! s = i + sign·D(i, j),  clamped to [0, W−1]
//! out(i, j) = (1 − f)·src(⌊s⌋, j) + f·src(⌊s⌋ + 1, j),   f = s − ⌊s⌋
//! ```
//!
//! The same primitive reconstructs an image from its stereo partner and
//! samples one disparity map at positions given by another.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{Op, Scalar, Tape, Tensor, Var};

/// Direction in which a left-grid disparity points into the right image.
///
/// With [`DispSign::Positive`] the left view is reconstructed by sampling the
/// right view at `i + D_l`, and the right view by sampling the left view at
/// `i − D_r`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DispSign {
    #[default]
    #[serde(rename = "+1")]
    Positive,
    #[serde(rename = "-1")]
    Negative,
}

impl DispSign {
    pub fn value<T: Scalar>(self) -> T {
        match self {
            DispSign::Positive => T::one(),
            DispSign::Negative => -T::one(),
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            DispSign::Positive => DispSign::Negative,
            DispSign::Negative => DispSign::Positive,
        }
    }
}

impl fmt::Display for DispSign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DispSign::Positive => "+1",
            DispSign::Negative => "-1",
        })
    }
}

impl FromStr for DispSign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "+1" | "1" | "+" => Ok(DispSign::Positive),
            "-1" | "-" => Ok(DispSign::Negative),
            other => Err(Error::InvalidArgument(format!(
                "disparity sign must be +1 or -1, got {other:?}"
            ))),
        }
    }
}

/// Per-pixel horizontal disparity in pixels, `[B, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap<T> {
    pub values: Tensor<T>,
    pub sign: DispSign,
}

impl<T: Scalar> DisparityMap<T> {
    pub fn new(values: Tensor<T>, sign: DispSign) -> Result<Self> {
        let (_, c, _, _) = values.dims4()?;
        if c != 1 {
            return Err(Error::InvalidShape {
                op: "DisparityMap",
                msg: format!("disparity must have one channel, got {c}"),
            });
        }
        Ok(Self { values, sign })
    }
}

/// Sampling position split into a base column and interpolation weight.
/// `active` is false where the position was clamped (zero slope).
#[inline]
fn sample_pos<T: Scalar>(i: usize, d: T, sign: T, width: usize) -> (usize, T, bool) {
    let last = T::of_usize(width - 1);
    let s = T::of_usize(i) + sign * d;
    if s.is_nan() || s <= T::zero() {
        return (0, T::zero(), s == T::zero() && width > 1);
    }
    if s >= last {
        return (width - 1, T::zero(), false);
    }
    let base = s.floor();
    let i0 = base.to_usize().unwrap_or(0).min(width - 1);
    (i0, s - base, true)
}

fn check_shapes<T: Scalar>(
    source: &Tensor<T>,
    disp: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = source.dims4()?;
    let (db, dc, dh, dw) = disp.dims4()?;
    if db != b || dc != 1 || dh != h || dw != w || w == 0 {
        return Err(Error::shape("warp_horizontal", &[b, 1, h, w], disp.shape()));
    }
    Ok((b, c, h, w))
}

/// Resamples `source: [B,C,H,W]` along rows at `i + sign·disp(i, j)`.
pub fn warp_horizontal<T: Scalar>(
    source: &Tensor<T>,
    disp: &Tensor<T>,
    sign: T,
) -> Result<Tensor<T>> {
    let (_, c, h, w) = check_shapes(source, disp)?;
    let mut out = vec![T::zero(); source.len()];
    parallel::for_each_chunk_mut(&mut out, h * w, |plane_idx, dst| {
        let n = plane_idx / c;
        let src = &source.data()[plane_idx * h * w..][..h * w];
        let d = &disp.data()[n * h * w..][..h * w];
        for row in 0..h {
            let (src_row, d_row) = (&src[row * w..][..w], &d[row * w..][..w]);
            for (i, o) in dst[row * w..][..w].iter_mut().enumerate() {
                let (i0, f, _) = sample_pos(i, d_row[i], sign, w);
                // Lerp in offset form: equal neighbours reproduce exactly.
                *o = if f == T::zero() {
                    src_row[i0]
                } else {
                    src_row[i0] + f * (src_row[i0 + 1] - src_row[i0])
                };
            }
        }
    });
    Tensor::from_vec(source.shape(), out)
}

pub(crate) struct WarpGrads<T> {
    pub dsource: Option<Tensor<T>>,
    pub ddisp: Option<Tensor<T>>,
}

pub(crate) fn warp_backward<T: Scalar>(
    source: &Tensor<T>,
    disp: &Tensor<T>,
    sign: T,
    up: &Tensor<T>,
    need_source: bool,
    need_disp: bool,
) -> Result<WarpGrads<T>> {
    let (b, c, h, w) = check_shapes(source, disp)?;
    let mut dsource = need_source.then(|| vec![T::zero(); source.len()]);
    let mut ddisp = need_disp.then(|| vec![T::zero(); disp.len()]);
    for n in 0..b {
        for ch in 0..c {
            let plane = (n * c + ch) * h * w;
            for row in 0..h {
                for i in 0..w {
                    let g = up.data()[plane + row * w + i];
                    let didx = n * h * w + row * w + i;
                    let (i0, f, active) = sample_pos(i, disp.data()[didx], sign, w);
                    let base = plane + row * w + i0;
                    if let Some(ds) = dsource.as_mut() {
                        ds[base] = ds[base] + (T::one() - f) * g;
                        if f != T::zero() {
                            ds[base + 1] = ds[base + 1] + f * g;
                        }
                    }
                    if let Some(dd) = ddisp.as_mut() {
                        if active {
                            let slope = source.data()[base + 1] - source.data()[base];
                            dd[didx] = dd[didx] + g * sign * slope;
                        }
                    }
                }
            }
        }
    }
    Ok(WarpGrads {
        dsource: dsource
            .map(|d| Tensor::from_vec(source.shape(), d))
            .transpose()?,
        ddisp: ddisp
            .map(|d| Tensor::from_vec(disp.shape(), d))
            .transpose()?,
    })
}

impl<T: Scalar> Tape<T> {
    /// Differentiable [`warp_horizontal`]; gradients flow to both the source
    /// values and the disparity.
    pub fn warp_horizontal(&mut self, source: Var, disp: Var, sign: DispSign) -> Result<Var> {
        let sign = sign.value::<T>();
        let out = warp_horizontal(self.value(source), self.value(disp), sign)?;
        self.push(out, Op::Warp { source, disp, sign })
    }

    /// Samples `d_other` at `i + sign·d_ref(i, j)`; both maps are
    /// single-channel.
    pub fn resample_disparity(&mut self, d_other: Var, d_ref: Var, sign: DispSign) -> Result<Var> {
        let (_, c, _, _) = self.value(d_other).dims4()?;
        if c != 1 {
            return Err(Error::shape(
                "resample_disparity",
                self.shape(d_ref),
                self.shape(d_other),
            ));
        }
        self.warp_horizontal(d_other, d_ref, sign)
    }
}
