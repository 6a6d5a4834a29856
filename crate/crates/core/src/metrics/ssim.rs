use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
/// Dynamic range of the inputs.
pub const RANGE: f64 = 1.0;

/// Grayscale plane of a `[1|3, H, W]` or `[1, 1|3, H, W]` image; RGB is
/// converted with Rec. 601 luma weights.
pub fn luminance<T: Scalar>(img: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    let (c, h, w) = match *img.shape() {
        [c, h, w] | [1, c, h, w] => (c, h, w),
        _ => {
            return Err(Error::InvalidShape {
                op: "ssim",
                msg: format!("expected a single [C, H, W] image, got {:?}", img.shape()),
            })
        }
    };
    let d = img.data();
    let plane = h * w;
    let y = match c {
        1 => d.iter().map(|v| v.as_f64()).collect(),
        3 => (0..plane)
            .map(|p| {
                0.299 * d[p].as_f64()
                    + 0.587 * d[plane + p].as_f64()
                    + 0.114 * d[2 * plane + p].as_f64()
            })
            .collect(),
        _ => {
            return Err(Error::InvalidShape {
                op: "ssim",
                msg: format!("expected 1 or 3 channels, got {c}"),
            })
        }
    };
    Ok((h, w, y))
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let r = (WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Valid-region separable filtering of an `h × w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - WINDOW, w + 1 - WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..WINDOW).map(|t| k[t] * src[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|t| k[t] * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Mean of the SSIM map over every full 11×11 Gaussian window, computed in
/// double precision on luminance.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", a.shape(), b.shape()));
    }
    let (h, w, ya) = luminance(a)?;
    let (_, _, yb) = luminance(b)?;
    if h < WINDOW || w < WINDOW {
        return Err(Error::InvalidShape {
            op: "ssim",
            msg: format!("image {h}x{w} is smaller than the {WINDOW}x{WINDOW} window"),
        });
    }
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let mu_a = filter_valid(&ya, h, w, &k);
    let mu_b = filter_valid(&yb, h, w, &k);
    let e_aa = filter_valid(&prod(&ya, &ya), h, w, &k);
    let e_bb = filter_valid(&prod(&yb, &yb), h, w, &k);
    let e_ab = filter_valid(&prod(&ya, &yb), h, w, &k);
    let c1 = (K1 * RANGE).powi(2);
    let c2 = (K2 * RANGE).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}
