use crate::data::StereoSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Box sum over a `window × window` neighbourhood with edge replication.
fn box_sum(src: &[f32], h: usize, w: usize, window: usize) -> Vec<f32> {
    let r = (window / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut rows = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = (-r..=r)
                .map(|t| src[y * w + clamp(x as isize + t, w)])
                .sum();
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|t| rows[clamp(y as isize + t, h) * w + x])
                .sum();
        }
    }
    out
}

/// Winner-take-all disparity on the left grid: for each pixel the integer
/// `d ∈ [0, max_disp]` minimising the windowed sum of absolute RGB
/// differences between the left view and the right view sampled at
/// `i + sign·d` (clamped). Ties resolve to the smallest `d`.
/// Returns `[1, H, W]`.
pub fn block_match(sample: &StereoSample, max_disp: usize, window: usize) -> Result<Tensor<f32>> {
    let (l, r) = (&sample.left, &sample.right);
    if l.shape() != r.shape() || l.rank() != 3 {
        return Err(Error::shape("block_match", l.shape(), r.shape()));
    }
    let (c, h, w) = (l.shape()[0], l.shape()[1], l.shape()[2]);
    if window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "window must be odd, got {window}"
        )));
    }
    if max_disp >= w {
        return Err(Error::InvalidArgument(format!(
            "max disparity {max_disp} must be below the width {w}"
        )));
    }
    let sign: isize = sample.disp_sign.value::<f32>() as isize;
    let mut best = vec![f32::INFINITY; h * w];
    let mut best_d = vec![0.0f32; h * w];
    let mut cost = vec![0.0f32; h * w];
    for d in 0..=max_disp {
        cost.fill(0.0);
        for ch in 0..c {
            let (lp, rp) = (
                &l.data()[ch * h * w..][..h * w],
                &r.data()[ch * h * w..][..h * w],
            );
            for y in 0..h {
                for x in 0..w {
                    let xs = (x as isize + sign * d as isize).clamp(0, w as isize - 1) as usize;
                    cost[y * w + x] += (lp[y * w + x] - rp[y * w + xs]).abs();
                }
            }
        }
        for (p, s) in box_sum(&cost, h, w, window).into_iter().enumerate() {
            if s < best[p] {
                best[p] = s;
                best_d[p] = d as f32;
            }
        }
    }
    Tensor::from_vec([1, h, w], best_d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sample, interior_columns, DisparityKind, SynthParams};

    fn params() -> SynthParams {
        SynthParams {
            width: 64,
            height: 32,
            ..SynthParams::default()
        }
    }

    #[test]
    fn recovers_constant_integer_disparity() {
        for d in [1.0, 4.0, 7.0] {
            let s = generate_sample(&params(), &DisparityKind::Constant(d), 21, "c").unwrap();
            let est = block_match(&s, 12, 9).unwrap();
            for y in 0..32 {
                for x in interior_columns(64, 12.0) {
                    assert_eq!(est.data()[y * 64 + x], d as f32, "at ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn identical_views_give_zero() {
        let mut s = generate_sample(&params(), &DisparityKind::Constant(3.0), 2, "z").unwrap();
        s.left = s.right.clone();
        assert!(block_match(&s, 10, 5)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(block_match(&s, 0, 5)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn preconditions() {
        let s = generate_sample(&params(), &DisparityKind::Constant(3.0), 2, "z").unwrap();
        assert!(block_match(&s, 4, 4).is_err());
        assert!(block_match(&s, 64, 5).is_err());
    }
}
