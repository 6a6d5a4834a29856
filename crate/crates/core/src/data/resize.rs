use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Source coordinate taps `(i0, i1, frac)` for each output index, using the
/// half-pixel-centre mapping `src = (dst + 0.5)·in/out − 0.5`, clamped.
fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Separable bilinear resampling of the last two axes to `height × width`.
pub fn resize_bilinear(img: &Tensor<f32>, width: usize, height: usize) -> Result<Tensor<f32>> {
    let rank = img.rank();
    if rank < 2 {
        return Err(Error::InvalidShape {
            op: "resize_bilinear",
            msg: format!("need at least 2 axes, got {:?}", img.shape()),
        });
    }
    let (h, w) = (img.shape()[rank - 2], img.shape()[rank - 1]);
    if width == 0 || height == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot resize {h}x{w} to {height}x{width}"
        )));
    }
    if (h, w) == (height, width) {
        return Ok(img.clone());
    }
    let planes = img.len() / (h * w);
    let (tx, ty) = (taps(w, width), taps(h, height));
    let mut out = Vec::with_capacity(planes * height * width);
    let mut rows = vec![0.0f32; h * width];
    for p in 0..planes {
        let src = &img.data()[p * h * w..][..h * w];
        for r in 0..h {
            for (x, &(i0, i1, f)) in tx.iter().enumerate() {
                rows[r * width + x] = (1.0 - f) * src[r * w + i0] + f * src[r * w + i1];
            }
        }
        for &(j0, j1, f) in &ty {
            for x in 0..width {
                out.push((1.0 - f) * rows[j0 * width + x] + f * rows[j1 * width + x]);
            }
        }
    }
    let mut shape = img.shape().to_vec();
    shape[rank - 2] = height;
    shape[rank - 1] = width;
    Tensor::from_vec(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_row() {
        let t = Tensor::from_vec([1, 2], vec![0.0, 1.0]).unwrap();
        let r = resize_bilinear(&t, 4, 1).unwrap();
        assert_eq!(r.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn same_size_identity_and_constants() {
        let t = Tensor::from_vec([2, 3, 4], (0..24).map(|v| v as f32 / 24.0).collect()).unwrap();
        assert_eq!(resize_bilinear(&t, 4, 3).unwrap(), t);
        let c = Tensor::full([3, 5, 7], 0.37f32);
        for (w, h) in [(1, 1), (13, 2), (7, 11)] {
            let r = resize_bilinear(&c, w, h).unwrap();
            assert_eq!(r.shape(), &[3, h, w]);
            assert!(r.data().iter().all(|&v| (v - 0.37).abs() < 1e-6));
        }
    }

    #[test]
    fn downsample_by_two_averages_pairs() {
        let t = Tensor::from_vec([1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(resize_bilinear(&t, 2, 1).unwrap().data(), &[0.5, 2.5]);
    }
}
