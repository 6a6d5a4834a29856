//! 2×2 max pooling with recorded argmax positions and the matching max
//! unpooling used by the decoder.

use crate::error::{Error, Result};
use crate::tensor::{Op, Scalar, Tape, Tensor, Var};

/// Argmax positions of a 2×2/stride-2 max pool. Each entry is the flat
/// offset (`row * width + col`) of the winning element inside its source
/// plane; the pooled output has the same shape as this index array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: [usize; 4],
    indices: Vec<u32>,
}

impl PoolIndices {
    /// Shape of the tensor that was pooled (and that unpooling restores).
    pub fn input_shape(&self) -> [usize; 4] {
        self.input_shape
    }

    pub fn output_shape(&self) -> [usize; 4] {
        let [b, c, h, w] = self.input_shape;
        [b, c, h / 2, w / 2]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.indices
    }

    /// Position of entry `i` within its own 2×2 window, in row-major window
    /// order (0 = top-left .. 3 = bottom-right).
    pub fn window_offset(&self, i: usize) -> usize {
        let [_, _, h, w] = self.input_shape;
        let (oh, ow) = (h / 2, w / 2);
        let pos = i % (oh * ow);
        let (r, c) = (pos / ow, pos % ow);
        let flat = self.indices[i] as usize;
        let (y, x) = (flat / w, flat % w);
        debug_assert!(y / 2 == r && x / 2 == c);
        (y - 2 * r) * 2 + (x - 2 * c)
    }
}

pub(crate) fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::InvalidShape {
            op: "maxpool2",
            msg: format!("extent {h}x{w} must be even and non-zero"),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut idx = Vec::with_capacity(b * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for r in 0..oh {
            for col in 0..ow {
                let mut best = 2 * r * w + 2 * col;
                // window order: (0,0) (0,1) (1,0) (1,1); ties keep the first
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let p = (2 * r + dy) * w + 2 * col + dx;
                    if plane[p] > plane[best] {
                        best = p;
                    }
                }
                out.push(plane[best]);
                idx.push(best as u32);
            }
        }
    }
    Ok((
        Tensor::from_vec([b, c, oh, ow], out)?,
        PoolIndices {
            input_shape: [b, c, h, w],
            indices: idx,
        },
    ))
}

pub(crate) fn maxpool2_backward<T: Scalar>(up: &Tensor<T>, idx: &PoolIndices) -> Result<Tensor<T>> {
    scatter(up, idx, "maxpool2 backward")
}

fn scatter<T: Scalar>(src: &Tensor<T>, idx: &PoolIndices, op: &'static str) -> Result<Tensor<T>> {
    if src.shape() != idx.output_shape() {
        return Err(Error::shape(op, &idx.output_shape(), src.shape()));
    }
    let [_, _, h, w] = idx.input_shape;
    let mut out = Tensor::zeros(idx.input_shape);
    let per_plane = (h / 2) * (w / 2);
    for ((dst, vals), ids) in out
        .data_mut()
        .chunks_mut(h * w)
        .zip(src.data().chunks(per_plane))
        .zip(idx.indices.chunks(per_plane))
    {
        for (&v, &i) in vals.iter().zip(ids) {
            dst[i as usize] = dst[i as usize] + v;
        }
    }
    Ok(out)
}

fn gather<T: Scalar>(src: &Tensor<T>, idx: &PoolIndices, op: &'static str) -> Result<Tensor<T>> {
    if src.shape() != idx.input_shape {
        return Err(Error::shape(op, &idx.input_shape, src.shape()));
    }
    let [_, _, h, w] = idx.input_shape;
    let per_plane = (h / 2) * (w / 2);
    let mut out = Vec::with_capacity(idx.indices.len());
    for (plane, ids) in src.data().chunks(h * w).zip(idx.indices.chunks(per_plane)) {
        out.extend(ids.iter().map(|&i| plane[i as usize]));
    }
    Tensor::from_vec(idx.output_shape(), out)
}

pub(crate) fn maxunpool2_forward<T: Scalar>(x: &Tensor<T>, idx: &PoolIndices) -> Result<Tensor<T>> {
    scatter(x, idx, "maxunpool2")
}

pub(crate) fn maxunpool2_backward<T: Scalar>(
    up: &Tensor<T>,
    idx: &PoolIndices,
) -> Result<Tensor<T>> {
    gather(up, idx, "maxunpool2 backward")
}

impl<T: Scalar> Tape<T> {
    /// 2×2/stride-2 max pooling. Returns the pooled values and the argmax
    /// positions needed by [`Tape::maxunpool2`].
    pub fn maxpool2(&mut self, x: Var) -> Result<(Var, PoolIndices)> {
        let (out, indices) = maxpool2_forward(self.value(x))?;
        let v = self.push(
            out,
            Op::MaxPool {
                x,
                indices: indices.clone(),
            },
        )?;
        Ok((v, indices))
    }

    /// Doubles both spatial extents, writing each value at its recorded
    /// argmax position and zero elsewhere.
    pub fn maxunpool2(&mut self, x: Var, indices: &PoolIndices) -> Result<Var> {
        let out = maxunpool2_forward(self.value(x), indices)?;
        self.push(
            out,
            Op::MaxUnpool {
                x,
                indices: indices.clone(),
            },
        )
    }
}
