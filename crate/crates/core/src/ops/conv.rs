//! 2-D convolution (cross-correlation) and its adjoint, the transposed
//! convolution, lowered to im2col + GEMM per batch item.

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{Op, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// Shape-preserving 3×3 geometry used by every layer of the network.
    pub const SAME3: ConvGeom = ConvGeom {
        kernel: 3,
        stride: 1,
        padding: 1,
    };

    fn validate(self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel and stride must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Output extent of a convolution over an input of extent `n`.
    pub fn conv_out(self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.padding;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of a transposed convolution over an input of extent `n`.
    pub fn deconv_out(self, n: usize) -> Option<usize> {
        if n == 0 {
            return None;
        }
        ((n - 1) * self.stride + self.kernel).checked_sub(2 * self.padding)
    }
}

/// Layout of one image plane stack and the patch matrix derived from it.
#[derive(Clone, Copy)]
struct Patches {
    channels: usize,
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
    geom: ConvGeom,
}

impl Patches {
    fn rows(&self) -> usize {
        self.channels * self.geom.kernel * self.geom.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Valid `ow` range for kernel column `kj` when stride is 1.
    fn span(&self, kj: usize) -> (usize, usize) {
        let p = self.geom.padding;
        let lo = p.saturating_sub(kj).min(self.out_w);
        let hi = (self.width + p).saturating_sub(kj).min(self.out_w);
        (lo, hi.max(lo))
    }

    /// Fills `cols` (`rows × cols`) from `img` (`channels × height × width`).
    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let ConvGeom {
            kernel: k,
            stride: s,
            padding: p,
        } = self.geom;
        let n = self.cols();
        for c in 0..self.channels {
            let plane = &img[c * self.height * self.width..][..self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((c * k + ki) * k + kj) * n..][..n];
                    for oh in 0..self.out_h {
                        let seg = &mut row[oh * self.out_w..][..self.out_w];
                        let ih = (oh * s + ki) as isize - p as isize;
                        if ih < 0 || ih as usize >= self.height {
                            seg.fill(T::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * self.width..][..self.width];
                        if s == 1 {
                            let (lo, hi) = self.span(kj);
                            seg[..lo].fill(T::zero());
                            seg[hi..].fill(T::zero());
                            if lo < hi {
                                seg[lo..hi].copy_from_slice(&src[lo + kj - p..hi + kj - p]);
                            }
                        } else {
                            for (ow, out) in seg.iter_mut().enumerate() {
                                let iw = (ow * s + kj) as isize - p as isize;
                                *out = if iw >= 0 && (iw as usize) < self.width {
                                    src[iw as usize]
                                } else {
                                    T::zero()
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back onto `img`; the adjoint of [`Self::im2col`].
    fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let ConvGeom {
            kernel: k,
            stride: s,
            padding: p,
        } = self.geom;
        let n = self.cols();
        for c in 0..self.channels {
            let plane = &mut img[c * self.height * self.width..][..self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((c * k + ki) * k + kj) * n..][..n];
                    for oh in 0..self.out_h {
                        let seg = &row[oh * self.out_w..][..self.out_w];
                        let ih = (oh * s + ki) as isize - p as isize;
                        if ih < 0 || ih as usize >= self.height {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * self.width..][..self.width];
                        if s == 1 {
                            let (lo, hi) = self.span(kj);
                            if lo == hi {
                                continue;
                            }
                            for (d, &v) in
                                dst[lo + kj - p..hi + kj - p].iter_mut().zip(&seg[lo..hi])
                            {
                                *d = *d + v;
                            }
                        } else {
                            for (ow, &v) in seg.iter().enumerate() {
                                let iw = (ow * s + kj) as isize - p as isize;
                                if iw >= 0 && (iw as usize) < self.width {
                                    dst[iw as usize] = dst[iw as usize] + v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

fn check_bias<T: Scalar>(b: &Tensor<T>, channels: usize, op: &'static str) -> Result<()> {
    if b.shape() != [channels] {
        return Err(Error::shape(op, &[channels], b.shape()));
    }
    Ok(())
}

/// Geometry of a convolution: `x` is `[B, Cin, H, W]`, `w` is `[Cout, Cin, k, k]`.
fn conv_patches<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: ConvGeom,
) -> Result<(usize, usize, Patches)> {
    geom.validate()?;
    let (b, cin, h, wd) = x.dims4()?;
    let (cout, wcin, kh, kw) = w.dims4()?;
    if kh != geom.kernel || kw != geom.kernel {
        return Err(Error::shape(
            "conv2d",
            &[cout, wcin, geom.kernel, geom.kernel],
            w.shape(),
        ));
    }
    if wcin != cin {
        return Err(Error::ChannelMismatch {
            layer: "conv2d".into(),
            expected: wcin,
            actual: cin,
        });
    }
    let (Some(out_h), Some(out_w)) = (geom.conv_out(h), geom.conv_out(wd)) else {
        return Err(Error::InvalidShape {
            op: "conv2d",
            msg: format!(
                "input {h}x{wd} smaller than kernel {} with padding {}",
                geom.kernel, geom.padding
            ),
        });
    };
    Ok((
        b,
        cout,
        Patches {
            channels: cin,
            height: h,
            width: wd,
            out_h,
            out_w,
            geom,
        },
    ))
}

/// Geometry of a transposed convolution: `x` is `[B, Cin, H, W]`, `w` is
/// `[Cin, Cout, k, k]`. The returned patches describe the *output* image,
/// whose patch matrix has one column per input pixel.
fn deconv_patches<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: ConvGeom,
) -> Result<(usize, usize, Patches)> {
    geom.validate()?;
    let (b, cin, h, wd) = x.dims4()?;
    let (wcin, cout, kh, kw) = w.dims4()?;
    if kh != geom.kernel || kw != geom.kernel {
        return Err(Error::shape(
            "deconv2d",
            &[wcin, cout, geom.kernel, geom.kernel],
            w.shape(),
        ));
    }
    if wcin != cin {
        return Err(Error::ChannelMismatch {
            layer: "deconv2d".into(),
            expected: wcin,
            actual: cin,
        });
    }
    let (Some(oh), Some(ow)) = (geom.deconv_out(h), geom.deconv_out(wd)) else {
        return Err(Error::InvalidShape {
            op: "deconv2d",
            msg: format!("input {h}x{wd} too small for padding {}", geom.padding),
        });
    };
    if oh == 0 || ow == 0 || geom.conv_out(oh) != Some(h) || geom.conv_out(ow) != Some(wd) {
        return Err(Error::InvalidShape {
            op: "deconv2d",
            msg: format!("geometry {geom:?} has no exact adjoint for input {h}x{wd}"),
        });
    }
    Ok((
        b,
        cin,
        Patches {
            channels: cout,
            height: oh,
            width: ow,
            out_h: h,
            out_w: wd,
            geom,
        },
    ))
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &bv) in out.chunks_mut(plane).zip(bias) {
        for v in chunk {
            *v = *v + bv;
        }
    }
}

fn channel_sums<T: Scalar>(data: &[T], plane: usize) -> Vec<T> {
    data.chunks(plane)
        .map(|c| c.iter().fold(T::zero(), |a, &v| a + v))
        .collect()
}

/// Sums per-item buffers in item order.
fn ordered_sum<T: Scalar>(parts: impl Iterator<Item = Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a = *a + v;
        }
    }
    acc
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let (batch, cout, pt) = conv_patches(x, w, geom)?;
    check_bias(b, cout, "conv2d")?;
    let in_len = pt.channels * pt.height * pt.width;
    let out_plane = pt.cols();
    let mut out = vec![T::zero(); batch * cout * out_plane];
    parallel::for_each_chunk_mut(&mut out, cout * out_plane, |i, dst| {
        let mut cols = vec![T::zero(); pt.rows() * pt.cols()];
        pt.im2col(&x.data()[i * in_len..][..in_len], &mut cols);
        T::gemm(
            cout,
            pt.rows(),
            pt.cols(),
            w.data(),
            (pt.rows(), 1),
            &cols,
            (pt.cols(), 1),
            dst,
            false,
        );
        add_bias(dst, b.data(), out_plane);
    });
    Tensor::from_vec([batch, cout, pt.out_h, pt.out_w], out)
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    up: &Tensor<T>,
    geom: ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> Result<ConvGrads<T>> {
    let (batch, cout, pt) = conv_patches(x, w, geom)?;
    let in_len = pt.channels * pt.height * pt.width;
    let (rows, cols_n) = (pt.rows(), pt.cols());
    let per_item = parallel::map_indices(batch, |i| {
        let dout = &up.data()[i * cout * cols_n..][..cout * cols_n];
        let mut cols = vec![T::zero(); rows * cols_n];
        let dw = need_dw.then(|| {
            pt.im2col(&x.data()[i * in_len..][..in_len], &mut cols);
            let mut dw = vec![T::zero(); cout * rows];
            T::gemm(
                cout,
                cols_n,
                rows,
                dout,
                (cols_n, 1),
                &cols,
                (1, cols_n),
                &mut dw,
                false,
            );
            (dw, channel_sums(dout, cols_n))
        });
        let dx = need_dx.then(|| {
            T::gemm(
                rows,
                cout,
                cols_n,
                w.data(),
                (1, rows),
                dout,
                (cols_n, 1),
                &mut cols,
                false,
            );
            let mut dx = vec![T::zero(); in_len];
            pt.col2im(&cols, &mut dx);
            dx
        });
        (dx, dw)
    });
    finish_grads(per_item, x.shape(), w.shape(), cout)
}

pub(crate) fn deconv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let (batch, cin, pt) = deconv_patches(x, w, geom)?;
    let cout = pt.channels;
    check_bias(b, cout, "deconv2d")?;
    let in_plane = pt.cols();
    let out_len = cout * pt.height * pt.width;
    let mut out = vec![T::zero(); batch * out_len];
    parallel::for_each_chunk_mut(&mut out, out_len, |i, dst| {
        let xi = &x.data()[i * cin * in_plane..][..cin * in_plane];
        let mut cols = vec![T::zero(); pt.rows() * in_plane];
        T::gemm(
            pt.rows(),
            cin,
            in_plane,
            w.data(),
            (1, pt.rows()),
            xi,
            (in_plane, 1),
            &mut cols,
            false,
        );
        pt.col2im(&cols, dst);
        add_bias(dst, b.data(), pt.height * pt.width);
    });
    Tensor::from_vec([batch, cout, pt.height, pt.width], out)
}

pub(crate) fn deconv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    up: &Tensor<T>,
    geom: ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> Result<ConvGrads<T>> {
    let (batch, cin, pt) = deconv_patches(x, w, geom)?;
    let cout = pt.channels;
    let in_plane = pt.cols();
    let rows = pt.rows();
    let out_len = cout * pt.height * pt.width;
    let per_item = parallel::map_indices(batch, |i| {
        let dout = &up.data()[i * out_len..][..out_len];
        let mut cols = vec![T::zero(); rows * in_plane];
        pt.im2col(dout, &mut cols);
        let dx = need_dx.then(|| {
            let mut dx = vec![T::zero(); cin * in_plane];
            T::gemm(
                cin,
                rows,
                in_plane,
                w.data(),
                (rows, 1),
                &cols,
                (in_plane, 1),
                &mut dx,
                false,
            );
            dx
        });
        let dw = need_dw.then(|| {
            let xi = &x.data()[i * cin * in_plane..][..cin * in_plane];
            let mut dw = vec![T::zero(); cin * rows];
            T::gemm(
                cin,
                in_plane,
                rows,
                xi,
                (in_plane, 1),
                &cols,
                (1, in_plane),
                &mut dw,
                false,
            );
            (dw, channel_sums(dout, pt.height * pt.width))
        });
        (dx, dw)
    });
    finish_grads(per_item, x.shape(), w.shape(), cout)
}

type ItemGrads<T> = (Option<Vec<T>>, Option<(Vec<T>, Vec<T>)>);

fn finish_grads<T: Scalar>(
    per_item: Vec<ItemGrads<T>>,
    x_shape: &[usize],
    w_shape: &[usize],
    bias_len: usize,
) -> Result<ConvGrads<T>> {
    let need_dx = per_item.first().is_some_and(|p| p.0.is_some());
    let need_dw = per_item.first().is_some_and(|p| p.1.is_some());
    let w_len: usize = w_shape.iter().product();
    let mut dx_data = Vec::new();
    let mut dws = Vec::new();
    let mut dbs = Vec::new();
    for (dx, dw) in per_item {
        if let Some(dx) = dx {
            dx_data.extend(dx);
        }
        if let Some((dw, db)) = dw {
            dws.push(dw);
            dbs.push(db);
        }
    }
    Ok(ConvGrads {
        dx: if need_dx {
            Some(Tensor::from_vec(x_shape, dx_data)?)
        } else {
            None
        },
        dw: if need_dw {
            Some(Tensor::from_vec(
                w_shape,
                ordered_sum(dws.into_iter(), w_len),
            )?)
        } else {
            None
        },
        db: if need_dw {
            Some(Tensor::from_vec(
                [bias_len],
                ordered_sum(dbs.into_iter(), bias_len),
            )?)
        } else {
            None
        },
    })
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation of `x: [B,Cin,H,W]` with `w: [Cout,Cin,k,k]` plus
    /// per-channel bias `b: [Cout]`, zero padded.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b), geom)?;
        self.push(out, Op::Conv2d { x, w, b, geom })
    }

    /// Transposed convolution of `x: [B,Cin,H,W]` with `w: [Cin,Cout,k,k]`:
    /// the linear adjoint of [`Tape::conv2d`] with the same weight tensor,
    /// plus bias `b: [Cout]`.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let out = deconv2d_forward(self.value(x), self.value(w), self.value(b), geom)?;
        self.push(out, Op::Deconv2d { x, w, b, geom })
    }
}
