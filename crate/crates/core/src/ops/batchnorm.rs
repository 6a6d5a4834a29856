//! Per-channel batch normalization over batch × height × width.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Op, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    /// Normalize with batch statistics and report them for running updates.
    Train,
    /// Normalize with the running statistics.
    Infer,
}

/// Non-learnable batch-norm state.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::ones([channels]),
            momentum: T::of_f64(0.1),
            eps: T::of_f64(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// `running ← (1 − momentum)·running + momentum·batch`; the variance
    /// update uses the unbiased batch variance.
    pub fn update(&mut self, batch: &BatchStats<T>) {
        let m = self.momentum;
        let keep = T::one() - m;
        let n = T::of_usize(batch.count);
        let unbias = if batch.count > 1 {
            n / (n - T::one())
        } else {
            T::one()
        };
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&batch.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&batch.var) {
            *r = keep * *r + m * b * unbias;
        }
    }
}

/// Batch statistics observed in a train-mode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Elements per channel.
    pub count: usize,
}

/// Forward quantities kept for the backward rule.
#[derive(Debug)]
pub struct BnSaved<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    /// Batch statistics couple every element of a channel (train mode).
    batch_coupled: bool,
}

pub(crate) struct BnGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dgamma: Tensor<T>,
    pub dbeta: Tensor<T>,
}

fn channel_views<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    Ok((b, c, h * w))
}

/// Iterates the `(batch, plane)` slices belonging to channel `c`.
fn planes<'a, T>(
    data: &'a [T],
    b: usize,
    c: usize,
    channels: usize,
    plane: usize,
) -> impl Iterator<Item = &'a [T]> + 'a {
    (0..b).map(move |n| &data[(n * channels + c) * plane..][..plane])
}

/// Output, values saved for the backward pass, and train-mode statistics.
type Forward<T> = (Tensor<T>, BnSaved<T>, Option<BatchStats<T>>);

pub(crate) fn forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &BnStats<T>,
    mode: BnMode,
) -> Result<Forward<T>> {
    let (b, c, plane) = channel_views(x)?;
    for p in [gamma, beta, &stats.running_mean, &stats.running_var] {
        if p.shape() != [c] {
            return Err(Error::shape("batchnorm", &[c], p.shape()));
        }
    }
    let count = b * plane;
    let (mean, var) = match mode {
        BnMode::Train => {
            if count <= 1 {
                return Err(Error::InvalidShape {
                    op: "batchnorm",
                    msg: format!("train mode needs more than one value per channel, got {count}"),
                });
            }
            let n = T::of_usize(count);
            let mut mean = Vec::with_capacity(c);
            let mut var = Vec::with_capacity(c);
            for ch in 0..c {
                let s = planes(x.data(), b, ch, c, plane)
                    .flatten()
                    .fold(T::zero(), |a, &v| a + v);
                let mu = s / n;
                let ss = planes(x.data(), b, ch, c, plane)
                    .flatten()
                    .fold(T::zero(), |a, &v| a + (v - mu) * (v - mu));
                mean.push(mu);
                var.push(ss / n);
            }
            (mean, var)
        }
        BnMode::Infer => (
            stats.running_mean.data().to_vec(),
            stats.running_var.data().to_vec(),
        ),
    };
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v + stats.eps).sqrt())
        .collect();
    let mut xhat = x.clone();
    let mut out = x.clone();
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * plane;
            let (mu, is, g, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in off..off + plane {
                let h = (x.data()[i] - mu) * is;
                xhat.data_mut()[i] = h;
                out.data_mut()[i] = g * h + bt;
            }
        }
    }
    let batch = (mode == BnMode::Train).then_some(BatchStats { mean, var, count });
    let saved = BnSaved {
        xhat,
        inv_std,
        batch_coupled: mode == BnMode::Train,
    };
    Ok((out, saved, batch))
}

pub(crate) fn backward<T: Scalar>(
    gamma: &Tensor<T>,
    up: &Tensor<T>,
    saved: &BnSaved<T>,
    need_dx: bool,
) -> Result<BnGrads<T>> {
    let (b, c, plane) = channel_views(up)?;
    let count = T::of_usize(b * plane);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        for (g, h) in
            planes(up.data(), b, ch, c, plane).zip(planes(saved.xhat.data(), b, ch, c, plane))
        {
            for (&gv, &hv) in g.iter().zip(h) {
                dgamma[ch] = dgamma[ch] + gv * hv;
                dbeta[ch] = dbeta[ch] + gv;
            }
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = up.clone();
        for n in 0..b {
            for ch in 0..c {
                let off = (n * c + ch) * plane;
                let scale = gamma.data()[ch] * saved.inv_std[ch];
                for i in off..off + plane {
                    let g = up.data()[i];
                    dx.data_mut()[i] = if saved.batch_coupled {
                        scale / count * (count * g - dbeta[ch] - saved.xhat.data()[i] * dgamma[ch])
                    } else {
                        scale * g
                    };
                }
            }
        }
        dx
    });
    Ok(BnGrads {
        dx,
        dgamma: Tensor::from_vec([c], dgamma)?,
        dbeta: Tensor::from_vec([c], dbeta)?,
    })
}

impl<T: Scalar> Tape<T> {
    /// Batch normalization followed by the per-channel affine map
    /// `gamma · x̂ + beta`. In train mode the observed batch statistics are
    /// returned so the caller can fold them into `stats`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &BnStats<T>,
        mode: BnMode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (out, saved, batch) = forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            stats,
            mode,
        )?;
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            },
        )?;
        Ok((v, batch))
    }
}
