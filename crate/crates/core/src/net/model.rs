use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spec::{LayerDesc, LayerKind, LayerSpec, POOLS};
use crate::error::{Error, Result};
use crate::ops::{BatchStats, BnMode, BnStats, ConvGeom, PoolIndices};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Basic (single stream, left image only) or Siamese (shared weights on
/// both views plus the consistency term).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Basic,
    #[default]
    Siamese,
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(Arch::Basic),
            "siamese" => Ok(Arch::Siamese),
            other => Err(Error::InvalidArgument(format!(
                "architecture must be basic or siamese, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Basic => "basic",
            Arch::Siamese => "siamese",
        })
    }
}

#[derive(Clone, Debug)]
pub struct BnLayer<T> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BnStats<T>,
}

/// Parameters of one convolution or deconvolution layer.
#[derive(Clone, Debug)]
pub struct LayerParams<T> {
    /// Index into [`LayerSpec::layers`].
    pub spec_index: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    pub bn: Option<BnLayer<T>>,
}

/// Learnable parameter totals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    /// Convolution/deconvolution kernel elements.
    pub weights: usize,
    pub biases: usize,
    /// Batch-norm gamma and beta.
    pub bn_affine: usize,
    /// Batch-norm running mean and variance (not learnable).
    pub bn_buffers: usize,
}

impl ParamCounts {
    pub fn learnable(&self) -> usize {
        self.weights + self.biases + self.bn_affine
    }
}

/// Statistics from a train-mode pass, keyed by position in
/// [`NetworkParams::layers`].
pub type StreamStats<T> = Vec<(usize, BatchStats<T>)>;

/// Result of running the autoencoder on one view.
pub struct StreamOutput<T> {
    /// `[B, 1, H, W]` disparity in pixels, inside `(0, d_max)`.
    pub disparity: Var,
    pub batch_stats: StreamStats<T>,
}

/// The autoencoder's parameters. In the Siamese configuration both streams
/// read this one instance; nothing is duplicated.
#[derive(Clone, Debug)]
pub struct NetworkParams<T> {
    pub spec: LayerSpec,
    /// Upper bound of the disparity head, in pixels.
    pub d_max: f64,
    pub store: ParamStore<T>,
    pub layers: Vec<LayerParams<T>>,
}

/// Inclusive-exclusive Glorot bound for a `k×k` layer.
fn init_bound(cin: usize, cout: usize, k: usize) -> f64 {
    (6.0 / ((cin * k * k + cout * k * k) as f64)).sqrt()
}

impl<T: Scalar> NetworkParams<T> {
    /// Builds the network at channel factor `scale` with weights drawn
    /// uniformly in `±sqrt(6 / (fan_in + fan_out))`, zero biases, unit
    /// gamma and zero beta. Identical seeds give identical parameters.
    pub fn build(scale: f64, d_max: f64, seed: u64) -> Result<Self> {
        if !(d_max > 0.0 && d_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "d_max must be positive, got {d_max}"
            )));
        }
        let spec = LayerSpec::new(scale)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        for (spec_index, desc) in spec.layers.iter().enumerate() {
            if !desc.is_learnable() {
                continue;
            }
            let (cin, cout, k) = (desc.in_channels, desc.out_channels, desc.kernel);
            let shape = match desc.kind {
                LayerKind::Conv => [cout, cin, k, k],
                _ => [cin, cout, k, k],
            };
            let bound = init_bound(cin, cout, k);
            let n = cin * cout * k * k;
            let w: Vec<T> = (0..n)
                .map(|_| T::of_f64(rng.gen_range(-bound..bound)))
                .collect();
            let weight =
                store.insert(format!("{}.weight", desc.name), Tensor::from_vec(shape, w)?)?;
            let bias = store.insert(format!("{}.bias", desc.name), Tensor::zeros([cout]))?;
            let bn = if desc.norm_act {
                Some(BnLayer {
                    gamma: store.insert(format!("{}.bn.gamma", desc.name), Tensor::ones([cout]))?,
                    beta: store.insert(format!("{}.bn.beta", desc.name), Tensor::zeros([cout]))?,
                    stats: BnStats::new(cout),
                })
            } else {
                None
            };
            layers.push(LayerParams {
                spec_index,
                weight,
                bias,
                bn,
            });
        }
        Ok(Self {
            spec,
            d_max,
            store,
            layers,
        })
    }

    pub fn counts(&self) -> ParamCounts {
        let mut c = ParamCounts::default();
        for l in &self.layers {
            c.weights += self.store.value(l.weight).len();
            c.biases += self.store.value(l.bias).len();
            if let Some(bn) = &l.bn {
                c.bn_affine += self.store.value(bn.gamma).len() + self.store.value(bn.beta).len();
                c.bn_buffers += 2 * bn.stats.channels();
            }
        }
        c
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = *shape else {
            return Err(Error::InvalidShape {
                op: "network input",
                msg: format!("expected [B, 3, H, W], got {shape:?}"),
            });
        };
        let expected = self.spec.layers[0].in_channels;
        if c != expected {
            return Err(Error::ChannelMismatch {
                layer: self.spec.layers[0].name.clone(),
                expected,
                actual: c,
            });
        }
        let multiple = 1usize << POOLS;
        if h == 0 || w == 0 || h % multiple != 0 || w % multiple != 0 {
            return Err(Error::IndivisibleSize {
                height: h,
                width: w,
                multiple,
            });
        }
        Ok(())
    }

    /// Runs one stream: encoder (recording five pooling index sets), decoder
    /// (consuming them in reverse), output conv, then `d_max · sigmoid`.
    pub fn forward(&self, tape: &mut Tape<T>, image: Var, mode: BnMode) -> Result<StreamOutput<T>> {
        self.forward_observed(tape, image, mode, |_, _, _| {})
    }

    /// [`forward`](Self::forward) that reports the output of every entry
    /// of the layer schedule (after batch norm and ReLU where present).
    pub fn forward_observed(
        &self,
        tape: &mut Tape<T>,
        image: Var,
        mode: BnMode,
        mut observe: impl FnMut(&LayerDesc, &Tape<T>, Var),
    ) -> Result<StreamOutput<T>> {
        self.check_input(tape.shape(image))?;
        let mut x = image;
        let mut pools: Vec<PoolIndices> = Vec::with_capacity(POOLS as usize);
        let mut batch_stats = Vec::new();
        let mut learnable = self.layers.iter().enumerate();
        for desc in &self.spec.layers {
            match desc.kind {
                LayerKind::Pool => {
                    let (y, idx) = tape.maxpool2(x)?;
                    pools.push(idx);
                    x = y;
                }
                LayerKind::Unpool => {
                    let idx = pools.pop().ok_or_else(|| {
                        Error::InvalidArgument(format!("{} has no paired pooling layer", desc.name))
                    })?;
                    x = tape.maxunpool2(x, &idx)?;
                }
                LayerKind::Conv | LayerKind::Deconv => {
                    let (li, layer) = learnable
                        .next()
                        .expect("one parameter set per learnable layer");
                    let actual = tape.shape(x)[1];
                    if actual != desc.in_channels {
                        return Err(Error::ChannelMismatch {
                            layer: desc.name.clone(),
                            expected: desc.in_channels,
                            actual,
                        });
                    }
                    let w = tape.param(&self.store, layer.weight);
                    let b = tape.param(&self.store, layer.bias);
                    x = if desc.kind == LayerKind::Conv {
                        tape.conv2d(x, w, b, ConvGeom::SAME3)?
                    } else {
                        tape.deconv2d(x, w, b, ConvGeom::SAME3)?
                    };
                    if let Some(bn) = &layer.bn {
                        let gamma = tape.param(&self.store, bn.gamma);
                        let beta = tape.param(&self.store, bn.beta);
                        let (y, stats) = tape.batchnorm(x, gamma, beta, &bn.stats, mode)?;
                        if let Some(s) = stats {
                            batch_stats.push((li, s));
                        }
                        x = tape.relu(y)?;
                    }
                }
            }
            observe(desc, tape, x);
        }
        let s = tape.sigmoid(x)?;
        let disparity = tape.scale(s, T::of_f64(self.d_max))?;
        Ok(StreamOutput {
            disparity,
            batch_stats,
        })
    }

    /// Single-stream network on the left view.
    pub fn forward_basic(
        &self,
        tape: &mut Tape<T>,
        left: Var,
        mode: BnMode,
    ) -> Result<StreamOutput<T>> {
        self.forward(tape, left, mode)
    }

    /// Both views through the same parameters. Each stream keeps its own
    /// batch statistics; gradients from both meet in the shared parameter
    /// nodes of the tape.
    pub fn forward_siamese(
        &self,
        tape: &mut Tape<T>,
        left: Var,
        right: Var,
        mode: BnMode,
    ) -> Result<(StreamOutput<T>, StreamOutput<T>)> {
        if tape.shape(left) != tape.shape(right) {
            return Err(Error::shape(
                "forward_siamese",
                tape.shape(left),
                tape.shape(right),
            ));
        }
        let l = self.forward(tape, left, mode)?;
        let r = self.forward(tape, right, mode)?;
        Ok((l, r))
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats<T>)]) {
        for (li, s) in stats {
            if let Some(bn) = self.layers[*li].bn.as_mut() {
                bn.stats.update(s);
            }
        }
    }

    /// Infer-mode disparity for a `[B, 3, H, W]` (or `[3, H, W]`) image.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let image = if image.rank() == 3 {
            image
                .clone()
                .reshape([1, image.shape()[0], image.shape()[1], image.shape()[2]])?
        } else {
            image.clone()
        };
        let mut tape = Tape::new();
        let x = tape.constant(image);
        let out = self.forward(&mut tape, x, BnMode::Infer)?;
        Ok(tape.value(out.disparity).clone())
    }

    /// Copy in another precision, including batch-norm statistics.
    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        NetworkParams {
            spec: self.spec.clone(),
            d_max: self.d_max,
            store: self.store.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    spec_index: l.spec_index,
                    weight: l.weight,
                    bias: l.bias,
                    bn: l.bn.as_ref().map(|bn| BnLayer {
                        gamma: bn.gamma,
                        beta: bn.beta,
                        stats: BnStats {
                            running_mean: bn.stats.running_mean.cast(),
                            running_var: bn.stats.running_var.cast(),
                            momentum: U::of_f64(bn.stats.momentum.as_f64()),
                            eps: U::of_f64(bn.stats.eps.as_f64()),
                        },
                    }),
                })
                .collect(),
        }
    }

    /// Layer name for an entry of [`Self::layers`].
    pub fn layer_name(&self, li: usize) -> &str {
        &self.spec.layers[self.layers[li].spec_index].name
    }
}
