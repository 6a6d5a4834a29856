use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Deconv,
    Pool,
    Unpool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
    /// Zero for pooling layers.
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Batch norm + ReLU follow this layer.
    pub norm_act: bool,
}

impl LayerDesc {
    pub fn is_learnable(&self) -> bool {
        matches!(self.kind, LayerKind::Conv | LayerKind::Deconv)
    }

    pub fn weight_count(&self) -> usize {
        if self.is_learnable() {
            self.in_channels * self.out_channels * self.kernel * self.kernel
        } else {
            0
        }
    }
}

use LayerKind::*;

/// `(name, kind, in, out, kernel, stride)` for the full-width autoencoder.
/// Encoder: VGG-style conv blocks with five 2×2 poolings and a `conv6`
/// bottleneck. Decoder: mirrored unpool + deconvolution blocks, then a 3→1
/// output convolution.
const TABLE: [(&str, LayerKind, usize, usize, usize, usize); 38] = [
    ("conv1_1", Conv, 3, 64, 3, 1),
    ("conv1_2", Conv, 64, 64, 3, 1),
    ("pool1", Pool, 0, 0, 2, 2),
    ("conv2_1", Conv, 64, 128, 3, 1),
    ("conv2_2", Conv, 128, 128, 3, 1),
    ("pool2", Pool, 0, 0, 2, 2),
    ("conv3_1", Conv, 128, 256, 3, 1),
    ("conv3_2", Conv, 256, 256, 3, 1),
    ("conv3_3", Conv, 256, 256, 3, 1),
    ("pool3", Pool, 0, 0, 2, 2),
    ("conv4_1", Conv, 256, 512, 3, 1),
    ("conv4_2", Conv, 512, 512, 3, 1),
    ("conv4_3", Conv, 512, 512, 3, 1),
    ("pool4", Pool, 0, 0, 2, 2),
    ("conv5_1", Conv, 512, 512, 3, 1),
    ("conv5_2", Conv, 512, 512, 3, 1),
    ("conv5_3", Conv, 512, 512, 3, 1),
    ("pool5", Pool, 0, 0, 2, 2),
    ("conv6", Conv, 512, 512, 3, 1),
    ("unpool5", Unpool, 0, 0, 2, 2),
    ("deconv5_1", Deconv, 512, 512, 3, 1),
    ("deconv5_2", Deconv, 512, 512, 3, 1),
    ("deconv5_3", Deconv, 512, 512, 3, 1),
    ("unpool4", Unpool, 0, 0, 2, 2),
    ("deconv4_1", Deconv, 512, 512, 3, 1),
    ("deconv4_2", Deconv, 512, 512, 3, 1),
    ("deconv4_3", Deconv, 512, 256, 3, 1),
    ("unpool3", Unpool, 0, 0, 2, 2),
    ("deconv3_1", Deconv, 256, 256, 3, 1),
    ("deconv3_2", Deconv, 256, 256, 3, 1),
    ("deconv3_3", Deconv, 256, 128, 3, 1),
    ("unpool2", Unpool, 0, 0, 2, 2),
    ("deconv2_1", Deconv, 128, 128, 3, 1),
    ("deconv2_2", Deconv, 128, 64, 3, 1),
    ("unpool1", Unpool, 0, 0, 2, 2),
    ("deconv1_1", Deconv, 64, 64, 3, 1),
    ("deconv1_2", Deconv, 64, 3, 3, 1),
    ("conv0", Conv, 3, 1, 3, 1),
];

/// Number of 2× poolings; input extents must be multiples of `2^POOLS`.
pub const POOLS: u32 = 5;

/// The layer schedule at a channel-width factor.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSpec {
    pub scale: f64,
    pub layers: Vec<LayerDesc>,
}

impl LayerSpec {
    /// Builds the schedule with every hidden width multiplied by `scale`
    /// (rounded, at least 1). The RGB and disparity channel counts are fixed.
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "channel scale must be in (0, 1], got {scale}"
            )));
        }
        let mut clamped = false;
        let mut width = |c: usize| -> usize {
            if c == 3 || c == 1 {
                return c;
            }
            let w = (scale * c as f64).round() as usize;
            if w == 0 {
                clamped = true;
            }
            w.max(1)
        };
        let last = TABLE.len() - 1;
        let layers = TABLE
            .iter()
            .enumerate()
            .map(|(i, &(name, kind, cin, cout, k, s))| {
                let learnable = matches!(kind, Conv | Deconv);
                LayerDesc {
                    name: name.to_string(),
                    kind,
                    in_channels: if learnable { width(cin) } else { 0 },
                    out_channels: if learnable { width(cout) } else { 0 },
                    kernel: k,
                    stride: s,
                    norm_act: learnable && i != last,
                }
            })
            .collect();
        if clamped {
            log::warn!("channel scale {scale} rounds some widths to zero; clamped to 1");
        }
        Ok(Self { scale, layers })
    }

    /// Σ in·out·k² over convolution and deconvolution layers.
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(LayerDesc::weight_count).sum()
    }

    pub fn learnable(&self) -> impl Iterator<Item = &LayerDesc> {
        self.layers.iter().filter(|l| l.is_learnable())
    }
}
