use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One convolution stage: conv → optional batchnorm → ReLU → optional 2×2 max-pool.
///
/// Convolutions use zero padding of `kernel / 2` on each side.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub batchnorm: bool,
    pub maxpool: bool,
}

impl ConvBlock {
    pub fn new(out_channels: usize, kernel: usize) -> Self {
        ConvBlock {
            out_channels,
            kernel,
            stride: 1,
            batchnorm: true,
            maxpool: true,
        }
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }
}

/// Architecture of a small convolutional classifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Height, width, channels.
    pub input_shape: [usize; 3],
    pub conv_blocks: Vec<ConvBlock>,
    /// Hidden dense widths; a final `num_classes` layer is always appended.
    pub dense_dims: Vec<usize>,
    pub num_classes: usize,
    /// Expected flattened width entering the first dense layer. When set it
    /// must agree with the width derived from the conv stack.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_input: Option<usize>,
}

/// Per-block output geometry derived from a spec.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    /// `(h, w, c)` after each conv block.
    pub block_outputs: Vec<[usize; 3]>,
    pub flatten_dim: usize,
}

impl ModelSpec {
    /// conv(32, 3×3)-BN-ReLU-maxpool ×3, dense(128), dense(10) on 28×28×1.
    pub fn digits() -> Self {
        ModelSpec {
            input_shape: [28, 28, 1],
            conv_blocks: vec![ConvBlock::new(32, 3); 3],
            dense_dims: vec![128],
            num_classes: 10,
            dense_input: None,
        }
    }

    pub fn plan(&self) -> Result<LayerPlan> {
        let [h0, w0, c0] = self.input_shape;
        if h0 == 0 || w0 == 0 || c0 == 0 {
            return Err(invalid("input", format!("input shape {:?} has a zero extent", self.input_shape)));
        }
        if self.num_classes < 2 {
            return Err(invalid("classifier", format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        let (mut h, mut w, mut c) = (h0, w0, c0);
        let mut block_outputs = Vec::with_capacity(self.conv_blocks.len());
        for (i, b) in self.conv_blocks.iter().enumerate() {
            let layer = format!("conv{i}");
            if b.out_channels == 0 || b.kernel == 0 || b.stride == 0 {
                return Err(invalid(&layer, "out_channels, kernel and stride must be positive"));
            }
            let p = b.padding();
            if h + 2 * p < b.kernel || w + 2 * p < b.kernel {
                return Err(invalid(&layer, format!("kernel {} larger than padded input {h}×{w}", b.kernel)));
            }
            h = (h + 2 * p - b.kernel) / b.stride + 1;
            w = (w + 2 * p - b.kernel) / b.stride + 1;
            c = b.out_channels;
            if b.maxpool {
                if h < 2 || w < 2 {
                    return Err(invalid(&layer, format!("cannot max-pool a {h}×{w} map")));
                }
                h /= 2;
                w /= 2;
            }
            block_outputs.push([h, w, c]);
        }
        for (j, &d) in self.dense_dims.iter().enumerate() {
            if d == 0 {
                return Err(invalid(&format!("dense{j}"), "width must be positive"));
            }
        }
        let flatten_dim = h * w * c;
        if let Some(declared) = self.dense_input {
            if declared != flatten_dim {
                return Err(invalid(
                    "dense0",
                    format!("declared input width {declared} but the conv stack flattens to {flatten_dim}"),
                ));
            }
        }
        Ok(LayerPlan {
            block_outputs,
            flatten_dim,
        })
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }
}

fn invalid(layer: &str, msg: impl Into<String>) -> Error {
    Error::Validation {
        layer: layer.to_string(),
        msg: msg.into(),
    }
}
