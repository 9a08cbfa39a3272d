//! Meta-input optimization against a frozen model, confidence-based pseudo
//! labeling, and batchnorm statistic adaptation.

mod bn;
mod optimize;
mod pseudo;
mod store;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use bn::bn_adapt;
pub use optimize::{optimize_meta_input, optimize_meta_input_unsupervised, AdaptLog};
pub use pseudo::{pseudo_label, select_confident, PseudoLabelSet};
pub use store::{decode_meta_input, encode_meta_input, load_meta_input, save_meta_input};

/// Where a meta input came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset: String,
    pub samples: usize,
    /// Fraction of the target training split, when the caller subsampled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    pub supervised: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Share of unlabeled samples that passed the confidence threshold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_fraction: Option<f64>,
    pub clamp_transformed: bool,
    pub seed: u64,
    pub lr: f32,
    pub batch_size: usize,
}

/// One additive tensor shared by every target sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaInput {
    /// `h × w × c`, same as one model input.
    pub w: Tensor,
    pub trained_on: Provenance,
    pub steps: usize,
}

impl MetaInput {
    pub fn shape(&self) -> [usize; 3] {
        let s = self.w.shape();
        [s[0], s[1], s[2]]
    }

    pub fn checksum(&self) -> String {
        self.w.checksum()
    }
}

/// Settings for meta-input optimization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub lr: f32,
    pub epochs: usize,
    /// Total optimizer steps; overrides `epochs` when set.
    pub steps: Option<usize>,
    pub batch_size: usize,
    /// Pseudo-label confidence threshold, strictly inside (0, 1).
    pub alpha: f64,
    pub clamp_transformed: bool,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            lr: 1e-2,
            epochs: 30,
            steps: None,
            batch_size: 64,
            alpha: 0.9,
            clamp_transformed: false,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Range { op: "adapt_config", msg });
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        check_alpha("adapt_config", self.alpha)
    }
}

pub(crate) fn check_alpha(op: &'static str, alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Range {
            op,
            msg: format!("alpha must lie strictly between 0 and 1, got {alpha}"),
        });
    }
    Ok(())
}

/// `x + w` for each image, optionally clamped to `[0, 1]`.
pub fn apply_meta_input(batch: &Dataset, w: &MetaInput, clamp: bool) -> Result<Dataset> {
    let images = apply_to_images(&batch.images, &w.w, clamp, "apply_meta_input")?;
    Ok(batch.with_images(images, format!("apply_meta_input(w {}, clamp {clamp})", &w.checksum()[..12])))
}

pub(crate) fn apply_to_images(images: &Tensor, w: &Tensor, clamp: bool, op: &'static str) -> Result<Tensor> {
    if images.rank() != 4 || images.shape()[1..] != *w.shape() {
        return Err(Error::shape(op, w.shape(), images.shape().get(1..).unwrap_or(&[])));
    }
    let len = w.numel();
    let data = images
        .data()
        .chunks_exact(len)
        .flat_map(|img| {
            img.iter().zip(w.data()).map(move |(&x, &d)| {
                let v = x + d;
                if clamp {
                    v.clamp(0.0, 1.0)
                } else {
                    v
                }
            })
        })
        .collect();
    Tensor::new(images.shape().to_vec(), data)
}
