//! Datasets, IDX ingestion, preprocessing, corruptions and synthetic
//! domain shifts.

mod corrupt;
mod idx;
mod manifest;
mod preprocess;
mod psnr;
mod shift;
mod subsample;
mod synth;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use corrupt::{corrupt, Corruption, CorruptionSpec};
pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx, IdxEncoding};
pub use manifest::{load_manifest, save_manifest, Manifest};
pub use preprocess::{bilinear_resize, preprocess_digits, to_grayscale};
pub use psnr::{measure_psnr, psnr_db, PsnrReport};
pub use shift::{synth_shift, Shift};
pub use subsample::{split, subsample};
pub use synth::{synth_digits, DigitStyle};

/// A batch of NHWC images with optional integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
    pub name: String,
    /// Transforms applied since ingestion, oldest first.
    pub lineage: Vec<String>,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Option<Vec<usize>>,
        num_classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape("dataset", &[0, 0, 0, 0], images.shape()));
        }
        if let Some(l) = &labels {
            if l.len() != images.shape()[0] {
                return Err(Error::Consistency {
                    op: "dataset",
                    msg: format!("{} images but {} labels", images.shape()[0], l.len()),
                });
            }
            if let Some(&bad) = l.iter().find(|&&y| y >= num_classes) {
                return Err(Error::Range {
                    op: "dataset",
                    msg: format!("label {bad} not below num_classes {num_classes}"),
                });
            }
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            name: name.into(),
            lineage: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[h, w, c]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        self.images.row(i)
    }

    pub fn labels_required(&self, op: &'static str) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::contract(op, format!("dataset `{}` has no labels", self.name)))
    }

    /// Images at `indices`, stacked into one NHWC tensor.
    pub fn batch_images(&self, indices: &[usize]) -> Tensor {
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [h, w, c] = self.image_shape();
        Tensor::new(vec![indices.len(), h, w, c], data).expect("non-empty selection")
    }

    /// Subset in the given index order; labels follow.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Range {
                op: "select",
                msg: format!("empty selection from `{}`", self.name),
            });
        }
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok(Dataset {
            images: self.batch_images(indices),
            labels,
            num_classes: self.num_classes,
            name: self.name.clone(),
            lineage: self.lineage.clone(),
        })
    }

    pub fn with_images(&self, images: Tensor, step: impl Into<String>) -> Dataset {
        let mut lineage = self.lineage.clone();
        lineage.push(step.into());
        Dataset {
            images,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            name: self.name.clone(),
            lineage,
        }
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Dataset {
        self.name = name.into();
        self
    }

    /// Fails unless every pixel lies in `[0, 1]`.
    pub fn check_unit_range(&self, op: &'static str) -> Result<()> {
        if let Some(i) = self.images.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Range {
                op,
                msg: format!("pixel {i} = {} outside [0, 1]", self.images.data()[i]),
            });
        }
        Ok(())
    }

    /// SHA-256 over the image tensor and labels.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.images.checksum().as_bytes());
        if let Some(l) = &self.labels {
            for &y in l {
                h.update((y as u32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Count of samples per class.
    pub fn class_counts(&self) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| {
            let mut counts = vec![0; self.num_classes];
            for &y in l {
                counts[y] += 1;
            }
            counts
        })
    }
}
