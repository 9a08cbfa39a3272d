use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Controllable additive domain shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shift {
    /// The same value added to every pixel.
    Brightness { offset: f32 },
    /// A per-pixel offset image shaped like one sample (`h × w × c`).
    Offset { shape: [usize; 3], values: Vec<f32> },
}

impl Shift {
    pub fn offset_tensor(t: &Tensor) -> Result<Shift> {
        match t.shape() {
            &[h, w, c] => Ok(Shift::Offset {
                shape: [h, w, c],
                values: t.data().to_vec(),
            }),
            other => Err(Error::shape("synth_shift", &[0, 0, 0], other)),
        }
    }

    fn describe(&self) -> String {
        match self {
            Shift::Brightness { offset } => format!("synth_shift(brightness {offset:+})"),
            Shift::Offset { shape, .. } => format!("synth_shift(offset image {shape:?})"),
        }
    }
}

/// `clamp(x + shift, 0, 1)` for every sample.
pub fn synth_shift(ds: &Dataset, shift: &Shift) -> Result<Dataset> {
    let len = ds.image_len();
    let data: Vec<f32> = match shift {
        Shift::Brightness { offset } => ds.images.data().iter().map(|&v| (v + offset).clamp(0.0, 1.0)).collect(),
        Shift::Offset { shape, values } => {
            if *shape != ds.image_shape() || values.len() != len {
                return Err(Error::shape("synth_shift", &ds.image_shape(), shape));
            }
            ds.images
                .data()
                .chunks(len)
                .flat_map(|img| img.iter().zip(values).map(|(&v, &o)| (v + o).clamp(0.0, 1.0)))
                .collect()
        }
    };
    let images = Tensor::new(ds.images.shape().to_vec(), data)?;
    Ok(ds.with_images(images, shift.describe()))
}
