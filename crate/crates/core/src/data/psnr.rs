use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Per-image and mean PSNR in dB with a peak value of 1.0.
///
/// Identical images score `f64::INFINITY`, rendered as `inf`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsnrReport {
    pub per_image: Vec<f64>,
    pub mean_db: f64,
}

pub fn psnr_db(clean: &[f32], noisy: &[f32]) -> f64 {
    let mse = clean
        .iter()
        .zip(noisy)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / clean.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub(crate) fn mean_psnr(per_image: &[f64]) -> f64 {
    per_image.iter().sum::<f64>() / per_image.len() as f64
}

pub fn measure_psnr(clean: &Dataset, noisy: &Dataset) -> Result<PsnrReport> {
    if clean.images.shape() != noisy.images.shape() {
        return Err(Error::shape("measure_psnr", clean.images.shape(), noisy.images.shape()));
    }
    let per_image: Vec<f64> = (0..clean.len()).map(|i| psnr_db(clean.image(i), noisy.image(i))).collect();
    let mean_db = mean_psnr(&per_image);
    Ok(PsnrReport { per_image, mean_db })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_twenty_db() {
        // MSE = 0.1² = 0.01, 10·log10(1/0.01) = 20, up to f32 rounding of 0.6
        let v = psnr_db(&[0.5; 16], &[0.6; 16]);
        assert!((v - 20.0).abs() < 1e-5, "{v}");
    }

    #[test]
    fn identical_is_infinite() {
        assert_eq!(psnr_db(&[0.3; 4], &[0.3; 4]), f64::INFINITY);
    }
}
