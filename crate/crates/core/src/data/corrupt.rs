use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::psnr::{mean_psnr, psnr_db};
use crate::data::{measure_psnr, Dataset, PsnrReport};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance on the calibrated batch-mean PSNR before bisection kicks in.
pub const PSNR_TOLERANCE_DB: f64 = 0.5;
const BISECT_TARGET_DB: f64 = 0.05;
const MAX_SIGMA: f64 = 64.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Corruption {
    /// Additive Gaussian noise with σ chosen so the clamped output reaches
    /// the requested mean PSNR.
    GaussianNoise { target_psnr_db: f64 },
    GaussianBlur { sigma: f64 },
    /// Each pixel is set to 0 or 1 (equally likely) with probability `flip_prob`.
    SaltPepper { flip_prob: f64 },
    /// Multiplicative `x·(1 + n)`, `n ~ N(0, variance)`.
    Speckle { variance: f64 },
    /// Every image receives one of the four above, chosen uniformly.
    Comprehensive {
        target_psnr_db: f64,
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default = "default_flip")]
        flip_prob: f64,
        #[serde(default = "default_variance")]
        variance: f64,
    },
}

fn default_sigma() -> f64 {
    1.0
}
fn default_flip() -> f64 {
    0.05
}
fn default_variance() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    #[serde(flatten)]
    pub corruption: Corruption,
    #[serde(default)]
    pub seed: u64,
}

impl Corruption {
    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Range { op: "corrupt", msg });
        let psnr_ok = |p: f64| p.is_finite() && p > 0.0;
        match *self {
            Corruption::GaussianNoise { target_psnr_db } if !psnr_ok(target_psnr_db) => {
                bad(format!("target_psnr_db must be positive, got {target_psnr_db}"))
            }
            Corruption::GaussianBlur { sigma } if !(sigma.is_finite() && sigma > 0.0) => {
                bad(format!("sigma must be positive, got {sigma}"))
            }
            Corruption::SaltPepper { flip_prob } if !(0.0..=1.0).contains(&flip_prob) => {
                bad(format!("flip_prob must lie in [0, 1], got {flip_prob}"))
            }
            Corruption::Speckle { variance } if !(variance.is_finite() && variance >= 0.0) => {
                bad(format!("variance must be non-negative, got {variance}"))
            }
            Corruption::Comprehensive {
                target_psnr_db,
                sigma,
                flip_prob,
                variance,
            } => {
                Corruption::GaussianNoise { target_psnr_db }.validate()?;
                Corruption::GaussianBlur { sigma }.validate()?;
                Corruption::SaltPepper { flip_prob }.validate()?;
                Corruption::Speckle { variance }.validate()
            }
            _ => Ok(()),
        }
    }

    /// Short human-readable name including parameters.
    pub fn label(&self) -> String {
        match self {
            Corruption::GaussianNoise { target_psnr_db } => format!("gaussian_noise({target_psnr_db} dB)"),
            Corruption::GaussianBlur { sigma } => format!("gaussian_blur(sigma {sigma})"),
            Corruption::SaltPepper { flip_prob } => format!("salt_pepper(p {flip_prob})"),
            Corruption::Speckle { variance } => format!("speckle(var {variance})"),
            Corruption::Comprehensive {
                target_psnr_db,
                sigma,
                flip_prob,
                variance,
            } => format!("comprehensive({target_psnr_db} dB, sigma {sigma}, p {flip_prob}, var {variance})"),
        }
    }
}

/// Applies `spec` and reports the PSNR of the result against the input.
pub fn corrupt(ds: &Dataset, spec: &CorruptionSpec) -> Result<(Dataset, PsnrReport)> {
    spec.corruption.validate()?;
    let [h, w, c] = ds.image_shape();
    let len = ds.image_len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let images: Vec<&[f32]> = (0..ds.len()).map(|i| ds.image(i)).collect();
    let mut out = vec![0.0f32; ds.len() * len];
    let mut lineage = spec.corruption.label();
    match spec.corruption {
        Corruption::GaussianNoise { target_psnr_db } => {
            let sigma = gaussian_noise(&images, target_psnr_db, &mut rng, &mut out)?;
            lineage = format!("{lineage} sigma {sigma:.6}");
        }
        Corruption::GaussianBlur { sigma } => {
            for (img, o) in images.iter().zip(out.chunks_mut(len)) {
                blur(img, h, w, c, sigma, o);
            }
        }
        Corruption::SaltPepper { flip_prob } => {
            for (img, o) in images.iter().zip(out.chunks_mut(len)) {
                salt_pepper(img, c, flip_prob, &mut rng, o);
            }
        }
        Corruption::Speckle { variance } => {
            for (img, o) in images.iter().zip(out.chunks_mut(len)) {
                speckle(img, variance, &mut rng, o);
            }
        }
        Corruption::Comprehensive {
            target_psnr_db,
            sigma,
            flip_prob,
            variance,
        } => {
            let choice: Vec<u8> = (0..images.len()).map(|_| rng.random_range(0..4u8)).collect();
            let noisy: Vec<usize> = (0..images.len()).filter(|&i| choice[i] == 0).collect();
            if !noisy.is_empty() {
                let subset: Vec<&[f32]> = noisy.iter().map(|&i| images[i]).collect();
                let mut buf = vec![0.0f32; subset.len() * len];
                let s = gaussian_noise(&subset, target_psnr_db, &mut rng, &mut buf)?;
                for (k, &i) in noisy.iter().enumerate() {
                    out[i * len..(i + 1) * len].copy_from_slice(&buf[k * len..(k + 1) * len]);
                }
                lineage = format!("{lineage} sigma {s:.6}");
            }
            for (i, o) in out.chunks_mut(len).enumerate() {
                match choice[i] {
                    0 => {}
                    1 => blur(images[i], h, w, c, sigma, o),
                    2 => salt_pepper(images[i], c, flip_prob, &mut rng, o),
                    _ => speckle(images[i], variance, &mut rng, o),
                }
            }
        }
    }
    let result = ds.with_images(Tensor::new(ds.images.shape().to_vec(), out)?, lineage);
    let report = measure_psnr(ds, &result)?;
    Ok((result, report))
}

fn apply_noise(images: &[&[f32]], noise: &[f32], sigma: f64, out: &mut [f32]) -> f64 {
    let len = images[0].len();
    let s = sigma as f32;
    for ((o, z), x) in out.iter_mut().zip(noise).zip(images.iter().flat_map(|i| i.iter())) {
        *o = (x + s * z).clamp(0.0, 1.0);
    }
    let per: Vec<f64> = images
        .iter()
        .zip(out.chunks(len))
        .map(|(a, b)| psnr_db(a, b))
        .collect();
    mean_psnr(&per)
}

/// Fills `out` and returns the σ used. Noise draws are fixed up front so
/// the clamped PSNR is monotone in σ and bisection is well posed.
fn gaussian_noise(images: &[&[f32]], target: f64, rng: &mut ChaCha8Rng, out: &mut [f32]) -> Result<f64> {
    let noise: Vec<f32> = (0..out.len()).map(|_| rng.sample(StandardNormal)).collect();
    let sigma0 = 10f64.powf(-target / 20.0);
    let at0 = apply_noise(images, &noise, sigma0, out);
    if (at0 - target).abs() <= PSNR_TOLERANCE_DB {
        return Ok(sigma0);
    }
    let (mut lo, mut hi) = (0.0, sigma0);
    if at0 > target {
        lo = sigma0;
        loop {
            hi *= 2.0;
            if hi > MAX_SIGMA {
                return Err(Error::Range {
                    op: "corrupt",
                    msg: format!("{target} dB is unreachable: clamped noise stays above it (reached {at0:.2} dB)"),
                });
            }
            if apply_noise(images, &noise, hi, out) < target {
                break;
            }
            lo = hi;
        }
    }
    let mut sigma = hi;
    for _ in 0..100 {
        sigma = 0.5 * (lo + hi);
        let v = apply_noise(images, &noise, sigma, out);
        if (v - target).abs() < BISECT_TARGET_DB {
            return Ok(sigma);
        }
        if v > target {
            lo = sigma;
        } else {
            hi = sigma;
        }
    }
    let v = apply_noise(images, &noise, sigma, out);
    if (v - target).abs() > PSNR_TOLERANCE_DB {
        return Err(Error::Range {
            op: "corrupt",
            msg: format!("could not calibrate noise to {target} dB (closest {v:.2} dB)"),
        });
    }
    Ok(sigma)
}

fn blur(img: &[f32], h: usize, w: usize, c: usize, sigma: f64, out: &mut [f32]) {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f32> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
    let total: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let mut tmp = vec![0.0f32; img.len()];
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                tmp[(y * w + x) * c + ch] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * img[(y * w + clampi(x as isize + i as isize - r, w)) * c + ch])
                    .sum();
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(y * w + x) * c + ch] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * tmp[(clampi(y as isize + i as isize - r, h) * w + x) * c + ch])
                    .sum::<f32>()
                    .clamp(0.0, 1.0);
            }
        }
    }
}

fn salt_pepper(img: &[f32], c: usize, p: f64, rng: &mut ChaCha8Rng, out: &mut [f32]) {
    for (src, dst) in img.chunks(c).zip(out.chunks_mut(c)) {
        let u: f64 = rng.random();
        if u < p / 2.0 {
            dst.fill(0.0);
        } else if u < p {
            dst.fill(1.0);
        } else {
            dst.copy_from_slice(src);
        }
    }
}

fn speckle(img: &[f32], variance: f64, rng: &mut ChaCha8Rng, out: &mut [f32]) {
    let sd = variance.sqrt() as f32;
    for (x, o) in img.iter().zip(out.iter_mut()) {
        let z: f32 = rng.sample(StandardNormal);
        *o = (x * (1.0 + sd * z)).clamp(0.0, 1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_preserves_constant_image() {
        let img = vec![0.4f32; 5 * 6];
        let mut out = vec![0.0; img.len()];
        blur(&img, 5, 6, 1, 1.3, &mut out);
        assert!(out.iter().all(|v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn invalid_parameters_rejected() {
        for c in [
            Corruption::GaussianBlur { sigma: 0.0 },
            Corruption::SaltPepper { flip_prob: 1.5 },
            Corruption::GaussianNoise { target_psnr_db: -3.0 },
        ] {
            assert!(matches!(c.validate(), Err(Error::Range { .. })), "{c:?}");
        }
    }
}
