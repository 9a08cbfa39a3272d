use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DIGIT_SIDE: usize = 28;

/// ITU-R BT.601 luma for 3-channel images; 1-channel input passes through.
pub fn to_grayscale(images: &Tensor) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || !(s[3] == 1 || s[3] == 3) {
        return Err(Error::shape("to_grayscale", &[s.first().copied().unwrap_or(0), 0, 0, 3], s));
    }
    if s[3] == 1 {
        return Ok(images.clone());
    }
    let data = images
        .data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    Tensor::new(vec![s[0], s[1], s[2], 1], data)
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn bilinear_resize(images: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear_resize", &[0, out_h, out_w, 0], s));
    }
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    if (h, w) == (out_h, out_w) {
        return Ok(images.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f32 / out as f32;
        (0..out)
            .map(|o| {
                let src = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f32);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f32)
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let src = images.data();
    let mut out = Vec::with_capacity(n * out_h * out_w * c);
    for b in 0..n {
        let img = &src[b * h * w * c..(b + 1) * h * w * c];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                for ch in 0..c {
                    let at = |y: usize, x: usize| img[(y * w + x) * c + ch];
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    out.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
    }
    Tensor::new(vec![n, out_h, out_w, c], out)
}

/// Grayscale and resize to 28×28×1.
pub fn preprocess_digits(ds: &Dataset) -> Result<Dataset> {
    let [h, w, c] = ds.image_shape();
    if (h, w, c) == (DIGIT_SIDE, DIGIT_SIDE, 1) {
        return Ok(ds.clone());
    }
    let gray = to_grayscale(&ds.images)?;
    let resized = bilinear_resize(&gray, DIGIT_SIDE, DIGIT_SIDE)?;
    let out = ds.with_images(resized, format!("preprocess_digits({h}x{w}x{c} -> 28x28x1)"));
    Ok(out)
}
