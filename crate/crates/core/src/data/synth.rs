//! Procedural 28×28 handwritten-style digits.
//!
//! Each glyph is a set of polylines in a unit box (y grows downward). A
//! sample applies point jitter, a random affine map and a random stroke
//! width, then renders an anti-aliased distance field.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::preprocess::DIGIT_SIDE;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Intensity and variability of rendered digits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DigitStyle {
    pub background: f32,
    pub foreground: f32,
    /// Multiplier on geometric randomness; 0 renders the canonical glyph.
    pub jitter: f32,
    /// Stroke half-width range in pixels.
    pub stroke: [f32; 2],
}

impl Default for DigitStyle {
    fn default() -> Self {
        DigitStyle {
            background: 0.0,
            foreground: 1.0,
            jitter: 1.0,
            stroke: [0.9, 1.6],
        }
    }
}

impl DigitStyle {
    /// Thinner, larger-range strokes for a visibly different digit domain.
    pub fn alternate() -> Self {
        DigitStyle {
            stroke: [0.6, 1.0],
            jitter: 1.6,
            ..DigitStyle::default()
        }
    }
}

type Stroke = Vec<(f32, f32)>;

fn ellipse(cx: f32, cy: f32, rx: f32, ry: f32, points: usize) -> Stroke {
    (0..=points)
        .map(|i| {
            let t = i as f32 / points as f32 * std::f32::consts::TAU;
            (cx + rx * t.sin(), cy - ry * t.cos())
        })
        .collect()
}

fn glyph(digit: usize) -> Vec<Stroke> {
    match digit {
        0 => vec![ellipse(0.5, 0.5, 0.3, 0.42, 16)],
        1 => vec![vec![(0.35, 0.25), (0.55, 0.08), (0.55, 0.92)]],
        2 => vec![vec![
            (0.2, 0.3),
            (0.3, 0.12),
            (0.5, 0.06),
            (0.7, 0.12),
            (0.8, 0.3),
            (0.72, 0.5),
            (0.2, 0.92),
            (0.82, 0.92),
        ]],
        3 => vec![
            vec![(0.2, 0.12), (0.5, 0.06), (0.75, 0.15), (0.78, 0.3), (0.65, 0.45), (0.42, 0.48)],
            vec![(0.42, 0.48), (0.65, 0.5), (0.8, 0.65), (0.78, 0.82), (0.55, 0.94), (0.2, 0.88)],
        ],
        4 => vec![vec![(0.65, 0.92), (0.65, 0.08), (0.15, 0.65), (0.85, 0.65)]],
        5 => vec![vec![
            (0.8, 0.08),
            (0.28, 0.08),
            (0.24, 0.45),
            (0.5, 0.4),
            (0.75, 0.5),
            (0.8, 0.7),
            (0.68, 0.9),
            (0.45, 0.94),
            (0.2, 0.86),
        ]],
        6 => vec![vec![
            (0.72, 0.1),
            (0.5, 0.08),
            (0.3, 0.25),
            (0.22, 0.55),
            (0.25, 0.8),
            (0.45, 0.94),
            (0.68, 0.88),
            (0.78, 0.7),
            (0.7, 0.52),
            (0.48, 0.48),
            (0.28, 0.6),
        ]],
        7 => vec![vec![(0.18, 0.08), (0.82, 0.08), (0.4, 0.92)]],
        8 => vec![ellipse(0.5, 0.28, 0.22, 0.2, 12), ellipse(0.5, 0.7, 0.28, 0.24, 12)],
        9 => vec![ellipse(0.5, 0.3, 0.25, 0.22, 12), vec![(0.75, 0.3), (0.7, 0.92)]],
        _ => unreachable!("digits are 0..10"),
    }
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn render(digit: usize, style: &DigitStyle, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let j = style.jitter;
    let mut sym = |r: f32| if j > 0.0 { rng.random_range(-r * j..=r * j) } else { 0.0 };
    let angle = sym(0.2);
    let shear = sym(0.15);
    let (sx, sy) = (16.0 * (1.0 + sym(0.12)), 20.0 * (1.0 + sym(0.1)));
    let (tx, ty) = (sym(1.5), sym(1.5));
    let centre = DIGIT_SIDE as f32 / 2.0;
    let (sin, cos) = angle.sin_cos();
    let strokes: Vec<Stroke> = glyph(digit)
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|(gx, gy)| {
                    let x = (gx + sym(0.03) - 0.5) * sx;
                    let y = (gy + sym(0.03) - 0.5) * sy;
                    let x = x + shear * y;
                    (cos * x - sin * y + centre + tx, sin * x + cos * y + centre + ty)
                })
                .collect()
        })
        .collect();
    let half_width = if style.stroke[1] > style.stroke[0] {
        rng.random_range(style.stroke[0]..style.stroke[1])
    } else {
        style.stroke[0]
    };
    let ink = if j > 0.0 { rng.random_range(0.85f32..=1.0) } else { 1.0 };
    let mut img = vec![style.background; DIGIT_SIDE * DIGIT_SIDE];
    for (i, px) in img.iter_mut().enumerate() {
        let p = ((i % DIGIT_SIDE) as f32 + 0.5, (i / DIGIT_SIDE) as f32 + 0.5);
        let d = strokes
            .iter()
            .flat_map(|s| s.windows(2).map(|w| segment_distance(p, w[0], w[1])))
            .fold(f32::INFINITY, f32::min);
        let coverage = (half_width + 0.5 - d).clamp(0.0, 1.0) * ink;
        *px = (style.background + (style.foreground - style.background) * coverage).clamp(0.0, 1.0);
    }
    img
}

/// `n` labelled digits with balanced classes (`label = i mod 10`).
pub fn synth_digits(n: usize, style: &DigitStyle, seed: u64) -> Result<Dataset> {
    let valid = |v: f32| (0.0..=1.0).contains(&v);
    if n == 0 || !valid(style.background) || !valid(style.foreground) || style.jitter < 0.0 || style.stroke[0] <= 0.0 {
        return Err(Error::Range {
            op: "synth_digits",
            msg: format!("need n > 0 and intensities in [0, 1], got n = {n}, style {style:?}"),
        });
    }
    let side = DIGIT_SIDE * DIGIT_SIDE;
    let mut data = vec![0.0f32; n * side];
    data.par_chunks_mut(side).enumerate().for_each(|(i, out)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        out.copy_from_slice(&render(i % 10, style, &mut rng));
    });
    let labels = (0..n).map(|i| i % 10).collect();
    let images = Tensor::new(vec![n, DIGIT_SIDE, DIGIT_SIDE, 1], data)?;
    let mut ds = Dataset::new(images, Some(labels), 10, format!("synth-digits-{seed}"))?;
    ds.lineage.push(format!("synth_digits(n {n}, seed {seed}, {style:?})"));
    Ok(ds)
}
