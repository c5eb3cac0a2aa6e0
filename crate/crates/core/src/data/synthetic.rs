//! Geometric-pattern image classes with randomised placement, scale,
//! contrast and per-pixel jitter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::seed::{substream, tag};
use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Number of distinct pattern families available as classes.
pub const PATTERN_COUNT: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub per_class: usize,
    pub seed: u64,
}

/// Generates a class-balanced dataset. Train and test splits draw from
/// disjoint seed streams.
pub fn generate_synthetic(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    if spec.classes < 2 || spec.classes > PATTERN_COUNT {
        return Err(Error::InvalidArgument(format!(
            "synthetic classes must be in 2..={PATTERN_COUNT}, got {}",
            spec.classes
        )));
    }
    if spec.image_size < 8 || spec.channels == 0 || spec.per_class == 0 {
        return Err(Error::InvalidArgument(format!(
            "synthetic images need size >= 8, channels >= 1, per_class >= 1 (got {}, {}, {})",
            spec.image_size, spec.channels, spec.per_class
        )));
    }
    let split_tag = match split {
        Split::Train => tag::TRAIN_SPLIT,
        Split::Test => tag::TEST_SPLIT,
    };
    let (c, s) = (spec.channels, spec.image_size);
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * c * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % spec.classes;
        let mut rng = substream(spec.seed, &[split_tag, i as u64]);
        let mask = draw_pattern(label, s, &mut rng);
        let fg: f64 = rng.gen_range(0.65..1.0);
        let bg: f64 = rng.gen_range(0.0..0.15);
        for _ in 0..c {
            let tint: f64 = rng.gen_range(0.9..1.0);
            for &m in &mask {
                let base = bg + (fg * tint - bg) * m;
                let jitter: f64 = rng.gen_range(-0.05..0.05);
                data.push((base + jitter).clamp(0.0, 1.0));
            }
        }
        labels.push(label);
    }
    let images = Tensor::new(vec![n, c, s, s], data)?;
    Dataset::new(images, labels, spec.classes, split, spec.seed)
}

/// Soft mask in `[0, 1]` of one randomly placed instance of `pattern`.
fn draw_pattern(pattern: usize, s: usize, rng: &mut impl Rng) -> Vec<f64> {
    let sf = s as f64;
    let cx = rng.gen_range(0.35 * sf..0.65 * sf);
    let cy = rng.gen_range(0.35 * sf..0.65 * sf);
    let half = rng.gen_range(0.25 * sf..0.4 * sf);
    let thick = rng.gen_range(0.06 * sf..0.12 * sf).max(1.0);
    let mut mask = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let inside = match pattern {
                // horizontal bar
                0 => py.abs() <= thick && px.abs() <= half,
                // vertical bar
                1 => px.abs() <= thick && py.abs() <= half,
                // ring
                2 => ((px * px + py * py).sqrt() - 0.7 * half).abs() <= 0.8 * thick,
                // plus sign
                3 => (py.abs() <= 0.7 * thick && px.abs() <= half) || (px.abs() <= 0.7 * thick && py.abs() <= half),
                // diagonal stroke
                4 => ((px - py) / 2f64.sqrt()).abs() <= 0.8 * thick && px.abs() <= half && py.abs() <= half,
                // hollow square
                _ => {
                    let m = px.abs().max(py.abs());
                    (m - 0.7 * half).abs() <= 0.7 * thick
                }
            };
            if inside {
                mask[y * s + x] = 1.0;
            }
        }
    }
    mask
}
