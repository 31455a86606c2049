//! Seven-segment style synthetic digits for fast end-to-end runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LabeledDataset;
use crate::error::Result;

// segments: top, upper-right, lower-right, bottom, lower-left, upper-left, middle
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],
    [false, true, true, false, false, false, false],
    [true, true, false, true, true, false, true],
    [true, true, true, true, false, false, true],
    [false, true, true, false, false, true, true],
    [true, false, true, true, false, true, true],
    [true, false, true, true, true, true, true],
    [true, true, true, false, false, false, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

fn draw_glyph(digit: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut img = vec![0f64; size * size];
    let s = size as f64;
    let gw = (0.40 * s).round().max(3.0) as i64;
    let gh = (0.60 * s).round().max(5.0) as i64;
    let t = (s / 12.0).round().max(1.0) as i64;
    let jitter = (s / 10.0).round() as i64;
    let x0 = (size as i64 - gw) / 2 + rng.gen_range(-jitter..=jitter);
    let y0 = (size as i64 - gh) / 2 + rng.gen_range(-jitter..=jitter);
    let ink = rng.gen_range(170.0..255.0);
    let half = gh / 2;
    let mut fill = |xa: i64, ya: i64, xb: i64, yb: i64| {
        for y in ya.max(0)..yb.min(size as i64) {
            for x in xa.max(0)..xb.min(size as i64) {
                img[y as usize * size + x as usize] = ink;
            }
        }
    };
    let on = SEGMENTS[digit % 10];
    if on[0] {
        fill(x0, y0, x0 + gw, y0 + t);
    }
    if on[1] {
        fill(x0 + gw - t, y0, x0 + gw, y0 + half + 1);
    }
    if on[2] {
        fill(x0 + gw - t, y0 + half, x0 + gw, y0 + gh);
    }
    if on[3] {
        fill(x0, y0 + gh - t, x0 + gw, y0 + gh);
    }
    if on[4] {
        fill(x0, y0 + half, x0 + t, y0 + gh);
    }
    if on[5] {
        fill(x0, y0, x0 + t, y0 + half + 1);
    }
    if on[6] {
        fill(x0, y0 + half - t / 2, x0 + gw, y0 + half - t / 2 + t);
    }
    img.iter().map(|&v| (v + rng.gen_range(-25.0..25.0)).round().clamp(0.0, 255.0) as u8).collect()
}

/// `n_per_class` noisy glyphs of each digit in `classes` (labels are the
/// positions in `classes`), interleaved by class.
pub fn synth_digits(n_per_class: usize, classes: &[usize], size: usize, seed: u64) -> Result<LabeledDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n_per_class * classes.len() * size * size);
    let mut labels = Vec::with_capacity(n_per_class * classes.len());
    for _ in 0..n_per_class {
        for (l, &c) in classes.iter().enumerate() {
            images.extend(draw_glyph(c, size, &mut rng));
            labels.push(l);
        }
    }
    LabeledDataset::new(format!("synth{size}"), size, size, images, labels, classes.to_vec())
}

/// Fixed appearance change used to derive a second domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainShift {
    pub invert: bool,
    pub contrast: f64,
    pub offset: f64,
    pub dx: i64,
    pub dy: i64,
}

impl Default for DomainShift {
    fn default() -> Self {
        DomainShift {
            invert: true,
            contrast: 0.7,
            offset: 30.0,
            dx: 2,
            dy: 1,
        }
    }
}

/// Applies `shift` to every image; labels and order are unchanged.
pub fn shift_domain(ds: &LabeledDataset, shift: DomainShift) -> LabeledDataset {
    let (h, w) = (ds.height, ds.width);
    let mut images = Vec::with_capacity(ds.images.len());
    for img in ds.images.chunks_exact(h * w) {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (sy, sx) = (y - shift.dy, x - shift.dx);
                let v = if (0..h as i64).contains(&sy) && (0..w as i64).contains(&sx) {
                    img[(sy * w as i64 + sx) as usize] as f64
                } else {
                    0.0
                };
                let v = if shift.invert { 255.0 - v } else { v };
                images.push((v * shift.contrast + shift.offset).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    LabeledDataset {
        name: format!("{}-shifted", ds.name),
        images,
        ..ds.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_labeled() {
        let a = synth_digits(3, &[0, 1, 2, 3, 4], 16, 1).unwrap();
        assert_eq!(a, synth_digits(3, &[0, 1, 2, 3, 4], 16, 1).unwrap());
        assert_ne!(a.images, synth_digits(3, &[0, 1, 2, 3, 4], 16, 2).unwrap().images);
        assert_eq!(a.class_counts(), vec![3; 5]);
    }

    #[test]
    fn shifted_copy_keeps_labels() {
        let a = synth_digits(2, &[5, 6, 7], 16, 1).unwrap();
        let b = shift_domain(&a, DomainShift::default());
        assert_eq!(a.labels, b.labels);
        assert_ne!(a.images, b.images);
    }

    #[test]
    fn classes_differ_on_average() {
        let a = synth_digits(20, &[1, 8], 16, 4).unwrap();
        let mean = |l: usize| -> f64 {
            let idx: Vec<usize> = (0..a.len()).filter(|&i| a.labels[i] == l).collect();
            idx.iter().map(|&i| a.image(i).iter().map(|&v| v as f64).sum::<f64>()).sum::<f64>() / idx.len() as f64
        };
        // label 0 is the digit 1, label 1 the digit 8
        assert!(mean(0) < mean(1));
    }
}
