//! Brute-force reference implementations used to pin harness behaviour.

use amr_core::synthdata::{signature_color, Sample};

/// Per-pixel mIoU: for every label occurring in `truth`, count intersection
/// and union directly, then average.
pub fn brute_miou(prediction: &[u8], truth: &[u8], n_classes: usize) -> f64 {
    let mut ious = Vec::new();
    for c in 0..=n_classes as u8 {
        if !truth.contains(&c) {
            continue;
        }
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&p, &t) in prediction.iter().zip(truth) {
            if p == c && t == c {
                inter += 1;
            }
            if p == c || t == c {
                union += 1;
            }
        }
        ious.push(inter as f64 / union as f64);
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

const WINDOW: usize = 3;
const MATCH_TOLERANCE: f64 = 0.12;

/// Predicts class `n` iff some 3x3 window matches the class's signature
/// pattern (mean absolute colour difference below a tolerance).
pub fn signature_oracle(sample: &Sample, n_classes: usize, size: usize) -> Vec<bool> {
    let px = size * size;
    (0..n_classes)
        .map(|n| {
            (0..=size - WINDOW).any(|y0| {
                (0..=size - WINDOW).any(|x0| {
                    let mut diff = 0.0;
                    for y in y0..y0 + WINDOW {
                        for x in x0..x0 + WINDOW {
                            let want = signature_color(n, n_classes, x, y);
                            for c in 0..3 {
                                diff += (sample.image[c * px + y * size + x] - want[c]).abs() as f64;
                            }
                        }
                    }
                    diff / (3 * WINDOW * WINDOW) as f64 <= MATCH_TOLERANCE
                })
            })
        })
        .collect()
}
