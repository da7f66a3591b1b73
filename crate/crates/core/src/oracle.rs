//! Brute-force reference for the expected IoU.
//!
//! Searches candidate boxes centered at the location on a regular `(w, h)` grid
//! over `(0, 3W] × (0, 3H]` and keeps the best [`iou`] with the matched box. It
//! shares no code with the closed form and never exceeds the true maximum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{iou, BBox};

pub const DEFAULT_GRID: usize = 600;

/// `n` seeded relative positions drawn uniformly from `(0.01, 0.99)²`.
pub fn sample_positions(seed: u64, n: usize) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (rng.random_range(0.01..0.99), rng.random_range(0.01..0.99)))
        .collect()
}

/// Grid-search maximum IoU at relative position `(r1, r2)` of the unit box.
pub fn eiou_grid(r1: f64, r2: f64, grid: usize) -> f64 {
    let target = BBox {
        xl: 0.0,
        yt: 0.0,
        xr: 1.0,
        yb: 1.0,
    };
    let step = 3.0 / grid as f64;
    let mut best = 0.0f64;
    for i in 1..=grid {
        let w = i as f64 * step;
        for j in 1..=grid {
            let h = j as f64 * step;
            let cand = BBox {
                xl: r1 - w / 2.0,
                yt: r2 - h / 2.0,
                xr: r1 + w / 2.0,
                yb: r2 + h / 2.0,
            };
            best = best.max(iou(&target, &cand));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_reaches_one() {
        // w = h = 1 lies on the grid
        assert!((eiou_grid(0.5, 0.5, 600) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quarter_point() {
        // best candidate covers the whole box: w = h = 1.5, IoU = 1 / 2.25
        assert!((eiou_grid(0.25, 0.25, 600) - 1.0 / 2.25).abs() < 1e-12);
    }
}
