//! Minimum flood threshold from a seed pixel.
//!
//! For every pixel the output holds the smallest flood level at which a
//! fill started at the seed reaches it, where the level of a pixel is its
//! absolute difference to the seed value. This equals the bottleneck
//! (minimax) path cost over 4-connected paths and suppresses every local
//! minimum except the one containing the seed.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Entry {
    threshold: f32,
    seq: u64,
    index: usize,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl Ord for Entry {
    // BinaryHeap is a max-heap: invert so the lowest threshold, then the
    // earliest insertion, pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .threshold
            .total_cmp(&self.threshold)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Runs the modified flood fill on the `height×width` map `values` from
/// pixel `(x, y)`.
pub fn flood_fill_minimax(
    values: &[f32],
    width: usize,
    height: usize,
    x: usize,
    y: usize,
) -> Result<Vec<f32>> {
    flood_fill_traced(values, width, height, x, y, |_| {})
}

/// Same as [`flood_fill_minimax`], reporting every popped threshold to
/// `on_pop` in extraction order.
pub fn flood_fill_traced(
    values: &[f32],
    width: usize,
    height: usize,
    x: usize,
    y: usize,
    mut on_pop: impl FnMut(f32),
) -> Result<Vec<f32>> {
    if values.len() != width * height {
        return Err(Error::validation(format!(
            "map has {} values, expected {width}x{height}",
            values.len()
        )));
    }
    if x >= width || y >= height {
        return Err(Error::validation(format!(
            "start ({x}, {y}) outside {width}x{height} map"
        )));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::validation(format!(
            "non-finite map value at pixel {i}"
        )));
    }

    let start = y * width + x;
    let seed = values[start];
    let mut out = vec![f32::NAN; values.len()];
    let mut queued = vec![false; values.len()];
    let mut heap = BinaryHeap::with_capacity(4 * (width + height));
    let mut seq = 0u64;
    heap.push(Entry {
        threshold: 0.0,
        seq,
        index: start,
    });
    queued[start] = true;

    while let Some(Entry {
        threshold, index, ..
    }) = heap.pop()
    {
        on_pop(threshold);
        out[index] = threshold;
        let (px, py) = (index % width, index / width);
        let neighbors = [
            (px > 0).then(|| index - 1),
            (px + 1 < width).then(|| index + 1),
            (py > 0).then(|| index - width),
            (py + 1 < height).then(|| index + width),
        ];
        for n in neighbors.into_iter().flatten() {
            if queued[n] {
                continue;
            }
            queued[n] = true;
            seq += 1;
            heap.push(Entry {
                threshold: threshold.max((values[n] - seed).abs()),
                seq,
                index: n,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Bottleneck path cost by Bellman-Ford style relaxation to a fixpoint.
    fn brute_force(values: &[f32], w: usize, h: usize, x: usize, y: usize) -> Vec<f32> {
        let seed = values[y * w + x];
        let cost: Vec<f32> = values.iter().map(|v| (v - seed).abs()).collect();
        let mut best = vec![f32::INFINITY; values.len()];
        best[y * w + x] = 0.0;
        loop {
            let mut changed = false;
            for i in 0..values.len() {
                let (px, py) = (i % w, i / w);
                let mut nbrs = vec![];
                if px > 0 {
                    nbrs.push(i - 1);
                }
                if px + 1 < w {
                    nbrs.push(i + 1);
                }
                if py > 0 {
                    nbrs.push(i - w);
                }
                if py + 1 < h {
                    nbrs.push(i + w);
                }
                for n in nbrs {
                    let cand = best[n].max(cost[i]);
                    if cand < best[i] {
                        best[i] = cand;
                        changed = true;
                    }
                }
            }
            if !changed {
                return best;
            }
        }
    }

    #[test]
    fn constant_map_is_all_zero() {
        let out = flood_fill_minimax(&[2.5; 12], 4, 3, 1, 2).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn second_minimum_is_lifted() {
        let out = flood_fill_minimax(&[3.0, 0.0, 2.0, 0.0, 5.0], 5, 1, 1, 0).unwrap();
        assert_eq!(out, vec![3.0, 0.0, 2.0, 2.0, 5.0]);
    }

    #[test]
    fn matches_bottleneck_oracle_on_random_6x6() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let values: Vec<f32> = (0..36).map(|_| rng.gen_range(0.0f32..1.0)).collect();
            let (x, y) = (rng.gen_range(0..6), rng.gen_range(0..6));
            let out = flood_fill_minimax(&values, 6, 6, x, y).unwrap();
            assert_eq!(out, brute_force(&values, 6, 6, x, y));
        }
    }

    #[test]
    fn pops_are_monotone_and_dominate_the_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (w, h) = (17, 11);
        let values: Vec<f32> = (0..w * h).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
        let mut last = f32::NEG_INFINITY;
        let out = flood_fill_traced(&values, w, h, 4, 7, |t| {
            assert!(t >= last);
            last = t;
        })
        .unwrap();
        let seed = values[7 * w + 4];
        assert_eq!(out[7 * w + 4], 0.0);
        for (o, v) in out.iter().zip(&values) {
            assert!(*o >= (v - seed).abs());
        }
    }

    #[test]
    fn monotone_ramp_keeps_levels() {
        let values: Vec<f32> = (0..20).map(|i| (i % 5) as f32 + (i / 5) as f32).collect();
        let out = flood_fill_minimax(&values, 5, 4, 0, 0).unwrap();
        assert_eq!(out, values);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(flood_fill_minimax(&[0.0; 4], 2, 2, 2, 0).is_err());
        assert!(flood_fill_minimax(&[0.0, f32::NAN, 0.0, 0.0], 2, 2, 0, 0).is_err());
        assert!(flood_fill_minimax(&[0.0; 3], 2, 2, 0, 0).is_err());
    }
}
