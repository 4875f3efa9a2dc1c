//! Threshold scoring: segment-size prior, mean boundary gradient and
//! prompt consistency, evaluated on an evenly spaced threshold grid.

use rayon::prelude::*;
use serde::Serialize;

use super::{PromptPoint, FALLBACK_LAMBDA, MAX_SEGMENT_FRACTION};
use crate::error::{Error, Result};

/// Boundary gradients are summed in 32.32 fixed point so that every
/// summation order gives the same mean.
const FIXED_ONE: f64 = (1u64 << 32) as f64;

fn to_fixed(v: f64) -> i128 {
    (v * FIXED_ONE).round() as i128
}

fn mean_fixed(sum: i128, count: u64) -> f64 {
    if count == 0 {
        0.0
    } else {
        sum as f64 / FIXED_ONE / count as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdScore {
    pub lambda: f64,
    pub s_prior: f64,
    pub s_edge: f64,
    pub s_pos: f64,
    pub s_neg: f64,
    pub total: f64,
}

impl ThresholdScore {
    fn new(lambda: f64, s_prior: f64, s_edge: f64, s_pos: f64, s_neg: f64) -> Self {
        Self {
            lambda,
            s_prior,
            s_edge,
            s_pos,
            s_neg,
            total: s_prior * s_edge * s_pos * s_neg,
        }
    }
}

/// Scores of one point over the whole threshold grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreCurve {
    pub point_id: u32,
    pub scores: Vec<ThresholdScore>,
    /// The selected threshold.
    pub lambda: f64,
    /// True when every candidate scored zero.
    pub fallback: bool,
}

/// 3×3 Sobel gradient magnitude with replicated borders.
pub fn sobel_magnitude(map: &[f32], width: usize, height: usize) -> Vec<f64> {
    debug_assert_eq!(map.len(), width * height);
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, width as isize - 1) as usize;
        let y = y.clamp(0, height as isize - 1) as usize;
        map[y * width + x] as f64
    };
    let mut out = vec![0.0; width * height];
    out.par_chunks_mut(width).enumerate().for_each(|(y, row)| {
        let y = y as isize;
        for (x, o) in row.iter_mut().enumerate() {
            let x = x as isize;
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            *o = (gx * gx + gy * gy).sqrt();
        }
    });
    out
}

fn grid_lambda(k: usize, grid: usize, scale: f64) -> f64 {
    k as f64 * scale / grid as f64
}

fn check_inputs<'p>(
    map: &[f32],
    width: usize,
    height: usize,
    points: &'p [PromptPoint],
    i: u32,
) -> Result<&'p PromptPoint> {
    if map.len() != width * height || map.is_empty() {
        return Err(Error::validation(format!(
            "map has {} values, expected {width}x{height}",
            map.len()
        )));
    }
    if let Some(p) = points.iter().find(|p| p.x >= width || p.y >= height) {
        return Err(Error::validation(format!(
            "point ({}, {}) outside the map",
            p.x, p.y
        )));
    }
    points
        .iter()
        .find(|p| p.id == i)
        .ok_or_else(|| Error::validation(format!("no point with id {i}")))
}

/// Scores the segment `{q : map[q] ≤ lambda}` of point `i`.
pub fn evaluate_scores(
    map: &[f32],
    width: usize,
    height: usize,
    lambda: f64,
    points: &[PromptPoint],
    i: u32,
) -> Result<ThresholdScore> {
    let me = check_inputs(map, width, height, points, i)?;
    let sobel = sobel_magnitude(map, width, height);
    let inside = |q: usize| map[q] as f64 <= lambda;

    let mut size = 0usize;
    let mut edge_sum = 0i128;
    let mut edge_count = 0u64;
    for y in 0..height {
        for x in 0..width {
            let q = y * width + x;
            if !inside(q) {
                continue;
            }
            size += 1;
            let outside_neighbor = (x > 0 && !inside(q - 1))
                || (x + 1 < width && !inside(q + 1))
                || (y > 0 && !inside(q - width))
                || (y + 1 < height && !inside(q + width));
            if outside_neighbor {
                edge_sum += to_fixed(sobel[q]);
                edge_count += 1;
            }
        }
    }
    let s_prior = if (size as f64) < MAX_SEGMENT_FRACTION * (width * height) as f64 {
        1.0
    } else {
        0.0
    };
    let same: Vec<&PromptPoint> = points.iter().filter(|p| p.label == me.label).collect();
    let same_inside = same.iter().filter(|p| inside(p.index(width))).count();
    let s_pos = same_inside as f64 / same.len() as f64;
    let s_neg = if points
        .iter()
        .any(|p| p.label != me.label && inside(p.index(width)))
    {
        0.0
    } else {
        1.0
    };
    Ok(ThresholdScore::new(
        lambda,
        s_prior,
        mean_fixed(edge_sum, edge_count),
        s_pos,
        s_neg,
    ))
}

/// Smallest grid index `k ∈ 1..=grid` whose threshold admits `v`, or
/// `grid + 1` if none does.
fn entry_index(v: f64, grid: usize, scale: f64) -> usize {
    let guess = (v * grid as f64 / scale).ceil();
    let mut k = if guess.is_finite() {
        guess.clamp(1.0, (grid + 1) as f64) as usize
    } else {
        grid + 1
    };
    while k > 1 && v <= grid_lambda(k - 1, grid, scale) {
        k -= 1;
    }
    while k <= grid && v > grid_lambda(k, grid, scale) {
        k += 1;
    }
    k
}

/// Scores of point `i` at every threshold `k·scale/grid`, `k = 1..=grid`,
/// computed in a single sweep over the map. Matches [`evaluate_scores`]
/// exactly at each grid threshold.
pub fn score_curve(
    map: &[f32],
    width: usize,
    height: usize,
    points: &[PromptPoint],
    i: u32,
    grid: usize,
    scale: f64,
) -> Result<ScoreCurve> {
    let me = *check_inputs(map, width, height, points, i)?;
    if grid == 0 || !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::validation(
            "threshold grid must be non-empty with a positive scale",
        ));
    }
    let sobel = sobel_magnitude(map, width, height);
    let entry: Vec<usize> = map
        .par_iter()
        .map(|&v| entry_index(v as f64, grid, scale))
        .collect();

    // Pixel q is in the segment for k ≥ entry[q] and on its boundary for
    // k < the largest entry among its neighbors.
    let (size_diff, count_diff, sum_diff) = (0..height)
        .into_par_iter()
        .fold(
            || {
                (
                    vec![0i64; grid + 2],
                    vec![0i64; grid + 2],
                    vec![0i128; grid + 2],
                )
            },
            |(mut size, mut count, mut sum), y| {
                for x in 0..width {
                    let q = y * width + x;
                    let lo = entry[q];
                    if lo > grid {
                        continue;
                    }
                    size[lo] += 1;
                    let mut hi = lo;
                    if x > 0 {
                        hi = hi.max(entry[q - 1]);
                    }
                    if x + 1 < width {
                        hi = hi.max(entry[q + 1]);
                    }
                    if y > 0 {
                        hi = hi.max(entry[q - width]);
                    }
                    if y + 1 < height {
                        hi = hi.max(entry[q + width]);
                    }
                    if hi > lo {
                        let f = to_fixed(sobel[q]);
                        count[lo] += 1;
                        count[hi] -= 1;
                        sum[lo] += f;
                        sum[hi] -= f;
                    }
                }
                (size, count, sum)
            },
        )
        .reduce(
            || {
                (
                    vec![0i64; grid + 2],
                    vec![0i64; grid + 2],
                    vec![0i128; grid + 2],
                )
            },
            |(mut a, mut b, mut c), (x, y, z)| {
                a.iter_mut().zip(x).for_each(|(p, q)| *p += q);
                b.iter_mut().zip(y).for_each(|(p, q)| *p += q);
                c.iter_mut().zip(z).for_each(|(p, q)| *p += q);
                (a, b, c)
            },
        );

    let same_entries: Vec<usize> = points
        .iter()
        .filter(|p| p.label == me.label)
        .map(|p| entry[p.index(width)])
        .collect();
    let first_opposite = points
        .iter()
        .filter(|p| p.label != me.label)
        .map(|p| entry[p.index(width)])
        .min()
        .unwrap_or(usize::MAX);

    let limit = MAX_SEGMENT_FRACTION * (width * height) as f64;
    let mut scores = Vec::with_capacity(grid);
    let (mut size, mut count, mut sum) = (0i64, 0i64, 0i128);
    for k in 1..=grid {
        size += size_diff[k];
        count += count_diff[k];
        sum += sum_diff[k];
        let s_prior = if (size as f64) < limit { 1.0 } else { 0.0 };
        let s_edge = mean_fixed(sum, count as u64);
        let same_inside = same_entries.iter().filter(|&&e| e <= k).count();
        let s_pos = same_inside as f64 / same_entries.len() as f64;
        let s_neg = if first_opposite <= k { 0.0 } else { 1.0 };
        scores.push(ThresholdScore::new(
            grid_lambda(k, grid, scale),
            s_prior,
            s_edge,
            s_pos,
            s_neg,
        ));
    }

    let mut best: Option<&ThresholdScore> = None;
    for s in &scores {
        if s.total > best.map_or(0.0, |b| b.total) {
            best = Some(s);
        }
    }
    let (lambda, fallback) = match best {
        Some(s) => (s.lambda, false),
        None => (FALLBACK_LAMBDA * scale, true),
    };
    Ok(ScoreCurve {
        point_id: i,
        scores,
        lambda,
        fallback,
    })
}

/// Threshold with the highest total score on the grid `k·scale/grid`;
/// ties go to the smaller threshold and an all-zero curve gives
/// `0.5·scale`.
pub fn select_lambda(
    map: &[f32],
    width: usize,
    height: usize,
    points: &[PromptPoint],
    i: u32,
    grid: usize,
    scale: f64,
) -> Result<f64> {
    Ok(score_curve(map, width, height, points, i, grid, scale)?.lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::Label;
    use proptest::prelude::*;

    fn fg(x: usize, y: usize, id: u32) -> PromptPoint {
        PromptPoint {
            x,
            y,
            label: Label::Foreground,
            id,
        }
    }

    fn bg(x: usize, y: usize, id: u32) -> PromptPoint {
        PromptPoint {
            x,
            y,
            label: Label::Background,
            id,
        }
    }

    /// Independent per-pixel Sobel with explicit kernels.
    fn sobel_oracle(map: &[f32], w: usize, h: usize, x: usize, y: usize) -> f64 {
        const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let (mut gx, mut gy) = (0.0, 0.0);
        for (j, krow) in KX.iter().enumerate() {
            for (i, &kx) in krow.iter().enumerate() {
                let sx = (x as isize + i as isize - 1).clamp(0, w as isize - 1) as usize;
                let sy = (y as isize + j as isize - 1).clamp(0, h as isize - 1) as usize;
                let v = map[sy * w + sx] as f64;
                gx += kx * v;
                gy += KX[i][j] * v;
            }
        }
        (gx * gx + gy * gy).sqrt()
    }

    fn cone_with_step(w: usize, h: usize, cx: usize, cy: usize, step_at: f64) -> Vec<f32> {
        let max_r = ((w * w + h * h) as f64).sqrt();
        let raw: Vec<f64> = (0..w * h)
            .map(|q| {
                let dx = (q % w) as f64 - cx as f64;
                let dy = (q / w) as f64 - cy as f64;
                let r = (dx * dx + dy * dy).sqrt() / max_r;
                if r > step_at {
                    r + 0.5
                } else {
                    r
                }
            })
            .collect();
        let peak = raw.iter().copied().fold(0.0, f64::max);
        raw.iter().map(|v| (v / peak) as f32).collect()
    }

    #[test]
    fn sobel_matches_kernel_oracle() {
        let map = cone_with_step(9, 7, 3, 2, 0.3);
        let s = sobel_magnitude(&map, 9, 7);
        for y in 0..7 {
            for x in 0..9 {
                assert!((s[y * 9 + x] - sobel_oracle(&map, 9, 7, x, y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn boundary_on_step_scores_higher() {
        let (w, h) = (40, 40);
        let map = cone_with_step(w, h, 20, 20, 0.2);
        let points = [fg(20, 20, 0)];
        // Largest value below the step and a threshold well inside the cone.
        let below_step = map
            .iter()
            .copied()
            .filter(|&v| v < 0.3)
            .fold(0.0f32, f32::max) as f64;
        let on_step = evaluate_scores(&map, w, h, below_step, &points, 0).unwrap();
        let inner = evaluate_scores(&map, w, h, below_step * 0.5, &points, 0).unwrap();
        assert!(
            on_step.s_edge > inner.s_edge,
            "{} vs {}",
            on_step.s_edge,
            inner.s_edge
        );

        // Brute-force boundary mean for the step threshold.
        let inside = |q: usize| map[q] as f64 <= below_step;
        let mut acc = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let q = y * w + x;
                let nb = [
                    (x > 0).then(|| q - 1),
                    (x + 1 < w).then(|| q + 1),
                    (y > 0).then(|| q - w),
                    (y + 1 < h).then(|| q + w),
                ];
                if inside(q) && nb.iter().flatten().any(|&n| !inside(n)) {
                    acc.push(sobel_oracle(&map, w, h, x, y));
                }
            }
        }
        let mean = acc.iter().sum::<f64>() / acc.len() as f64;
        assert!((on_step.s_edge - mean).abs() < 1e-8);
    }

    #[test]
    fn large_segment_violates_prior() {
        let map: Vec<f32> = (0..100).map(|q| if q < 50 { 0.1 } else { 0.9 }).collect();
        let s = evaluate_scores(&map, 10, 10, 0.5, &[fg(0, 0, 0)], 0).unwrap();
        assert_eq!(s.s_prior, 0.0);
        assert_eq!(s.total, 0.0);
    }

    #[test]
    fn opposite_point_inside_zeroes_score() {
        let map: Vec<f32> = (0..100)
            .map(|q| if q % 10 < 3 { 0.1 } else { 0.9 })
            .collect();
        let points = [fg(0, 0, 0), bg(1, 5, 1)];
        let s = evaluate_scores(&map, 10, 10, 0.5, &points, 0).unwrap();
        assert_eq!(s.s_neg, 0.0);
        assert_eq!(s.total, 0.0);
    }

    #[test]
    fn same_class_fraction_counts_the_point_itself() {
        let map: Vec<f32> = (0..100)
            .map(|q| if q % 10 < 3 { 0.1 } else { 0.9 })
            .collect();
        let points = [fg(0, 0, 0), fg(8, 8, 1), bg(9, 0, 2)];
        let s = evaluate_scores(&map, 10, 10, 0.5, &points, 0).unwrap();
        assert_eq!(s.s_pos, 0.5);
        assert_eq!(s.s_neg, 1.0);
    }

    #[test]
    fn plateau_threshold_selects_the_disc() {
        let (w, h) = (32, 32);
        let disc = |q: usize| {
            let dx = (q % w) as f64 - 12.0;
            let dy = (q / w) as f64 - 14.0;
            dx * dx + dy * dy <= 36.0
        };
        let mut map: Vec<f32> = (0..w * h)
            .map(|q| if disc(q) { 0.1 } else { 0.9 })
            .collect();
        map[14 * w + 12] = 0.0;
        let points = [fg(12, 14, 0)];
        let lambda = select_lambda(&map, w, h, &points, 0, 256, 1.0).unwrap();
        assert!(lambda > 0.1 && lambda < 0.9, "lambda {lambda}");

        // Exhaustive scan with the direct evaluator.
        let mut best = (0.0, 0.0);
        for k in 1..=256 {
            let l = k as f64 / 256.0;
            let s = evaluate_scores(&map, w, h, l, &points, 0).unwrap();
            if s.total > best.1 {
                best = (l, s.total);
            }
        }
        assert_eq!(best.0, lambda);
        for q in 0..w * h {
            assert_eq!(map[q] as f64 <= lambda, disc(q) || q == 14 * w + 12);
        }
    }

    #[test]
    fn all_zero_scores_fall_back() {
        // The opposite point shares the prompt pixel's value, so it is in
        // every candidate segment.
        let map: Vec<f32> = (0..64).map(|q| (q % 8) as f32 / 7.0).collect();
        let points = [fg(0, 0, 0), bg(0, 5, 1)];
        let curve = score_curve(&map, 8, 8, &points, 0, 256, 1.0).unwrap();
        assert!(curve.fallback);
        assert_eq!(curve.lambda, 0.5);
        assert!(curve.scores.iter().all(|s| s.total == 0.0));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let map = vec![0.0f32; 16];
        assert!(evaluate_scores(&map, 4, 4, 0.5, &[fg(0, 0, 0)], 3).is_err());
        assert!(evaluate_scores(&map, 4, 4, 0.5, &[fg(4, 0, 0)], 0).is_err());
        assert!(score_curve(&map, 4, 4, &[fg(0, 0, 0)], 0, 0, 1.0).is_err());
        assert!(score_curve(&map, 5, 4, &[fg(0, 0, 0)], 0, 8, 1.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn sweep_equals_direct_evaluation(
            w in 2usize..14,
            h in 2usize..14,
            values in proptest::collection::vec(0u8..=20, 196),
            labels in proptest::collection::vec(any::<bool>(), 4),
            coords in proptest::collection::vec((0usize..14, 0usize..14), 4),
            grid in 1usize..40,
        ) {
            let map: Vec<f32> = values[..w * h].iter().map(|&v| v as f32 / 20.0).collect();
            let points: Vec<PromptPoint> = coords
                .iter()
                .zip(&labels)
                .enumerate()
                .map(|(id, (&(x, y), &l))| PromptPoint {
                    x: x % w,
                    y: y % h,
                    label: if l { Label::Foreground } else { Label::Background },
                    id: id as u32,
                })
                .collect();
            let curve = score_curve(&map, w, h, &points, 1, grid, 1.0).unwrap();
            prop_assert_eq!(curve.scores.len(), grid);
            for (k, s) in curve.scores.iter().enumerate() {
                let direct = evaluate_scores(&map, w, h, s.lambda, &points, 1).unwrap();
                prop_assert_eq!(s, &direct, "k = {}", k + 1);
                prop_assert_eq!(s.total, s.s_prior * s.s_edge * s.s_pos * s.s_neg);
            }
            let best = curve.scores.iter().map(|s| s.total).fold(0.0, f64::max);
            if best > 0.0 {
                let first = curve.scores.iter().find(|s| s.total == best).unwrap();
                prop_assert_eq!(first.lambda, curve.lambda);
            } else {
                prop_assert_eq!(curve.lambda, 0.5);
            }
        }

        #[test]
        fn power_of_two_scaling_preserves_the_choice(
            values in proptest::collection::vec(0u8..=50, 100),
            exp in -4i32..6,
        ) {
            let map: Vec<f32> = values.iter().map(|&v| v as f32 / 50.0).collect();
            let c = 2f32.powi(exp);
            let scaled: Vec<f32> = map.iter().map(|v| v * c).collect();
            let points = [fg(3, 3, 0), bg(7, 8, 1)];
            let a = select_lambda(&map, 10, 10, &points, 0, 64, 1.0).unwrap();
            let b = select_lambda(&scaled, 10, 10, &points, 0, 64, c as f64).unwrap();
            prop_assert_eq!(a * c as f64, b);
        }
    }
}
