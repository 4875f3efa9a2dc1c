//! Simulated user clicks at the center of the largest error region.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::segmenter::{Label, PromptPoint};

/// A 4-connected set of pixels where prediction and ground truth differ.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorComponent {
    /// Flattened pixel indices in order of discovery.
    pub pixels: Vec<usize>,
    /// Smallest flattened index in the component.
    pub first: usize,
}

/// 4-connected components of `gt XOR pred`, in order of their smallest
/// pixel index. A component may mix missed foreground and false positives.
pub fn error_components(gt: &BinaryMask, pred: &BinaryMask) -> Vec<ErrorComponent> {
    let (w, h) = (gt.width(), gt.height());
    let g = gt.data();
    let p = pred.data();
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if seen[start] || g[start] == p[start] {
            continue;
        }
        let kind = |q: usize| g[q] != p[q];
        let mut pixels = Vec::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(q) = queue.pop_front() {
            pixels.push(q);
            let (x, y) = (q % w, q / w);
            let neighbors = [
                (x > 0).then(|| q - 1),
                (x + 1 < w).then(|| q + 1),
                (y > 0).then(|| q - w),
                (y + 1 < h).then(|| q + w),
            ];
            for n in neighbors.into_iter().flatten() {
                if !seen[n] && kind(n) {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
        out.push(ErrorComponent {
            pixels,
            first: start,
        });
    }
    out
}

/// One-dimensional squared distance transform (lower envelope of
/// parabolas) of `f` into `d`.
fn dt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let r = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[r] + (r * r) as f64)) / (2 * (q - r)) as f64;
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let r = v[k];
        let dq = q as f64 - r as f64;
        *out = dq * dq + f[r];
    }
}

/// Exact squared Euclidean distance of every pixel of `inside` to the
/// nearest pixel outside it, where everything beyond the image border
/// counts as outside.
pub fn squared_distance_transform(inside: &[bool], width: usize, height: usize) -> Vec<u64> {
    // Pad by one pixel of "outside" on every side.
    let (pw, ph) = (width + 2, height + 2);
    let big = ((pw * pw + ph * ph) as f64) * 4.0;
    let mut grid = vec![0.0f64; pw * ph];
    for y in 0..height {
        for x in 0..width {
            if inside[y * width + x] {
                grid[(y + 1) * pw + x + 1] = big;
            }
        }
    }
    let len = pw.max(ph);
    let mut f = vec![0.0; len];
    let mut d = vec![0.0; len];
    let mut v = vec![0usize; len];
    let mut z = vec![0.0; len + 1];
    for x in 0..pw {
        for y in 0..ph {
            f[y] = grid[y * pw + x];
        }
        dt_1d(&f[..ph], &mut d[..ph], &mut v, &mut z);
        for y in 0..ph {
            grid[y * pw + x] = d[y];
        }
    }
    for y in 0..ph {
        f[..pw].copy_from_slice(&grid[y * pw..(y + 1) * pw]);
        dt_1d(&f[..pw], &mut d[..pw], &mut v, &mut z);
        grid[y * pw..(y + 1) * pw].copy_from_slice(&d[..pw]);
    }
    let mut out = vec![0u64; width * height];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = grid[(y + 1) * pw + x + 1].round() as u64;
        }
    }
    out
}

/// Next simulated click: the interior-most pixel of the largest error
/// component (ties: component with the smaller first index, then the
/// smaller pixel index). The label is the ground truth at that pixel.
/// The returned point has id 0.
pub fn next_click(gt: &BinaryMask, pred: &BinaryMask) -> Result<PromptPoint> {
    if !gt.same_shape(pred) {
        return Err(Error::validation(
            "ground truth and prediction differ in size",
        ));
    }
    let components = error_components(gt, pred);
    let mut best: Option<&ErrorComponent> = None;
    for c in &components {
        if best.is_none_or(|b| c.pixels.len() > b.pixels.len()) {
            best = Some(c);
        }
    }
    let comp =
        best.ok_or_else(|| Error::State("prediction already equals the ground truth".into()))?;
    let (w, h) = (gt.width(), gt.height());
    let mut inside = vec![false; w * h];
    comp.pixels.iter().for_each(|&q| inside[q] = true);
    let dist = squared_distance_transform(&inside, w, h);
    let mut pixels = comp.pixels.clone();
    pixels.sort_unstable();
    let mut pick = pixels[0];
    for &q in &pixels {
        if dist[q] > dist[pick] {
            pick = q;
        }
    }
    Ok(PromptPoint {
        x: pick % w,
        y: pick / w,
        label: if gt.data()[pick] {
            Label::Foreground
        } else {
            Label::Background
        },
        id: 0,
    })
}
