//! Distance maps of the attention nearest-neighbor baselines.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::TransitionMatrix;
use crate::error::{Error, Result};

pub const DEFAULT_KL_CLIP: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    /// Negated attention row of the prompt cell.
    AttentionNn,
    /// Symmetric KL divergence between attention rows.
    KlNn,
}

/// Low-resolution distance map of `cell` in `[0, 1]`, row-major `h×w`.
/// The temperature of the baseline is expected to be applied already.
pub fn baseline_map(kind: BaselineKind, a: &TransitionMatrix, cell: usize) -> Result<Vec<f32>> {
    baseline_map_with_clip(kind, a, cell, DEFAULT_KL_CLIP)
}

pub fn baseline_map_with_clip(
    kind: BaselineKind,
    a: &TransitionMatrix,
    cell: usize,
    clip: f32,
) -> Result<Vec<f32>> {
    let n = a.n();
    if cell >= n {
        return Err(Error::validation(format!("cell {cell} outside 0..{n}")));
    }
    let raw = match kind {
        BaselineKind::AttentionNn => a.row(cell).iter().map(|&v| -(v as f64)).collect(),
        BaselineKind::KlNn => {
            if !(clip > 0.0 && clip < 1.0) {
                return Err(Error::validation(format!("clip {clip} outside (0, 1)")));
            }
            let clip = clip as f64;
            let logs: Vec<(f64, f64)> = a
                .data()
                .par_iter()
                .map(|&v| {
                    let v = (v as f64).clamp(clip, 1.0);
                    (v, v.ln())
                })
                .collect();
            let p = &logs[cell * n..(cell + 1) * n];
            (0..n)
                .into_par_iter()
                .map(|l| {
                    let q = &logs[l * n..(l + 1) * n];
                    p.iter()
                        .zip(q)
                        .map(|(&(pv, pl), &(qv, ql))| (pv - qv) * (pl - ql))
                        .sum()
                })
                .collect::<Vec<f64>>()
        }
    };
    Ok(min_max(&raw))
}

fn min_max(raw: &[f64]) -> Vec<f32> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        raw.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect()
    } else {
        vec![0.0; raw.len()]
    }
}
