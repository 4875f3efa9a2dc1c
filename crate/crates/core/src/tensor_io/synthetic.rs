use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AttentionBlock, AttentionStack};
use crate::error::{Error, Result};

/// Description of a synthetic attention tensor with known region structure.
///
/// Every row places `in_region_mass` uniformly on cells sharing the row's
/// region label and the remainder uniformly on all other cells. Region labels
/// must be contiguous `0..=max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub h: usize,
    pub w: usize,
    pub partition: Vec<u32>,
    pub in_region_mass: f32,
    pub noise_seed: u64,
    /// Relative multiplicative jitter in `[0, 1)` applied before row
    /// renormalization. Zero reproduces the exact block structure.
    #[serde(default)]
    pub noise_amplitude: f32,
}

impl SyntheticSpec {
    /// Left/right halves split at column `w / 2`.
    pub fn halves(h: usize, w: usize, in_region_mass: f32) -> Self {
        let partition = (0..h * w).map(|i| u32::from(i % w >= w / 2)).collect();
        Self {
            h,
            w,
            partition,
            in_region_mass,
            noise_seed: 0,
            noise_amplitude: 0.0,
        }
    }

    pub fn region_count(&self) -> usize {
        self.partition.iter().max().map_or(0, |&m| m as usize + 1)
    }

    fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 {
            return Err(Error::validation("synthetic grid must be non-empty"));
        }
        if self.partition.len() != self.h * self.w {
            return Err(Error::validation(format!(
                "partition has {} labels but the grid has {}x{} = {} cells",
                self.partition.len(),
                self.h,
                self.w,
                self.h * self.w
            )));
        }
        if !(self.in_region_mass > 0.0 && self.in_region_mass <= 1.0) {
            return Err(Error::validation(format!(
                "in_region_mass {} outside (0, 1]",
                self.in_region_mass
            )));
        }
        if !(0.0..1.0).contains(&self.noise_amplitude) {
            return Err(Error::validation(format!(
                "noise_amplitude {} outside [0, 1)",
                self.noise_amplitude
            )));
        }
        Ok(())
    }
}

/// Builds a single-block stack (id `synthetic`, weight 1) from `spec`.
pub fn generate_synthetic_stack(spec: &SyntheticSpec) -> Result<AttentionStack> {
    spec.validate()?;
    let n = spec.h * spec.w;
    let regions = spec.region_count();
    let mut sizes = vec![0usize; regions];
    for &label in &spec.partition {
        sizes[label as usize] += 1;
    }
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::validation(format!("region {empty} has no cells")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
    let mut tensor = vec![0.0f32; n * n];
    let mut row = vec![0.0f64; n];
    for (k, out) in tensor.chunks_exact_mut(n).enumerate() {
        let label = spec.partition[k];
        let inside = sizes[label as usize];
        let outside = n - inside;
        let (in_value, out_value) = if outside == 0 {
            (1.0 / inside as f64, 0.0)
        } else {
            let mass = spec.in_region_mass as f64;
            (mass / inside as f64, (1.0 - mass) / outside as f64)
        };
        for (r, &l) in row.iter_mut().zip(&spec.partition) {
            *r = if l == label { in_value } else { out_value };
        }
        if spec.noise_amplitude > 0.0 {
            let amp = spec.noise_amplitude as f64;
            for r in row.iter_mut() {
                *r *= 1.0 + amp * rng.gen_range(-1.0..=1.0);
            }
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|r| *r /= sum);
        }
        for (o, &r) in out.iter_mut().zip(&row) {
            *o = r as f32;
        }
    }

    let mut stack = AttentionStack::new(
        spec.h,
        spec.w,
        vec![AttentionBlock {
            id: "synthetic".into(),
            tensor,
            default_weight: 1.0,
        }],
    )?;
    stack
        .source_meta
        .insert("backbone".into(), "synthetic".into());
    Ok(stack)
}
