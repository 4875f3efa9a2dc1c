//! Attention tensor stacks: the in-memory type, the `ATN1` file format and
//! backbone-free synthetic generators.
//!
//! A stack holds one `h×w×h×w` tensor per transformer block. Heads are
//! already summed by the exporter, so slice `tensor[k, l, :, :]` is a single
//! probability distribution over the attention grid.

mod format;
mod synthetic;

use std::collections::BTreeMap;

pub use format::{
    read_attention_file, read_attention_from, write_attention_file, write_attention_to,
};
pub use synthetic::{generate_synthetic_stack, SyntheticSpec};

use crate::error::{Error, Result};

/// Tolerance on every attention slice sum. The exporter converts float16
/// attention to float32, which introduces rounding of this order.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Tolerance on the sum of the default block weights.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub id: String,
    /// Row-major `(k, l, r, c)` payload of length `(h·w)²`.
    pub tensor: Vec<f32>,
    pub default_weight: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub h: usize,
    pub w: usize,
    pub blocks: Vec<AttentionBlock>,
    pub source_image_ref: Option<String>,
    pub source_meta: BTreeMap<String, String>,
}

impl AttentionStack {
    /// Builds a stack and checks every invariant.
    pub fn new(h: usize, w: usize, blocks: Vec<AttentionBlock>) -> Result<Self> {
        let stack = Self {
            h,
            w,
            blocks,
            source_image_ref: None,
            source_meta: BTreeMap::new(),
        };
        stack.validate()?;
        Ok(stack)
    }

    /// Number of attention cells, `h·w`.
    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn block(&self, id: &str) -> Option<&AttentionBlock> {
        self.blocks.iter().find(|b| b.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 {
            return Err(Error::validation("attention grid must be non-empty"));
        }
        if self.blocks.is_empty() {
            return Err(Error::validation("attention stack has no blocks"));
        }
        let n = self.cells();
        for (i, block) in self.blocks.iter().enumerate() {
            if self.blocks[..i].iter().any(|b| b.id == block.id) {
                return Err(Error::validation(format!(
                    "duplicate block id '{}'",
                    block.id
                )));
            }
            if block.tensor.len() != n * n {
                return Err(Error::validation(format!(
                    "block '{}' has {} entries, expected {} for a {}x{} grid",
                    block.id,
                    block.tensor.len(),
                    n * n,
                    self.h,
                    self.w
                )));
            }
            if !(0.0..=1.0).contains(&block.default_weight) {
                return Err(Error::validation(format!(
                    "block '{}' default weight {} outside [0, 1]",
                    block.id, block.default_weight
                )));
            }
            validate_rows(&block.id, &block.tensor, n)?;
        }
        if self.blocks.len() > 1 {
            let total: f64 = self.blocks.iter().map(|b| b.default_weight as f64).sum();
            if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                return Err(Error::validation(format!(
                    "default weights sum to {total}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// Checks nonnegativity and the per-row sum tolerance, reporting the worst
/// offending row.
fn validate_rows(id: &str, tensor: &[f32], n: usize) -> Result<()> {
    let mut worst: Option<(usize, f64)> = None;
    for (row, values) in tensor.chunks_exact(n).enumerate() {
        let mut sum = 0.0f64;
        for (col, &v) in values.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::validation(format!(
                    "block '{id}' row {row} column {col} holds invalid entry {v}"
                )));
            }
            sum += v as f64;
        }
        let dev = (sum - 1.0).abs();
        if dev > ROW_SUM_TOLERANCE && worst.is_none_or(|(_, d)| dev > (d - 1.0).abs()) {
            worst = Some((row, sum));
        }
    }
    match worst {
        Some((row, sum)) => Err(Error::validation(format!(
            "block '{id}' row {row} sums to {sum:.6} (worst row; tolerance {ROW_SUM_TOLERANCE:e})"
        ))),
        None => Ok(()),
    }
}
