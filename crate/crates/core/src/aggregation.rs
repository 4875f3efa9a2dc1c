//! Weighted combination of attention blocks into one dense transition matrix.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor_io::{AttentionStack, ROW_SUM_TOLERANCE, WEIGHT_SUM_TOLERANCE};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stochasticity {
    RowStochastic,
    /// Rows and columns sum to one within the stored tolerance.
    DoublyStochastic {
        tolerance: f32,
    },
}

/// Dense `n×n` nonnegative matrix over an `h×w` attention grid.
///
/// Cell `(row, col)` maps to index `row·w + col`; entry `[i, j]` is the
/// probability of moving from cell `i` to cell `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    h: usize,
    w: usize,
    data: Vec<f32>,
    stochasticity: Stochasticity,
}

impl TransitionMatrix {
    /// Wraps `data` after checking shape, nonnegativity and the claimed
    /// stochasticity.
    pub fn new(h: usize, w: usize, data: Vec<f32>, stochasticity: Stochasticity) -> Result<Self> {
        let n = h * w;
        if n == 0 || data.len() != n * n {
            return Err(Error::validation(format!(
                "matrix data has {} entries, expected {} for a {h}x{w} grid",
                data.len(),
                n * n
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::validation(format!("matrix holds invalid entry {v}")));
        }
        let m = Self {
            h,
            w,
            data,
            stochasticity,
        };
        let row_dev = max_deviation(&m.row_sums());
        match stochasticity {
            Stochasticity::RowStochastic => {
                if row_dev > ROW_SUM_TOLERANCE {
                    return Err(Error::validation(format!(
                        "row sums deviate from 1 by {row_dev:.3e}"
                    )));
                }
            }
            Stochasticity::DoublyStochastic { tolerance } => {
                let dev = row_dev.max(max_deviation(&m.col_sums()));
                // Slack for the f32 rounding of the stored entries.
                if dev > tolerance as f64 + 1e-5 {
                    return Err(Error::validation(format!(
                        "matrix is not doubly stochastic: deviation {dev:.3e} > {tolerance:e}"
                    )));
                }
            }
        }
        Ok(m)
    }

    pub(crate) fn from_parts_unchecked(
        h: usize,
        w: usize,
        data: Vec<f32>,
        stochasticity: Stochasticity,
    ) -> Self {
        debug_assert_eq!(data.len(), (h * w) * (h * w));
        Self {
            h,
            w,
            data,
            stochasticity,
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    /// Number of cells, `h·w`.
    pub fn n(&self) -> usize {
        self.h * self.w
    }

    pub fn stochasticity(&self) -> Stochasticity {
        self.stochasticity
    }

    pub fn is_doubly_stochastic(&self) -> bool {
        matches!(self.stochasticity, Stochasticity::DoublyStochastic { .. })
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.n();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.n() + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data
            .par_chunks_exact(self.n())
            .map(|r| r.iter().map(|&v| v as f64).sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        col_sums(&self.data, self.n())
    }
}

/// Column sums with a fixed per-column summation order (row 0 first).
pub(crate) fn col_sums(data: &[f32], n: usize) -> Vec<f64> {
    const CHUNK: usize = 64;
    let mut sums = vec![0.0f64; n];
    sums.par_chunks_mut(CHUNK).enumerate().for_each(|(c, out)| {
        let start = c * CHUNK;
        let end = start + out.len();
        for row in data.chunks_exact(n) {
            for (s, &v) in out.iter_mut().zip(&row[start..end]) {
                *s += v as f64;
            }
        }
    });
    sums
}

pub(crate) fn max_deviation(sums: &[f64]) -> f64 {
    sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
}

/// Combines the stack's blocks with `weights` (block id → weight), or with
/// the stack's default weights when `weights` is `None`. Blocks absent from
/// an explicit map get weight 0.
pub fn aggregate(
    stack: &AttentionStack,
    weights: Option<&BTreeMap<String, f32>>,
) -> Result<TransitionMatrix> {
    let resolved: Vec<f64> = match weights {
        None if stack.blocks.len() == 1 => vec![1.0],
        None => stack
            .blocks
            .iter()
            .map(|b| b.default_weight as f64)
            .collect(),
        Some(map) => {
            if let Some(unknown) = map.keys().find(|k| stack.block(k).is_none()) {
                return Err(Error::validation(format!(
                    "weight given for unknown block '{unknown}'"
                )));
            }
            if let Some((id, w)) = map.iter().find(|(_, w)| !(0.0..=1.0).contains(*w)) {
                return Err(Error::validation(format!(
                    "weight {w} for block '{id}' outside [0, 1]"
                )));
            }
            stack
                .blocks
                .iter()
                .map(|b| map.get(&b.id).copied().unwrap_or(0.0) as f64)
                .collect()
        }
    };
    let total: f64 = resolved.iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::validation(format!(
            "aggregation weights sum to {total}, expected 1"
        )));
    }

    let n = stack.cells();
    let active: Vec<(&[f32], f64)> = stack
        .blocks
        .iter()
        .zip(&resolved)
        .filter(|(_, &w)| w != 0.0)
        .map(|(b, &w)| (b.tensor.as_slice(), w))
        .collect();
    let mut data = vec![0.0f32; n * n];
    data.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
        let range = i * n..(i + 1) * n;
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (tensor, w) in &active {
                acc += w * tensor[range.start + j] as f64;
            }
            *o = acc as f32;
        }
    });
    TransitionMatrix::new(stack.h, stack.w, data, Stochasticity::RowStochastic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::{generate_synthetic_stack, AttentionBlock, SyntheticSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_block(id: &str, n: usize, rng: &mut ChaCha8Rng) -> AttentionBlock {
        let mut tensor: Vec<f32> = (0..n * n).map(|_| rng.gen_range(0.01f32..1.0)).collect();
        for row in tensor.chunks_mut(n) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            row.iter_mut().for_each(|v| *v = (*v as f64 / s) as f32);
        }
        AttentionBlock {
            id: id.into(),
            tensor,
            default_weight: 0.5,
        }
    }

    #[test]
    fn equal_blocks_average_to_themselves() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_block("up0", 16, &mut rng);
        let mut b = a.clone();
        b.id = "up1".into();
        let stack = AttentionStack::new(4, 4, vec![a.clone(), b]).unwrap();
        let m = aggregate(&stack, None).unwrap();
        for (x, y) in m.data().iter().zip(&a.tensor) {
            assert!((x - y).abs() <= 1e-7);
        }
        assert_eq!(m.stochasticity(), Stochasticity::RowStochastic);
    }

    #[test]
    fn single_block_is_identity_flattening() {
        let stack = generate_synthetic_stack(&SyntheticSpec::halves(4, 4, 0.8)).unwrap();
        let m = aggregate(&stack, None).unwrap();
        assert_eq!(m.data(), stack.blocks[0].tensor.as_slice());
        assert_eq!((m.h(), m.w(), m.n()), (4, 4, 16));
        // (k,l,r,c) = (0,1,3,2) → row 1, column 3·4+2
        assert_eq!(m.get(1, 14), stack.blocks[0].tensor[16 + 14]);
    }

    #[test]
    fn unknown_block_and_bad_sum_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stack = AttentionStack::new(
            2,
            2,
            vec![
                random_block("up0", 4, &mut rng),
                random_block("up1", 4, &mut rng),
            ],
        )
        .unwrap();
        let unknown: BTreeMap<_, _> = [("down0".to_string(), 1.0f32)].into();
        assert!(matches!(
            aggregate(&stack, Some(&unknown)),
            Err(Error::Validation(_))
        ));
        let short: BTreeMap<_, _> = [("up0".to_string(), 0.3f32), ("up1".to_string(), 0.3)].into();
        assert!(matches!(
            aggregate(&stack, Some(&short)),
            Err(Error::Validation(_))
        ));
        let only: BTreeMap<_, _> = [("up1".to_string(), 1.0f32)].into();
        let m = aggregate(&stack, Some(&only)).unwrap();
        assert_eq!(m.data(), stack.blocks[1].tensor.as_slice());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn aggregation_is_linear_in_the_weights(seed in any::<u64>(), w0 in 0.0f32..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_block("a", 16, &mut rng);
            let b = random_block("b", 16, &mut rng);
            let stack = AttentionStack::new(4, 4, vec![a.clone(), b.clone()]).unwrap();
            let weights: BTreeMap<_, _> = [("a".to_string(), w0), ("b".to_string(), 1.0 - w0)].into();
            let m = aggregate(&stack, Some(&weights)).unwrap();
            for (i, v) in m.data().iter().enumerate() {
                let expected = w0 as f64 * a.tensor[i] as f64 + (1.0 - w0) as f64 * b.tensor[i] as f64;
                prop_assert!((*v as f64 - expected).abs() < 1e-6);
            }
            for s in m.row_sums() {
                prop_assert!((s - 1.0).abs() < 1e-4);
            }
        }
    }
}
