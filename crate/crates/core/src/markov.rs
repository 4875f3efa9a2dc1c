//! Markov chains over attention transition matrices.
//!
//! The aggregated attention matrix is sharpened (or flattened) with a
//! temperature, made doubly stochastic by iterative proportional fitting so
//! every chain converges to the uniform distribution, and then iterated from
//! a one-hot start state. The number of steps each cell needs before its
//! probability exceeds `tau · max(p_t)` forms the cell's Markov-map value.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{col_sums, max_deviation, Stochasticity, TransitionMatrix};
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarkovParams {
    pub temperature: f32,
    /// Relative probability threshold in `(0, 1)`.
    pub tau: f32,
    pub max_iters: usize,
    /// Stop IPF once every row and column sum is within this of 1.
    pub ipf_tolerance: f32,
    pub ipf_max_rounds: usize,
    /// Floor applied to probabilities before taking logarithms.
    pub epsilon_floor: f64,
}

impl Default for MarkovParams {
    fn default() -> Self {
        Self {
            temperature: 0.65,
            tau: 0.3,
            max_iters: 1000,
            ipf_tolerance: 1e-4,
            ipf_max_rounds: 500,
            epsilon_floor: DEFAULT_EPSILON_FLOOR,
        }
    }
}

impl MarkovParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::validation(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::validation(format!(
                "tau {} outside (0, 1)",
                self.tau
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::validation("max_iters must be at least 1"));
        }
        if !(self.ipf_tolerance > 0.0) || self.ipf_max_rounds == 0 {
            return Err(Error::validation(
                "IPF tolerance and round cap must be positive",
            ));
        }
        if !(self.epsilon_floor > 0.0) {
            return Err(Error::validation("epsilon_floor must be positive"));
        }
        Ok(())
    }
}

/// Replaces `row` by `softmax(log(max(row, floor)) / temperature)`, which is
/// the same distribution as applying the temperature to the logits that
/// produced `row`. Computed in 64-bit.
pub fn temper_row(row: &mut [f64], temperature: f64, floor: f64) {
    let inv_t = 1.0 / temperature;
    let mut hi = f64::NEG_INFINITY;
    for v in row.iter_mut() {
        *v = v.max(floor).ln() * inv_t;
        hi = hi.max(*v);
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - hi).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Applies the temperature row by row with the default epsilon floor.
pub fn apply_temperature(a: &TransitionMatrix, temperature: f32) -> Result<TransitionMatrix> {
    apply_temperature_with_floor(a, temperature, DEFAULT_EPSILON_FLOOR)
}

pub fn apply_temperature_with_floor(
    a: &TransitionMatrix,
    temperature: f32,
    floor: f64,
) -> Result<TransitionMatrix> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::validation(format!(
            "temperature {temperature} must be > 0"
        )));
    }
    if !(floor > 0.0) {
        return Err(Error::validation("epsilon floor must be positive"));
    }
    let n = a.n();
    let mut data = vec![0.0f32; n * n];
    data.par_chunks_mut(n).enumerate().for_each_init(
        || vec![0.0f64; n],
        |scratch, (i, out)| {
            for (s, &v) in scratch.iter_mut().zip(a.row(i)) {
                *s = v as f64;
            }
            temper_row(scratch, temperature as f64, floor);
            for (o, &s) in out.iter_mut().zip(scratch.iter()) {
                // keep entries representable and strictly positive for IPF
                *o = (s as f32).max(f32::MIN_POSITIVE);
            }
        },
    );
    Ok(TransitionMatrix::from_parts_unchecked(
        a.h(),
        a.w(),
        data,
        Stochasticity::RowStochastic,
    ))
}

/// Outcome of an IPF run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpfReport {
    pub rounds: usize,
    pub residual: f64,
}

/// Alternating row/column normalization (row pass first in each round) until
/// every row and column sum is within `params.ipf_tolerance` of 1.
pub fn ipf_normalize(a: &TransitionMatrix, params: &MarkovParams) -> Result<TransitionMatrix> {
    ipf_normalize_with_report(a, params).map(|(m, _)| m)
}

pub fn ipf_normalize_with_report(
    a: &TransitionMatrix,
    params: &MarkovParams,
) -> Result<(TransitionMatrix, IpfReport)> {
    if let Some(v) = a.data().iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Contract(format!(
            "IPF requires strictly positive entries, found {v}"
        )));
    }
    let n = a.n();
    let tol = params.ipf_tolerance as f64;
    let mut data = a.data().to_vec();
    let mut residual = f64::INFINITY;
    for round in 1..=params.ipf_max_rounds {
        data.par_chunks_mut(n).for_each(|row| {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            row.iter_mut().for_each(|v| *v = (*v as f64 / s) as f32);
        });
        let inv: Vec<f64> = col_sums(&data, n).iter().map(|s| 1.0 / s).collect();
        let row_sums: Vec<f64> = data
            .par_chunks_mut(n)
            .map(|row| {
                let mut s = 0.0f64;
                for (v, &c) in row.iter_mut().zip(&inv) {
                    *v = (*v as f64 * c) as f32;
                    s += *v as f64;
                }
                s
            })
            .collect();
        residual = max_deviation(&row_sums).max(max_deviation(&col_sums(&data, n)));
        if !residual.is_finite() {
            break;
        }
        if residual < tol {
            log::debug!("IPF converged after {round} rounds (residual {residual:.3e})");
            let m = TransitionMatrix::from_parts_unchecked(
                a.h(),
                a.w(),
                data,
                Stochasticity::DoublyStochastic {
                    tolerance: params.ipf_tolerance,
                },
            );
            return Ok((
                m,
                IpfReport {
                    rounds: round,
                    residual,
                },
            ));
        }
    }
    Err(Error::Convergence {
        rounds: params.ipf_max_rounds,
        residual,
    })
}

/// Temperature followed by IPF: the transition operator used for
/// Markov-maps.
pub fn prepare_transition(a: &TransitionMatrix, params: &MarkovParams) -> Result<TransitionMatrix> {
    params.validate()?;
    let tempered = apply_temperature_with_floor(a, params.temperature, params.epsilon_floor)?;
    ipf_normalize(&tempered, params)
}

/// A chain `p_{t+1} = p_t · A` started from a one-hot state.
///
/// Products are accumulated in 64-bit with a fixed summation order per
/// output cell; the state is stored in 32-bit and rescaled to unit mass
/// after every step. Rescaling never changes the ratios `p_t[k] / max p_t`.
pub struct MarkovChain<'a> {
    matrix: &'a TransitionMatrix,
    state: Vec<f32>,
    acc: Vec<f64>,
    t: usize,
}

impl<'a> MarkovChain<'a> {
    pub fn new(matrix: &'a TransitionMatrix, start: usize) -> Result<Self> {
        let n = matrix.n();
        if start >= n {
            return Err(Error::validation(format!(
                "start cell {start} outside 0..{n}"
            )));
        }
        let mut state = vec![0.0f32; n];
        state[start] = 1.0;
        Ok(Self {
            matrix,
            state,
            acc: vec![0.0; n],
            t: 0,
        })
    }

    pub fn state(&self) -> &[f32] {
        &self.state
    }

    pub fn time(&self) -> usize {
        self.t
    }

    /// Advances one step and returns the new state.
    pub fn step(&mut self) -> Result<&[f32]> {
        const CHUNK: usize = 256;
        let n = self.matrix.n();
        let data = self.matrix.data();
        let state = &self.state;
        self.acc
            .par_chunks_mut(CHUNK)
            .enumerate()
            .for_each(|(c, out)| {
                let start = c * CHUNK;
                let len = out.len();
                out.iter_mut().for_each(|v| *v = 0.0);
                for (k, &pk) in state.iter().enumerate() {
                    if pk == 0.0 {
                        continue;
                    }
                    let pk = pk as f64;
                    let row = &data[k * n + start..k * n + start + len];
                    for (o, &a) in out.iter_mut().zip(row) {
                        *o += pk * a as f64;
                    }
                }
            });
        self.t += 1;
        let mass: f64 = self.acc.iter().sum();
        if !(mass.is_finite() && mass > 0.0) {
            return Err(Error::Numeric { iteration: self.t });
        }
        for (p, &a) in self.state.iter_mut().zip(&self.acc) {
            *p = (a / mass) as f32;
        }
        debug_assert!((self.state.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-5);
        Ok(&self.state)
    }
}

/// Per-cell saturation times on the attention grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovGrid {
    pub h: usize,
    pub w: usize,
    /// Interpolated saturation time; `max_iters` where the cell never saturated.
    pub values: Vec<f64>,
    pub saturated: Vec<bool>,
    /// First integer step with `p_t[k] / max p_t > tau`.
    pub crossing: Vec<Option<u32>>,
    /// Chain steps actually performed.
    pub iterations: usize,
}

impl MarkovGrid {
    pub fn values_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }
}

/// Iterates the chain from `start_cell` and records, for every cell, the
/// (linearly interpolated) step at which it first exceeds `tau · max p_t`.
/// Stops early once every cell has saturated.
pub fn markov_map(
    a: &TransitionMatrix,
    start_cell: usize,
    params: &MarkovParams,
) -> Result<MarkovGrid> {
    params.validate()?;
    if !a.is_doubly_stochastic() {
        return Err(Error::Contract(
            "markov_map requires a doubly stochastic matrix".into(),
        ));
    }
    let n = a.n();
    let tau = params.tau as f64;
    let mut chain = MarkovChain::new(a, start_cell)?;

    let mut values = vec![params.max_iters as f64; n];
    let mut saturated = vec![false; n];
    let mut crossing = vec![None; n];
    let mut prev_ratio = vec![0.0f64; n];
    prev_ratio[start_cell] = 1.0;
    values[start_cell] = 0.0;
    saturated[start_cell] = true;
    crossing[start_cell] = Some(0);
    let mut remaining = n - 1;

    while remaining > 0 && chain.time() < params.max_iters {
        let t = chain.time() + 1;
        let state = chain.step()?;
        let peak = state.iter().copied().fold(0.0f32, f32::max) as f64;
        if !(peak > 0.0) {
            return Err(Error::Numeric { iteration: t });
        }
        for k in 0..n {
            if saturated[k] {
                continue;
            }
            let ratio = state[k] as f64 / peak;
            if ratio > tau {
                let before = prev_ratio[k];
                let frac = ((tau - before) / (ratio - before)).clamp(0.0, 1.0);
                values[k] = (t - 1) as f64 + frac;
                saturated[k] = true;
                crossing[k] = Some(t as u32);
                remaining -= 1;
            } else {
                prev_ratio[k] = ratio;
            }
        }
    }

    Ok(MarkovGrid {
        h: a.h(),
        w: a.w(),
        values,
        saturated,
        crossing,
        iterations: chain.time(),
    })
}
