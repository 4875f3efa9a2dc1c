use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use super::{
    classify, score_curve, Label, Method, PromptPoint, ScoreCurve, Segmentation, SessionConfig,
};
use crate::aggregation::{aggregate, TransitionMatrix};
use crate::error::{Error, Result};
use crate::eval::{baseline_map_with_clip, BaselineKind};
use crate::floodfill::flood_fill_minimax;
use crate::jbu::{jbu_upsample, GuideImage};
use crate::markov::{apply_temperature_with_floor, markov_map, prepare_transition};
use crate::tensor_io::AttentionStack;

/// Interactive segmentation state for one image: the prepared transition
/// operator, the prompt points so far and their cached full-resolution maps.
#[derive(Debug, Clone)]
pub struct SessionContext {
    guide: Arc<GuideImage>,
    matrix: Arc<TransitionMatrix>,
    config: SessionConfig,
    points: Vec<PromptPoint>,
    cache: BTreeMap<u32, Arc<Vec<f32>>>,
    chain_iterations: u64,
    maps_built: u64,
}

impl SessionContext {
    /// Aggregates `stack` (default weights when `weights` is `None`) and
    /// prepares the operator for `config.method`.
    pub fn new(
        stack: &AttentionStack,
        weights: Option<&BTreeMap<String, f32>>,
        guide: GuideImage,
        config: SessionConfig,
    ) -> Result<Self> {
        let matrix = aggregate(stack, weights)?;
        Self::from_aggregated(&matrix, guide, config)
    }

    /// Applies the method's temperature (and IPF for M2N2) to a
    /// row-stochastic aggregated matrix.
    pub fn from_aggregated(
        matrix: &TransitionMatrix,
        guide: GuideImage,
        config: SessionConfig,
    ) -> Result<Self> {
        let prepared = prepare_operator(matrix, &config)?;
        Self::from_prepared(Arc::new(prepared), Arc::new(guide), config)
    }

    /// Wraps an operator that was already prepared with
    /// [`prepare_operator`] for the same config.
    pub fn from_prepared(
        matrix: Arc<TransitionMatrix>,
        guide: Arc<GuideImage>,
        config: SessionConfig,
    ) -> Result<Self> {
        config.validate()?;
        if config.method == Method::M2n2 && !matrix.is_doubly_stochastic() {
            return Err(Error::Contract(
                "M2N2 sessions need a doubly stochastic operator".into(),
            ));
        }
        if matrix.w() > guide.width() || matrix.h() > guide.height() {
            return Err(Error::validation(format!(
                "attention grid {}x{} is finer than the {}x{} image",
                matrix.w(),
                matrix.h(),
                guide.width(),
                guide.height()
            )));
        }
        Ok(Self {
            guide,
            matrix,
            config,
            points: Vec::new(),
            cache: BTreeMap::new(),
            chain_iterations: 0,
            maps_built: 0,
        })
    }

    pub fn guide(&self) -> &GuideImage {
        &self.guide
    }

    pub fn matrix(&self) -> &TransitionMatrix {
        &self.matrix
    }

    pub fn shared_matrix(&self) -> Arc<TransitionMatrix> {
        Arc::clone(&self.matrix)
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn points(&self) -> &[PromptPoint] {
        &self.points
    }

    pub fn width(&self) -> usize {
        self.guide.width()
    }

    pub fn height(&self) -> usize {
        self.guide.height()
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    pub fn cached_ids(&self) -> Vec<u32> {
        self.cache.keys().copied().collect()
    }

    /// Total Markov chain steps run by this session.
    pub fn chain_iterations(&self) -> u64 {
        self.chain_iterations
    }

    /// Number of per-point maps computed (cache misses).
    pub fn maps_built(&self) -> u64 {
        self.maps_built
    }

    /// Attention cell containing pixel `(x, y)`.
    pub fn cell_of(&self, x: usize, y: usize) -> usize {
        let (h, w) = (self.matrix.h(), self.matrix.w());
        (y * h / self.height()) * w + x * w / self.width()
    }

    fn check_bounds(&self, x: usize, y: usize) -> Result<()> {
        if x >= self.width() || y >= self.height() {
            return Err(Error::validation(format!(
                "point ({x}, {y}) outside the {}x{} image",
                self.width(),
                self.height()
            )));
        }
        Ok(())
    }

    /// Full-resolution map of `point` without touching the cache, with the
    /// number of chain steps it took.
    pub fn build_point_map(&self, point: &PromptPoint) -> Result<(Vec<f32>, usize)> {
        self.check_bounds(point.x, point.y)?;
        let cell = self.cell_of(point.x, point.y);
        let (h, w) = (self.matrix.h(), self.matrix.w());
        let (low, steps) = match self.config.method {
            Method::M2n2 => {
                let grid = markov_map(&self.matrix, cell, &self.config.markov)?;
                (grid.values_f32(), grid.iterations)
            }
            Method::AttentionNn => (
                baseline_map_with_clip(
                    BaselineKind::AttentionNn,
                    &self.matrix,
                    cell,
                    self.config.kl_clip,
                )?,
                0,
            ),
            Method::KlNn => (
                baseline_map_with_clip(
                    BaselineKind::KlNn,
                    &self.matrix,
                    cell,
                    self.config.kl_clip,
                )?,
                0,
            ),
        };
        let up = jbu_upsample(
            &low,
            w,
            h,
            &self.guide,
            self.config.sigma_spatial,
            self.config.sigma_range,
        )?;
        let mut map = flood_fill_minimax(&up, self.width(), self.height(), point.x, point.y)?;
        let peak = map.iter().copied().fold(0.0f32, f32::max);
        if peak > 0.0 {
            map.iter_mut().for_each(|v| *v /= peak);
        }
        Ok((map, steps))
    }

    /// Cached map of `point`, computing it on a miss.
    pub fn compute_point_map(&mut self, point: &PromptPoint) -> Result<Arc<Vec<f32>>> {
        if let Some(map) = self.cache.get(&point.id) {
            return Ok(Arc::clone(map));
        }
        let (map, steps) = self.build_point_map(point)?;
        let map = Arc::new(map);
        self.chain_iterations += steps as u64;
        self.maps_built += 1;
        self.cache.insert(point.id, Arc::clone(&map));
        Ok(map)
    }

    /// Appends a point and computes its map. On error the session is left
    /// unchanged.
    pub fn add_point(&mut self, x: usize, y: usize, label: Label) -> Result<PromptPoint> {
        self.check_bounds(x, y)?;
        let point = PromptPoint {
            x,
            y,
            label,
            id: self.points.len() as u32,
        };
        self.compute_point_map(&point)?;
        self.points.push(point);
        Ok(point)
    }

    pub fn remove_last_point(&mut self) -> Result<PromptPoint> {
        let point = self
            .points
            .pop()
            .ok_or_else(|| Error::State("no point to remove".into()))?;
        self.cache.remove(&point.id);
        Ok(point)
    }

    /// Makes the session's point list equal to `points` (ids are taken as
    /// insertion indices), reusing the longest matching prefix.
    pub fn sync_points(&mut self, points: &[PromptPoint]) -> Result<()> {
        let keep = self
            .points
            .iter()
            .zip(points)
            .take_while(|(a, b)| a.x == b.x && a.y == b.y && a.label == b.label)
            .count();
        while self.points.len() > keep {
            self.remove_last_point()?;
        }
        for p in &points[keep..] {
            self.add_point(p.x, p.y, p.label)?;
        }
        Ok(())
    }

    fn maps(&self) -> Result<Vec<Arc<Vec<f32>>>> {
        self.points
            .iter()
            .map(|p| {
                self.cache
                    .get(&p.id)
                    .cloned()
                    .ok_or_else(|| Error::State(format!("point {} has no cached map", p.id)))
            })
            .collect()
    }

    /// Score curve and selected threshold for every point.
    pub fn score_curves(&self) -> Result<Vec<ScoreCurve>> {
        let maps = self.maps()?;
        let (w, h) = (self.width(), self.height());
        self.points
            .par_iter()
            .zip(&maps)
            .map(|(p, map)| {
                score_curve(
                    map,
                    w,
                    h,
                    &self.points,
                    p.id,
                    self.config.lambda_grid_size,
                    1.0,
                )
            })
            .collect()
    }

    /// Selected threshold of point `id` given the current points.
    pub fn select_lambda(&self, id: u32) -> Result<f64> {
        let map = self
            .cache
            .get(&id)
            .ok_or_else(|| Error::validation(format!("no map for point {id}")))?;
        score_curve(
            map,
            self.width(),
            self.height(),
            &self.points,
            id,
            self.config.lambda_grid_size,
            1.0,
        )
        .map(|c| c.lambda)
    }

    pub fn segment(&self) -> Result<Segmentation> {
        Ok(self.segment_with_curves()?.0)
    }

    pub fn segment_with_curves(&self) -> Result<(Segmentation, Vec<ScoreCurve>)> {
        let maps = self.maps()?;
        let curves = self.score_curves()?;
        let lambdas: Vec<f64> = curves.iter().map(|c| c.lambda).collect();
        let refs: Vec<&[f32]> = maps.iter().map(|m| m.as_slice()).collect();
        let seg = classify(self.width(), self.height(), &self.points, &refs, &lambdas)?;
        Ok((seg, curves))
    }
}

/// Transition operator used by `config.method`: temperature plus IPF for
/// M2N2, the baseline temperature alone otherwise.
pub fn prepare_operator(
    matrix: &TransitionMatrix,
    config: &SessionConfig,
) -> Result<TransitionMatrix> {
    config.validate()?;
    let floor = config.markov.epsilon_floor;
    match config.method {
        Method::M2n2 => prepare_transition(matrix, &config.markov),
        Method::AttentionNn => {
            apply_temperature_with_floor(matrix, config.attention_nn_temperature, floor)
        }
        Method::KlNn => apply_temperature_with_floor(matrix, config.kl_nn_temperature, floor),
    }
}
