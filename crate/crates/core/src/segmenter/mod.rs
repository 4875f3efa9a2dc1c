//! Truncated nearest-neighbor fusion of per-point Markov-maps.

mod scores;
mod session;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jbu::{DEFAULT_SIGMA_RANGE, DEFAULT_SIGMA_SPATIAL};
use crate::markov::MarkovParams;
use crate::mask::BinaryMask;

pub use scores::{
    evaluate_scores, score_curve, select_lambda, sobel_magnitude, ScoreCurve, ThresholdScore,
};
pub use session::{prepare_operator, SessionContext};

/// Segments larger than this fraction of the image score zero.
pub const MAX_SEGMENT_FRACTION: f64 = 0.40;
/// Threshold used when no candidate scores above zero.
pub const FALLBACK_LAMBDA: f64 = 0.5;
pub const DEFAULT_LAMBDA_GRID: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    #[serde(alias = "bg")]
    Background = 0,
    #[serde(alias = "fg")]
    Foreground = 1,
}

impl Label {
    pub fn is_foreground(self) -> bool {
        self == Label::Foreground
    }

    pub fn opposite(self) -> Self {
        match self {
            Label::Background => Label::Foreground,
            Label::Foreground => Label::Background,
        }
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fg" | "foreground" | "1" | "+" => Ok(Label::Foreground),
            "bg" | "background" | "0" | "-" => Ok(Label::Background),
            other => Err(Error::validation(format!("unknown label '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptPoint {
    pub x: usize,
    pub y: usize,
    pub label: Label,
    /// Insertion index within the session.
    pub id: u32,
}

impl PromptPoint {
    pub fn index(&self, width: usize) -> usize {
        self.y * width + self.x
    }
}

/// Source of the per-point low-resolution distance map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    M2n2,
    AttentionNn,
    KlNn,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "m2n2" => Ok(Method::M2n2),
            "attention-nn" => Ok(Method::AttentionNn),
            "kl-nn" => Ok(Method::KlNn),
            other => Err(Error::validation(format!("unknown method '{other}'"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::M2n2 => "m2n2",
            Method::AttentionNn => "attention-nn",
            Method::KlNn => "kl-nn",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub method: Method,
    pub markov: MarkovParams,
    pub sigma_spatial: f64,
    pub sigma_range: f64,
    pub lambda_grid_size: usize,
    pub attention_nn_temperature: f32,
    pub kl_nn_temperature: f32,
    pub kl_clip: f32,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            method: Method::M2n2,
            markov: MarkovParams::default(),
            sigma_spatial: DEFAULT_SIGMA_SPATIAL,
            sigma_range: DEFAULT_SIGMA_RANGE,
            lambda_grid_size: DEFAULT_LAMBDA_GRID,
            attention_nn_temperature: 10.0,
            kl_nn_temperature: 2.0,
            kl_clip: 1e-5,
        }
    }
}

impl SessionConfig {
    pub fn with_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.markov.validate()?;
        if self.lambda_grid_size == 0 {
            return Err(Error::validation("lambda_grid_size must be positive"));
        }
        if !(self.sigma_spatial > 0.0 && self.sigma_range > 0.0) {
            return Err(Error::validation("JBU sigmas must be positive"));
        }
        if !(self.attention_nn_temperature > 0.0 && self.kl_nn_temperature > 0.0) {
            return Err(Error::validation("baseline temperatures must be positive"));
        }
        if !(self.kl_clip > 0.0 && self.kl_clip < 1.0) {
            return Err(Error::validation("kl_clip must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub mask: BinaryMask,
    /// Nearest point id per pixel; `None` only when there are no points.
    pub nearest: Vec<Option<u32>>,
    /// Scaled distance to the nearest point (infinite without points).
    pub distance: Vec<f64>,
    pub per_point_lambda: BTreeMap<u32, f64>,
}

impl Segmentation {
    /// Checks the mask/nearest consistency rules against the point list.
    pub fn check_invariants(&self, points: &[PromptPoint]) -> Result<()> {
        let n = self.mask.data().len();
        if self.nearest.len() != n || self.distance.len() != n {
            return Err(Error::State("segmentation buffers differ in size".into()));
        }
        let label_of: BTreeMap<u32, Label> = points.iter().map(|p| (p.id, p.label)).collect();
        for q in 0..n {
            let fg = self.mask.data()[q];
            match self.nearest[q] {
                None if points.is_empty() => {
                    if fg {
                        return Err(Error::State(format!(
                            "pixel {q} is foreground without points"
                        )));
                    }
                }
                None => return Err(Error::State(format!("pixel {q} has no nearest point"))),
                Some(id) => {
                    let label = *label_of.get(&id).ok_or_else(|| {
                        Error::State(format!("pixel {q} refers to unknown point {id}"))
                    })?;
                    let expected = label.is_foreground() && self.distance[q] <= 1.0;
                    if fg != expected {
                        return Err(Error::State(format!(
                            "pixel {q} mask disagrees with its nearest point"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Truncated nearest-neighbor classification of maps already paired with
/// their thresholds. `maps[i]` belongs to `points[i]`.
pub fn classify(
    width: usize,
    height: usize,
    points: &[PromptPoint],
    maps: &[&[f32]],
    lambdas: &[f64],
) -> Result<Segmentation> {
    let n = width * height;
    if maps.len() != points.len() || lambdas.len() != points.len() {
        return Err(Error::validation(
            "points, maps and thresholds differ in count",
        ));
    }
    if let Some(m) = maps.iter().find(|m| m.len() != n) {
        return Err(Error::validation(format!(
            "map of {} values, expected {n}",
            m.len()
        )));
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
        return Err(Error::validation(format!("threshold {l} must be positive")));
    }
    // Visit points in id order so that ties resolve to the smaller id.
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by_key(|&i| points[i].id);

    let mut mask = vec![false; n];
    let mut nearest = vec![None; n];
    let mut distance = vec![f64::INFINITY; n];
    for q in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for &i in &order {
            let d = maps[i][q] as f64 / lambdas[i];
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, d)) = best {
            nearest[q] = Some(points[i].id);
            distance[q] = d;
            mask[q] = points[i].label.is_foreground() && d <= 1.0;
        }
    }
    Ok(Segmentation {
        mask: BinaryMask::new(width, height, mask)?,
        nearest,
        distance,
        per_point_lambda: points
            .iter()
            .zip(lambdas)
            .map(|(p, &l)| (p.id, l))
            .collect(),
    })
}
