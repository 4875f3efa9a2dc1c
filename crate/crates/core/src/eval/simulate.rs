use serde::{Deserialize, Serialize};

use super::click::next_click;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::segmenter::PromptPoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub max_clicks: usize,
    pub iou_targets: Vec<f64>,
    /// Stop clicking once every target is reached; the remaining curve
    /// entries repeat the last IoU.
    pub stop_when_reached: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_clicks: 20,
            iou_targets: vec![0.85, 0.90],
            stop_when_reached: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_clicks == 0 {
            return Err(Error::validation("max_clicks must be at least 1"));
        }
        if self.iou_targets.is_empty() {
            return Err(Error::validation("at least one IoU target is required"));
        }
        if let Some(t) = self.iou_targets.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::validation(format!("IoU target {t} outside (0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub instance_id: String,
    /// Image path or other reference.
    pub image: String,
    pub gt: BinaryMask,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceOutcome {
    pub instance_id: String,
    /// Clicks needed per target, `max_clicks` when never reached.
    pub noc: Vec<usize>,
    pub reached: Vec<bool>,
    /// IoU after each click, `max_clicks` entries.
    pub ious: Vec<f64>,
    pub points: Vec<PromptPoint>,
    /// Set when the segmenter failed; the instance then counts as unsolved.
    pub error: Option<String>,
}

impl InstanceOutcome {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

/// Runs the click loop for one instance. `segment` maps the full point
/// list to a predicted mask.
pub fn simulate_instance<F>(
    record: &InstanceRecord,
    mut segment: F,
    config: &EvalConfig,
) -> InstanceOutcome
where
    F: FnMut(&[PromptPoint]) -> Result<BinaryMask>,
{
    let targets = &config.iou_targets;
    let mut outcome = InstanceOutcome {
        instance_id: record.instance_id.clone(),
        noc: vec![config.max_clicks; targets.len()],
        reached: vec![false; targets.len()],
        ious: Vec::with_capacity(config.max_clicks),
        points: Vec::new(),
        error: None,
    };
    let (w, h) = (record.gt.width(), record.gt.height());
    let mut pred = BinaryMask::empty(w, h);
    for click in 1..=config.max_clicks {
        let iou = if pred == record.gt {
            // Nothing left to correct.
            1.0
        } else {
            let mut point = match next_click(&record.gt, &pred) {
                Ok(p) => p,
                Err(e) => {
                    outcome.error = Some(e.to_string());
                    break;
                }
            };
            point.id = outcome.points.len() as u32;
            outcome.points.push(point);
            match segment(&outcome.points) {
                Ok(mask) if mask.same_shape(&record.gt) => pred = mask,
                Ok(mask) => {
                    outcome.error = Some(format!(
                        "segmenter returned a {}x{} mask for a {w}x{h} instance",
                        mask.width(),
                        mask.height()
                    ));
                    break;
                }
                Err(e) => {
                    outcome.error = Some(e.to_string());
                    break;
                }
            }
            pred.iou(&record.gt)
        };
        outcome.ious.push(iou);
        for (t, &target) in targets.iter().enumerate() {
            if !outcome.reached[t] && iou >= target {
                outcome.reached[t] = true;
                outcome.noc[t] = click;
            }
        }
        if config.stop_when_reached && outcome.reached.iter().all(|&r| r) {
            break;
        }
    }
    if outcome.error.is_some() {
        outcome.noc = vec![config.max_clicks; targets.len()];
        outcome.reached = vec![false; targets.len()];
    }
    let last = outcome.ious.last().copied().unwrap_or(0.0);
    outcome.ious.resize(config.max_clicks, last);
    outcome
}
