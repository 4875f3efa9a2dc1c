//! JSON bodies of the HTTP API.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use m2n2::mask::RunLengthMask;
use m2n2::segmenter::{Label, PromptPoint, ScoreCurve, SessionConfig};
use m2n2::tensor_io::SyntheticSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttentionSource {
    /// Base64 of an ATN1 file.
    Atn1 {
        data: String,
    },
    Synthetic {
        spec: SyntheticSpec,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    /// Base64 PNG or JPEG. Optional for synthetic attention, which then
    /// renders its own flat-colored image.
    #[serde(default)]
    pub image: Option<String>,
    pub attention: AttentionSource,
    /// Block id → aggregation weight; the file's defaults when absent.
    #[serde(default)]
    pub weights: Option<BTreeMap<String, f32>>,
    #[serde(default)]
    pub config: Option<SessionConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub method: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClickRequest {
    pub x: usize,
    pub y: usize,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub map_ms: f64,
    pub segment_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub points: Vec<PromptPoint>,
    pub mask: RunLengthMask,
    /// Point id → selected threshold.
    pub lambdas: BTreeMap<String, f64>,
    pub cache_entries: usize,
    pub timing: Timing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub points: Vec<PromptPoint>,
    pub mask: RunLengthMask,
    pub lambdas: BTreeMap<String, f64>,
    pub cache_entries: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub curves: Vec<ScoreCurve>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
