//! Simulated-click evaluation and the nearest-neighbor baselines.

mod baseline;
mod benchmark;
mod click;
mod simulate;

pub use baseline::{baseline_map, baseline_map_with_clip, BaselineKind, DEFAULT_KL_CLIP};
pub use benchmark::{
    import_davis, load_guide, load_mask, read_manifest, run_benchmark, write_manifest,
    write_synthetic_dataset, BenchmarkReport, ManifestRow, SkippedInstance, MANIFEST,
};
pub use click::{error_components, next_click, squared_distance_transform, ErrorComponent};
pub use simulate::{simulate_instance, EvalConfig, InstanceOutcome, InstanceRecord};
