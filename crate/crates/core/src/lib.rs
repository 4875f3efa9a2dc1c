//! Training-free interactive point-prompt segmentation.
//!
//! Self-attention tensors are aggregated into a transition matrix, made
//! doubly stochastic, and iterated as a Markov chain from each prompt point.
//! The per-cell saturation times form a Markov-map which is upsampled with
//! joint bilateral upsampling, flood filled from the prompt pixel and used
//! as the distance of a truncated nearest-neighbor classifier.

pub mod aggregation;
pub mod error;
pub mod eval;
pub mod floodfill;
pub mod jbu;
pub mod markov;
pub mod mask;
pub mod segmenter;
pub mod tensor_io;
pub mod world;

pub use aggregation::{aggregate, Stochasticity, TransitionMatrix};
pub use error::{Error, Result};
pub use floodfill::flood_fill_minimax;
pub use jbu::{jbu_upsample, GuideImage};
pub use markov::{apply_temperature, ipf_normalize, markov_map, MarkovGrid, MarkovParams};
pub use mask::{BinaryMask, RunLengthMask};
pub use segmenter::{Label, Method, PromptPoint, Segmentation, SessionConfig, SessionContext};
pub use tensor_io::{
    generate_synthetic_stack, read_attention_file, write_attention_file, AttentionBlock,
    AttentionStack, SyntheticSpec,
};
