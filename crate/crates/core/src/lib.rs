//! Layer-wise vision-token masking, plateau detection and selective
//! weight merging for small multimodal decoders.

pub mod analysis;
pub mod checkpoint;
pub mod ckpt_io;
pub mod config;
pub mod error;
pub mod eval;
pub mod interventions;
pub mod layout;
pub mod merging;
pub mod model;
pub mod plateau;
pub mod recipe;
pub mod runconfig;
pub mod taskgen;
pub mod tensor;
pub mod train;
pub mod workers;

pub use checkpoint::{Checkpoint, CheckpointKind};
pub use config::ModelConfig;
pub use error::{Error, Result};
pub use layout::{Prompt, SequenceLayout};
pub use model::{Capture, ForwardTrace, Model};
pub use tensor::Tensor;
