//! Temporal heterogeneous graph contrastive learning for audio-visual event
//! classification.
//!
//! Clips are segment-level audio and video embeddings. Each clip becomes a
//! graph with temporally weighted intra-modal and cross-modal edges; a graph
//! network with cross-modal attention pools it into a clip embedding that is
//! classified with a focal loss and aligned across modalities with a
//! contrastive loss. Everything, including automatic differentiation, is
//! implemented here on a small reverse-mode tape.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod seeding;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use error::{Error, FormatError, Result};
pub use features::{FeatureSequence, Interval, Modality};
pub use graph::{build_graph, GraphConfig, TemporalHeteroGraph, TemporalMode, XiMode};
pub use loss::LossConfig;
pub use manifest::{ClipRecord, LoadedClip};
pub use metrics::EvalReport;
pub use model::{ModelConfig, ThgnModel};
pub use synth::SynthSpec;
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::{Precision, Tensor};
pub use train::{LossMode, TrainConfig, TrainLog, TrainOutcome};
