//! prunelab: a desk-scale laboratory for structured pruning of small
//! decoder-only language models — dependency-group discovery, gradient-based
//! group importance, structural weight removal, low-rank recovery fine-tuning,
//! and prompt-based task evaluation, all on models small enough that every
//! numeric claim can be checked against an independent oracle.

pub mod depgraph;
pub mod eval;
pub mod fdiff;
pub mod importance;
pub mod lora;
pub mod model;
pub mod pruner;
pub mod report;
pub mod rng;
pub mod sampling;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use fdiff::{finite_diff_gradient, FiniteDiffError, ParamMap};
pub use model::{LayerDims, ModelConfig, ModelError, TransformerModel};
pub use tape::{Tape, TapeError, ValueId};
pub use tensor::{ParamId, Scalar, Tensor, TensorError};
