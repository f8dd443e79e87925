//! From-scratch neural toolkit: tensors, a reverse-mode tape, layer
//! primitives, AdamW, gradient checking and checkpoint serialisation.
//!
//! Everything runs on `f64` in plain `Vec`s. The models in this crate are
//! small enough that clarity and reproducibility beat vectorisation, and
//! double precision keeps the finite-difference gradient checks sharp.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use checkpoint::{Checkpoint, NamedTensor};
pub use gradcheck::max_rel_error;
pub use layers::{Dense, LstmParams, Mlp};
pub use optim::AdamW;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NeuralError {
    #[error("non-finite value produced by '{op}'")]
    NonFinite { op: &'static str },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}
