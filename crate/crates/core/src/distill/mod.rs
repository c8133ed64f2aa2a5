//! Multi-task losses on a tiny differentiable model.
//!
//! The model encodes an input as the mean of its token embeddings, adds the
//! mean embedding of the target prefix (teacher forcing), and predicts the
//! next target token through a linear layer and softmax.

mod model;
mod objective;
mod train;

pub use model::{collect_vocab, Params, ToyModel};
pub use objective::{loss_l1, loss_l2, sequence_cross_entropy, Evaluation, L1Parts, L2Parts, LossWeights, Objective};
pub use train::{toy_recipe, train, LossTrace, ToyRecipe, TraceRow, TrainConfig, Trained};

use thiserror::Error;

use crate::vocab::Token;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("token `{0}` is not in the model vocabulary")]
    UnknownToken(Token),
    #[error("target sequence is empty")]
    EmptyTarget,
    #[error("no examples to compute a loss over")]
    EmptyBatch,
    #[error("parameter shapes do not match: {0}")]
    Shape(String),
    #[error("parameters must be finite")]
    NonFinite,
    #[error("loss weights must be finite and nonnegative, got alpha={alpha}, beta={beta}")]
    InvalidWeights { alpha: f64, beta: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(&'static str),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
