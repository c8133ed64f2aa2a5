//! End-to-end orchestration and the datasets it produces.
//!
//! * encoder pairs `(p, p_eps)` from public prompts,
//! * decoder examples `((p, p_p, r_p), r)` from public prompts,
//! * distillation examples `(x, (y, r))` from private prompts, where only the
//!   perturbed prompt ever reaches the server.

mod datasets;
mod decoder;
mod icl;
pub mod io;
mod run;

pub use datasets::{build_decoder_dataset, build_encoder_dataset, perturb_prompts, DecoderDataset};
pub use decoder::{IclDecoder, IdentityDecoder, RationaleDecoder, RepairDecoder};
pub use icl::{assemble_icl_context, prompt_similarity, IclContext, IclQuery};
pub use io::IoError;
pub use run::{run_fedcot, FedcotRun};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mechanism::MechanismError;
use crate::protocol::{GeneratorError, ProtocolError};
use crate::vocab::Token;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error("decoder produced no tokens")]
    EmptyDecode,
    #[error("need at least {need} public examples, have {have}")]
    InsufficientExamples { need: usize, have: usize },
    #[error("{prompts} prompts but {labels} labels")]
    LengthMismatch { prompts: usize, labels: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("example {0}: {1}")]
    InvalidExample(usize, &'static str),
}

/// Public prompt and its mechanism output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderPair {
    pub prompt: Vec<Token>,
    pub perturbed: Vec<Token>,
    pub epsilon: f64,
}

/// Decoder training example: input `(p, p_p, r_p)`, target `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderExample {
    pub prompt: Vec<Token>,
    pub perturbed_prompt: Vec<Token>,
    pub perturbed_rationale: Vec<Token>,
    pub rationale: Vec<Token>,
}

impl DecoderExample {
    /// `p ++ p_p ++ r_p`, the decoder's input sequence.
    pub fn input(&self) -> Vec<Token> {
        let mut x = self.prompt.clone();
        x.extend(self.perturbed_prompt.iter().cloned());
        x.extend(self.perturbed_rationale.iter().cloned());
        x
    }

    pub fn validate(&self, index: usize) -> Result<(), PipelineError> {
        if self.prompt.is_empty()
            || self.perturbed_prompt.is_empty()
            || self.perturbed_rationale.is_empty()
            || self.rationale.is_empty()
        {
            return Err(PipelineError::InvalidExample(
                index,
                "all four fields must be non-empty",
            ));
        }
        if self.prompt.len() != self.perturbed_prompt.len() {
            return Err(PipelineError::InvalidExample(
                index,
                "prompt length changed by perturbation",
            ));
        }
        Ok(())
    }
}

/// Task-specific training example. `label_only` marks examples whose
/// rationale could not be obtained; they train the label head only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillExample {
    pub input: Vec<Token>,
    pub label: Vec<Token>,
    pub rationale: Vec<Token>,
    #[serde(default)]
    pub label_only: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failure: Option<String>,
}

/// Why an example was left out of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub index: usize,
    pub reason: String,
}
