use log::warn;

use super::datasets::perturb_prompts;
use super::{DistillExample, PipelineError, RationaleDecoder};
use crate::mechanism::{ImportanceScorer, PerturbationConfig};
use crate::protocol::RationaleClient;
use crate::vocab::{EmbeddingTable, Token};

/// Result of one client pass over private data.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FedcotRun {
    pub examples: Vec<DistillExample>,
    pub label_only: usize,
}

/// Client-side loop over private prompts: perturb, ask the server for a
/// rationale of the perturbed prompt, decode it locally, emit a
/// distillation example `(p, (y, r))`.
///
/// Raw prompts stay on the client; `client` only ever sees perturbed tokens.
/// A prompt whose rationale cannot be obtained becomes a label-only example
/// with the failure recorded.
#[allow(clippy::too_many_arguments)]
pub fn run_fedcot(
    private_prompts: &[Vec<Token>],
    labels: &[Vec<Token>],
    table: &EmbeddingTable,
    config: &PerturbationConfig,
    scorer: Option<&dyn ImportanceScorer>,
    client: &mut RationaleClient,
    decoder: &dyn RationaleDecoder,
    task_tag: &str,
) -> Result<FedcotRun, PipelineError> {
    if private_prompts.len() != labels.len() {
        return Err(PipelineError::LengthMismatch {
            prompts: private_prompts.len(),
            labels: labels.len(),
        });
    }
    if let Some(i) = labels.iter().position(|l| l.is_empty()) {
        return Err(PipelineError::InvalidExample(i, "empty label"));
    }
    config.validate()?;

    let perturbed = perturb_prompts(private_prompts, table, config, scorer);
    let mut run = FedcotRun::default();
    for (index, ((prompt, label), pp)) in private_prompts.iter().zip(labels).zip(perturbed).enumerate() {
        let rationale = (|| -> Result<Vec<Token>, PipelineError> {
            let pp = pp?;
            let response = client.request_rationale(&pp, task_tag)?;
            let decoded = decoder.decode(prompt, &pp.perturbed, &response.rationale_tokens)?;
            if decoded.is_empty() {
                return Err(PipelineError::EmptyDecode);
            }
            Ok(decoded)
        })();
        let example = match rationale {
            Ok(r) => DistillExample {
                input: prompt.clone(),
                label: label.clone(),
                rationale: r,
                label_only: false,
                failure: None,
            },
            Err(e) => {
                warn!("prompt {index}: falling back to label-only: {e}");
                run.label_only += 1;
                DistillExample {
                    input: prompt.clone(),
                    label: label.clone(),
                    rationale: Vec::new(),
                    label_only: true,
                    failure: Some(e.to_string()),
                }
            }
        };
        run.examples.push(example);
    }
    Ok(run)
}
