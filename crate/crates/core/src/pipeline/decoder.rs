use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use super::{assemble_icl_context, DecoderExample, IclQuery, PipelineError};
use crate::protocol::TextCompletion;
use crate::vocab::{tokenize, EmbeddingTable, Token};

/// Client-side recovery of a rationale from the server's perturbed one.
pub trait RationaleDecoder: Send + Sync {
    fn id(&self) -> &str;

    fn decode(
        &self,
        prompt: &[Token],
        perturbed_prompt: &[Token],
        perturbed_rationale: &[Token],
    ) -> Result<Vec<Token>, PipelineError>;
}

/// Returns the perturbed rationale unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityDecoder;

impl RationaleDecoder for IdentityDecoder {
    fn id(&self) -> &str {
        "identity"
    }

    fn decode(&self, _: &[Token], _: &[Token], rp: &[Token]) -> Result<Vec<Token>, PipelineError> {
        Ok(rp.to_vec())
    }
}

/// Undo substitutions the mechanism made.
///
/// Position `i` of the perturbed prompt is aligned with position `i` of the
/// raw prompt. A rationale word that was introduced by perturbation (present
/// in the perturbed prompt, absent from the raw prompt) is mapped back to the
/// raw word it replaced; the first alignment wins. Everything else passes
/// through.
#[derive(Debug, Clone, Copy, Default)]
pub struct RepairDecoder;

impl RationaleDecoder for RepairDecoder {
    fn id(&self) -> &str {
        "repair"
    }

    fn decode(
        &self,
        prompt: &[Token],
        perturbed_prompt: &[Token],
        perturbed_rationale: &[Token],
    ) -> Result<Vec<Token>, PipelineError> {
        let raw: HashSet<&Token> = prompt.iter().collect();
        let mut back: HashMap<&Token, &Token> = HashMap::new();
        for (orig, pert) in prompt.iter().zip(perturbed_prompt) {
            if orig != pert && !raw.contains(pert) {
                back.entry(pert).or_insert(orig);
            }
        }
        Ok(perturbed_rationale
            .iter()
            .map(|t| back.get(t).map_or_else(|| t.clone(), |o| (*o).clone()))
            .collect())
    }
}

/// In-context decoding: pick the `k` most similar public examples, render
/// them with the query and let a completion backend write the rationale.
pub struct IclDecoder {
    demonstrations: Vec<DecoderExample>,
    k: usize,
    table: Arc<EmbeddingTable>,
    completion: Arc<dyn TextCompletion>,
}

impl IclDecoder {
    pub fn new(
        demonstrations: Vec<DecoderExample>,
        k: usize,
        table: Arc<EmbeddingTable>,
        completion: Arc<dyn TextCompletion>,
    ) -> Result<Self, PipelineError> {
        if k == 0 {
            return Err(PipelineError::ZeroK);
        }
        if demonstrations.len() < k {
            return Err(PipelineError::InsufficientExamples {
                need: k,
                have: demonstrations.len(),
            });
        }
        Ok(Self {
            demonstrations,
            k,
            table,
            completion,
        })
    }
}

impl RationaleDecoder for IclDecoder {
    fn id(&self) -> &str {
        "icl"
    }

    fn decode(
        &self,
        prompt: &[Token],
        perturbed_prompt: &[Token],
        perturbed_rationale: &[Token],
    ) -> Result<Vec<Token>, PipelineError> {
        let query = IclQuery {
            prompt: prompt.to_vec(),
            perturbed_prompt: perturbed_prompt.to_vec(),
            perturbed_rationale: perturbed_rationale.to_vec(),
        };
        let context = assemble_icl_context(&self.demonstrations, query, self.k, &self.table)?;
        let text = self.completion.complete(&context.render())?;
        let tokens = tokenize(&text);
        if tokens.is_empty() {
            return Err(PipelineError::EmptyDecode);
        }
        Ok(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::GeneratorError;

    fn t(s: &str) -> Vec<Token> {
        tokenize(s)
    }

    #[test]
    fn repair_maps_substitutions_back() {
        let p = t("beaver builds dam");
        let pp = t("otter builds weir");
        let rp = t("relate to otter and builds and weir");
        let out = RepairDecoder.decode(&p, &pp, &rp).unwrap();
        assert_eq!(out, t("relate to beaver and builds and dam"));
    }

    #[test]
    fn repair_leaves_raw_words_alone() {
        // `dam` moved position but is a raw word, so it is not rewritten.
        let p = t("beaver dam");
        let pp = t("dam otter");
        let rp = t("dam otter");
        assert_eq!(RepairDecoder.decode(&p, &pp, &rp).unwrap(), t("dam dam"));
    }

    #[test]
    fn identity_passes_through() {
        let rp = t("x y z");
        assert_eq!(IdentityDecoder.decode(&t("a"), &t("b"), &rp).unwrap(), rp);
    }

    #[test]
    fn icl_decoder_renders_and_tokenizes() {
        let table = Arc::new(crate::fixtures::five_token_table());
        let demo = DecoderExample {
            prompt: t("beaver dam"),
            perturbed_prompt: t("river dam"),
            perturbed_rationale: t("about river"),
            rationale: t("about beaver"),
        };
        let completion = |ctx: &str| -> Result<String, GeneratorError> {
            assert!(ctx.contains("perturbed rationale: about river"));
            assert!(ctx.trim_end().ends_with("rationale:"));
            Ok("Because beavers build dams.".into())
        };
        let dec = IclDecoder::new(vec![demo], 1, table, Arc::new(completion)).unwrap();
        let out = dec.decode(&t("cat dog"), &t("dog dog"), &t("about dog")).unwrap();
        assert_eq!(out, t("because beavers build dams"));
    }

    #[test]
    fn icl_decoder_needs_enough_demos() {
        let table = Arc::new(crate::fixtures::five_token_table());
        let completion = |_: &str| -> Result<String, GeneratorError> { Ok(String::new()) };
        assert!(matches!(
            IclDecoder::new(vec![], 1, table.clone(), Arc::new(completion)),
            Err(PipelineError::InsufficientExamples { need: 1, have: 0 })
        ));
        assert!(matches!(
            IclDecoder::new(vec![], 0, table, Arc::new(completion)),
            Err(PipelineError::ZeroK)
        ));
    }
}
