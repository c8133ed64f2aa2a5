use log::warn;
use rayon::prelude::*;

use super::{DecoderExample, EncoderPair, PipelineError, SkipRecord};
use crate::mechanism::{
    derive_seed, perturb_prompt, ImportanceScorer, MechanismError, PerturbationConfig, PerturbedPrompt,
};
use crate::protocol::{GeneratorBackend, RationaleClient};
use crate::vocab::{EmbeddingTable, Token};

/// Perturb every prompt with its own rng stream `derive_seed(seed, i)`.
/// Work is spread over the current rayon pool; output order is input order.
pub fn perturb_prompts(
    prompts: &[Vec<Token>],
    table: &EmbeddingTable,
    config: &PerturbationConfig,
    scorer: Option<&dyn ImportanceScorer>,
) -> Vec<Result<PerturbedPrompt, MechanismError>> {
    prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let cfg = config.with_seed(derive_seed(config.rng_seed, i as u64));
            let importance = scorer.map(|s| s.score(p));
            perturb_prompt(table, p, &cfg, importance.as_deref())
        })
        .collect()
}

/// Encoder pairs `(p, p_eps)`, one per public prompt.
pub fn build_encoder_dataset(
    public_prompts: &[Vec<Token>],
    table: &EmbeddingTable,
    config: &PerturbationConfig,
    scorer: Option<&dyn ImportanceScorer>,
) -> Result<Vec<EncoderPair>, PipelineError> {
    config.validate()?;
    perturb_prompts(public_prompts, table, config, scorer)
        .into_iter()
        .map(|r| {
            let pp = r?;
            Ok(EncoderPair {
                prompt: pp.original,
                perturbed: pp.perturbed,
                epsilon: config.epsilon,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecoderDataset {
    pub examples: Vec<DecoderExample>,
    pub skips: Vec<SkipRecord>,
}

/// Decoder examples `((p, p_p, r_p), r)` from public prompts.
///
/// `r_p` comes from the server through `client`; `r` comes from
/// `raw_backend` on the raw public prompt. A prompt whose perturbation,
/// request or raw generation fails is skipped and recorded.
pub fn build_decoder_dataset(
    public_prompts: &[Vec<Token>],
    table: &EmbeddingTable,
    config: &PerturbationConfig,
    scorer: Option<&dyn ImportanceScorer>,
    client: &mut RationaleClient,
    raw_backend: &dyn GeneratorBackend,
    task_tag: &str,
) -> Result<DecoderDataset, PipelineError> {
    config.validate()?;
    let perturbed = perturb_prompts(public_prompts, table, config, scorer);
    let raw: Vec<_> = public_prompts.par_iter().map(|p| raw_backend.generate(p)).collect();

    let mut out = DecoderDataset::default();
    for (index, (pp, r)) in perturbed.into_iter().zip(raw).enumerate() {
        let example = (|| -> Result<DecoderExample, PipelineError> {
            let pp = pp?;
            let rationale = r?;
            let response = client.request_rationale(&pp, task_tag)?;
            let ex = DecoderExample {
                prompt: pp.original,
                perturbed_prompt: pp.perturbed,
                perturbed_rationale: response.rationale_tokens,
                rationale,
            };
            ex.validate(index)?;
            Ok(ex)
        })();
        match example {
            Ok(ex) => out.examples.push(ex),
            Err(e) => {
                warn!("decoder dataset: skipping prompt {index}: {e}");
                out.skips.push(SkipRecord {
                    index,
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::fixtures::{separated_table, synthetic_prompts};
    use crate::protocol::{GeneratorError, LoopbackTransport, MockGenerator};

    struct FailOn(usize, MockGenerator);

    impl GeneratorBackend for FailOn {
        fn id(&self) -> &str {
            "fail-on"
        }
        fn generate(&self, prompt: &[Token]) -> Result<Vec<Token>, GeneratorError> {
            // The failing prompt is recognised by its first word.
            if prompt.first() == Some(&Token::new(crate::fixtures::synthetic_word(self.0)).unwrap()) {
                return Err(GeneratorError::Failed("boom".into()));
            }
            self.1.generate(prompt)
        }
    }

    fn client(backend: Arc<dyn GeneratorBackend>) -> RationaleClient {
        RationaleClient::new(LoopbackTransport::new(backend), "t")
    }

    #[test]
    fn encoder_pairs_preserve_length() {
        let table = separated_table(40, 8, 0.6, 1);
        let prompts = synthetic_prompts(&table, 10, 2);
        let pairs = build_encoder_dataset(&prompts, &table, &PerturbationConfig::uniform(3.0, 9), None).unwrap();
        assert_eq!(pairs.len(), 10);
        for (pair, p) in pairs.iter().zip(&prompts) {
            assert_eq!(&pair.prompt, p);
            assert_eq!(pair.perturbed.len(), p.len());
            assert_eq!(pair.epsilon, 3.0);
        }
    }

    #[test]
    fn encoder_identity_limit() {
        let table = separated_table(40, 8, 0.6, 1);
        let prompts = synthetic_prompts(&table, 10, 2);
        let pairs = build_encoder_dataset(&prompts, &table, &PerturbationConfig::uniform(500.0, 9), None).unwrap();
        assert!(pairs.iter().all(|p| p.prompt == p.perturbed));
    }

    #[test]
    fn encoder_dataset_is_seeded() {
        let table = separated_table(40, 8, 0.6, 1);
        let prompts = synthetic_prompts(&table, 10, 2);
        let cfg = PerturbationConfig::uniform(1.0, 9);
        let a = serde_json::to_string(&build_encoder_dataset(&prompts, &table, &cfg, None).unwrap()).unwrap();
        let b = serde_json::to_string(&build_encoder_dataset(&prompts, &table, &cfg, None).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decoder_dataset_happy_path() {
        let table = separated_table(40, 8, 0.6, 1);
        let prompts = synthetic_prompts(&table, 5, 3);
        let mock = Arc::new(MockGenerator::new(0));
        let mut c = client(mock.clone());
        let ds = build_decoder_dataset(
            &prompts,
            &table,
            &PerturbationConfig::uniform(2.0, 4),
            None,
            &mut c,
            mock.as_ref(),
            "qa",
        )
        .unwrap();
        assert_eq!(ds.examples.len(), 5);
        assert!(ds.skips.is_empty());
        for (i, ex) in ds.examples.iter().enumerate() {
            ex.validate(i).unwrap();
        }
    }

    #[test]
    fn decoder_dataset_skips_failures() {
        let table = separated_table(40, 8, 0.6, 1);
        let mut prompts = synthetic_prompts(&table, 5, 3);
        // Make prompt 3 start with a word no other prompt starts with.
        let marker = Token::new(crate::fixtures::synthetic_word(39)).unwrap();
        prompts[3][0] = marker;
        for (i, p) in prompts.iter().enumerate() {
            if i != 3 {
                assert_ne!(p[0], prompts[3][0]);
            }
        }
        let mock = Arc::new(MockGenerator::new(0));
        let mut c = client(mock);
        let raw = FailOn(39, MockGenerator::new(0));
        let ds = build_decoder_dataset(
            &prompts,
            &table,
            &PerturbationConfig::uniform(2.0, 4),
            None,
            &mut c,
            &raw,
            "qa",
        )
        .unwrap();
        assert_eq!(ds.examples.len(), 4);
        assert_eq!(ds.skips.len(), 1);
        assert_eq!(ds.skips[0].index, 3);
    }

    #[test]
    fn identical_prompts_give_identical_examples() {
        let table = separated_table(40, 8, 0.6, 1);
        let p = synthetic_prompts(&table, 1, 3).remove(0);
        let mock = Arc::new(MockGenerator::new(0));
        let mut c = client(mock.clone());
        // ε large enough that both copies perturb identically.
        let cfg = PerturbationConfig::uniform(500.0, 4);
        let ds = build_decoder_dataset(&[p.clone(), p], &table, &cfg, None, &mut c, mock.as_ref(), "qa").unwrap();
        assert_eq!(ds.examples[0], ds.examples[1]);
    }
}
