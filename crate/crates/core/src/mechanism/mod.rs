//! Token-level exponential mechanism over the embedding feature space.
//!
//! Each input token `x` is replaced by a candidate `y` drawn with probability
//! proportional to `exp(eps * u(x, y) / 2)`, where `u` is the `[0, 1]`-scaled
//! cosine utility. Because `u` is bounded in `[0, 1]` the sensitivity is 1 and
//! every replacement is `eps`-DP with respect to the input token.

mod allocation;
mod verify;

pub use allocation::{allocate_budgets, IdfScorer, ImportanceScorer};
pub use verify::{verify_dp_bound, verify_dp_bound_with, DpReport, OutputRow, WorstCase};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::{EmbeddingTable, Token, VocabError};

/// Sensitivity of the scaled utility.
pub const SENSITIVITY: f64 = 1.0;

#[derive(Debug, Error)]
pub enum MechanismError {
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("epsilon must be a finite {0} number, got {1}")]
    InvalidEpsilon(&'static str, f64),
    #[error("importance list is empty")]
    EmptyImportance,
    #[error("importance at position {0} is {1}; scores must be finite and non-negative")]
    InvalidImportance(usize, f64),
    #[error("importance has {got} entries for {want} in-vocabulary positions")]
    ImportanceLength { got: usize, want: usize },
    #[error("epsilon cap {cap} is below the mean budget {total}")]
    InvalidCap { cap: f64, total: f64 },
    #[error("{zeros} zero-importance positions at cap {cap} exceed the total budget {budget}")]
    AllocationInfeasible { zeros: usize, cap: f64, budget: f64 },
    #[error("adaptive allocation needs per-token importance scores")]
    MissingImportance,
    #[error("exact enumeration over {0} candidates is too large (limit {1})")]
    EnumerationTooLarge(usize, usize),
}

/// Which output tokens the mechanism may emit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidatePolicy {
    FullVocabulary,
    FixedList(Vec<Token>),
    /// The `k` nearest tokens to each input. The candidate set then depends on
    /// the input, which voids the DP guarantee; use only for speed experiments.
    NonPrivateTopK(usize),
}

/// How the per-token budget is spread over a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    Uniform,
    /// Mean budget equals `epsilon`; more sensitive tokens get less.
    Adaptive {
        epsilon_cap: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub epsilon: f64,
    pub candidates: CandidatePolicy,
    pub allocation: Allocation,
    pub rng_seed: u64,
}

impl PerturbationConfig {
    pub fn uniform(epsilon: f64, rng_seed: u64) -> Self {
        Self {
            epsilon,
            candidates: CandidatePolicy::FullVocabulary,
            allocation: Allocation::Uniform,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<(), MechanismError> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(MechanismError::InvalidEpsilon("positive", self.epsilon));
        }
        match &self.candidates {
            CandidatePolicy::FixedList(list) if list.is_empty() => return Err(MechanismError::EmptyCandidates),
            CandidatePolicy::NonPrivateTopK(0) => return Err(MechanismError::EmptyCandidates),
            _ => {}
        }
        if let Allocation::Adaptive { epsilon_cap } = self.allocation {
            if !(epsilon_cap.is_finite() && epsilon_cap >= self.epsilon) {
                return Err(MechanismError::InvalidCap {
                    cap: epsilon_cap,
                    total: self.epsilon,
                });
            }
        }
        Ok(())
    }

    /// The same configuration with a different seed.
    pub fn with_seed(&self, rng_seed: u64) -> Self {
        Self {
            rng_seed,
            ..self.clone()
        }
    }
}

/// A prompt after token-wise replacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedPrompt {
    pub original: Vec<Token>,
    pub perturbed: Vec<Token>,
    pub budgets: Vec<f64>,
    pub oov_positions: Vec<usize>,
}

impl PerturbedPrompt {
    /// Largest per-token budget spent; the guarantee reported for the prompt.
    pub fn epsilon_max(&self) -> f64 {
        self.budgets.iter().copied().fold(0.0, f64::max)
    }

    pub fn len(&self) -> usize {
        self.original.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original.is_empty()
    }
}

/// SplitMix64 step; derives independent per-item seeds from a base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rng stream owned by one prompt position: `seed XOR position`.
pub fn position_rng(seed: u64, position: usize) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed ^ position as u64)
}

fn check_epsilon(epsilon: f64) -> Result<(), MechanismError> {
    if epsilon.is_finite() && epsilon >= 0.0 {
        Ok(())
    } else {
        Err(MechanismError::InvalidEpsilon("non-negative", epsilon))
    }
}

/// Log-probabilities of each candidate for input row `x`.
pub(crate) fn em_log_distribution_idx(
    table: &EmbeddingTable,
    x: usize,
    epsilon: f64,
    candidates: &[usize],
) -> Result<Vec<f64>, MechanismError> {
    check_epsilon(epsilon)?;
    if candidates.is_empty() {
        return Err(MechanismError::EmptyCandidates);
    }
    let scale = epsilon / (2.0 * SENSITIVITY);
    let logits: Vec<f64> = candidates
        .iter()
        .map(|&y| scale * table.utility_by_index(x, y))
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(logits.into_iter().map(|l| l - lse).collect())
}

pub(crate) fn em_distribution_idx(
    table: &EmbeddingTable,
    x: usize,
    epsilon: f64,
    candidates: &[usize],
) -> Result<Vec<f64>, MechanismError> {
    let logp = em_log_distribution_idx(table, x, epsilon, candidates)?;
    let probs: Vec<f64> = logp.into_iter().map(f64::exp).collect();
    let total: f64 = probs.iter().sum();
    Ok(probs.into_iter().map(|p| p / total).collect())
}

fn resolve_tokens(table: &EmbeddingTable, tokens: &[Token]) -> Result<Vec<usize>, MechanismError> {
    tokens
        .iter()
        .map(|t| table.lookup(t).map_err(MechanismError::from))
        .collect()
}

/// Exponential-mechanism output distribution for `x` over `candidates`.
pub fn em_distribution(
    table: &EmbeddingTable,
    x: &Token,
    epsilon: f64,
    candidates: &[Token],
) -> Result<Vec<f64>, MechanismError> {
    let xi = table.lookup(x)?;
    let cands = resolve_tokens(table, candidates)?;
    em_distribution_idx(table, xi, epsilon, &cands)
}

/// Gumbel-max draw: the candidate maximising `epsilon * u / (2 * Δu) + G`,
/// one standard Gumbel `G` per candidate, is an exact sample.
///
/// The noise does not depend on `epsilon`, so draws that share an rng stream
/// are coupled across budgets: `x` has the largest utility, so once it wins
/// it keeps winning as `epsilon` grows, and other winners change only where
/// their lines cross.
pub(crate) fn sample_index<R: Rng + ?Sized>(
    table: &EmbeddingTable,
    x: usize,
    epsilon: f64,
    candidates: &[usize],
    rng: &mut R,
) -> Result<usize, MechanismError> {
    check_epsilon(epsilon)?;
    if candidates.is_empty() {
        return Err(MechanismError::EmptyCandidates);
    }
    let scale = epsilon / (2.0 * SENSITIVITY);
    let gumbel = Gumbel::new(0.0, 1.0).expect("standard gumbel");
    let mut best = (f64::NEG_INFINITY, candidates[0]);
    for &y in candidates {
        let key = scale * table.utility_by_index(x, y) + gumbel.sample(rng);
        if key > best.0 {
            best = (key, y);
        }
    }
    Ok(best.1)
}

/// Draw one replacement for `x` from the exponential mechanism.
pub fn sample_replacement<R: Rng + ?Sized>(
    table: &EmbeddingTable,
    x: &Token,
    epsilon: f64,
    candidates: &[Token],
    rng: &mut R,
) -> Result<Token, MechanismError> {
    let xi = table.lookup(x)?;
    let cands = resolve_tokens(table, candidates)?;
    let y = sample_index(table, xi, epsilon, &cands, rng)?;
    Ok(table.token(y).clone())
}

fn top_k(table: &EmbeddingTable, x: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..table.len()).collect();
    all.sort_by(|&a, &b| {
        table
            .utility_by_index(x, b)
            .total_cmp(&table.utility_by_index(x, a))
            .then(a.cmp(&b))
    });
    all.truncate(k);
    all.sort_unstable();
    all
}

/// Replace every token of `prompt` through the mechanism.
///
/// In-vocabulary tokens use their allocated budget. Out-of-vocabulary tokens
/// are never echoed: they become a uniformly random candidate and are charged
/// a budget of zero.
pub fn perturb_prompt(
    table: &EmbeddingTable,
    prompt: &[Token],
    config: &PerturbationConfig,
    importance: Option<&[f64]>,
) -> Result<PerturbedPrompt, MechanismError> {
    config.validate()?;
    if prompt.is_empty() {
        return Err(MechanismError::EmptyPrompt);
    }
    let fixed = match &config.candidates {
        CandidatePolicy::FullVocabulary | CandidatePolicy::NonPrivateTopK(_) => (0..table.len()).collect::<Vec<_>>(),
        CandidatePolicy::FixedList(list) => resolve_tokens(table, list)?,
    };

    let ids: Vec<Option<usize>> = prompt.iter().map(|t| table.index_of(t)).collect();
    let in_vocab = ids.iter().filter(|i| i.is_some()).count();
    let allocated = match (&config.allocation, in_vocab) {
        (_, 0) => Vec::new(),
        (Allocation::Uniform, n) => vec![config.epsilon; n],
        (Allocation::Adaptive { epsilon_cap }, n) => {
            let scores = importance.ok_or(MechanismError::MissingImportance)?;
            let scores: Vec<f64> = if scores.len() == prompt.len() {
                ids.iter()
                    .zip(scores)
                    .filter(|(i, _)| i.is_some())
                    .map(|(_, s)| *s)
                    .collect()
            } else {
                scores.to_vec()
            };
            if scores.len() != n {
                return Err(MechanismError::ImportanceLength {
                    got: scores.len(),
                    want: n,
                });
            }
            allocate_budgets(config.epsilon, &scores, *epsilon_cap)?
        }
    };

    let mut perturbed = Vec::with_capacity(prompt.len());
    let mut budgets = Vec::with_capacity(prompt.len());
    let mut oov_positions = Vec::new();
    let mut next_budget = allocated.into_iter();
    for (pos, id) in ids.iter().enumerate() {
        let mut rng = position_rng(config.rng_seed, pos);
        match id {
            Some(x) => {
                let eps = next_budget.next().expect("one budget per in-vocabulary token");
                let y = match config.candidates {
                    CandidatePolicy::NonPrivateTopK(k) => sample_index(table, *x, eps, &top_k(table, *x, k), &mut rng)?,
                    _ => sample_index(table, *x, eps, &fixed, &mut rng)?,
                };
                perturbed.push(table.token(y).clone());
                budgets.push(eps);
            }
            None => {
                let y = fixed[rng.random_range(0..fixed.len())];
                perturbed.push(table.token(y).clone());
                budgets.push(0.0);
                oov_positions.push(pos);
            }
        }
    }
    Ok(PerturbedPrompt {
        original: prompt.to_vec(),
        perturbed,
        budgets,
        oov_positions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{five_token_table, three_candidate_table};

    fn tok(s: &str) -> Token {
        Token::new(s).unwrap()
    }

    fn toks(words: &[&str]) -> Vec<Token> {
        words.iter().map(|w| tok(w)).collect()
    }

    // Softmax of (1, 0.5, 0) computed offline with an independent script.
    const EPS2_ORACLE: [f64; 3] = [0.506480391055654, 0.3071958857184984, 0.18632372322584756];

    #[test]
    fn zero_epsilon_is_uniform() {
        let t = five_token_table();
        let p = em_distribution(&t, &tok("cat"), 0.0, t.tokens()).unwrap();
        for q in p {
            assert!((q - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn three_candidate_distribution_matches_oracle() {
        let t = three_candidate_table();
        let p = em_distribution(&t, &tok("a"), 2.0, &toks(&["a", "b", "c"])).unwrap();
        for (got, want) in p.iter().zip(EPS2_ORACLE) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn large_epsilon_concentrates_on_self() {
        // Runner-up utility 0.9: each competitor is suppressed by exp(-500 * 0.1 / 2).
        let t =
            EmbeddingTable::from_rows([("a", vec![1.0, 0.0]), ("b", vec![0.6, 0.8]), ("c", vec![0.0, 1.0])]).unwrap();
        assert!((t.scaled_utility(&tok("a"), &tok("b")).unwrap() - 0.8).abs() < 1e-12);
        let p = em_distribution(&t, &tok("a"), 500.0, t.tokens()).unwrap();
        let bound = 1.0 / (1.0 + 2.0 * (-25.0f64).exp());
        assert!(p[0] >= bound - 1e-15);
        assert!(p[0] >= 1.0 - 1e-6);
        // No overflow at very large budgets.
        let p = em_distribution(&t, &tok("a"), 1e6, t.tokens()).unwrap();
        assert_eq!(p[0], 1.0);
    }

    #[test]
    fn distribution_errors() {
        let t = five_token_table();
        assert!(matches!(
            em_distribution(&t, &tok("cat"), 1.0, &[]),
            Err(MechanismError::EmptyCandidates)
        ));
        assert!(matches!(
            em_distribution(&t, &tok("zebra"), 1.0, t.tokens()),
            Err(MechanismError::Vocab(VocabError::OutOfVocabulary(_)))
        ));
        assert!(matches!(
            em_distribution(&t, &tok("cat"), -1.0, t.tokens()),
            Err(MechanismError::InvalidEpsilon(..))
        ));
    }

    #[test]
    fn sampler_returns_self_at_large_epsilon() {
        let t = five_token_table();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for x in t.tokens() {
            for _ in 0..50 {
                assert_eq!(&sample_replacement(&t, x, 500.0, t.tokens(), &mut rng).unwrap(), x);
            }
        }
    }

    fn frequencies(eps: f64, draws: usize) -> [f64; 3] {
        let t = three_candidate_table();
        let cands = toks(&["a", "b", "c"]);
        let mut rng = ChaCha20Rng::seed_from_u64(2024);
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            let y = sample_replacement(&t, &tok("a"), eps, &cands, &mut rng).unwrap();
            counts[t.index_of(&y).unwrap()] += 1;
        }
        counts.map(|c| c as f64 / draws as f64)
    }

    #[test]
    fn sampler_uniform_at_zero_epsilon() {
        for f in frequencies(0.0, 100_000) {
            assert!((f - 1.0 / 3.0).abs() < 0.01, "{f}");
        }
    }

    #[test]
    fn sampler_matches_distribution_at_eps2() {
        for (f, want) in frequencies(2.0, 100_000).iter().zip(EPS2_ORACLE) {
            assert!((f - want).abs() < 0.01, "{f} vs {want}");
        }
    }

    #[test]
    fn all_oov_prompt_is_uniform_with_zero_budgets() {
        let t = five_token_table();
        let prompt = toks(&["zebra", "quokka", "yak"]);
        let pp = perturb_prompt(&t, &prompt, &PerturbationConfig::uniform(1.0, 3), None).unwrap();
        assert_eq!(pp.budgets, vec![0.0; 3]);
        assert_eq!(pp.oov_positions, vec![0, 1, 2]);
        assert!(pp.perturbed.iter().all(|y| t.contains(y)));
        assert_eq!(pp.epsilon_max(), 0.0);
    }

    #[test]
    fn identity_limit_on_separated_fixture() {
        let t = five_token_table();
        let prompt = toks(&["beaver", "dam", "river", "cat", "dog", "dam"]);
        let pp = perturb_prompt(&t, &prompt, &PerturbationConfig::uniform(500.0, 11), None).unwrap();
        assert_eq!(pp.perturbed, prompt);
    }

    #[test]
    fn seeded_perturbation_is_pinned() {
        let t = five_token_table();
        let prompt = toks(&["beaver", "dam", "river", "cat", "dog"]);
        let config = PerturbationConfig::uniform(1.0, 42);
        let a = perturb_prompt(&t, &prompt, &config, None).unwrap();
        let b = perturb_prompt(&t, &prompt, &config, None).unwrap();
        assert_eq!(a, b);
        let words: Vec<&str> = a.perturbed.iter().map(Token::as_str).collect();
        assert_eq!(words, GOLDEN_EPS1_SEED42);
    }

    // Recorded once from the seeded sampler.
    const GOLDEN_EPS1_SEED42: [&str; 5] = ["beaver", "river", "beaver", "cat", "river"];

    #[test]
    fn mixed_prompt_records_oov() {
        let t = five_token_table();
        let prompt = toks(&["the", "beaver", "built", "a", "dam"]);
        let pp = perturb_prompt(&t, &prompt, &PerturbationConfig::uniform(2.0, 5), None).unwrap();
        assert_eq!(pp.oov_positions, vec![0, 2, 3]);
        assert_eq!(pp.budgets, vec![0.0, 2.0, 0.0, 0.0, 2.0]);
        assert_eq!(pp.perturbed.len(), prompt.len());
    }

    #[test]
    fn adaptive_budgets_follow_importance() {
        let t = five_token_table();
        let prompt = toks(&["beaver", "dam"]);
        let config = PerturbationConfig {
            epsilon: 3.0,
            candidates: CandidatePolicy::FullVocabulary,
            allocation: Allocation::Adaptive { epsilon_cap: 6.0 },
            rng_seed: 1,
        };
        let pp = perturb_prompt(&t, &prompt, &config, Some(&[2.0, 1.0])).unwrap();
        assert!((pp.budgets[0] - 2.0).abs() < 1e-12);
        assert!((pp.budgets[1] - 4.0).abs() < 1e-12);
        assert!((pp.epsilon_max() - 4.0).abs() < 1e-12);
        assert!(matches!(
            perturb_prompt(&t, &prompt, &config, None),
            Err(MechanismError::MissingImportance)
        ));
    }

    #[test]
    fn fixed_list_restricts_outputs() {
        let t = five_token_table();
        let config = PerturbationConfig {
            candidates: CandidatePolicy::FixedList(toks(&["cat", "dog"])),
            ..PerturbationConfig::uniform(0.5, 8)
        };
        let prompt = toks(&["beaver", "dam", "river", "zebra"]);
        let pp = perturb_prompt(&t, &prompt, &config, None).unwrap();
        assert!(pp.perturbed.iter().all(|y| y.as_str() == "cat" || y.as_str() == "dog"));
    }

    #[test]
    fn top_k_picks_nearest() {
        let t = five_token_table();
        let x = t.lookup(&tok("cat")).unwrap();
        let near = top_k(&t, x, 2);
        assert!(near.contains(&x));
        assert!(near.contains(&t.lookup(&tok("dog")).unwrap()));
    }

    #[test]
    fn config_validation() {
        assert!(PerturbationConfig::uniform(0.0, 1).validate().is_err());
        assert!(PerturbationConfig::uniform(f64::NAN, 1).validate().is_err());
        let bad_cap = PerturbationConfig {
            allocation: Allocation::Adaptive { epsilon_cap: 1.0 },
            ..PerturbationConfig::uniform(2.0, 1)
        };
        assert!(matches!(bad_cap.validate(), Err(MechanismError::InvalidCap { .. })));
        let t = five_token_table();
        assert!(matches!(
            perturb_prompt(&t, &[], &PerturbationConfig::uniform(1.0, 1), None),
            Err(MechanismError::EmptyPrompt)
        ));
    }
}
