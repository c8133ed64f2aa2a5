use std::collections::{HashMap, HashSet};

use super::MechanismError;
use crate::vocab::Token;

/// Split a mean budget `total_epsilon` over positions, inversely to importance.
///
/// Higher importance means more privacy-sensitive, so it receives a smaller
/// budget. Every budget is clamped to `epsilon_cap`; the clamped excess is
/// redistributed over the remaining positions so the mean stays equal to
/// `total_epsilon`. Zero importance is treated as infinitely insensitive and
/// goes straight to the cap.
pub fn allocate_budgets(total_epsilon: f64, importance: &[f64], epsilon_cap: f64) -> Result<Vec<f64>, MechanismError> {
    if importance.is_empty() {
        return Err(MechanismError::EmptyImportance);
    }
    if !(total_epsilon.is_finite() && total_epsilon > 0.0) {
        return Err(MechanismError::InvalidEpsilon("positive", total_epsilon));
    }
    if !(epsilon_cap.is_finite() && epsilon_cap >= total_epsilon) {
        return Err(MechanismError::InvalidCap {
            cap: epsilon_cap,
            total: total_epsilon,
        });
    }
    if let Some((i, &s)) = importance
        .iter()
        .enumerate()
        .find(|(_, s)| !(s.is_finite() && **s >= 0.0))
    {
        return Err(MechanismError::InvalidImportance(i, s));
    }

    let n = importance.len();
    if importance.iter().all(|&s| s == importance[0]) {
        return Ok(vec![total_epsilon; n]);
    }

    let budget = total_epsilon * n as f64;
    let zeros = importance.iter().filter(|&&s| s == 0.0).count();
    if zeros as f64 * epsilon_cap >= budget {
        return Err(MechanismError::AllocationInfeasible {
            zeros,
            cap: epsilon_cap,
            budget,
        });
    }

    let mut out = vec![0.0; n];
    let mut capped: Vec<bool> = importance.iter().map(|&s| s == 0.0).collect();
    loop {
        let spent = capped.iter().filter(|&&c| c).count() as f64 * epsilon_cap;
        let remaining = budget - spent;
        let weight: f64 = importance
            .iter()
            .zip(&capped)
            .filter(|(_, c)| !**c)
            .map(|(s, _)| 1.0 / s)
            .sum();
        let mut overflow = false;
        for i in 0..n {
            if capped[i] {
                out[i] = epsilon_cap;
                continue;
            }
            out[i] = remaining * (1.0 / importance[i]) / weight;
            if out[i] > epsilon_cap {
                capped[i] = true;
                overflow = true;
            }
        }
        if !overflow {
            return Ok(out);
        }
    }
}

/// Scores each token of a prompt by how privacy-sensitive it is.
pub trait ImportanceScorer: Send + Sync {
    fn score(&self, prompt: &[Token]) -> Vec<f64>;
}

/// Smoothed inverse document frequency over a public corpus:
/// `ln((1 + N) / (1 + df)) + 1`. Rare words score high; unseen words get the
/// maximum score.
#[derive(Debug, Clone, Default)]
pub struct IdfScorer {
    docs: usize,
    df: HashMap<Token, usize>,
}

impl IdfScorer {
    pub fn fit<'a, I>(corpus: I) -> Self
    where
        I: IntoIterator<Item = &'a [Token]>,
    {
        let mut docs = 0;
        let mut df: HashMap<Token, usize> = HashMap::new();
        for doc in corpus {
            docs += 1;
            let unique: HashSet<&Token> = doc.iter().collect();
            for t in unique {
                *df.entry(t.clone()).or_default() += 1;
            }
        }
        Self { docs, df }
    }

    pub fn idf(&self, token: &Token) -> f64 {
        let df = self.df.get(token).copied().unwrap_or(0);
        ((1.0 + self.docs as f64) / (1.0 + df as f64)).ln() + 1.0
    }
}

impl ImportanceScorer for IdfScorer {
    fn score(&self, prompt: &[Token]) -> Vec<f64> {
        prompt.iter().map(|t| self.idf(t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_importance_gives_uniform_budgets() {
        assert_eq!(allocate_budgets(3.0, &[1.0, 1.0, 1.0], 3.0).unwrap(), vec![3.0; 3]);
        assert_eq!(allocate_budgets(2.0, &[0.0, 0.0], 5.0).unwrap(), vec![2.0; 2]);
    }

    #[test]
    fn inverse_proportional_split() {
        // weights (1/2, 1) normalized by 3/2, scaled to sum 6
        let b = allocate_budgets(3.0, &[2.0, 1.0], 6.0).unwrap();
        assert!((b[0] - 2.0).abs() < 1e-12);
        assert!((b[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_importance_is_clamped_and_excess_redistributed() {
        let b = allocate_budgets(3.0, &[0.0, 1.0], 4.0).unwrap();
        assert_eq!(b, vec![4.0, 2.0]);
    }

    #[test]
    fn cap_overflow_is_redistributed() {
        // uncapped shares would be (8, 2, 2) for budget 12; cap 5 moves 3 to the rest
        let b = allocate_budgets(4.0, &[1.0, 4.0, 4.0], 5.0).unwrap();
        assert!((b[0] - 5.0).abs() < 1e-12);
        assert!((b[1] - 3.5).abs() < 1e-12);
        assert!((b[2] - 3.5).abs() < 1e-12);
    }

    #[test]
    fn allocation_errors() {
        assert!(matches!(
            allocate_budgets(1.0, &[], 2.0),
            Err(MechanismError::EmptyImportance)
        ));
        assert!(matches!(
            allocate_budgets(1.0, &[1.0, -1.0], 2.0),
            Err(MechanismError::InvalidImportance(1, _))
        ));
        assert!(matches!(
            allocate_budgets(1.0, &[1.0, f64::INFINITY], 2.0),
            Err(MechanismError::InvalidImportance(1, _))
        ));
        assert!(matches!(
            allocate_budgets(3.0, &[1.0, 2.0], 2.0),
            Err(MechanismError::InvalidCap { .. })
        ));
        assert!(matches!(
            allocate_budgets(1.0, &[0.0, 0.0, 1.0], 10.0),
            Err(MechanismError::AllocationInfeasible { .. })
        ));
    }

    #[test]
    fn idf_ranks_rare_words_higher() {
        let corpus: Vec<Vec<Token>> = [["the", "cat"], ["the", "dog"], ["the", "beaver"]]
            .iter()
            .map(|d| d.iter().map(|w| Token::new(*w).unwrap()).collect())
            .collect();
        let idf = IdfScorer::fit(corpus.iter().map(Vec::as_slice));
        let the = Token::new("the").unwrap();
        let cat = Token::new("cat").unwrap();
        let unseen = Token::new("zebra").unwrap();
        assert!((idf.idf(&the) - 1.0).abs() < 1e-12);
        assert!(idf.idf(&cat) > idf.idf(&the));
        assert!(idf.idf(&unseen) > idf.idf(&cat));
    }

    proptest! {
        #[test]
        fn allocation_conserves_mean_and_respects_cap(
            scores in prop::collection::vec(0.01f64..10.0, 1..20),
            total in 0.1f64..10.0,
            slack in 1.0f64..4.0,
        ) {
            let cap = total * slack;
            let b = allocate_budgets(total, &scores, cap).unwrap();
            let mean = b.iter().sum::<f64>() / b.len() as f64;
            prop_assert!((mean - total).abs() < 1e-9);
            for (i, &e) in b.iter().enumerate() {
                prop_assert!(e > 0.0 && e <= cap + 1e-12);
                for (j, &f) in b.iter().enumerate() {
                    if scores[i] > scores[j] {
                        prop_assert!(e <= f + 1e-12);
                    }
                }
            }
        }
    }
}
