use serde::{Deserialize, Serialize};

use super::{em_log_distribution_idx, resolve_tokens, MechanismError};
use crate::vocab::{EmbeddingTable, Token};

/// Exact enumeration limit for [`verify_dp_bound`].
pub const MAX_ENUMERATION: usize = 1000;

/// Float slack allowed on top of `e^eps`.
pub const RATIO_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCase {
    pub x: Token,
    pub x_prime: Token,
    pub y: Token,
}

/// Worst input pair for one output token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRow {
    pub output: Token,
    pub x: Token,
    pub x_prime: Token,
    pub max_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpReport {
    pub epsilon: f64,
    pub bound: f64,
    pub max_ratio: f64,
    pub worst: WorstCase,
    pub per_output: Vec<OutputRow>,
    pub pass: bool,
}

/// Enumerate `Pr[M(x) = y] / Pr[M(x') = y]` for every pair of inputs and
/// every output, with inputs and outputs both ranging over `candidates`.
pub fn verify_dp_bound(table: &EmbeddingTable, epsilon: f64, candidates: &[Token]) -> Result<DpReport, MechanismError> {
    let ids = resolve_tokens(table, candidates)?;
    verify_dp_bound_with(table, epsilon, candidates, |x| {
        em_log_distribution_idx(table, ids[x], epsilon, &ids)
    })
}

/// Same enumeration over a caller-supplied mechanism.
///
/// `log_dist(i)` returns the log-probabilities over `candidates` for input
/// `candidates[i]`. Used to check that the verifier rejects faulty mechanisms.
pub fn verify_dp_bound_with<F>(
    table: &EmbeddingTable,
    epsilon: f64,
    candidates: &[Token],
    mut log_dist: F,
) -> Result<DpReport, MechanismError>
where
    F: FnMut(usize) -> Result<Vec<f64>, MechanismError>,
{
    if candidates.is_empty() {
        return Err(MechanismError::EmptyCandidates);
    }
    if candidates.len() > MAX_ENUMERATION {
        return Err(MechanismError::EnumerationTooLarge(candidates.len(), MAX_ENUMERATION));
    }
    resolve_tokens(table, candidates)?;
    let n = candidates.len();
    let rows = (0..n).map(&mut log_dist).collect::<Result<Vec<_>, _>>()?;

    let mut per_output = Vec::with_capacity(n);
    let mut best = (f64::NEG_INFINITY, 0, 0, 0);
    for y in 0..n {
        let (mut hi, mut lo) = ((f64::NEG_INFINITY, 0), (f64::INFINITY, 0));
        for (x, row) in rows.iter().enumerate() {
            let lp = row[y];
            if lp > hi.0 {
                hi = (lp, x);
            }
            if lp < lo.0 {
                lo = (lp, x);
            }
        }
        let log_ratio = if hi.0 == lo.0 { 0.0 } else { hi.0 - lo.0 };
        if log_ratio > best.0 {
            best = (log_ratio, hi.1, lo.1, y);
        }
        per_output.push(OutputRow {
            output: candidates[y].clone(),
            x: candidates[hi.1].clone(),
            x_prime: candidates[lo.1].clone(),
            max_ratio: log_ratio.exp(),
        });
    }

    let bound = epsilon.exp();
    let max_ratio = best.0.exp();
    Ok(DpReport {
        epsilon,
        bound,
        max_ratio,
        worst: WorstCase {
            x: candidates[best.1].clone(),
            x_prime: candidates[best.2].clone(),
            y: candidates[best.3].clone(),
        },
        per_output,
        pass: max_ratio <= bound + RATIO_SLACK,
    })
}
