//! Rationale similarity, accuracy and the privacy/utility sweep.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mechanism::{derive_seed, perturb_prompt, CandidatePolicy, PerturbationConfig};
use crate::pipeline::RationaleDecoder;
use crate::protocol::GeneratorBackend;
use crate::vocab::{EmbeddingTable, Token};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("token ratio is undefined for an empty candidate rationale")]
    EmptyCandidate,
    #[error("length mismatch: {0} predictions vs {1} references")]
    LengthMismatch(usize, usize),
    #[error("nothing to score")]
    Empty,
    #[error("epsilons must be positive, finite and strictly increasing")]
    BadEpsilons,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenRatioReport {
    /// Percent, in `[0, 100]`.
    pub value: f64,
    pub unique_count: usize,
    pub intersection_count: usize,
}

/// Share of the unique words of `r_prime` that also occur in `r`, in percent.
///
/// Asymmetric: the denominator counts only `r_prime`'s vocabulary.
pub fn token_ratio(r_prime: &[Token], r: &[Token]) -> Result<TokenRatioReport, MetricsError> {
    let u: HashSet<String> = r_prime.iter().map(|t| t.as_str().to_lowercase()).collect();
    if u.is_empty() {
        return Err(MetricsError::EmptyCandidate);
    }
    let reference: HashSet<String> = r.iter().map(|t| t.as_str().to_lowercase()).collect();
    let i = u.intersection(&reference).count();
    Ok(TokenRatioReport {
        value: 100.0 * i as f64 / u.len() as f64,
        unique_count: u.len(),
        intersection_count: i,
    })
}

/// Exact-match accuracy of predicted label token sequences.
pub fn accuracy(predictions: &[Vec<Token>], gold: &[Vec<Token>]) -> Result<f64, MetricsError> {
    if predictions.len() != gold.len() {
        return Err(MetricsError::LengthMismatch(predictions.len(), gold.len()));
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / predictions.len() as f64)
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
/// Returns `None` when either side is constant or the lengths differ.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub index: usize,
    pub perturbed_ratio: Option<f64>,
    pub decoded_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub epsilons: Vec<f64>,
    /// Mean TokenRatio(perturbed rationale, original rationale) per epsilon.
    pub mean_perturbed_ratio: Vec<f64>,
    /// Mean TokenRatio(decoded rationale, original rationale) per epsilon.
    pub mean_decoded_ratio: Vec<f64>,
    pub counts: Vec<usize>,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epsilon,mean_perturbed_ratio,mean_decoded_ratio,n\n");
        for i in 0..self.epsilons.len() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                self.epsilons[i], self.mean_perturbed_ratio[i], self.mean_decoded_ratio[i], self.counts[i]
            );
        }
        out
    }

    pub fn write_rows_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for row in &self.rows {
            serde_json::to_writer(&mut w, row)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Spearman correlation between epsilon and the perturbed-rationale means.
    pub fn perturbed_trend(&self) -> Option<f64> {
        spearman(&self.epsilons, &self.mean_perturbed_ratio)
    }
}

/// Settings shared by every epsilon of a sweep.
#[derive(Debug, Clone)]
pub struct SweepSettings {
    pub seed: u64,
    pub candidates: CandidatePolicy,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            candidates: CandidatePolicy::FullVocabulary,
        }
    }
}

struct Outcome {
    perturbed: f64,
    decoded: f64,
}

fn one_prompt(
    table: &EmbeddingTable,
    prompt: &[Token],
    reference: &[Token],
    config: &PerturbationConfig,
    backend: &dyn GeneratorBackend,
    decoder: &dyn RationaleDecoder,
) -> Result<Outcome, String> {
    let pp = perturb_prompt(table, prompt, config, None).map_err(|e| e.to_string())?;
    let rp = backend.generate(&pp.perturbed).map_err(|e| e.to_string())?;
    let decoded = decoder.decode(prompt, &pp.perturbed, &rp).map_err(|e| e.to_string())?;
    let perturbed = token_ratio(&rp, reference).map_err(|e| e.to_string())?.value;
    let decoded = token_ratio(&decoded, reference).map_err(|e| e.to_string())?.value;
    Ok(Outcome { perturbed, decoded })
}

/// Measure rationale similarity against the unperturbed rationale across
/// privacy budgets.
///
/// For each epsilon every prompt is perturbed, sent through `backend`, and
/// decoded with `decoder`; the reference rationale comes from the same
/// backend on the raw prompt. Prompt `i` uses the seed
/// `derive_seed(settings.seed, i)` at every epsilon, so budgets are compared
/// on common random numbers.
pub fn epsilon_sweep(
    prompts: &[Vec<Token>],
    table: &EmbeddingTable,
    epsilons: &[f64],
    backend: &dyn GeneratorBackend,
    decoder: &dyn RationaleDecoder,
    settings: &SweepSettings,
) -> Result<SweepReport, MetricsError> {
    if prompts.is_empty() {
        return Err(MetricsError::Empty);
    }
    if epsilons.is_empty()
        || epsilons.iter().any(|e| !(e.is_finite() && *e > 0.0))
        || epsilons.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(MetricsError::BadEpsilons);
    }

    let references: Vec<Result<Vec<Token>, String>> = prompts
        .par_iter()
        .map(|p| backend.generate(p).map_err(|e| e.to_string()))
        .collect();

    let mut report = SweepReport {
        epsilons: epsilons.to_vec(),
        mean_perturbed_ratio: Vec::with_capacity(epsilons.len()),
        mean_decoded_ratio: Vec::with_capacity(epsilons.len()),
        counts: Vec::with_capacity(epsilons.len()),
        rows: Vec::with_capacity(epsilons.len() * prompts.len()),
    };
    for &eps in epsilons {
        let rows: Vec<SweepRow> = prompts
            .par_iter()
            .zip(&references)
            .enumerate()
            .map(|(i, (prompt, reference))| {
                let config = PerturbationConfig {
                    candidates: settings.candidates.clone(),
                    ..PerturbationConfig::uniform(eps, derive_seed(settings.seed, i as u64))
                };
                let outcome = reference
                    .as_ref()
                    .map_err(Clone::clone)
                    .and_then(|r| one_prompt(table, prompt, r, &config, backend, decoder));
                match outcome {
                    Ok(o) => SweepRow {
                        epsilon: eps,
                        index: i,
                        perturbed_ratio: Some(o.perturbed),
                        decoded_ratio: Some(o.decoded),
                        skipped: None,
                    },
                    Err(reason) => SweepRow {
                        epsilon: eps,
                        index: i,
                        perturbed_ratio: None,
                        decoded_ratio: None,
                        skipped: Some(reason),
                    },
                }
            })
            .collect();
        let scored: Vec<&SweepRow> = rows.iter().filter(|r| r.skipped.is_none()).collect();
        let n = scored.len();
        let mean = |f: fn(&SweepRow) -> Option<f64>| {
            if n == 0 {
                f64::NAN
            } else {
                scored.iter().filter_map(|r| f(r)).sum::<f64>() / n as f64
            }
        };
        report.mean_perturbed_ratio.push(mean(|r| r.perturbed_ratio));
        report.mean_decoded_ratio.push(mean(|r| r.decoded_ratio));
        report.counts.push(n);
        report.rows.extend(rows);
    }
    Ok(report)
}
