use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{DecoderExample, PipelineError};
use crate::vocab::{join_tokens, EmbeddingTable, Token};

/// The private side of an in-context decoding request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclQuery {
    pub prompt: Vec<Token>,
    pub perturbed_prompt: Vec<Token>,
    pub perturbed_rationale: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclContext {
    /// `(perturbed_prompt, perturbed_rationale)` pairs in dataset order.
    pub demonstrations: Vec<(Vec<Token>, Vec<Token>)>,
    /// Dataset indices of the chosen demonstrations, in dataset order.
    pub selected: Vec<usize>,
    pub query: IclQuery,
}

/// Mean best-match utility between two token lists, averaged over both
/// directions. Out-of-vocabulary tokens are ignored; identical lists score 1.
pub fn prompt_similarity(table: &EmbeddingTable, a: &[Token], b: &[Token]) -> f64 {
    let ia: Vec<usize> = a.iter().filter_map(|t| table.index_of(t)).collect();
    let ib: Vec<usize> = b.iter().filter_map(|t| table.index_of(t)).collect();
    if ia.is_empty() || ib.is_empty() {
        return 0.0;
    }
    let directed = |from: &[usize], to: &[usize]| {
        from.iter()
            .map(|&x| {
                to.iter()
                    .map(|&y| table.utility_by_index(x, y))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    (directed(&ia, &ib) + directed(&ib, &ia)) / 2.0
}

/// Choose the `k` public examples whose perturbed prompt is most similar to
/// the query's perturbed prompt. Ties go to the earlier example.
pub fn assemble_icl_context(
    public_examples: &[DecoderExample],
    query: IclQuery,
    k: usize,
    table: &EmbeddingTable,
) -> Result<IclContext, PipelineError> {
    if k == 0 {
        return Err(PipelineError::ZeroK);
    }
    if public_examples.len() < k {
        return Err(PipelineError::InsufficientExamples {
            need: k,
            have: public_examples.len(),
        });
    }
    let mut scored: Vec<(usize, f64)> = public_examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            (
                i,
                prompt_similarity(table, &ex.perturbed_prompt, &query.perturbed_prompt),
            )
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut selected: Vec<usize> = scored.into_iter().take(k).map(|(i, _)| i).collect();
    selected.sort_unstable();
    Ok(IclContext {
        demonstrations: selected
            .iter()
            .map(|&i| {
                let ex = &public_examples[i];
                (ex.perturbed_prompt.clone(), ex.perturbed_rationale.clone())
            })
            .collect(),
        selected,
        query,
    })
}

impl IclContext {
    /// Deterministic text block: demonstrations, then the query, ending with
    /// an open `rationale:` line for the completion.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, (pp, rp)) in self.demonstrations.iter().enumerate() {
            let _ = writeln!(out, "### Example {}", i + 1);
            let _ = writeln!(out, "perturbed prompt: {}", join_tokens(pp));
            let _ = writeln!(out, "perturbed rationale: {}", join_tokens(rp));
            out.push('\n');
        }
        out.push_str("### Query\n");
        let _ = writeln!(out, "prompt: {}", join_tokens(&self.query.prompt));
        let _ = writeln!(out, "perturbed prompt: {}", join_tokens(&self.query.perturbed_prompt));
        let _ = writeln!(
            out,
            "perturbed rationale: {}",
            join_tokens(&self.query.perturbed_rationale)
        );
        out.push_str("rationale:");
        out
    }
}
