//! Small deterministic embedding tables and prompt sets.
//!
//! These back the examples, the CLI `fixture` command and the test suites, so
//! everything can run without downloading real word vectors.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::vocab::{EmbeddingTable, Token};

/// Five hand-placed words in four dimensions. Pairwise cosine stays below
/// 0.67, so a large budget always keeps the input token.
pub fn five_token_table() -> EmbeddingTable {
    EmbeddingTable::from_rows([
        ("beaver", vec![0.9, 0.1, 0.1, -0.3]),
        ("dam", vec![0.3, 0.9, 0.0, 0.1]),
        ("river", vec![0.0, 0.5, 0.8, -0.2]),
        ("cat", vec![-0.1, 0.0, 0.3, 0.9]),
        ("dog", vec![-0.5, -0.3, 0.6, 0.4]),
    ])
    .expect("fixture rows are valid")
}

/// Three words with scaled utilities 1, 0.5 and 0 relative to `a`.
pub fn three_candidate_table() -> EmbeddingTable {
    EmbeddingTable::from_rows([("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0]), ("c", vec![-1.0, 0.0])])
        .expect("fixture rows are valid")
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Pronounceable pseudo-word for `idx`; distinct for every `idx < 80^3`.
pub fn synthetic_word(idx: usize) -> String {
    let n = ONSETS.len() * VOWELS.len();
    let mut rest = idx;
    let mut word = String::new();
    for _ in 0..3 {
        let syl = rest % n;
        rest /= n;
        word.push_str(ONSETS[syl / VOWELS.len()]);
        word.push_str(VOWELS[syl % VOWELS.len()]);
    }
    word
}

/// Random table whose pairwise cosine never exceeds `max_cos`.
///
/// Rows are rejection-sampled from an isotropic Gaussian, so `dim` has to be
/// large enough for `size` vectors to fit under the threshold.
pub fn separated_table(size: usize, dim: usize, max_cos: f64, seed: u64) -> EmbeddingTable {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(size);
    let mut attempts = 0usize;
    while rows.len() < size {
        attempts += 1;
        assert!(
            attempts < size * 10_000,
            "cannot place {size} vectors in {dim} dims under cosine {max_cos}"
        );
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        let ok = rows
            .iter()
            .all(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() <= max_cos);
        if ok {
            rows.push(v);
        }
    }
    EmbeddingTable::from_rows(rows.into_iter().enumerate().map(|(i, v)| (synthetic_word(i), v)))
        .expect("synthetic rows are valid")
}

pub const SWEEP_CLUSTERS: usize = 20;
pub const SWEEP_CLUSTER_SIZE: usize = 10;

/// Table used by the sweep and end-to-end demos: 20 topics of 10 words in
/// 32 dimensions.
pub fn sweep_table() -> EmbeddingTable {
    clustered_table(SWEEP_CLUSTERS, SWEEP_CLUSTER_SIZE, 32, 1.5, 7)
}

/// Topical prompts over `sweep_table`.
pub fn sweep_prompts(count: usize, seed: u64) -> Vec<Vec<Token>> {
    topical_prompts(SWEEP_CLUSTERS, SWEEP_CLUSTER_SIZE, count, seed)
}

/// `count` prompts of 5 to 8 distinct in-vocabulary words each.
pub fn synthetic_prompts(table: &EmbeddingTable, count: usize, seed: u64) -> Vec<Vec<Token>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let len = rng.random_range(5..=8);
            let mut picked: Vec<Token> = Vec::with_capacity(len);
            while picked.len() < len {
                let t = table.tokens().choose(&mut rng).expect("table is non-empty");
                if !picked.contains(t) {
                    picked.push(t.clone());
                }
            }
            picked
        })
        .collect()
}

/// Topical table: `clusters` groups of `per_cluster` words. Word `i` belongs
/// to cluster `i / per_cluster`. Each vector is its cluster centre scaled by
/// `spread` plus isotropic noise, so words in one cluster have cosine near
/// `spread^2 / (spread^2 + 1)` and words in different clusters near 0.
pub fn clustered_table(clusters: usize, per_cluster: usize, dim: usize, spread: f64, seed: u64) -> EmbeddingTable {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let unit = |rng: &mut ChaCha20Rng| {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    };
    let centres: Vec<Vec<f64>> = (0..clusters).map(|_| unit(&mut rng)).collect();
    let rows = (0..clusters * per_cluster).map(|i| {
        let noise = unit(&mut rng);
        let v: Vec<f64> = centres[i / per_cluster]
            .iter()
            .zip(&noise)
            .map(|(c, n)| spread * c + n)
            .collect();
        (synthetic_word(i), v)
    });
    EmbeddingTable::from_rows(rows.collect::<Vec<_>>()).expect("synthetic rows are valid")
}

/// `count` prompts of 5 to 8 distinct words, each drawn from a single
/// cluster of a `clustered_table` with the same layout.
pub fn topical_prompts(clusters: usize, per_cluster: usize, count: usize, seed: u64) -> Vec<Vec<Token>> {
    assert!(per_cluster >= 8, "clusters need at least 8 words");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let c = rng.random_range(0..clusters);
            let len = rng.random_range(5..=8);
            let words: Vec<usize> = (c * per_cluster..(c + 1) * per_cluster).collect();
            words
                .choose_multiple(&mut rng, len)
                .map(|&i| Token::new(synthetic_word(i)).expect("valid"))
                .collect()
        })
        .collect()
}

/// Alternating `yes` / `no` labels.
pub fn synthetic_labels(count: usize) -> Vec<Vec<Token>> {
    (0..count)
        .map(|i| vec![Token::new(if i % 2 == 0 { "yes" } else { "no" }).expect("valid")])
        .collect()
}
