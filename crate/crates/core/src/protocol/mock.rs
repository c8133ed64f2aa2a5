use std::collections::HashSet;

use super::{GeneratorBackend, GeneratorError, TextCompletion};
use crate::vocab::{join_tokens, tokenize, Token};

/// Function words never treated as content.
pub const STOPWORDS: &[&str] = &[
    "a", "an", "the", "is", "are", "was", "were", "be", "of", "to", "in", "on", "at", "for", "with", "by", "from",
    "and", "or", "but", "not", "it", "its", "this", "that", "what", "which", "who", "whom", "how", "why", "when",
    "where", "do", "does", "did", "as", "if", "than", "then", "so", "can", "could", "would", "should", "will", "i",
    "you", "he", "she", "they", "we", "there", "their", "his", "her", "my", "your", "our",
];

/// (head, tail) scaffolds; the seed picks one for the lifetime of the backend.
const SCAFFOLDS: [(&str, &str); 3] = [
    ("the answer must relate to", "because the question is about them"),
    ("a good answer should involve", "since the question mentions them"),
    ("reasoning step by step we consider", "so the answer follows from these"),
];
const JOINER: &str = "and";
const NO_CLUE: &str = "the question gives no usable clue";

/// Most content words carried into one rationale.
pub const MAX_CONTENT_WORDS: usize = 8;

/// Deterministic template rationale generator.
///
/// Picks the distinct content words of the prompt, in order, and wraps them
/// in fixed scaffolding:
/// `the answer must relate to w1 and w2 ... because the question is about them`.
/// Rationale word overlap is therefore a monotone function of prompt content
/// overlap.
#[derive(Debug, Clone)]
pub struct MockGenerator {
    id: String,
    head: Vec<Token>,
    tail: Vec<Token>,
    excluded: HashSet<String>,
}

fn words(s: &str) -> Vec<Token> {
    s.split(' ')
        .map(|w| Token::new(w).expect("scaffold words are valid"))
        .collect()
}

impl MockGenerator {
    pub fn new(seed: u64) -> Self {
        let (head, tail) = SCAFFOLDS[(seed % SCAFFOLDS.len() as u64) as usize];
        let mut excluded: HashSet<String> = STOPWORDS.iter().map(|s| s.to_string()).collect();
        for (h, t) in SCAFFOLDS {
            excluded.extend(h.split(' ').chain(t.split(' ')).map(str::to_owned));
        }
        excluded.extend(NO_CLUE.split(' ').map(str::to_owned));
        Self {
            id: format!("mock-{seed}"),
            head: words(head),
            tail: words(tail),
            excluded,
        }
    }

    pub fn content_words(&self, prompt: &[Token]) -> Vec<Token> {
        let mut seen = HashSet::new();
        prompt
            .iter()
            .filter(|t| !self.excluded.contains(t.as_str()))
            .filter(|t| seen.insert(t.as_str()))
            .take(MAX_CONTENT_WORDS)
            .cloned()
            .collect()
    }

    pub fn rationale(&self, prompt: &[Token]) -> Vec<Token> {
        let content = self.content_words(prompt);
        if content.is_empty() {
            return words(NO_CLUE);
        }
        let joiner = Token::new(JOINER).expect("valid");
        let mut out = self.head.clone();
        for (i, w) in content.into_iter().enumerate() {
            if i > 0 {
                out.push(joiner.clone());
            }
            out.push(w);
        }
        out.extend(self.tail.iter().cloned());
        out
    }
}

impl GeneratorBackend for MockGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, prompt: &[Token]) -> Result<Vec<Token>, GeneratorError> {
        Ok(self.rationale(prompt))
    }
}

/// Offline stand-in for an in-context decoder: answers with the rationale
/// of the last `prompt:` line in the context (the query's raw prompt), or of
/// the whole text when there is none.
impl TextCompletion for MockGenerator {
    fn complete(&self, text: &str) -> Result<String, GeneratorError> {
        let query = text
            .lines()
            .rev()
            .find_map(|l| l.strip_prefix("prompt:"))
            .unwrap_or(text);
        Ok(join_tokens(&self.rationale(&tokenize(query))))
    }
}
