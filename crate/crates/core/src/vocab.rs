//! Token vocabulary, unit-normalized embeddings and the similarity utility
//! that drives the exponential mechanism.
//!
//! Embedding files are GloVe-style plain text: one record per line, the token
//! followed by `d` space-separated decimals. Vectors are normalized once at
//! load so every utility query is a plain dot product.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: duplicate token `{token}`")]
    Duplicate { line: usize, token: String },
    #[error("line {line}: token `{token}` has a zero-norm vector")]
    DegenerateVector { line: usize, token: String },
    #[error("token `{0}` is not in the vocabulary")]
    OutOfVocabulary(String),
    #[error("invalid token `{0}`: tokens are non-empty and contain no whitespace")]
    InvalidToken(String),
    #[error("embedding table is empty")]
    Empty,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A single lowercased, whitespace-free word.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Token(String);

impl Token {
    pub fn new(text: impl Into<String>) -> Result<Self, VocabError> {
        let text = text.into();
        if text.is_empty() || text.chars().any(char::is_whitespace) {
            return Err(VocabError::InvalidToken(text));
        }
        Ok(Token(text.to_lowercase()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Token {
    type Error = VocabError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Token::new(value)
    }
}

impl From<Token> for String {
    fn from(t: Token) -> Self {
        t.0
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for Token {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// Splits raw text into tokens.
pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<Token>;
}

/// Lowercase, split on whitespace runs, strip surrounding punctuation.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}'
                | '\u{2019}'
                | '\u{201C}'
                | '\u{201D}'
                | '\u{2026}'
                | '\u{2013}'
                | '\u{2014}'
                | '\u{00AB}'
                | '\u{00BB}'
                | '\u{00BF}'
                | '\u{00A1}'
        )
}

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token> {
        text.split_whitespace()
            .map(|w| w.trim_matches(is_punct).to_lowercase())
            .filter(|w| !w.is_empty())
            .map(Token)
            .collect()
    }
}

/// Tokenize with the default [`WhitespaceTokenizer`].
pub fn tokenize(text: &str) -> Vec<Token> {
    WhitespaceTokenizer.tokenize(text)
}

/// Render tokens back to a single space-joined string.
pub fn join_tokens(tokens: &[Token]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_str());
    }
    out
}

/// Immutable vocabulary with unit-norm vectors stored row-major.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    tokens: Vec<Token>,
    index: HashMap<Token, usize>,
    vectors: Vec<f64>,
    dim: usize,
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    // Rows that are already unit length are kept bit-exact so save/load round-trips.
    if (norm - 1.0).abs() > 4.0 * f64::EPSILON {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    true
}

impl EmbeddingTable {
    /// Build a table from in-memory rows, normalizing every vector.
    pub fn from_rows<I, S>(rows: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let rows: Vec<_> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (tok, v))| (i + 1, tok.into(), v))
            .collect();
        let dim = rows.first().map(|r| r.2.len()).unwrap_or(0);
        for (line, _, v) in &rows {
            if v.is_empty() || v.len() != dim {
                return Err(VocabError::Parse {
                    line: *line,
                    msg: format!("expected {dim} components, found {}", v.len()),
                });
            }
        }
        Self::build(rows, dim)
    }

    fn build(rows: Vec<(usize, String, Vec<f64>)>, dim: usize) -> Result<Self, VocabError> {
        let mut tokens = Vec::with_capacity(rows.len());
        let mut index = HashMap::with_capacity(rows.len());
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for (line, token, mut v) in rows {
            let tok = Token::new(token)?;
            if !normalize(&mut v) {
                return Err(VocabError::DegenerateVector { line, token: tok.0 });
            }
            if index.insert(tok.clone(), tokens.len()).is_some() {
                return Err(VocabError::Duplicate { line, token: tok.0 });
            }
            tokens.push(tok);
            vectors.extend_from_slice(&v);
        }
        if tokens.is_empty() {
            return Err(VocabError::Empty);
        }
        Ok(Self {
            tokens,
            index,
            vectors,
            dim,
        })
    }

    /// Parse a GloVe-style text stream. `expected_dim`, when given, is
    /// enforced on every line; otherwise the first line fixes the dimension.
    pub fn read<R: BufRead>(reader: R, expected_dim: Option<usize>) -> Result<Self, VocabError> {
        let mut rows = Vec::new();
        let mut dim = expected_dim;
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let token = fields.next().unwrap_or_default().to_string();
            let values = fields
                .map(|f| {
                    f.parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| VocabError::Parse {
                            line: line_no,
                            msg: format!("non-numeric component `{f}`"),
                        })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let want = *dim.get_or_insert(values.len());
            if values.is_empty() || values.len() != want {
                return Err(VocabError::Parse {
                    line: line_no,
                    msg: format!("expected {want} components, found {}", values.len()),
                });
            }
            rows.push((line_no, token, values));
        }
        Self::build(rows, dim.unwrap_or(0))
    }

    pub fn write<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (i, tok) in self.tokens.iter().enumerate() {
            write!(w, "{tok}")?;
            for x in self.vector(i) {
                write!(w, " {x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn token(&self, idx: usize) -> &Token {
        &self.tokens[idx]
    }

    pub fn index_of(&self, token: &Token) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn lookup(&self, token: &Token) -> Result<usize, VocabError> {
        self.index_of(token)
            .ok_or_else(|| VocabError::OutOfVocabulary(token.0.clone()))
    }

    pub fn contains(&self, token: &Token) -> bool {
        self.index.contains_key(token)
    }

    pub fn vector(&self, idx: usize) -> &[f64] {
        &self.vectors[idx * self.dim..(idx + 1) * self.dim]
    }

    /// `(cos + 1) / 2` between two rows, in `[0, 1]`.
    pub fn utility_by_index(&self, a: usize, b: usize) -> f64 {
        if a == b {
            return 1.0;
        }
        let cos: f64 = self.vector(a).iter().zip(self.vector(b)).map(|(x, y)| x * y).sum();
        ((cos + 1.0) / 2.0).clamp(0.0, 1.0)
    }

    /// Cosine similarity rescaled to `[0, 1]`, so the sensitivity is exactly 1.
    pub fn scaled_utility(&self, x: &Token, y: &Token) -> Result<f64, VocabError> {
        Ok(self.utility_by_index(self.lookup(x)?, self.lookup(y)?))
    }
}

/// Load a GloVe-style embedding file.
pub fn load_embeddings(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<EmbeddingTable, VocabError> {
    let file = File::open(path)?;
    EmbeddingTable::read(BufReader::new(file), expected_dim)
}
