use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::DistillError;
use crate::vocab::Token;

/// Flat parameter arrays. `e` is V×d, `w` is d×V, both row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub e: Vec<f64>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Params {
    pub fn zeros(vocab: usize, dim: usize) -> Self {
        Self {
            e: vec![0.0; vocab * dim],
            w: vec![0.0; dim * vocab],
            b: vec![0.0; vocab],
        }
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &Params) {
        for (x, y) in self.slices_mut().into_iter().zip(other.slices()) {
            for (xi, yi) in x.iter_mut().zip(y) {
                *xi += a * yi;
            }
        }
    }

    pub fn slices(&self) -> [&[f64]; 3] {
        [&self.e, &self.w, &self.b]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 3] {
        [&mut self.e, &mut self.w, &mut self.b]
    }

    pub fn len(&self) -> usize {
        self.e.len() + self.w.len() + self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

/// Sorted, de-duplicated vocabulary of every token in `seqs`.
pub fn collect_vocab<'a, I>(seqs: I) -> Vec<Token>
where
    I: IntoIterator<Item = &'a [Token]>,
{
    let set: BTreeSet<&Token> = seqs.into_iter().flatten().collect();
    set.into_iter().cloned().collect()
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    vocab: Vec<Token>,
    dim: usize,
    e: Vec<f64>,
    w: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    vocab: Vec<Token>,
    index: HashMap<Token, usize>,
    dim: usize,
    params: Params,
}

impl ToyModel {
    /// Gaussian init with standard deviation 0.1; `b` starts at zero.
    pub fn init(vocab: Vec<Token>, dim: usize, seed: u64) -> Result<Self, DistillError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let v = vocab.len();
        let mut params = Params::zeros(v, dim);
        for x in params.e.iter_mut().chain(params.w.iter_mut()) {
            *x = normal.sample(&mut rng);
        }
        Self::from_parts(vocab, dim, params)
    }

    pub fn from_parts(vocab: Vec<Token>, dim: usize, params: Params) -> Result<Self, DistillError> {
        let v = vocab.len();
        if v == 0 || dim == 0 {
            return Err(DistillError::Shape(format!("vocab {v}, dim {dim}")));
        }
        if params.e.len() != v * dim || params.w.len() != dim * v || params.b.len() != v {
            return Err(DistillError::Shape(format!(
                "expected e {}, w {}, b {}; got {}, {}, {}",
                v * dim,
                dim * v,
                v,
                params.e.len(),
                params.w.len(),
                params.b.len()
            )));
        }
        if !params.is_finite() {
            return Err(DistillError::NonFinite);
        }
        let mut index = HashMap::with_capacity(v);
        for (i, t) in vocab.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(DistillError::Shape(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Self {
            vocab,
            index,
            dim,
            params,
        })
    }

    pub fn vocab(&self) -> &[Token] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn ids(&self, tokens: &[Token]) -> Result<Vec<usize>, DistillError> {
        tokens
            .iter()
            .map(|t| {
                self.index
                    .get(t)
                    .copied()
                    .ok_or_else(|| DistillError::UnknownToken(t.clone()))
            })
            .collect()
    }

    pub(crate) fn mean_embedding(&self, ids: &[usize], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        if ids.is_empty() {
            return;
        }
        let d = self.dim;
        for &i in ids {
            for (o, e) in out.iter_mut().zip(&self.params.e[i * d..(i + 1) * d]) {
                *o += e;
            }
        }
        let n = ids.len() as f64;
        out.iter_mut().for_each(|x| *x /= n);
    }

    /// `z = b + Wᵀ h`
    pub(crate) fn logits(&self, h: &[f64], z: &mut [f64]) {
        let v = self.vocab.len();
        z.copy_from_slice(&self.params.b);
        for (k, hk) in h.iter().enumerate() {
            for (zj, wkj) in z.iter_mut().zip(&self.params.w[k * v..(k + 1) * v]) {
                *zj += hk * wkj;
            }
        }
    }

    /// Next-token distribution after `input` and the target prefix `prefix`.
    pub fn predict(&self, input: &[Token], prefix: &[Token]) -> Result<Vec<f64>, DistillError> {
        let (x, y) = (self.ids(input)?, self.ids(prefix)?);
        let d = self.dim;
        let (mut h, mut hp) = (vec![0.0; d], vec![0.0; d]);
        self.mean_embedding(&x, &mut h);
        self.mean_embedding(&y, &mut hp);
        h.iter_mut().zip(&hp).for_each(|(a, b)| *a += b);
        let mut z = vec![0.0; self.vocab.len()];
        self.logits(&h, &mut z);
        let lse = log_sum_exp(&z);
        Ok(z.iter().map(|zi| (zi - lse).exp()).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DistillError> {
        let ck = Checkpoint {
            vocab: self.vocab.clone(),
            dim: self.dim,
            e: self.params.e.clone(),
            w: self.params.w.clone(),
            b: self.params.b.clone(),
        };
        let mut text = serde_json::to_string_pretty(&ck)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DistillError> {
        let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        Self::from_parts(
            ck.vocab,
            ck.dim,
            Params {
                e: ck.e,
                w: ck.w,
                b: ck.b,
            },
        )
    }
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::tokenize;

    #[test]
    fn predict_is_a_distribution() {
        let vocab = collect_vocab([tokenize("a b c d e").as_slice()]);
        let m = ToyModel::init(vocab, 3, 1).unwrap();
        let p = m.predict(&tokenize("a b"), &tokenize("c")).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|x| *x > 0.0));
    }

    #[test]
    fn shape_and_vocab_errors() {
        let vocab = tokenize("a b");
        assert!(matches!(
            ToyModel::from_parts(vocab.clone(), 2, Params::zeros(2, 3)),
            Err(DistillError::Shape(_))
        ));
        let mut p = Params::zeros(2, 2);
        p.b[0] = f64::NAN;
        assert!(matches!(
            ToyModel::from_parts(vocab.clone(), 2, p),
            Err(DistillError::NonFinite)
        ));
        let m = ToyModel::from_parts(vocab, 2, Params::zeros(2, 2)).unwrap();
        assert!(matches!(m.ids(&tokenize("zebra")), Err(DistillError::UnknownToken(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = ToyModel::init(tokenize("x y z"), 4, 9).unwrap();
        m.save(&path).unwrap();
        assert_eq!(ToyModel::load(&path).unwrap(), m);
    }

    #[test]
    fn vocab_is_sorted_and_unique() {
        let a = tokenize("b a");
        let b = tokenize("c a");
        assert_eq!(collect_vocab([a.as_slice(), b.as_slice()]), tokenize("a b c"));
    }
}
