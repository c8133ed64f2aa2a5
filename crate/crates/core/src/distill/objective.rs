use serde::{Deserialize, Serialize};

use super::model::log_sum_exp;
use super::{DistillError, Params, ToyModel};
use crate::pipeline::{DecoderExample, DistillExample, EncoderPair};
use crate::vocab::Token;

/// Weights of the label and rationale terms of the task objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), DistillError> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if ok(self.alpha) && ok(self.beta) {
            Ok(())
        } else {
            Err(DistillError::InvalidWeights {
                alpha: self.alpha,
                beta: self.beta,
            })
        }
    }
}

/// Mean over target positions of `-log p(target_t | input, target_<t)`,
/// adding `scale` times its gradient into `grad` when given.
fn sequence_term(
    model: &ToyModel,
    input: &[usize],
    target: &[usize],
    scale: f64,
    mut grad: Option<&mut Params>,
) -> f64 {
    let (v, d) = (model.vocab_size(), model.dim());
    let e = &model.params().e;
    let w = &model.params().w;
    let mut hx = vec![0.0; d];
    model.mean_embedding(input, &mut hx);
    let mut prefix = vec![0.0; d];
    let mut h = vec![0.0; d];
    let mut z = vec![0.0; v];
    let mut dz = vec![0.0; v];
    let mut dh = vec![0.0; d];
    let tlen = target.len() as f64;
    let mut total = 0.0;
    for (t, &y) in target.iter().enumerate() {
        for k in 0..d {
            h[k] = hx[k] + if t > 0 { prefix[k] / t as f64 } else { 0.0 };
        }
        model.logits(&h, &mut z);
        let lse = log_sum_exp(&z);
        total += lse - z[y];

        if let Some(g) = grad.as_deref_mut() {
            let s = scale / tlen;
            for j in 0..v {
                dz[j] = s * ((z[j] - lse).exp() - if j == y { 1.0 } else { 0.0 });
                g.b[j] += dz[j];
            }
            for k in 0..d {
                let row = &w[k * v..(k + 1) * v];
                dh[k] = row.iter().zip(&dz).map(|(a, b)| a * b).sum();
                for (gw, dzj) in g.w[k * v..(k + 1) * v].iter_mut().zip(&dz) {
                    *gw += h[k] * dzj;
                }
            }
            if !input.is_empty() {
                let n = input.len() as f64;
                for &i in input {
                    for (ge, dhk) in g.e[i * d..(i + 1) * d].iter_mut().zip(&dh) {
                        *ge += dhk / n;
                    }
                }
            }
            if t > 0 {
                for &j in &target[..t] {
                    for (ge, dhk) in g.e[j * d..(j + 1) * d].iter_mut().zip(&dh) {
                        *ge += dhk / t as f64;
                    }
                }
            }
        }
        for k in 0..d {
            prefix[k] += e[y * d + k];
        }
    }
    total / tlen
}

/// Cross-entropy of `target` given `input`, averaged over target positions.
pub fn sequence_cross_entropy(model: &ToyModel, input: &[Token], target: &[Token]) -> Result<f64, DistillError> {
    if target.is_empty() {
        return Err(DistillError::EmptyTarget);
    }
    Ok(sequence_term(model, &model.ids(input)?, &model.ids(target)?, 0.0, None))
}

struct Part {
    component: usize,
    input: Vec<usize>,
    target: Vec<usize>,
}

/// A weighted sum of per-component mean cross-entropies.
///
/// Each unit is one training example and may feed several components; a
/// component's value is the mean over the units that feed it, and zero when
/// none do.
pub struct Objective {
    names: Vec<&'static str>,
    weights: Vec<f64>,
    units: Vec<Vec<Part>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub total: f64,
    /// Unweighted component means, in `Objective::component_names` order.
    pub components: Vec<f64>,
    pub gradient: Option<Params>,
}

impl Objective {
    /// `L_Enc + L_Dec`: encoder pairs map `p` to `p_eps`; decoder examples
    /// map `p ++ p_p ++ r_p` to `r`.
    pub fn l1(model: &ToyModel, encoder: &[EncoderPair], decoder: &[DecoderExample]) -> Result<Self, DistillError> {
        let mut units = Vec::with_capacity(encoder.len() + decoder.len());
        for pair in encoder {
            units.push(vec![part(model, 0, &pair.prompt, &pair.perturbed)?]);
        }
        for ex in decoder {
            units.push(vec![part(model, 1, &ex.input(), &ex.rationale)?]);
        }
        Self::new(vec!["encoder", "decoder"], vec![1.0, 1.0], units)
    }

    /// `alpha * L_Label + beta * L_Rationale`. Label-only examples and
    /// examples with an empty rationale feed only the label term.
    pub fn l2(model: &ToyModel, batch: &[DistillExample], weights: LossWeights) -> Result<Self, DistillError> {
        weights.validate()?;
        let mut units = Vec::with_capacity(batch.len());
        for ex in batch {
            let mut parts = vec![part(model, 0, &ex.input, &ex.label)?];
            if !ex.label_only && !ex.rationale.is_empty() {
                parts.push(part(model, 1, &ex.input, &ex.rationale)?);
            }
            units.push(parts);
        }
        Self::new(vec!["label", "rationale"], vec![weights.alpha, weights.beta], units)
    }

    fn new(names: Vec<&'static str>, weights: Vec<f64>, units: Vec<Vec<Part>>) -> Result<Self, DistillError> {
        if units.is_empty() {
            return Err(DistillError::EmptyBatch);
        }
        Ok(Self { names, weights, units })
    }

    pub fn component_names(&self) -> &[&'static str] {
        &self.names
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn loss(&self, model: &ToyModel) -> Evaluation {
        self.evaluate(model, None, false)
    }

    pub fn loss_and_gradient(&self, model: &ToyModel) -> Evaluation {
        self.evaluate(model, None, true)
    }

    /// Evaluate on all units, or on the listed subset (a minibatch).
    /// Units are reduced in index order so results are reproducible.
    pub fn evaluate(&self, model: &ToyModel, subset: Option<&[usize]>, with_gradient: bool) -> Evaluation {
        let all: Vec<usize>;
        let idx = match subset {
            Some(s) => s,
            None => {
                all = (0..self.units.len()).collect();
                &all
            }
        };
        let nc = self.names.len();
        let mut counts = vec![0usize; nc];
        for &u in idx {
            for p in &self.units[u] {
                counts[p.component] += 1;
            }
        }
        let mut grad = with_gradient.then(|| Params::zeros(model.vocab_size(), model.dim()));
        let mut sums = vec![0.0; nc];
        for &u in idx {
            for p in &self.units[u] {
                let c = p.component;
                let scale = self.weights[c] / counts[c] as f64;
                sums[c] += sequence_term(model, &p.input, &p.target, scale, grad.as_mut());
            }
        }
        let components: Vec<f64> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
            .collect();
        let total = components.iter().zip(&self.weights).map(|(c, w)| c * w).sum();
        Evaluation {
            total,
            components,
            gradient: grad,
        }
    }
}

fn part(model: &ToyModel, component: usize, input: &[Token], target: &[Token]) -> Result<Part, DistillError> {
    if target.is_empty() {
        return Err(DistillError::EmptyTarget);
    }
    Ok(Part {
        component,
        input: model.ids(input)?,
        target: model.ids(target)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L1Parts {
    pub encoder: f64,
    pub decoder: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L2Parts {
    pub label: f64,
    pub rationale: f64,
    pub total: f64,
}

pub fn loss_l1(model: &ToyModel, encoder: &[EncoderPair], decoder: &[DecoderExample]) -> Result<L1Parts, DistillError> {
    let ev = Objective::l1(model, encoder, decoder)?.loss(model);
    Ok(L1Parts {
        encoder: ev.components[0],
        decoder: ev.components[1],
        total: ev.total,
    })
}

pub fn loss_l2(model: &ToyModel, batch: &[DistillExample], weights: LossWeights) -> Result<L2Parts, DistillError> {
    let ev = Objective::l2(model, batch, weights)?.loss(model);
    Ok(L2Parts {
        label: ev.components[0],
        rationale: ev.components[1],
        total: ev.total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::collect_vocab;
    use crate::vocab::tokenize;

    fn t(s: &str) -> Vec<Token> {
        tokenize(s)
    }

    /// Vocabulary `a b c`, d = 2, every parameter pinned.
    fn pinned() -> ToyModel {
        let params = Params {
            e: vec![0.5, -0.2, 0.1, 0.4, -0.3, 0.8],
            w: vec![0.7, -0.5, 0.2, 0.3, 0.9, -0.6],
            b: vec![0.1, 0.0, -0.2],
        };
        ToyModel::from_parts(t("a b c"), 2, params).unwrap()
    }

    // Straight-line recomputation, done independently of this module:
    //   input [a, b], target [c, a]
    //   step 1: h = (0.3, 0.1); z = (0.34, -0.06, -0.2)
    //   step 2: h = (0.3, 0.1) + e_c = (0.0, 0.9); z = (0.37, 0.81, -0.74)
    // and the L1 / L2 batches below.
    const CE_AB_CA: f64 = 1.205434914030855;
    const L1_ORACLE: f64 = 2.141486502008164;
    const L2_ORACLE: f64 = 1.1697159641419845;

    fn distill(input: &str, label: &str, rationale: &str) -> DistillExample {
        DistillExample {
            input: t(input),
            label: t(label),
            rationale: t(rationale),
            label_only: rationale.is_empty(),
            failure: None,
        }
    }

    #[test]
    fn matches_straight_line_oracle() {
        let m = pinned();
        let ce = sequence_cross_entropy(&m, &t("a b"), &t("c a")).unwrap();
        assert!((ce - CE_AB_CA).abs() < 1e-9, "{ce}");

        let enc = [EncoderPair {
            prompt: t("a b"),
            perturbed: t("c b"),
            epsilon: 1.0,
        }];
        let dec = [DecoderExample {
            prompt: t("a"),
            perturbed_prompt: t("c"),
            perturbed_rationale: t("b"),
            rationale: t("a c"),
        }];
        let l1 = loss_l1(&m, &enc, &dec).unwrap();
        assert!((l1.total - L1_ORACLE).abs() < 1e-9, "{}", l1.total);

        let l2 = loss_l2(&m, &[distill("a b", "c", "b a")], LossWeights::default()).unwrap();
        assert!((l2.total - L2_ORACLE).abs() < 1e-9, "{}", l2.total);
    }

    #[test]
    fn one_hot_model_has_zero_loss() {
        // b puts all mass on `b`; embeddings and W are zero.
        let mut params = Params::zeros(3, 2);
        params.b = vec![-1e3, 1e3, -1e3];
        let m = ToyModel::from_parts(t("a b c"), 2, params).unwrap();
        assert_eq!(sequence_cross_entropy(&m, &t("a c"), &t("b b")).unwrap(), 0.0);
    }

    #[test]
    fn uniform_model_costs_ln_v() {
        let m = ToyModel::from_parts(t("a b c d"), 3, Params::zeros(4, 3)).unwrap();
        let ce = sequence_cross_entropy(&m, &t("a"), &t("b c d")).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn l1_parts_add_up() {
        let m = pinned();
        let enc = vec![EncoderPair {
            prompt: t("a b"),
            perturbed: t("c b"),
            epsilon: 1.0,
        }];
        let dec = vec![DecoderExample {
            prompt: t("a"),
            perturbed_prompt: t("c"),
            perturbed_rationale: t("b"),
            rationale: t("a c"),
        }];
        let only_enc = loss_l1(&m, &enc, &[]).unwrap();
        let only_dec = loss_l1(&m, &[], &dec).unwrap();
        let both = loss_l1(&m, &enc, &dec).unwrap();
        assert_eq!(only_enc.total, only_enc.encoder);
        assert!((both.total - (only_enc.total + only_dec.total)).abs() < 1e-12);

        let doubled = loss_l1(&m, &[enc.clone(), enc].concat(), &[dec.clone(), dec].concat()).unwrap();
        assert!((doubled.total - both.total).abs() < 1e-12);
    }

    #[test]
    fn l2_weighting() {
        let m = pinned();
        let batch = [distill("a b", "c", "b a"), distill("c", "a", "")];
        let label_only = loss_l2(&m, &batch, LossWeights { alpha: 1.0, beta: 0.0 }).unwrap();
        let plain = (sequence_cross_entropy(&m, &t("a b"), &t("c")).unwrap()
            + sequence_cross_entropy(&m, &t("c"), &t("a")).unwrap())
            / 2.0;
        assert!((label_only.total - plain).abs() < 1e-12);

        let w = LossWeights::default();
        let l2 = loss_l2(&m, &batch, w).unwrap();
        let rat = sequence_cross_entropy(&m, &t("a b"), &t("b a")).unwrap();
        assert!((l2.rationale - rat).abs() < 1e-12);
        assert!((l2.total - (0.5 * plain + 0.5 * rat)).abs() < 1e-12);

        let none = loss_l2(&m, &[distill("c", "a", "")], w).unwrap();
        assert_eq!(none.rationale, 0.0);
        assert!((none.total - 0.5 * none.label).abs() < 1e-15);
    }

    #[test]
    fn bad_inputs() {
        let m = pinned();
        assert!(matches!(
            sequence_cross_entropy(&m, &t("a"), &[]),
            Err(DistillError::EmptyTarget)
        ));
        assert!(matches!(
            sequence_cross_entropy(&m, &t("zzz"), &t("a")),
            Err(DistillError::UnknownToken(_))
        ));
        assert!(matches!(
            loss_l2(&m, &[], LossWeights::default()),
            Err(DistillError::EmptyBatch)
        ));
        assert!(matches!(
            loss_l2(&m, &[distill("a", "b", "c")], LossWeights { alpha: -1.0, beta: 0.5 }),
            Err(DistillError::InvalidWeights { .. })
        ));
    }

    fn finite_difference_check(obj: &Objective, model: &ToyModel) -> f64 {
        let analytic = obj.loss_and_gradient(model).gradient.unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for block in 0..3 {
            for i in 0..analytic.slices()[block].len() {
                let mut plus = model.clone();
                plus.params_mut().slices_mut()[block][i] += h;
                let mut minus = model.clone();
                minus.params_mut().slices_mut()[block][i] -= h;
                let numeric = (obj.loss(&plus).total - obj.loss(&minus).total) / (2.0 * h);
                let a = analytic.slices()[block][i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let batch = vec![
            distill("a b c", "yes", "because a and c"),
            distill("d e", "no", "since d"),
            distill("a e e", "yes", ""),
        ];
        let vocab = collect_vocab(batch.iter().flat_map(|e| [e.input.as_slice(), &e.label, &e.rationale]));
        let model = ToyModel::init(vocab, 4, 3).unwrap();
        let l2 = Objective::l2(&model, &batch, LossWeights::default()).unwrap();
        assert!(finite_difference_check(&l2, &model) < 1e-4);

        let enc = vec![EncoderPair {
            prompt: t("a b c"),
            perturbed: t("d b e"),
            epsilon: 1.0,
        }];
        let dec = vec![DecoderExample {
            prompt: t("a"),
            perturbed_prompt: t("d"),
            perturbed_rationale: t("since d"),
            rationale: t("because a"),
        }];
        let l1 = Objective::l1(&model, &enc, &dec).unwrap();
        assert!(finite_difference_check(&l1, &model) < 1e-4);
    }

    #[test]
    fn l1_gradient_is_sum_of_parts() {
        let enc = vec![EncoderPair {
            prompt: t("a b"),
            perturbed: t("c b"),
            epsilon: 1.0,
        }];
        let dec = vec![DecoderExample {
            prompt: t("a"),
            perturbed_prompt: t("c"),
            perturbed_rationale: t("b"),
            rationale: t("a c"),
        }];
        let m = pinned();
        let g = |e: &[EncoderPair], d: &[DecoderExample]| {
            Objective::l1(&m, e, d).unwrap().loss_and_gradient(&m).gradient.unwrap()
        };
        let mut sum = g(&enc, &[]);
        sum.axpy(1.0, &g(&[], &dec));
        let both = g(&enc, &dec);
        for (x, y) in both.slices().iter().zip(sum.slices()) {
            for (a, b) in x.iter().zip(y) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weight_contributes_no_gradient() {
        let m = pinned();
        let batch = [distill("a", "b", "c")];
        let ev = Objective::l2(&m, &batch, LossWeights { alpha: 0.0, beta: 0.0 })
            .unwrap()
            .loss_and_gradient(&m);
        let g = ev.gradient.unwrap();
        assert!(g.slices().iter().all(|s| s.iter().all(|x| *x == 0.0)));
    }
}
