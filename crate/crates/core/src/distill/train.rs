use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{collect_vocab, DistillError, LossWeights, Objective, ToyModel};
use crate::fixtures::synthetic_word;
use crate::mechanism::derive_seed;
use crate::pipeline::DistillExample;
use crate::protocol::MockGenerator;
use crate::vocab::Token;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Units per gradient step; 0 or anything at least the dataset size
    /// means full-batch descent.
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(DistillError::InvalidConfig(
                "learning rate must be finite and nonnegative",
            ));
        }
        if self.epochs == 0 {
            return Err(DistillError::InvalidConfig("epochs must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub total: f64,
    pub components: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub component_names: Vec<String>,
    /// Row 0 is the loss before training; row `t` the full-data loss after
    /// epoch `t`.
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn initial(&self) -> f64 {
        self.rows[0].total
    }

    pub fn last(&self) -> f64 {
        self.rows[self.rows.len() - 1].total
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.total).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l_total");
        for n in &self.component_names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.epoch, r.total);
            for c in &r.components {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

pub struct Trained {
    pub model: ToyModel,
    pub trace: LossTrace,
}

/// Plain gradient descent with a fixed step size.
///
/// With minibatches the unit order is reshuffled every epoch from
/// `derive_seed(seed, epoch)`. A non-finite loss aborts the run.
pub fn train(mut model: ToyModel, objective: &Objective, config: &TrainConfig) -> Result<Trained, DistillError> {
    config.validate()?;
    let n = objective.len();
    let batch = if config.batch_size == 0 {
        n
    } else {
        config.batch_size.min(n)
    };
    let mut order: Vec<usize> = (0..n).collect();

    let record = |epoch: usize, model: &ToyModel| -> Result<TraceRow, DistillError> {
        let ev = objective.loss(model);
        if !ev.total.is_finite() {
            return Err(DistillError::Diverged { epoch, loss: ev.total });
        }
        Ok(TraceRow {
            epoch,
            total: ev.total,
            components: ev.components,
        })
    };

    let mut rows = vec![record(0, &model)?];
    for epoch in 1..=config.epochs {
        if batch < n {
            order.shuffle(&mut ChaCha20Rng::seed_from_u64(derive_seed(config.seed, epoch as u64)));
        }
        for chunk in order.chunks(batch) {
            let subset = (batch < n).then_some(chunk);
            let ev = objective.evaluate(&model, subset, true);
            if !ev.total.is_finite() {
                return Err(DistillError::Diverged { epoch, loss: ev.total });
            }
            let grad = ev.gradient.expect("gradient requested");
            model.params_mut().axpy(-config.learning_rate, &grad);
        }
        if !model.params().is_finite() {
            return Err(DistillError::Diverged { epoch, loss: f64::NAN });
        }
        rows.push(record(epoch, &model)?);
    }
    Ok(Trained {
        model,
        trace: LossTrace {
            component_names: objective.component_names().iter().map(|s| s.to_string()).collect(),
            rows,
        },
    })
}

/// A small separable task: prompts drawn from one of two disjoint word
/// groups, labelled by group, with mock-generator rationales.
pub struct ToyRecipe {
    pub examples: Vec<DistillExample>,
    pub weights: LossWeights,
    pub dim: usize,
    pub init_seed: u64,
    pub config: TrainConfig,
}

impl ToyRecipe {
    pub fn vocab(&self) -> Vec<Token> {
        collect_vocab(
            self.examples
                .iter()
                .flat_map(|e| [e.input.as_slice(), &e.label, &e.rationale]),
        )
    }

    pub fn model(&self) -> Result<ToyModel, DistillError> {
        ToyModel::init(self.vocab(), self.dim, self.init_seed)
    }

    pub fn objective(&self, model: &ToyModel) -> Result<Objective, DistillError> {
        Objective::l2(model, &self.examples, self.weights)
    }

    pub fn run(&self) -> Result<Trained, DistillError> {
        let model = self.model()?;
        let objective = self.objective(&model)?;
        train(model, &objective, &self.config)
    }
}

pub fn toy_recipe(seed: u64) -> ToyRecipe {
    const GROUP: usize = 8;
    const EXAMPLES: usize = 16;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mock = MockGenerator::new(0);
    let labels = [Token::new("yes").unwrap(), Token::new("no").unwrap()];
    let examples = (0..EXAMPLES)
        .map(|i| {
            let group = i % 2;
            let mut words: Vec<usize> = (group * GROUP..(group + 1) * GROUP).collect();
            words.shuffle(&mut rng);
            let input: Vec<Token> = words[..4]
                .iter()
                .map(|&w| Token::new(synthetic_word(w)).unwrap())
                .collect();
            DistillExample {
                rationale: mock.rationale(&input),
                input,
                label: vec![labels[group].clone()],
                label_only: false,
                failure: None,
            }
        })
        .collect();
    ToyRecipe {
        examples,
        weights: LossWeights::default(),
        dim: 8,
        init_seed: seed,
        config: TrainConfig {
            learning_rate: 0.5,
            epochs: 500,
            batch_size: 0,
            seed,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut recipe = toy_recipe(1);
        recipe.config.learning_rate = 0.0;
        recipe.config.epochs = 5;
        let before = recipe.model().unwrap();
        let out = recipe.run().unwrap();
        assert_eq!(out.model, before);
        assert!(out.trace.totals().windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn toy_recipe_halves_the_loss() {
        let out = toy_recipe(1).run().unwrap();
        let t = out.trace.totals();
        assert_eq!(t.len(), 501);
        assert!(
            out.trace.last() < 0.5 * out.trace.initial(),
            "{} -> {}",
            out.trace.initial(),
            out.trace.last()
        );
        let lead: f64 = t[..100].iter().sum::<f64>() / 100.0;
        let trail: f64 = t[t.len() - 100..].iter().sum::<f64>() / 100.0;
        assert!(trail < lead);
    }

    #[test]
    fn same_seed_same_trace() {
        let mut r = toy_recipe(4);
        r.config.epochs = 50;
        r.config.batch_size = 5;
        let a = r.run().unwrap();
        let b = r.run().unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn divergence_is_reported() {
        let mut r = toy_recipe(1);
        r.config.learning_rate = 1e300;
        r.config.epochs = 3;
        assert!(matches!(r.run(), Err(DistillError::Diverged { .. })));
    }

    #[test]
    fn trace_csv_shape() {
        let mut r = toy_recipe(1);
        r.config.epochs = 2;
        let csv = r.run().unwrap().trace.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,l_total,label,rationale");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,"));
    }

    #[test]
    fn invalid_config() {
        let mut r = toy_recipe(1);
        r.config.epochs = 0;
        assert!(matches!(r.run(), Err(DistillError::InvalidConfig(_))));
    }
}
