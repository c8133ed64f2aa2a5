//! Spend less budget on rare words, more on common ones, same mean.

use fedcot::fixtures::{sweep_prompts, sweep_table};
use fedcot::mechanism::{perturb_prompt, Allocation, IdfScorer, ImportanceScorer, PerturbationConfig};

fn main() -> anyhow::Result<()> {
    let table = sweep_table();
    let corpus = sweep_prompts(200, 1);
    let scorer = IdfScorer::fit(corpus.iter().map(Vec::as_slice));

    let prompt = sweep_prompts(1, 9).remove(0);
    let importance = scorer.score(&prompt);

    let mut config = PerturbationConfig::uniform(2.0, 7);
    config.allocation = Allocation::Adaptive { epsilon_cap: 6.0 };
    let pp = perturb_prompt(&table, &prompt, &config, Some(&importance))?;
    for ((t, s), (b, out)) in prompt.iter().zip(&importance).zip(pp.budgets.iter().zip(&pp.perturbed)) {
        println!("{t:>10}  idf {s:.3}  eps {b:.3}  -> {out}");
    }
    let mean = pp.budgets.iter().sum::<f64>() / pp.budgets.len() as f64;
    println!("mean budget {mean:.3}, max {:.3}", pp.epsilon_max());
    Ok(())
}
