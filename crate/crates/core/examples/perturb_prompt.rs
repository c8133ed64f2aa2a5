//! Perturb one prompt at a few budgets.

use fedcot::fixtures::{sweep_prompts, sweep_table};
use fedcot::mechanism::{perturb_prompt, PerturbationConfig};
use fedcot::vocab::join_tokens;

fn main() -> anyhow::Result<()> {
    let table = sweep_table();
    let prompt = sweep_prompts(1, 3).remove(0);
    println!("original     {}", join_tokens(&prompt));
    for eps in [0.5, 2.0, 8.0, 32.0] {
        let pp = perturb_prompt(&table, &prompt, &PerturbationConfig::uniform(eps, 42), None)?;
        println!("eps {eps:>5}    {}", join_tokens(&pp.perturbed));
    }
    Ok(())
}
