//! Train the toy student on the fixed recipe and print the loss curve.

use fedcot::distill::toy_recipe;

fn main() -> anyhow::Result<()> {
    let recipe = toy_recipe(1);
    let out = recipe.run()?;
    for row in out.trace.rows.iter().step_by(50) {
        println!(
            "epoch {:>3}  L2 {:.4}  label {:.4}  rationale {:.4}",
            row.epoch, row.total, row.components[0], row.components[1]
        );
    }
    println!("final {:.4} (initial {:.4})", out.trace.last(), out.trace.initial());

    let ex = &recipe.examples[0];
    let probs = out.model.predict(&ex.input, &[])?;
    let best = probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    println!(
        "first token for example 0: {} (label {})",
        out.model.vocab()[best],
        ex.label[0]
    );
    Ok(())
}
