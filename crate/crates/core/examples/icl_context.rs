//! Pick the nearest public demonstrations for a query and render the context.

use std::sync::Arc;

use fedcot::fixtures::{sweep_prompts, sweep_table};
use fedcot::mechanism::{perturb_prompt, PerturbationConfig};
use fedcot::pipeline::{assemble_icl_context, build_decoder_dataset, IclQuery};
use fedcot::protocol::{GeneratorBackend, LoopbackTransport, MockGenerator, RationaleClient};

fn main() -> anyhow::Result<()> {
    let table = sweep_table();
    let mock = Arc::new(MockGenerator::new(0));
    let mut client = RationaleClient::new(LoopbackTransport::new(mock.clone()), "public");
    let config = PerturbationConfig::uniform(2.0, 5);
    let public = build_decoder_dataset(
        &sweep_prompts(30, 11),
        &table,
        &config,
        None,
        &mut client,
        mock.as_ref(),
        "qa",
    )?;

    let prompt = sweep_prompts(1, 99).remove(0);
    let pp = perturb_prompt(&table, &prompt, &config, None)?;
    let rp = mock.generate(&pp.perturbed)?;
    let query = IclQuery {
        prompt,
        perturbed_prompt: pp.perturbed,
        perturbed_rationale: rp,
    };
    let ctx = assemble_icl_context(&public.examples, query, 3, &table)?;
    println!("selected {:?}\n", ctx.selected);
    print!("{}", ctx.render());
    println!();
    Ok(())
}
