//! Build encoder pairs and decoder examples from public prompts.

use std::sync::Arc;

use fedcot::fixtures::{sweep_prompts, sweep_table};
use fedcot::mechanism::PerturbationConfig;
use fedcot::pipeline::{build_decoder_dataset, build_encoder_dataset};
use fedcot::protocol::{LoopbackTransport, MockGenerator, RationaleClient};
use fedcot::vocab::join_tokens;

fn main() -> anyhow::Result<()> {
    let table = sweep_table();
    let public = sweep_prompts(8, 11);
    let config = PerturbationConfig::uniform(2.0, 5);

    let encoder = build_encoder_dataset(&public, &table, &config, None)?;
    println!("{} encoder pairs", encoder.len());
    println!(
        "  {} => {}",
        join_tokens(&encoder[0].prompt),
        join_tokens(&encoder[0].perturbed)
    );

    let mock = Arc::new(MockGenerator::new(0));
    let mut client = RationaleClient::new(LoopbackTransport::new(mock.clone()), "public");
    let decoder = build_decoder_dataset(&public, &table, &config, None, &mut client, mock.as_ref(), "qa")?;
    println!(
        "{} decoder examples, {} skipped",
        decoder.examples.len(),
        decoder.skips.len()
    );
    let ex = &decoder.examples[0];
    println!("  r^p: {}", join_tokens(&ex.perturbed_rationale));
    println!("  r:   {}", join_tokens(&ex.rationale));
    Ok(())
}
