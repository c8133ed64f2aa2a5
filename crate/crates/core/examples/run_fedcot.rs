//! Client loop over private prompts with the mock server, then score the
//! recovered rationales against what the server would say on the raw prompt.

use std::sync::Arc;

use fedcot::fixtures::{sweep_prompts, sweep_table, synthetic_labels};
use fedcot::mechanism::PerturbationConfig;
use fedcot::metrics::token_ratio;
use fedcot::pipeline::{run_fedcot, RepairDecoder};
use fedcot::protocol::{GeneratorBackend, LoopbackTransport, MockGenerator, RationaleClient};
use fedcot::vocab::join_tokens;

fn main() -> anyhow::Result<()> {
    let table = sweep_table();
    let private = sweep_prompts(6, 21);
    let labels = synthetic_labels(private.len());
    let mock = Arc::new(MockGenerator::new(0));
    let transport = LoopbackTransport::new(mock.clone());
    let wire = transport.log();
    let mut client = RationaleClient::new(transport, "private");

    let run = run_fedcot(
        &private,
        &labels,
        &table,
        &PerturbationConfig::uniform(1.0, 8),
        None,
        &mut client,
        &RepairDecoder,
        "qa",
    )?;
    for ex in &run.examples {
        let reference = mock.generate(&ex.input)?;
        let ratio = token_ratio(&ex.rationale, &reference)?.value;
        println!(
            "[{}] {:5.1}%  {}",
            join_tokens(&ex.label),
            ratio,
            join_tokens(&ex.rationale)
        );
    }
    println!(
        "{} frames on the wire, {} label-only",
        wire.frames().len(),
        run.label_only
    );
    Ok(())
}
