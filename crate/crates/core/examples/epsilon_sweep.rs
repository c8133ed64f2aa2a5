//! Rationale overlap against the privacy budget.

use fedcot::fixtures::{sweep_prompts, sweep_table};
use fedcot::metrics::{epsilon_sweep, SweepSettings};
use fedcot::pipeline::RepairDecoder;
use fedcot::protocol::MockGenerator;

fn main() -> anyhow::Result<()> {
    let report = epsilon_sweep(
        &sweep_prompts(50, 107),
        &sweep_table(),
        &[0.5, 1.0, 2.0, 4.0, 8.0, 16.0],
        &MockGenerator::new(0),
        &RepairDecoder,
        &SweepSettings {
            seed: 7,
            ..Default::default()
        },
    )?;
    print!("{}", report.to_csv());
    if let Some(rho) = report.perturbed_trend() {
        println!("spearman rho {rho:.3}");
    }
    Ok(())
}
