//! Start a mock rationale server on an ephemeral port and query it.

use std::sync::Arc;
use std::time::Duration;

use fedcot::fixtures::{sweep_prompts, sweep_table};
use fedcot::mechanism::{perturb_prompt, PerturbationConfig};
use fedcot::protocol::{serve, MockGenerator, RationaleClient, TcpTransport};
use fedcot::vocab::join_tokens;

fn main() -> anyhow::Result<()> {
    let server = serve("127.0.0.1:0", Arc::new(MockGenerator::new(0)))?;
    println!("listening on {}", server.local_addr());

    let table = sweep_table();
    let mut client = RationaleClient::new(TcpTransport::new(server.local_addr(), Duration::from_secs(5)), "demo");
    for (i, prompt) in sweep_prompts(3, 2).iter().enumerate() {
        let pp = perturb_prompt(&table, prompt, &PerturbationConfig::uniform(4.0, i as u64), None)?;
        let resp = client.request_rationale(&pp, "qa")?;
        println!("{} -> {}", resp.request_id, join_tokens(&resp.rationale_tokens));
    }
    server.shutdown();
    Ok(())
}
