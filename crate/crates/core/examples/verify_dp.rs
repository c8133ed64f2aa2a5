//! Exact check of the privacy ratio bound on the five-word table.

use fedcot::fixtures::five_token_table;
use fedcot::mechanism::verify_dp_bound;

fn main() -> anyhow::Result<()> {
    let table = five_token_table();
    for eps in [0.0, 0.5, 1.0, 3.0, 10.0] {
        let r = verify_dp_bound(&table, eps, table.tokens())?;
        println!(
            "eps {eps:>4}: max ratio {:.6} bound {:.6} {} (worst {} vs {} -> {})",
            r.max_ratio,
            r.bound,
            if r.pass { "PASS" } else { "FAIL" },
            r.worst.x,
            r.worst.x_prime,
            r.worst.y
        );
    }
    Ok(())
}
