//! Load an embedding file and print the most similar words to a query.
//!
//!     cargo run --example load_and_score -- path/to/vectors.txt river

use std::env;

use fedcot::fixtures::five_token_table;
use fedcot::vocab::{load_embeddings, Token};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = env::args().skip(1).collect();
    let table = match args.first() {
        Some(path) => load_embeddings(path, None)?,
        None => five_token_table(),
    };
    let query = Token::new(args.get(1).map(String::as_str).unwrap_or("beaver"))?;
    println!("{} words, dim {}", table.len(), table.dim());

    let mut scored: Vec<(f64, &Token)> = table
        .tokens()
        .iter()
        .map(|t| Ok((table.scaled_utility(&query, t)?, t)))
        .collect::<anyhow::Result<_>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (u, t) in scored.iter().take(10) {
        println!("{u:.4}  {t}");
    }
    Ok(())
}
