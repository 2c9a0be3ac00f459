//! Train 256- and 64-token context twins, compare them on identical inputs
//! cut to 64 tokens, then sweep passkey documents across the long window.
//! Takes about a minute in release mode.
//!
//! `cargo run --release --example context_length`

use llm2ir::experiments::{report, run_context_pair, ContextPairConfig};

fn main() -> llm2ir::Result<()> {
    let run = run_context_pair(&ContextPairConfig::default())?;
    for t in report::context_tables(&run.report) {
        println!("{}", t.render());
    }
    Ok(())
}
