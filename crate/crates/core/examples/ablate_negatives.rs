//! Train twins with seven mined hard negatives and with none.
//!
//! `cargo run --release --example ablate_negatives`

use llm2ir::experiments::{desk_setup, report, run_ablation_hard_negatives};

fn main() -> llm2ir::Result<()> {
    let r = run_ablation_hard_negatives(&desk_setup())?;
    print!("{}", report::paired_table(&r).render());
    let k0 = r.run("k0").expect("k0 twin");
    let first10: Vec<String> = k0.train.losses().iter().take(10).map(|l| format!("{l:.3}")).collect();
    println!("k0 loss, first ten steps: {}", first10.join(" "));
    Ok(())
}
