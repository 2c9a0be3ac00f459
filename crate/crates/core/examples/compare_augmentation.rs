//! Random cropping against dropout-noise positives, same seeds.
//!
//! `cargo run --release --example compare_augmentation`

use llm2ir::experiments::{desk_setup, report, run_augmentation_comparison};

fn main() -> llm2ir::Result<()> {
    let r = run_augmentation_comparison(&desk_setup())?;
    print!("{}", report::paired_table(&r).render());
    Ok(())
}
