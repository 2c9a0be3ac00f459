//! Reverse-mode autodiff on the tape, checked against central differences.

use llm2ir::tensor::gradcheck::{primitive_checks, GradCheckOptions};
use llm2ir::tensor::{Tape, Tensor};

fn main() -> llm2ir::Result<()> {
    let tape = Tape::new();
    let x = tape.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]])?);
    let w = tape.param(Tensor::from_rows(&[vec![0.5], vec![-1.0]])?);
    let loss = x.matmul(w)?.gelu().sum();
    let grads = tape.backward(loss)?;
    println!("loss {:.6}", loss.item());
    println!("dL/dw {:?}", grads.get(w).map(|g| g.data().to_vec()));

    for (name, report) in primitive_checks(GradCheckOptions::default())? {
        println!("{name:<18} max relative error {:.2e}", report.max_rel_error());
    }
    Ok(())
}
