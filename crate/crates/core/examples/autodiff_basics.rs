//! Records a small computation on a tape and reads back its gradients.

use graphcap::{Result, Tape, Tensor};

pub fn run_example() -> Result<Vec<f64>> {
    let mut tape = Tape::new(0);
    let w = tape.leaf(Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.4])?, true);
    let x = tape.constant(Tensor::row(&[1.0, 2.0, 3.0]));
    // logits = x · wᵀ, then cross-entropy against class 1
    let logits = tape.matmul_t(x, w)?;
    let logp = tape.log_softmax_rows(logits)?;
    let picked = tape.pick(logp, 0, 1)?;
    let loss = tape.scale(picked, -1.0);
    let grads = tape.backward_leaves(loss)?;
    println!("loss = {:.6}", tape.value(loss).item());
    println!("dL/dw = {:?}", grads[&w].data());
    Ok(grads[&w].data().to_vec())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
