//! Records a small graph on the tape and reads gradients back.

use tae::autodiff::{Tape, Tensor};

fn main() -> tae::Result<()> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]])?);
    let w = tape.param(Tensor::from_rows(&[vec![0.2, -0.4, 0.1], vec![0.7, 0.3, -0.5]])?);
    let b = tape.param(Tensor::vector(vec![0.0, 0.1, -0.1]));

    let h = tape.matmul(x, w)?;
    let h = tape.add_bias(h, b)?;
    let h = tape.relu(h);
    let loss = tape.cross_entropy(h, &[2, 0], &[1.0, 1.0])?;

    println!("loss = {:.6}", tape.value(loss).item());
    let grads = tape.backward(loss)?;
    println!("dL/dW = {:?}", grads.get(w).data());
    println!("dL/db = {:?}", grads.get(b).data());
    Ok(())
}
