//! Pull and push centroid losses, and one centroid update.

use tae::autodiff::{Tape, Tensor};
use tae::centroid::{max_loss, min_loss, CentroidBank, CentroidStatus, MaxScope};

fn main() -> tae::Result<()> {
    let mut bank = CentroidBank::new(2);
    bank.insert(0, vec![1.0, 0.0], CentroidStatus::Frozen)?;
    bank.insert(1, vec![0.6, 0.8], CentroidStatus::Learnable)?;

    let mut tape = Tape::new();
    let binding = bank.bind(&mut tape)?;
    let feats = tape.param(Tensor::from_rows(&[vec![0.9, 0.1], vec![0.2, 1.0]])?);
    let pull = min_loss(&mut tape, feats, &[0, 1], &binding)?;
    let push = max_loss(&mut tape, &binding, MaxScope::AllSeen, &[1])?;
    println!("pull = {:.4}, push = {:.4}", tape.value(pull).item(), tape.value(push).item());

    let total = tape.add(pull, push)?;
    let grads = tape.backward(total)?;
    bank.step(&grads, &binding, 0.5)?;
    println!("class 0 (frozen):    {:?}", bank.get(0).unwrap());
    println!("class 1 (learnable): {:?}", bank.get(1).unwrap());
    Ok(())
}
