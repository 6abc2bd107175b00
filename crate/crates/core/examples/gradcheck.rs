//! Finite-difference check of the backward pass on a random pre-norm model.
use kgram::markov::sample_pair;
use kgram::model::{init_weights, loss_and_grads, TransformerSpec, WeightSet};
use kgram::tensor::{grad_check_with, DEFAULT_EPS};

fn main() -> kgram::Result<()> {
    let spec = TransformerSpec::standard(2, 2, 16, 3, 24);
    let w = init_weights(&spec, 1)?;
    let (_, seq) = sample_pair(3, 2, 24, 1, 0)?;
    let f = |w: &WeightSet| loss_and_grads(&spec, w, &seq, 2);
    let r = grad_check_with(f, &w, DEFAULT_EPS, 1e-4, 200, 1)?;
    println!("{}", serde_json::to_string_pretty(&r)?);
    Ok(())
}
