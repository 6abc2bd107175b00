use super::{kernels, Scalar, Tensor};
use crate::error::{Error, Result};

fn require_2d<F: Scalar>(t: &Tensor<F>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

fn require_1d<F: Scalar>(t: &Tensor<F>, op: &'static str) -> Result<usize> {
    match t.shape() {
        [n] => Ok(*n),
        s => Err(Error::Shape {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, n) = require_2d(a, "matmul")?;
    let (n2, p) = require_2d(b, "matmul")?;
    if n != n2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Tensor::new(vec![m, p], kernels::matmul(a.data(), b.data(), m, n, p))
}

pub fn row_softmax<F: Scalar>(a: &Tensor<F>, causal: bool) -> Result<Tensor<F>> {
    let (m, n) = require_2d(a, "row_softmax")?;
    if causal && m != n {
        return Err(Error::Shape {
            op: "row_softmax(causal)",
            lhs: a.shape().to_vec(),
            rhs: vec![m, m],
        });
    }
    Tensor::new(vec![m, n], kernels::softmax_rows(a.data(), m, n, causal)?)
}

/// `(v - mean) / std` with the population standard deviation.
pub fn layernorm_standard<F: Scalar>(v: &Tensor<F>) -> Result<Tensor<F>> {
    let d = require_1d(v, "layernorm_standard")?;
    if d < 2 {
        return Err(Error::Degenerate {
            op: "layernorm_standard",
            reason: "needs at least two features".into(),
        });
    }
    let (xhat, _) = kernels::standardize_rows(v.data(), 1, d, F::zero())?;
    Ok(Tensor::vector(xhat))
}

/// `v / ||v||_2`.
pub fn layernorm_l2<F: Scalar>(v: &Tensor<F>) -> Result<Tensor<F>> {
    let d = require_1d(v, "layernorm_l2")?;
    let (y, _) = kernels::l2_rows(v.data(), 1, d)?;
    Ok(Tensor::vector(y))
}

pub fn relu<F: Scalar>(a: &Tensor<F>) -> Tensor<F> {
    let data = a.data().iter().map(|&x| if x > F::zero() { x } else { F::zero() }).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Mean negative log-likelihood (nats) of `targets[n]` under row `n` of
/// `probs`, over rows `start..T`.
pub fn cross_entropy<F: Scalar>(probs: &Tensor<F>, targets: &[usize], start: usize) -> Result<f64> {
    let (t, s) = require_2d(probs, "cross_entropy")?;
    if targets.len() != t {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: probs.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    if start >= t {
        return Err(Error::Input(format!("start {start} leaves no positions (T = {t})")));
    }
    let mut total = 0.0;
    for (n, &x) in targets.iter().enumerate().skip(start) {
        if x >= s {
            return Err(Error::Input(format!("target {x} out of range at position {n}")));
        }
        let p = probs.get2(n, x).as_f64();
        if !(p > 0.0) {
            return Err(Error::InfiniteLoss { position: n });
        }
        total -= p.ln();
    }
    Ok(total / (t - start) as f64)
}
