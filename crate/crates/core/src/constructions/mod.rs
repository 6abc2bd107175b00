//! Explicit transformer weights that compute the conditional k-gram estimate,
//! a temperature schedule for them, and an oracle-equivalence check.

mod builders;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

pub use builders::{
    build, double_network, doubled_layernorm, doubling_layers, theorem1, theorem2, theorem3, theorem4, theorem4_compact,
};

use crate::error::{Error, Result};
use crate::markov::sample_pair;
use crate::model::{forward_in, TransformerSpec, WeightSet};
use crate::oracle::{conditional_kgram, match_set, Distribution};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Construction {
    /// First order, two attention-only layers.
    T1,
    /// Two attention-only layers, `k` heads in the first.
    T2,
    /// Logarithmic depth, one head per layer.
    T3,
    /// Three layers with FFN and layer norm, one head per layer.
    T4,
}

impl Construction {
    pub const ALL: [Construction; 4] = [Construction::T1, Construction::T2, Construction::T3, Construction::T4];

    pub fn id(self) -> &'static str {
        match self {
            Construction::T1 => "t1",
            Construction::T2 => "t2",
            Construction::T3 => "t3",
            Construction::T4 => "t4",
        }
    }

    /// Layer whose attention implements the match.
    pub fn matching_layer(self, k: usize) -> usize {
        match self {
            Construction::T1 | Construction::T2 => 1,
            Construction::T3 => doubling_layers(k),
            Construction::T4 => 2,
        }
    }

    pub fn supports(self, k: usize) -> bool {
        k >= 1 && (self != Construction::T1 || k == 1)
    }
}

impl fmt::Display for Construction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Construction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Construction::ALL
            .into_iter()
            .find(|c| c.id() == s)
            .ok_or_else(|| Error::Input(format!("unknown construction {s:?} (expected t1, t2, t3 or t4)")))
    }
}

/// `κ = 9^k (ln T + ln(1/ε))`: non-matching keys trail matches by at least
/// `κ·9^{-k}` in the layer-norm construction, which pushes their total
/// attention below about `ε`.
pub fn recommended_kappa(k: usize, t: usize, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::Input(format!("eps must lie in (0, 1], got {eps}")));
    }
    if t < 2 {
        return Err(Error::Input(format!("T must be at least 2, got {t}")));
    }
    let kappa = 9f64.powi(k as i32) * ((t as f64).ln() - eps.ln());
    // largest score is about 2κ·9^{k+1}/25
    let peak = kappa * 9f64.powi(k as i32 + 1);
    if !kappa.is_finite() || !peak.is_finite() || peak > 1e300 {
        return Err(Error::Capacity(format!("kappa for k={k} overflows the exponent-safe range")));
    }
    Ok(kappa)
}

/// Doubling ladder `κ₀, 2κ₀, 4κ₀, …` that starts where the error is still
/// far above rounding noise: `κ₀ = ln T / 2`, or `9^k ln T / 16` for t4
/// whose score margin shrinks like `9^{-k}`.
pub fn kappa_ladder(c: Construction, k: usize, t: usize, rungs: usize) -> Vec<f64> {
    let scale = if c == Construction::T4 {
        9f64.powi(k as i32) / 8.0
    } else {
        1.0
    };
    let k0 = scale * (t.max(2) as f64).ln() / 2.0;
    (0..rungs).map(|i| k0 * 2f64.powi(i as i32)).collect()
}

/// How per-position predictions are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EvalMode {
    /// Re-run the model on every prefix and read its last row.
    Sliding,
    /// One pass over the whole sequence; row `n` sees only `x_0..=x_n`, so
    /// this equals sliding evaluation.
    FullRows,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SequenceErrors {
    pub evaluated: usize,
    pub skipped: usize,
    pub max_abs_err: f64,
    pub max_tv: f64,
}

fn tv_to_uniform(row: &[f64], matches: &[usize]) -> f64 {
    let u = 1.0 / matches.len() as f64;
    let mut tv = 0.0;
    let mut it = matches.iter().peekable();
    for (i, &a) in row.iter().enumerate() {
        if it.peek() == Some(&&i) {
            it.next();
            tv += (a - u).abs();
        } else {
            tv += a.abs();
        }
    }
    0.5 * tv
}

/// Compare every defined prefix prediction with the oracle.
pub fn sequence_errors<F: Scalar>(
    spec: &TransformerSpec,
    w: &WeightSet,
    seq: &[usize],
    k: usize,
    layer: usize,
    mode: EvalMode,
) -> Result<SequenceErrors> {
    let mut out = SequenceErrors::default();
    let full = match mode {
        EvalMode::FullRows => Some(forward_in::<F>(spec, w, seq)?),
        EvalMode::Sliding => None,
    };
    for len in k + 1..=seq.len() {
        let Distribution::Defined(oracle) = conditional_kgram(&seq[..len], k, spec.s)? else {
            out.skipped += 1;
            continue;
        };
        let local;
        let (logits, trace) = match &full {
            Some(f) => f,
            None => {
                local = forward_in::<F>(spec, w, &seq[..len])?;
                &local
            }
        };
        let row = logits.row(len - 1);
        for (a, b) in row.iter().zip(&oracle) {
            let e = (a - b).abs();
            out.max_abs_err = if e.is_nan() { f64::NAN } else { out.max_abs_err.max(e) };
        }
        let att = &trace.get(layer, 0).row(len - 1)[..len];
        let matches = match_set(seq, k, len)?;
        out.max_tv = out.max_tv.max(tv_to_uniform(att, &matches));
        out.evaluated += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstructionReport {
    pub construction: Construction,
    pub s: usize,
    pub k: usize,
    pub t: usize,
    pub kappa: f64,
    pub n_seqs: usize,
    pub seed: u64,
    pub evaluated: usize,
    pub skipped: usize,
    pub max_abs_err: f64,
    pub max_tv: f64,
    pub tol: f64,
    pub pass: bool,
}

impl ConstructionReport {
    pub const CSV_HEADER: &'static str = "construction,S,k,T,kappa,n_seqs,skipped,max_abs_err,max_tv,pass";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:e},{:e},{}",
            self.construction,
            self.s,
            self.k,
            self.t,
            self.kappa,
            self.n_seqs,
            self.skipped,
            self.max_abs_err,
            self.max_tv,
            self.pass
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyConfig {
    pub construction: Construction,
    pub s: usize,
    pub k: usize,
    pub t: usize,
    pub n_seqs: usize,
    pub kappa: f64,
    pub tol: f64,
    pub seed: u64,
    pub mode: EvalMode,
}

/// Build the network and check it against the oracle on `n_seqs` sequences,
/// each from its own freshly drawn kernel.
pub fn verify_construction(
    construction: Construction,
    s: usize,
    k: usize,
    t: usize,
    n_seqs: usize,
    kappa: f64,
    tol: f64,
) -> Result<ConstructionReport> {
    verify(&VerifyConfig {
        construction,
        s,
        k,
        t,
        n_seqs,
        kappa,
        tol,
        seed: 0,
        mode: EvalMode::FullRows,
    })
}

pub fn verify(cfg: &VerifyConfig) -> Result<ConstructionReport> {
    let (spec, w) = build(cfg.construction, cfg.s, cfg.k, cfg.kappa, cfg.t)?;
    let totals = ensemble_errors::<f64>(&spec, &w, cfg)?;
    if totals.evaluated == 0 {
        return Err(Error::Inconclusive(format!(
            "every position of all {} sequences has an undefined estimate",
            cfg.n_seqs
        )));
    }
    Ok(ConstructionReport {
        construction: cfg.construction,
        s: cfg.s,
        k: cfg.k,
        t: cfg.t,
        kappa: cfg.kappa,
        n_seqs: cfg.n_seqs,
        seed: cfg.seed,
        evaluated: totals.evaluated,
        skipped: totals.skipped,
        max_abs_err: totals.max_abs_err,
        max_tv: totals.max_tv,
        tol: cfg.tol,
        pass: totals.max_abs_err <= cfg.tol,
    })
}

/// Errors over the ensemble in `F` arithmetic, combined in sequence order.
pub fn ensemble_errors<F: Scalar>(spec: &TransformerSpec, w: &WeightSet, cfg: &VerifyConfig) -> Result<SequenceErrors> {
    let layer = cfg.construction.matching_layer(cfg.k);
    let per: Vec<SequenceErrors> = (0..cfg.n_seqs as u64)
        .into_par_iter()
        .map(|i| {
            let (_, seq) = sample_pair(cfg.s, cfg.k, cfg.t, cfg.seed, i)?;
            sequence_errors::<F>(spec, w, &seq, cfg.k, layer, cfg.mode)
        })
        .collect::<Result<_>>()?;
    let mut total = SequenceErrors::default();
    for e in per {
        total.evaluated += e.evaluated;
        total.skipped += e.skipped;
        total.max_abs_err = if e.max_abs_err.is_nan() || total.max_abs_err.is_nan() {
            f64::NAN
        } else {
            total.max_abs_err.max(e.max_abs_err)
        };
        total.max_tv = total.max_tv.max(e.max_tv);
    }
    Ok(total)
}
