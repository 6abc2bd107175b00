//! Attention statistics over sequence ensembles, induction-head audits, the
//! normalized-window margin check, and precision sweeps of the constructions.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::constructions::{build, ensemble_errors, Construction, EvalMode, VerifyConfig};
use crate::error::{Error, Result};
use crate::markov::{sample_pair, Sequence};
use crate::model::{forward, TransformerSpec, WeightSet};
use crate::oracle::induction_head_score;
use crate::tensor::Tensor;

/// Entrywise mean and standard deviation of one head's attention matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadStats {
    pub layer: usize,
    pub head: usize,
    pub mean: Tensor,
    pub std: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStats {
    pub heads: Vec<HeadStats>,
    pub n_seqs: usize,
    pub t: usize,
    pub spec_hash: u64,
}

/// Default row for the exported slice.
pub const SLICE_ROW: usize = 10;

impl AttentionStats {
    pub fn head(&self, layer: usize, head: usize) -> Option<&HeadStats> {
        self.heads.iter().find(|h| h.layer == layer && h.head == head)
    }

    /// Long form: `layer,head,n,i,mean,std` for every causal entry.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "layer,head,n,i,mean,std")?;
        for h in &self.heads {
            for n in 0..self.t {
                for i in 0..=n {
                    writeln!(
                        out,
                        "{},{},{n},{i},{:e},{:e}",
                        h.layer,
                        h.head,
                        h.mean.get2(n, i),
                        h.std.get2(n, i)
                    )?;
                }
            }
        }
        Ok(())
    }

    /// Row `n` of every head: `layer,head,i,mean,std` for `i ≤ n`.
    pub fn write_slice_csv(&self, n: usize, out: &mut impl Write) -> Result<()> {
        if n >= self.t {
            return Err(Error::Input(format!("slice row {n} outside length {}", self.t)));
        }
        writeln!(out, "layer,head,i,mean,std")?;
        for h in &self.heads {
            for i in 0..=n {
                writeln!(
                    out,
                    "{},{},{i},{:e},{:e}",
                    h.layer,
                    h.head,
                    h.mean.get2(n, i),
                    h.std.get2(n, i)
                )?;
            }
        }
        Ok(())
    }
}

/// Statistics over `n_seqs` sequences, each drawn from its own kernel.
pub fn attention_stats(
    spec: &TransformerSpec,
    w: &WeightSet,
    s: usize,
    k: usize,
    n_seqs: usize,
    t: usize,
    seed: u64,
) -> Result<AttentionStats> {
    if n_seqs < 2 {
        return Err(Error::Input(format!(
            "attention statistics need at least 2 sequences, got {n_seqs}"
        )));
    }
    let seqs: Vec<Sequence> = (0..n_seqs as u64)
        .map(|i| sample_pair(s, k, t, seed, i).map(|(_, q)| q))
        .collect::<Result<_>>()?;
    attention_stats_on(spec, w, &seqs)
}

/// Statistics over a given ensemble of equal-length sequences.
pub fn attention_stats_on(spec: &TransformerSpec, w: &WeightSet, seqs: &[Sequence]) -> Result<AttentionStats> {
    let Some(first) = seqs.first() else {
        return Err(Error::Input("empty sequence ensemble".into()));
    };
    let t = first.len();
    if seqs.iter().any(|q| q.len() != t) {
        return Err(Error::Input("sequences in an ensemble must share one length".into()));
    }
    let traces: Vec<_> = seqs
        .par_iter()
        .map(|q| forward(spec, w, q).map(|(_, tr)| tr))
        .collect::<Result<_>>()?;
    let n = seqs.len() as f64;
    let mut heads = Vec::new();
    for (l, &h_count) in spec.heads.iter().enumerate() {
        for h in 0..h_count {
            let mut mean: Tensor = Tensor::zeros(&[t, t]);
            for tr in &traces {
                for (m, a) in mean.data_mut().iter_mut().zip(tr.get(l, h).data()) {
                    *m += a;
                }
            }
            mean.data_mut().iter_mut().for_each(|m| *m /= n);
            let mut var: Tensor = Tensor::zeros(&[t, t]);
            for tr in &traces {
                for ((v, a), m) in var.data_mut().iter_mut().zip(tr.get(l, h).data()).zip(mean.data()) {
                    *v += (a - m) * (a - m);
                }
            }
            let std: Tensor = Tensor::from_fn(&[t, t], |i| (var.data()[i] / n).sqrt());
            heads.push(HeadStats {
                layer: l,
                head: h,
                mean,
                std,
            });
        }
    }
    Ok(AttentionStats {
        heads,
        n_seqs: seqs.len(),
        t,
        spec_hash: spec.hash(),
    })
}

/// Largest entrywise standard deviation over all heads of `layer`; zero
/// means that layer's attention ignores the symbols entirely.
pub fn assumption1_score(stats: &AttentionStats, layer: usize) -> Result<f64> {
    let mut heads = stats.heads.iter().filter(|h| h.layer == layer).peekable();
    if heads.peek().is_none() {
        return Err(Error::Input(format!("no layer {layer} in these statistics")));
    }
    Ok(heads.flat_map(|h| h.std.data().iter()).fold(0.0, |m, &x| m.max(x)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormErrorReport {
    pub s: usize,
    pub k: usize,
    /// Smallest distance between normalized encodings of unequal windows.
    pub min_distance: f64,
    /// A pair of windows attaining it.
    pub witness: (Vec<usize>, Vec<usize>),
    /// `3^{-k}`.
    pub bound: f64,
    /// Every unequal pair clears the bound, checked in integer arithmetic.
    pub holds_exactly: bool,
    pub pairs: usize,
}

fn window(mut code: usize, s: usize, k: usize) -> Vec<usize> {
    (0..k)
        .map(|_| {
            let x = code % s;
            code /= s;
            x
        })
        .collect()
}

/// Encode a window as `Σ_i 3^i e_{w_i}` in integer coordinates.
fn encode(w: &[usize], s: usize) -> Vec<u64> {
    let mut v = vec![0u64; s];
    for (i, &x) in w.iter().enumerate() {
        v[x] += 3u64.pow(i as u32);
    }
    v
}

/// Exhaustive check of the margin between normalized base-3 window encodings.
pub fn normerror_bruteforce(s: usize, k: usize) -> Result<NormErrorReport> {
    if !(2..=4).contains(&s) || !(1..=6).contains(&k) {
        return Err(Error::Capacity(format!(
            "brute force is limited to S in 2..=4 and k in 1..=6, got S={s}, k={k}"
        )));
    }
    let count = s.pow(k as u32);
    let codes: Vec<Vec<u64>> = (0..count).map(|c| encode(&window(c, s, k), s)).collect();
    let sq: Vec<u64> = codes.iter().map(|v| v.iter().map(|x| x * x).sum()).collect();
    let unit: Vec<Vec<f64>> = codes
        .iter()
        .zip(&sq)
        .map(|(v, &n)| v.iter().map(|&x| x as f64 / (n as f64).sqrt()).collect())
        .collect();
    let nine_k = 9u128.pow(k as u32);

    let per_row: Vec<(f64, usize, usize, bool)> = (0..count)
        .into_par_iter()
        .map(|a| {
            let mut best = (f64::INFINITY, a, a, true);
            for b in 0..count {
                if a == b {
                    continue;
                }
                let dot: u64 = codes[a].iter().zip(&codes[b]).map(|(x, y)| x * y).sum();
                let dist = unit[a]
                    .iter()
                    .zip(&unit[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                // dist ≥ 3^{-k}  ⇔  (2·9^k − 1)·‖a‖‖b‖ ≥ 2·9^k·dot
                let lhs = (2 * nine_k - 1).pow(2) * sq[a] as u128 * sq[b] as u128;
                let rhs = (2 * nine_k * dot as u128).pow(2);
                best.3 &= lhs >= rhs;
                if dist < best.0 {
                    best = (dist, a, b, best.3);
                }
            }
            best
        })
        .collect();
    let holds_exactly = per_row.iter().all(|r| r.3);
    let &(min_distance, a, b, _) = per_row
        .iter()
        .min_by(|x, y| x.0.total_cmp(&y.0))
        .expect("at least two windows");
    Ok(NormErrorReport {
        s,
        k,
        min_distance,
        witness: (window(a, s, k), window(b, s, k)),
        bound: 3f64.powi(-(k as i32)),
        holds_exactly,
        pairs: count * (count - 1) / 2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Precision {
    F64,
    F32,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub kappa: f64,
    pub precision: Precision,
    /// NaN when the forward pass broke down (overflow or an empty softmax).
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepConfig {
    pub construction: Construction,
    pub s: usize,
    pub k: usize,
    pub t: usize,
    pub n_seqs: usize,
    pub seed: u64,
}

/// Oracle error of a construction at each temperature, on one fixed
/// ensemble, with the forward pass carried out in the given precision.
pub fn precision_sweep(cfg: &SweepConfig, kappas: &[f64], precision: Precision) -> Result<Vec<SweepPoint>> {
    if kappas.is_empty() {
        return Err(Error::Input("empty temperature ladder".into()));
    }
    kappas
        .iter()
        .map(|&kappa| {
            let (spec, w) = build(cfg.construction, cfg.s, cfg.k, kappa, cfg.t)?;
            let vc = VerifyConfig {
                construction: cfg.construction,
                s: cfg.s,
                k: cfg.k,
                t: cfg.t,
                n_seqs: cfg.n_seqs,
                kappa,
                tol: 0.0,
                seed: cfg.seed,
                mode: EvalMode::FullRows,
            };
            let res = match precision {
                Precision::F64 => ensemble_errors::<f64>(&spec, &w, &vc),
                Precision::F32 => ensemble_errors::<f32>(&spec, &w, &vc),
            };
            let max_abs_err = match res {
                Ok(e) => e.max_abs_err,
                Err(Error::NoValidKey { .. } | Error::NonFinite { .. } | Error::Degenerate { .. }) => f64::NAN,
                Err(e) => return Err(e),
            };
            Ok(SweepPoint {
                kappa,
                precision,
                max_abs_err,
            })
        })
        .collect()
}

pub fn write_sweep_csv(points: &[SweepPoint], out: &mut impl Write) -> Result<()> {
    writeln!(out, "kappa,precision,max_abs_err")?;
    for p in points {
        writeln!(out, "{},{},{:e}", p.kappa, p.precision, p.max_abs_err)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub layer: usize,
    /// Sequences whose final match set is nonempty.
    pub evaluated: usize,
    pub skipped: usize,
    pub pass_rate: f64,
    pub mean_tv: f64,
    pub max_tv: f64,
}

/// Check whether the final-row attention of head 0 in `layer` is maximized
/// exactly on the match set, over fresh sequences.
#[allow(clippy::too_many_arguments)]
pub fn induction_head_audit(
    spec: &TransformerSpec,
    w: &WeightSet,
    s: usize,
    k: usize,
    n_seqs: usize,
    t: usize,
    seed: u64,
    layer: usize,
) -> Result<AuditReport> {
    if layer >= spec.layers() {
        return Err(Error::Input(format!("layer {layer} outside a {}-layer model", spec.layers())));
    }
    let scores: Vec<_> = (0..n_seqs as u64)
        .into_par_iter()
        .map(|i| {
            let (_, seq) = sample_pair(s, k, t, seed, i)?;
            let (_, trace) = forward(spec, w, &seq)?;
            induction_head_score(trace.get(layer, 0).row(t - 1), &seq, k)
        })
        .collect::<Result<_>>()?;
    let defined: Vec<_> = scores.iter().filter_map(|sc| sc.tv.map(|tv| (sc.pass, tv))).collect();
    let evaluated = defined.len();
    let passes = defined.iter().filter(|d| d.0).count();
    let denom = evaluated.max(1) as f64;
    Ok(AuditReport {
        layer,
        evaluated,
        skipped: n_seqs - evaluated,
        pass_rate: passes as f64 / denom,
        mean_tv: defined.iter().map(|d| d.1).sum::<f64>() / denom,
        max_tv: defined.iter().map(|d| d.1).fold(0.0, f64::max),
    })
}
