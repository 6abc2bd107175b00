//! Brute-force conditional k-gram estimates and match sets.
//!
//! Positions are 0-based. For a prefix of length `len`, position `p` is in the
//! match set when the `k` symbols before it equal the final `k` symbols of the
//! prefix: `seq[p - j] == seq[len - j]` for `j = 1..=k`, with `k <= p < len`.
//! The symbol `seq[p]` is then an observed continuation of the current context.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::markov::{context_count, context_index, Predictor};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Distribution {
    Defined(Vec<f64>),
    /// The current context has never been followed by anything.
    Undefined,
}

impl Distribution {
    pub fn probs(&self) -> Option<&[f64]> {
        match self {
            Distribution::Defined(p) => Some(p),
            Distribution::Undefined => None,
        }
    }

    pub fn is_defined(&self) -> bool {
        matches!(self, Distribution::Defined(_))
    }
}

fn check_context(len: usize, k: usize, seq_len: usize) -> Result<()> {
    if k == 0 || len <= k || len > seq_len {
        return Err(Error::Context(format!(
            "prefix length {len} must satisfy k < len <= {seq_len} (k = {k})"
        )));
    }
    Ok(())
}

/// Positions of the prefix `seq[..len]` whose preceding `k` symbols match the
/// prefix's final `k` symbols.
pub fn match_set(seq: &[usize], k: usize, len: usize) -> Result<Vec<usize>> {
    check_context(len, k, seq.len())?;
    Ok((k..len).filter(|&p| (1..=k).all(|j| seq[p - j] == seq[len - j])).collect())
}

/// In-context estimate of the law of the next symbol after `seq`, counting
/// continuations of every earlier occurrence of the final `k` symbols.
pub fn conditional_kgram(seq: &[usize], k: usize, s: usize) -> Result<Distribution> {
    let matches = match_set(seq, k, seq.len())?;
    if matches.is_empty() {
        return Ok(Distribution::Undefined);
    }
    let mut counts = vec![0usize; s];
    for &p in &matches {
        let x = seq[p];
        if x >= s {
            return Err(Error::Input(format!("symbol {x} outside alphabet of size {s}")));
        }
        counts[x] += 1;
    }
    let n = matches.len() as f64;
    Ok(Distribution::Defined(counts.iter().map(|&c| c as f64 / n).collect()))
}

/// Add-`alpha` smoothed estimate `(count(ctx, x) + α) / (count(ctx) + αS)`.
/// Defined for every prefix with at least `k` symbols.
pub fn laplace_kgram(seq: &[usize], k: usize, s: usize, alpha: f64) -> Result<Vec<f64>> {
    if k == 0 || seq.len() < k {
        return Err(Error::Context(format!("need at least k = {k} symbols, have {}", seq.len())));
    }
    if !(alpha > 0.0) {
        return Err(Error::Input(format!("alpha must be positive, got {alpha}")));
    }
    let mut counts = vec![0usize; s];
    let mut total = 0usize;
    if seq.len() > k {
        for p in match_set(seq, k, seq.len())? {
            counts[seq[p]] += 1;
            total += 1;
        }
    }
    let denom = total as f64 + alpha * s as f64;
    Ok(counts.iter().map(|&c| (c as f64 + alpha) / denom).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InductionScore {
    /// Argmax set of the row equals the match set, which is nonempty.
    pub pass: bool,
    /// Total variation distance to the uniform law on the match set.
    /// `None` when the match set is empty.
    pub tv: Option<f64>,
    pub argmax: Vec<usize>,
    pub matches: Vec<usize>,
}

/// Entries within this relative distance of the row maximum count as maximal.
pub const ARGMAX_REL_TOL: f64 = 1e-6;

/// Test whether an attention row from the final position is maximized exactly
/// on the match set of `seq`.
pub fn induction_head_score(att_row: &[f64], seq: &[usize], k: usize) -> Result<InductionScore> {
    let t = seq.len();
    if att_row.len() != t {
        return Err(Error::Contract(format!(
            "attention row has {} entries for length {t}",
            att_row.len()
        )));
    }
    let sum: f64 = att_row.iter().sum();
    if att_row.iter().any(|&a| !(a >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("attention row is not a distribution (sum {sum})")));
    }
    let matches = match_set(seq, k, t)?;
    let max = att_row.iter().copied().fold(0.0, f64::max);
    let argmax: Vec<usize> = (0..t).filter(|&i| att_row[i] >= max * (1.0 - ARGMAX_REL_TOL)).collect();
    let tv = (!matches.is_empty()).then(|| {
        let u = 1.0 / matches.len() as f64;
        let mut in_set = vec![false; t];
        for &m in &matches {
            in_set[m] = true;
        }
        0.5 * att_row
            .iter()
            .zip(&in_set)
            .map(|(&a, &m)| if m { (a - u).abs() } else { a })
            .sum::<f64>()
    });
    Ok(InductionScore {
        pass: !matches.is_empty() && argmax == matches,
        tv,
        argmax,
        matches,
    })
}

/// Streaming add-`alpha` k-gram predictor. With `alpha = 1` this is the Bayes
/// predictor under the uniform Dirichlet prior on kernel rows.
#[derive(Debug, Clone)]
pub struct LaplacePredictor {
    s: usize,
    k: usize,
    alpha: f64,
}

impl LaplacePredictor {
    pub fn new(s: usize, k: usize, alpha: f64) -> Self {
        Self { s, k, alpha }
    }
}

/// Transition counts, updated as each new symbol arrives.
fn streaming_rows(seq: &[usize], s: usize, k: usize, mut emit: impl FnMut(Option<&[u32]>) -> Vec<f64>) -> Result<Vec<Vec<f64>>> {
    let rows = context_count(s, k)?;
    let mut counts = vec![0u32; rows * s];
    let mut out = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        if seq[t] >= s {
            return Err(Error::Input(format!("symbol {} outside alphabet of size {s}", seq[t])));
        }
        if t >= k {
            let ctx = context_index(seq, t, k, s);
            counts[ctx * s + seq[t]] += 1;
        }
        if t + 1 >= k {
            let ctx = context_index(seq, t + 1, k, s);
            out.push(emit(Some(&counts[ctx * s..(ctx + 1) * s])));
        } else {
            out.push(emit(None));
        }
    }
    Ok(out)
}

impl Predictor for LaplacePredictor {
    fn predict(&self, seq: &[usize]) -> Result<Vec<Vec<f64>>> {
        let (s, a) = (self.s, self.alpha);
        streaming_rows(seq, s, self.k, |c| match c {
            Some(c) => {
                let denom = c.iter().map(|&x| x as f64).sum::<f64>() + a * s as f64;
                c.iter().map(|&x| (x as f64 + a) / denom).collect()
            }
            None => vec![1.0 / s as f64; s],
        })
    }
}

/// Unsmoothed conditional k-gram; uniform where undefined. Probabilities are
/// clamped below at `floor` so that losses stay finite.
#[derive(Debug, Clone)]
pub struct KgramPredictor {
    s: usize,
    k: usize,
    floor: f64,
}

impl KgramPredictor {
    pub fn new(s: usize, k: usize, floor: f64) -> Self {
        Self { s, k, floor }
    }
}

impl Predictor for KgramPredictor {
    fn predict(&self, seq: &[usize]) -> Result<Vec<Vec<f64>>> {
        let s = self.s;
        streaming_rows(seq, s, self.k, |c| {
            let total: u32 = c.map_or(0, |c| c.iter().sum());
            match c {
                Some(c) if total > 0 => c.iter().map(|&x| (x as f64 / total as f64).max(self.floor)).collect(),
                _ => vec![1.0 / s as f64; s],
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct UniformPredictor {
    s: usize,
}

impl UniformPredictor {
    pub fn new(s: usize) -> Self {
        Self { s }
    }
}

impl Predictor for UniformPredictor {
    fn predict(&self, seq: &[usize]) -> Result<Vec<Vec<f64>>> {
        Ok(vec![vec![1.0 / self.s as f64; self.s]; seq.len()])
    }
}

/// Smoothing strengths tried when picking the strongest in-context 1-gram baseline.
pub const UNIGRAM_ALPHAS: [f64; 5] = [0.1, 0.25, 0.5, 1.0, 2.0];
