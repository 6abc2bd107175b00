//! kth-order Markov kernels drawn from the Dirichlet(1) prior, sequence
//! sampling, and the loss comparison against the Bayes predictor.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution as _, Exp1};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::oracle::LaplacePredictor;
use crate::rng::{self, tag};

/// Symbols in `0..S`.
pub type Sequence = Vec<usize>;

/// Largest transition table (`S^k · S` entries) we agree to allocate.
pub const MAX_TABLE: usize = 1 << 26;

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovKernel {
    k: usize,
    s: usize,
    table: Vec<f64>,
}

/// Number of rows `S^k`, or a capacity error if the table would not fit.
pub fn context_count(s: usize, k: usize) -> Result<usize> {
    let rows = u32::try_from(k)
        .ok()
        .and_then(|k| s.checked_pow(k))
        .filter(|r| r.checked_mul(s).is_some_and(|n| n <= MAX_TABLE));
    rows.ok_or_else(|| Error::Capacity(format!("S^k·S table for S={s}, k={k} exceeds {MAX_TABLE} entries")))
}

/// Row index of the context ending just before `end`: `Σ_j seq[end-1-j]·S^j`,
/// so the most recent symbol is least significant.
pub fn context_index(seq: &[usize], end: usize, k: usize, s: usize) -> usize {
    (0..k).fold(0, |acc, j| acc * s + seq[end - k + j])
}

impl MarkovKernel {
    pub fn from_table(s: usize, k: usize, table: Vec<f64>) -> Result<Self> {
        if s < 2 || k < 1 {
            return Err(Error::Input(format!("need S >= 2 and k >= 1, got S={s}, k={k}")));
        }
        let rows = context_count(s, k)?;
        if table.len() != rows * s {
            return Err(Error::Shape {
                op: "MarkovKernel::from_table",
                lhs: vec![rows, s],
                rhs: vec![table.len()],
            });
        }
        for (r, row) in table.chunks(s).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
                return Err(Error::Input(format!("row {r} is not a distribution")));
            }
        }
        Ok(Self { k, s, table })
    }

    pub fn order(&self) -> usize {
        self.k
    }

    pub fn alphabet(&self) -> usize {
        self.s
    }

    pub fn rows(&self) -> usize {
        self.table.len() / self.s
    }

    pub fn row(&self, ctx: usize) -> &[f64] {
        &self.table[ctx * self.s..(ctx + 1) * self.s]
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// FNV hash of the table's bit patterns, printed when exporting datasets.
    pub fn checksum(&self) -> u64 {
        let bytes: Vec<u8> = self.table.iter().flat_map(|p| p.to_bits().to_le_bytes()).collect();
        rng::hash_bytes(&bytes)
    }
}

/// Each row i.i.d. Dirichlet(1, …, 1), drawn as normalized Exp(1) variates.
pub fn sample_kernel(s: usize, k: usize, seed: u64) -> Result<MarkovKernel> {
    if s < 2 || k < 1 {
        return Err(Error::Input(format!("need S >= 2 and k >= 1, got S={s}, k={k}")));
    }
    let rows = context_count(s, k)?;
    let mut r = rng::stream(seed, tag::KERNEL, 0);
    let mut table = Vec::with_capacity(rows * s);
    for _ in 0..rows {
        let draws: Vec<f64> = (0..s).map(|_| Exp1.sample(&mut r)).collect();
        let total: f64 = draws.iter().sum();
        table.extend(draws.iter().map(|e| e / total));
    }
    Ok(MarkovKernel { k, s, table })
}

/// First `k` symbols uniform, then each symbol drawn from the row of the
/// preceding `k`.
pub fn sample_sequence(kernel: &MarkovKernel, t: usize, seed: u64) -> Result<Sequence> {
    let (s, k) = (kernel.s, kernel.k);
    if t < k {
        return Err(Error::Input(format!("sequence length {t} shorter than order {k}")));
    }
    let mut r = rng::stream(seed, tag::SEQUENCE, 0);
    let mut seq = Vec::with_capacity(t);
    for _ in 0..k {
        seq.push(r.random_range(0..s));
    }
    for n in k..t {
        let row = kernel.row(context_index(&seq, n, k, s));
        let u: f64 = r.random();
        let mut acc = 0.0;
        let mut x = s - 1;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                x = j;
                break;
            }
        }
        seq.push(x);
    }
    Ok(seq)
}

/// The `index`-th (kernel, sequence) pair of an ensemble keyed by `seed`.
/// Every sequence gets its own freshly drawn kernel.
pub fn sample_pair(s: usize, k: usize, t: usize, seed: u64, index: u64) -> Result<(MarkovKernel, Sequence)> {
    let kernel = sample_kernel(s, k, rng::derive(seed, tag::KERNEL, index))?;
    let seq = sample_sequence(&kernel, t, rng::derive(seed, tag::SEQUENCE, index))?;
    Ok((kernel, seq))
}

/// Kernel row for the context `seq[n-k..n]`, i.e. the law of `seq[n]`.
pub fn true_conditional(kernel: &MarkovKernel, seq: &[usize], n: usize) -> Result<Vec<f64>> {
    if n < kernel.k || n > seq.len() {
        return Err(Error::Context(format!(
            "position {n} has no full order-{} context in a length-{} sequence",
            kernel.k,
            seq.len()
        )));
    }
    if let Some(&bad) = seq[n - kernel.k..n].iter().find(|&&x| x >= kernel.s) {
        return Err(Error::Input(format!("symbol {bad} outside alphabet of size {}", kernel.s)));
    }
    Ok(kernel.row(context_index(seq, n, kernel.k, kernel.s)).to_vec())
}

/// Anything that maps a sequence to next-symbol distributions.
///
/// `predict` returns one row per position: row `t` is the predicted law of
/// `seq[t + 1]` having seen `seq[..=t]`.
pub trait Predictor: Sync {
    fn predict(&self, seq: &[usize]) -> Result<Vec<Vec<f64>>>;
}

fn check_rows(rows: &[Vec<f64>], s: usize, t: usize) -> Result<()> {
    if rows.len() != t {
        return Err(Error::Contract(format!(
            "predictor returned {} rows for length {t}",
            rows.len()
        )));
    }
    for (n, row) in rows.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.len() != s || row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("row {n} is not a distribution over {s} symbols")));
        }
    }
    Ok(())
}

/// Mean next-symbol cross-entropy (nats) over targets `seq[k..T]`.
pub fn sequence_loss(rows: &[Vec<f64>], seq: &[usize], k: usize) -> Result<f64> {
    let mut total = 0.0;
    for t in k..seq.len() {
        let p = rows[t - 1][seq[t]];
        if !(p > 0.0) {
            return Err(Error::InfiniteLoss { position: t });
        }
        total -= p.ln();
    }
    Ok(total / (seq.len() - k) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub model_loss: f64,
    pub bayes_loss: f64,
    pub gap: f64,
    /// Standard error of the per-sequence gap.
    pub gap_stderr: f64,
    pub n_seqs: usize,
}

/// Model versus Laplace-smoothed k-gram loss on `n_seqs` fresh (kernel,
/// sequence) pairs.
pub fn optimal_loss(s: usize, k: usize, model: &dyn Predictor, n_seqs: usize, t: usize, seed: u64) -> Result<LossReport> {
    if n_seqs == 0 || t <= k {
        return Err(Error::Input(format!("need n_seqs >= 1 and T > k, got {n_seqs}, {t}")));
    }
    let bayes = LaplacePredictor::new(s, k, 1.0);
    let per_seq: Vec<(f64, f64)> = (0..n_seqs as u64)
        .into_par_iter()
        .map(|i| {
            let (_, seq) = sample_pair(s, k, t, seed, i)?;
            let m = model.predict(&seq)?;
            check_rows(&m, s, t)?;
            let b = bayes.predict(&seq)?;
            Ok((sequence_loss(&m, &seq, k)?, sequence_loss(&b, &seq, k)?))
        })
        .collect::<Result<_>>()?;
    let n = n_seqs as f64;
    let model_loss = per_seq.iter().map(|p| p.0).sum::<f64>() / n;
    let bayes_loss = per_seq.iter().map(|p| p.1).sum::<f64>() / n;
    let gap = model_loss - bayes_loss;
    let var = if n_seqs > 1 {
        per_seq.iter().map(|p| (p.0 - p.1 - gap).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(LossReport {
        model_loss,
        bayes_loss,
        gap,
        gap_stderr: (var / n).sqrt(),
        n_seqs,
    })
}

/// Dataset export: header `S=<S> k=<k> T=<T> seed=<seed>` then one
/// space-separated sequence per line.
pub fn write_dataset<W: Write>(out: &mut W, s: usize, k: usize, t: usize, seed: u64, seqs: &[Sequence]) -> Result<()> {
    writeln!(out, "S={s} k={k} T={t} seed={seed}")?;
    for seq in seqs {
        let line: Vec<String> = seq.iter().map(usize::to_string).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

/// A dataset of `n` sequences plus an order-independent checksum of all kernels.
pub fn generate_dataset(s: usize, k: usize, t: usize, n: usize, seed: u64) -> Result<(Vec<Sequence>, u64)> {
    let pairs: Vec<(MarkovKernel, Sequence)> = (0..n as u64)
        .into_par_iter()
        .map(|i| sample_pair(s, k, t, seed, i))
        .collect::<Result<_>>()?;
    let sums: Vec<u8> = pairs.iter().flat_map(|(kern, _)| kern.checksum().to_le_bytes()).collect();
    Ok((pairs.into_iter().map(|p| p.1).collect(), rng::hash_bytes(&sums)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{KgramPredictor, UniformPredictor};
    use proptest::prelude::*;

    fn one_hot_zero(s: usize, k: usize) -> MarkovKernel {
        let rows = s.pow(k as u32);
        let table = (0..rows * s).map(|i| if i % s == 0 { 1.0 } else { 0.0 }).collect();
        MarkovKernel::from_table(s, k, table).unwrap()
    }

    #[test]
    fn kernel_rows_are_distributions() {
        let kern = sample_kernel(2, 1, 9).unwrap();
        assert_eq!(kern.rows(), 2);
        for r in 0..2 {
            assert!((kern.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dirichlet_mean_of_first_entry_is_half() {
        let mean = (0..10_000).map(|i| sample_kernel(2, 1, i).unwrap().row(0)[0]).sum::<f64>() / 10_000.0;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
    }

    #[test]
    fn dirichlet_entry_variance_matches_closed_form() {
        // Dirichlet(1,1,1) marginal is Beta(1,2): variance (S-1)/(S^2(S+1)) = 2/36
        let mut xs = Vec::new();
        for i in 0..2000 {
            let kern = sample_kernel(3, 2, i).unwrap();
            assert_eq!(kern.rows(), 9);
            xs.extend(kern.table().iter().copied());
        }
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((m - 1.0 / 3.0).abs() < 0.005);
        assert!((v - 2.0 / 36.0).abs() < 0.002, "{v}");
    }

    #[test]
    fn kernel_rows_are_exchangeable() {
        // two-sample KS on entry 0 vs entry 2 across 10^4 kernels
        let mut a = Vec::new();
        let mut b = Vec::new();
        for i in 0..10_000 {
            let kern = sample_kernel(3, 1, 1_000_000 + i).unwrap();
            a.push(kern.row(0)[0]);
            b.push(kern.row(0)[2]);
        }
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        // asymptotic critical value for p = 0.001 with equal sizes n: 1.949·sqrt(2/n)
        let crit = 1.949 * (2.0 / 10_000.0f64).sqrt();
        assert!(d < crit, "KS statistic {d} >= {crit}");
    }

    #[test]
    fn capacity_overflow_is_reported() {
        assert!(matches!(sample_kernel(10, 30, 0), Err(Error::Capacity(_))));
    }

    #[test]
    fn deterministic_kernel_gives_zero_tail() {
        let seq = sample_sequence(&one_hot_zero(3, 2), 50, 4).unwrap();
        assert!(seq[2..].iter().all(|&x| x == 0));
    }

    #[test]
    fn uniform_kernel_symbol_frequency() {
        let s = 3;
        let kern = MarkovKernel::from_table(s, 1, vec![1.0 / 3.0; 9]).unwrap();
        let t = 100_000;
        let seq = sample_sequence(&kern, t, 77).unwrap();
        let p = 1.0 / s as f64;
        let sigma = (t as f64 * p * (1.0 - p)).sqrt();
        for x in 0..s {
            let c = seq.iter().filter(|&&y| y == x).count() as f64;
            assert!((c - t as f64 * p).abs() < 3.0 * sigma, "symbol {x}: {c}");
        }
    }

    #[test]
    fn two_state_chain_stationary_frequency() {
        let (p, q) = (0.3, 0.1);
        let kern = MarkovKernel::from_table(2, 1, vec![1.0 - p, p, q, 1.0 - q]).unwrap();
        let t = 100_000;
        let seq = sample_sequence(&kern, t, 5).unwrap();
        let pi = p / (p + q);
        let freq = seq.iter().filter(|&&x| x == 1).count() as f64 / t as f64;
        // variance of a two-state chain's occupation mean: pi(1-pi)(1+λ)/(1-λ)/T with λ = 1-p-q
        let lambda = 1.0 - p - q;
        let sigma = (pi * (1.0 - pi) * (1.0 + lambda) / (1.0 - lambda) / t as f64).sqrt();
        assert!((freq - pi).abs() < 3.0 * sigma, "{freq} vs {pi}");
    }

    #[test]
    fn true_conditional_is_table_lookup() {
        let kern = sample_kernel(3, 2, 12).unwrap();
        let seq = vec![2, 0, 1, 2, 2];
        for n in 2..=5 {
            let ctx = seq[n - 2] * 3 + seq[n - 1];
            assert_eq!(true_conditional(&kern, &seq, n).unwrap(), kern.row(ctx));
        }
        assert!(matches!(true_conditional(&kern, &seq, 1), Err(Error::Context(_))));
        let onehot = one_hot_zero(3, 2);
        assert_eq!(true_conditional(&onehot, &seq, 3).unwrap(), vec![1.0, 0.0, 0.0]);
        let uni = MarkovKernel::from_table(2, 1, vec![0.5; 4]).unwrap();
        assert_eq!(true_conditional(&uni, &[1], 1).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn laplace_model_has_zero_gap() {
        let r = optimal_loss(2, 1, &LaplacePredictor::new(2, 1, 1.0), 20, 64, 3).unwrap();
        assert_eq!(r.gap, 0.0);
    }

    #[test]
    fn uniform_model_loses_ln2() {
        let r = optimal_loss(2, 1, &UniformPredictor::new(2), 20, 64, 3).unwrap();
        assert!((r.model_loss - 2f64.ln()).abs() < 1e-12);
        assert!(r.gap > 0.0);
    }

    #[test]
    fn non_distribution_is_a_contract_violation() {
        struct Bad;
        impl Predictor for Bad {
            fn predict(&self, seq: &[usize]) -> Result<Vec<Vec<f64>>> {
                Ok(vec![vec![0.7, 0.7]; seq.len()])
            }
        }
        assert!(matches!(optimal_loss(2, 1, &Bad, 2, 16, 0), Err(Error::Contract(_))));
    }

    /// Straight-line recomputation of both losses, sharing only the sampler.
    fn independent_gap(n_seqs: usize, t: usize, seed: u64) -> f64 {
        let mut total = 0.0;
        for i in 0..n_seqs as u64 {
            let (_, seq) = sample_pair(2, 1, t, seed, i).unwrap();
            let mut counts = [[0u32; 2]; 2];
            let (mut model, mut bayes) = (0.0, 0.0);
            for n in 1..t {
                let prev = seq[n - 1];
                let c = counts[prev];
                let tot = c[0] + c[1];
                let x = seq[n];
                let pm = if tot == 0 { 0.5 } else { c[x] as f64 / tot as f64 };
                let pb = (c[x] as f64 + 1.0) / (tot as f64 + 2.0);
                model -= pm.max(1e-300).ln();
                bayes -= pb.ln();
                counts[prev][x] += 1;
            }
            total += (model - bayes) / (t - 1) as f64;
        }
        total / n_seqs as f64
    }

    #[test]
    fn unsmoothed_kgram_gap_matches_independent_recomputation() {
        // the unsmoothed estimator can assign zero mass, so its loss may be infinite;
        // clamp in both implementations to compare the finite part
        let model = KgramPredictor::new(2, 1, 1e-300);
        let r = optimal_loss(2, 1, &model, 200, 128, 8).unwrap();
        let oracle = independent_gap(200, 128, 8);
        assert!((r.gap - oracle).abs() < 0.01, "{} vs {oracle}", r.gap);
    }

    #[test]
    fn dataset_round_trip_format() {
        let (seqs, sum1) = generate_dataset(2, 1, 32, 10, 7).unwrap();
        let (seqs2, sum2) = generate_dataset(2, 1, 32, 10, 7).unwrap();
        assert_eq!(seqs, seqs2);
        assert_eq!(sum1, sum2);
        let mut buf = Vec::new();
        write_dataset(&mut buf, 2, 1, 32, 7, &seqs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "S=2 k=1 T=32 seed=7");
        assert_eq!(lines.len(), 11);
        assert!(lines[1..].iter().all(|l| l.split(' ').count() == 32));
    }

    proptest! {
        #[test]
        fn same_seed_same_sequence(seed in any::<u64>(), s in 2usize..5, k in 1usize..4) {
            let a = sample_pair(s, k, 40, seed, 0).unwrap();
            let b = sample_pair(s, k, 40, seed, 0).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn sequences_stay_in_alphabet(seed in any::<u64>(), s in 2usize..6, k in 1usize..3) {
            let (_, seq) = sample_pair(s, k, 60, seed, 1).unwrap();
            prop_assert!(seq.iter().all(|&x| x < s));
        }

        #[test]
        fn fixed_predictor_gap_is_not_significantly_negative(seed in 0u64..50) {
            let r = optimal_loss(2, 1, &UniformPredictor::new(2), 30, 64, seed).unwrap();
            prop_assert!(r.gap >= -3.0 * r.gap_stderr);
        }
    }
}
