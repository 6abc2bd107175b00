//! AdamW training of the pre-norm model on fresh Markov sequences.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markov::{optimal_loss, sample_pair, LossReport};
use crate::model::{init_weights, is_vector_param, loss_and_grads, ModelPredictor, TransformerSpec, WeightSet};
use crate::rng::{derive, tag};
use crate::tensor::NamedGrads;

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_wd() -> f64 {
    1e-3
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_batch() -> usize {
    16
}
fn default_eval_seqs() -> usize {
    200
}

/// Everything a training run needs. Loaded from TOML; unspecified optimizer
/// fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Alphabet size.
    pub s: usize,
    /// Markov order of the training data.
    pub k: usize,
    /// Sequence length.
    pub t: usize,
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    pub iterations: usize,
    pub eval_every: usize,
    #[serde(default = "default_eval_seqs")]
    pub eval_seqs: usize,
    /// Also save a checkpoint every this many steps (0 = only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

impl TrainConfig {
    /// The order-2 binary setup: two layers, one head, width 32, `T = 256`.
    pub fn default_k2() -> Self {
        Self {
            s: 2,
            k: 2,
            t: 256,
            layers: 2,
            heads: 1,
            d: 32,
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            weight_decay: default_wd(),
            adam_eps: default_adam_eps(),
            batch: default_batch(),
            iterations: 25_000,
            eval_every: 500,
            eval_seqs: default_eval_seqs(),
            checkpoint_every: 0,
            seeds: vec![0, 1, 2],
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn spec(&self) -> TransformerSpec {
        TransformerSpec::standard(self.layers, self.heads, self.d, self.s, self.t)
    }

    pub fn hyper(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.s < 2 || self.k < 1 || self.t <= self.k {
            return bad(format!(
                "need S >= 2, k >= 1 and T > k, got S={}, k={}, T={}",
                self.s, self.k, self.t
            ));
        }
        if self.iterations == 0 || self.batch == 0 || self.eval_seqs == 0 {
            return bad("iterations, batch and eval_seqs must be positive".into());
        }
        if self.eval_every == 0 || self.eval_every > self.iterations {
            return bad(format!("eval_every must lie in 1..={}", self.iterations));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("lr must be non-negative and betas in [0, 1)".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return bad("weight_decay must be non-negative and adam_eps positive".into());
        }
        self.spec().validate()
    }
}

/// Decoupled-decay Adam hyperparameters (the learning rate is passed per step).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: NamedGrads,
    v: NamedGrads,
}

/// One AdamW step with bias correction. Biases and norm gains are not decayed.
pub fn adamw_step(w: &mut WeightSet, grads: &NamedGrads, state: &mut AdamState, hyper: &AdamW, lr: f64) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (name, p) in w.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Input(format!("no gradient for {name}")))?;
        if g.len() != p.numel() {
            return Err(Error::Shape {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let decay = if is_vector_param(name) { 0.0 } else { hyper.weight_decay };
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * gi;
            *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * gi * gi;
            *x -= lr * decay * *x;
            *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Cosine decay from `lr` at step 0 towards 0 at step `total`.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub iteration: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub bayes_loss: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "iteration,train_loss,test_loss,bayes_loss,gap")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.iteration, r.train_loss, r.test_loss, r.bayes_loss, r.gap
            )?;
        }
        Ok(())
    }

    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }
}

/// Model and Bayes loss on `n_seqs` held-out (kernel, sequence) pairs.
pub fn evaluate(
    w: &WeightSet,
    spec: &TransformerSpec,
    s: usize,
    k: usize,
    t: usize,
    n_seqs: usize,
    seed: u64,
) -> Result<LossReport> {
    optimal_loss(s, k, &ModelPredictor { spec, weights: w }, n_seqs, t, seed)
}

/// Mean loss and gradient over one batch. Sequences run in parallel; the
/// sum is taken in batch order so the result does not depend on threading.
pub fn batch_loss_and_grads(spec: &TransformerSpec, w: &WeightSet, seqs: &[Vec<usize>], k: usize) -> Result<(f64, NamedGrads)> {
    let per: Vec<(f64, NamedGrads)> = seqs
        .par_iter()
        .map(|q| loss_and_grads(spec, w, q, k))
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let mut iter = per.into_iter();
    let (mut loss, mut grads) = iter.next().ok_or_else(|| Error::Input("empty batch".into()))?;
    for (l, g) in iter {
        loss += l;
        for (name, acc) in grads.iter_mut() {
            for (a, b) in acc.iter_mut().zip(&g[name]) {
                *a += b;
            }
        }
    }
    grads.values_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x /= n);
    Ok((loss / n, grads))
}

/// Train from a fresh initialization. `on_checkpoint` sees the weights
/// every `checkpoint_every` steps.
pub fn train_with(
    cfg: &TrainConfig,
    seed: u64,
    mut on_checkpoint: impl FnMut(usize, &WeightSet) -> Result<()>,
) -> Result<(WeightSet, TrainLog)> {
    cfg.validate()?;
    let spec = cfg.spec();
    let mut w = init_weights(&spec, seed)?;
    let mut state = AdamState::default();
    let hyper = cfg.hyper();
    let data_seed = derive(seed, tag::TRAIN, 0);
    let eval_seed = derive(seed, tag::EVAL, 0);
    let mut log = TrainLog::default();
    let mut record = |it: usize, train_loss: f64, w: &WeightSet| -> Result<()> {
        let r = evaluate(w, &spec, cfg.s, cfg.k, cfg.t, cfg.eval_seqs, eval_seed)?;
        log.rows.push(LogRow {
            iteration: it,
            train_loss,
            test_loss: r.model_loss,
            bayes_loss: r.bayes_loss,
            gap: r.gap,
        });
        Ok(())
    };

    let mut train_loss = f64::NAN;
    for it in 0..cfg.iterations {
        let seqs: Vec<Vec<usize>> = (0..cfg.batch)
            .map(|b| sample_pair(cfg.s, cfg.k, cfg.t, data_seed, (it * cfg.batch + b) as u64).map(|(_, q)| q))
            .collect::<Result<_>>()?;
        let (loss, grads) = match batch_loss_and_grads(&spec, &w, &seqs, cfg.k) {
            Err(Error::Degenerate { .. } | Error::NonFinite { .. }) => {
                return Err(Error::Diverged {
                    iteration: it,
                    loss: f64::NAN,
                });
            }
            Err(Error::InfiniteLoss { .. }) => {
                return Err(Error::Diverged {
                    iteration: it,
                    loss: f64::INFINITY,
                });
            }
            other => other?,
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: it, loss });
        }
        train_loss = loss;
        if it % cfg.eval_every == 0 {
            record(it, loss, &w)?;
        }
        adamw_step(&mut w, &grads, &mut state, &hyper, cosine_lr(cfg.lr, it, cfg.iterations))?;
        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(it + 1, &w)?;
        }
    }
    record(cfg.iterations, train_loss, &w)?;
    Ok((w, log))
}

pub fn train(cfg: &TrainConfig, seed: u64) -> Result<(WeightSet, TrainLog)> {
    train_with(cfg, seed, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::oracle::LaplacePredictor;
    use crate::tensor::{grad_check, Tensor, DEFAULT_EPS};

    fn tiny() -> TrainConfig {
        TrainConfig {
            s: 2,
            k: 1,
            t: 24,
            layers: 1,
            heads: 1,
            d: 8,
            iterations: 6,
            eval_every: 3,
            eval_seqs: 8,
            batch: 4,
            seeds: vec![0],
            ..TrainConfig::default_k2()
        }
    }

    fn scalar_set(x: f64) -> (TransformerSpec, WeightSet) {
        // a real model whose only nonzero parameter we care about is `A`
        let spec = TransformerSpec::standard(1, 1, 1, 2, 2);
        let mut w = init_weights(&spec, 0).unwrap();
        w.get_mut("A").unwrap().data_mut()[0] = x;
        (spec, w)
    }

    fn zero_grads(w: &WeightSet) -> NamedGrads {
        w.iter().map(|(n, t)| (n.clone(), vec![0.0; t.numel()])).collect()
    }

    #[test]
    fn zero_gradient_without_decay_changes_nothing() {
        let (_, mut w) = scalar_set(0.7);
        let before = w.clone();
        let hyper = AdamW {
            weight_decay: 0.0,
            ..TrainConfig::default_k2().hyper()
        };
        let mut st = AdamState::default();
        let g = zero_grads(&w);
        for _ in 0..5 {
            adamw_step(&mut w, &g, &mut st, &hyper, 0.01).unwrap();
        }
        assert_eq!(w, before);
    }

    #[test]
    fn adam_matches_scalar_trajectory() {
        let (_, mut w) = scalar_set(0.7);
        let hyper = AdamW {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let g = 0.3;
        let mut grads = zero_grads(&w);
        grads.get_mut("A").unwrap()[0] = g;
        let mut st = AdamState::default();
        // independent recurrence
        let (mut x, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for t in 1..=20 {
            adamw_step(&mut w, &grads, &mut st, &hyper, 0.01).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.95 * v + 0.05 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.95f64.powi(t));
            x -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((w.get("A").unwrap().data()[0] - x).abs() < 1e-14);
        }
        // with a constant gradient every bias-corrected step is nearly lr
        assert!((0.7 - x - 20.0 * 0.01).abs() < 1e-6);
    }

    #[test]
    fn pure_decay() {
        let (_, mut w) = scalar_set(0.5);
        let b_before = w.get("b").unwrap().clone();
        let hyper = AdamW {
            weight_decay: 0.1,
            ..TrainConfig::default_k2().hyper()
        };
        let mut st = AdamState::default();
        let mut want = 0.5;
        let g = zero_grads(&w);
        for _ in 0..10 {
            adamw_step(&mut w, &g, &mut st, &hyper, 0.01).unwrap();
            want *= 1.0 - 0.001;
        }
        assert!((w.get("A").unwrap().data()[0] - want).abs() < 1e-15);
        assert_eq!(w.get("b").unwrap(), &b_before);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-18);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
    }

    #[test]
    fn zero_learning_rate_keeps_init() {
        let mut cfg = tiny();
        cfg.lr = 0.0;
        let (w, _) = train(&cfg, 3).unwrap();
        assert_eq!(w, init_weights(&cfg.spec(), 3).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny();
        let (w1, l1) = train(&cfg, 5).unwrap();
        let (w2, l2) = train(&cfg, 5).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(l1, l2);
        let its: Vec<usize> = l1.rows.iter().map(|r| r.iteration).collect();
        assert_eq!(its, vec![0, 3, 6]);
        let mut buf = Vec::new();
        l1.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,train_loss,test_loss,bayes_loss,gap\n"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn checkpoints_fire_on_schedule() {
        let mut cfg = tiny();
        cfg.checkpoint_every = 2;
        let mut seen = Vec::new();
        train_with(&cfg, 0, |it, _| {
            seen.push(it);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![2, 4, 6]);
    }

    #[test]
    fn huge_learning_rate_diverges_or_reports() {
        let mut cfg = tiny();
        cfg.lr = 1e300;
        cfg.iterations = 20;
        cfg.eval_every = 20;
        match train(&cfg, 0) {
            Err(Error::Diverged { iteration, loss }) => {
                assert!(iteration > 0);
                assert!(!loss.is_finite());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn init_loss_is_near_uniform() {
        let cfg = TrainConfig { t: 64, d: 16, ..tiny() };
        let spec = cfg.spec();
        let w = init_weights(&spec, 1).unwrap();
        let r = evaluate(&w, &spec, 2, 1, 64, 50, 9).unwrap();
        let ln2 = 2f64.ln();
        assert!((r.model_loss - ln2).abs() < 0.05, "{}", r.model_loss);
        assert!(r.model_loss >= ln2 - 0.1 && r.model_loss <= ln2 + 0.3);
        // the baseline predictor itself has zero gap
        let b = optimal_loss(2, 1, &LaplacePredictor::new(2, 1, 1.0), 50, 64, 9).unwrap();
        assert_eq!(b.gap, 0.0);
    }

    #[test]
    fn first_batch_gradients_check_out() {
        let cfg = TrainConfig { t: 16, ..tiny() };
        let spec = cfg.spec();
        let w = init_weights(&spec, 2).unwrap();
        let seqs: Vec<Vec<usize>> = (0..3).map(|i| sample_pair(2, 1, 16, 0, i).unwrap().1).collect();
        let report = grad_check(
            |w: &WeightSet| batch_loss_and_grads(&spec, w, &seqs, 1),
            &w,
            DEFAULT_EPS,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn config_round_trip_and_errors() {
        let cfg = TrainConfig::default_k2();
        let text = cfg.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
        let minimal = "s = 2\nk = 1\nt = 32\nlayers = 1\nheads = 1\nd = 8\niterations = 10\neval_every = 5\n";
        let c = TrainConfig::from_toml(minimal).unwrap();
        assert_eq!(c.batch, 16);
        assert_eq!(c.beta2, 0.95);
        assert!(matches!(TrainConfig::from_toml("s = 2"), Err(Error::Config(_))));
        assert!(matches!(
            TrainConfig::from_toml(&minimal.replace("eval_every = 5", "eval_every = 50")),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            TrainConfig::load(Path::new("/nonexistent/cfg.toml")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn batch_gradient_is_the_mean() {
        let cfg = tiny();
        let spec = cfg.spec();
        let w = init_weights(&spec, 4).unwrap();
        let seqs: Vec<Vec<usize>> = (0..3).map(|i| sample_pair(2, 1, 24, 1, i).unwrap().1).collect();
        let (loss, grads) = batch_loss_and_grads(&spec, &w, &seqs, 1).unwrap();
        let mut sum: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut lsum = 0.0;
        for q in &seqs {
            let (l, g) = loss_and_grads(&spec, &w, q, 1).unwrap();
            lsum += l;
            for (n, v) in g {
                let e = sum.entry(n).or_insert_with(|| vec![0.0; v.len()]);
                e.iter_mut().zip(&v).for_each(|(a, b)| *a += b / 3.0);
            }
        }
        assert!((loss - lsum / 3.0).abs() < 1e-14);
        for (n, g) in &grads {
            let t = Tensor::vector(g.clone());
            assert!(t.max_abs_diff(&Tensor::vector(sum[n].clone())) < 1e-14, "{n}");
        }
    }
}
