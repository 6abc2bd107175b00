use std::collections::BTreeMap;

use super::{LayerNormMode, OutputFn, PositionMode, TransformerSpec, Variant, WeightSet};
use crate::error::{Error, Result};
use crate::markov::Predictor;
use crate::tensor::{NamedGrads, Scalar, Tape, Tensor, Var};

/// Attention weights for every layer and head, each `T×T` and lower triangular.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub layers: Vec<Vec<Tensor>>,
}

impl AttentionTrace {
    pub fn get(&self, layer: usize, head: usize) -> &Tensor {
        &self.layers[layer][head]
    }
}

/// Handles into a recorded forward pass.
#[derive(Debug)]
pub struct Graph {
    /// `T×S` output rows after the output nonlinearity.
    pub logits: Var,
    /// `[layer][head]` attention matrices.
    pub attention: Vec<Vec<Var>>,
    /// Residual stream before the first layer and after each layer.
    pub hidden: Vec<Var>,
    pub params: BTreeMap<String, Var>,
}

fn check_input(spec: &TransformerSpec, seq: &[usize]) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::Input("empty sequence".into()));
    }
    if seq.len() > spec.t_max {
        return Err(Error::Capacity(format!(
            "sequence length {} exceeds T_max = {}",
            seq.len(),
            spec.t_max
        )));
    }
    if let Some((i, &x)) = seq.iter().enumerate().find(|(_, &x)| x >= spec.s) {
        return Err(Error::Input(format!(
            "symbol {x} at position {i} outside alphabet of size {}",
            spec.s
        )));
    }
    Ok(())
}

struct Builder<'a, F: Scalar> {
    tape: &'a mut Tape<F>,
    params: BTreeMap<String, Var>,
    t: usize,
}

impl<F: Scalar> Builder<'_, F> {
    fn p(&self, name: &str) -> Var {
        self.params[name]
    }

    fn attention(&mut self, spec: &TransformerSpec, l: usize, x: Var) -> Result<(Var, Vec<Var>)> {
        let t = self.t;
        let relative = spec.position == PositionMode::RelativeKV;
        let (pk, pv) = if relative {
            let pk = self.tape.slice_rows(self.p(&format!("layer{l}.pos_K")), 0, t)?;
            let pv = self.tape.slice_rows(self.p(&format!("layer{l}.pos_V")), 0, t)?;
            (Some(pk), Some(pv))
        } else {
            (None, None)
        };
        let mut outs = Vec::new();
        let mut atts = Vec::new();
        for h in 0..spec.heads[l] {
            let wq = self.p(&format!("layer{l}.head{h}.W_Q"));
            let wk = self.p(&format!("layer{l}.head{h}.W_K"));
            let wv = self.p(&format!("layer{l}.head{h}.W_V"));
            let q = self.tape.matmul_nt(x, wq)?;
            let k = self.tape.matmul_nt(x, wk)?;
            let v = self.tape.matmul_nt(x, wv)?;
            let mut scores = self.tape.matmul_nt(q, k)?;
            if let Some(pk) = pk {
                // by_offset[n][o] = <W_Q x_n, W_K p_o>
                let kp = self.tape.matmul_nt(pk, wk)?;
                let by_offset = self.tape.matmul_nt(q, kp)?;
                let shifted = self.tape.rel_shift(by_offset)?;
                scores = self.tape.add(scores, shifted)?;
            }
            let a = self.tape.softmax(scores, true)?;
            let mut out = self.tape.matmul(a, v)?;
            if let Some(pv) = pv {
                let vp = self.tape.matmul_nt(pv, wv)?;
                let a_off = self.tape.rel_unshift(a)?;
                let pos_out = self.tape.matmul(a_off, vp)?;
                out = self.tape.add(out, pos_out)?;
            }
            outs.push(out);
            atts.push(a);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            self.tape.concat_cols(&outs)?
        };
        let y = self.tape.matmul(cat, self.p(&format!("layer{l}.W_O")))?;
        Ok((y, atts))
    }

    fn ffn(&mut self, l: usize, x: Var) -> Result<Var> {
        let h = self.tape.matmul_nt(x, self.p(&format!("layer{l}.ffn.W_1")))?;
        let h = self.tape.relu(h);
        self.tape.matmul_nt(h, self.p(&format!("layer{l}.ffn.W_2")))
    }

    fn norm(&mut self, spec: &TransformerSpec, prefix: &str, x: Var) -> Result<Var> {
        match spec.layernorm {
            LayerNormMode::L2 => self.tape.l2norm(x),
            LayerNormMode::Standard => {
                let g = self.p(&format!("{prefix}.gain"));
                let b = self.p(&format!("{prefix}.bias"));
                self.tape.layernorm(x, g, b, F::of(spec.ln_eps))
            }
        }
    }
}

/// Record the forward pass of `seq` on `tape`. Weights are cast to `F`; with
/// `trainable` every weight leaf receives a gradient.
pub fn build_graph<F: Scalar>(
    tape: &mut Tape<F>,
    spec: &TransformerSpec,
    w: &WeightSet,
    seq: &[usize],
    trainable: bool,
) -> Result<Graph> {
    check_input(spec, seq)?;
    let mut params = BTreeMap::new();
    for (name, t) in w.iter() {
        let (r, c) = t.dims2();
        let data = t.data().iter().map(|&x| F::of(x)).collect();
        params.insert(name.clone(), tape.leaf_raw(r, c, data, trainable));
    }
    let mut b = Builder {
        tape,
        params,
        t: seq.len(),
    };

    let mut x = b.tape.gather(b.p("emb"), seq)?;
    if spec.position == PositionMode::LearnedAbsolute {
        let pos = b.tape.slice_rows(b.p("pos"), 0, seq.len())?;
        x = b.tape.add(x, pos)?;
    }
    let mut hidden = vec![x];
    let mut attention = Vec::new();
    for l in 0..spec.layers() {
        match spec.variant {
            Variant::AttentionOnly => {
                let (a, att) = b.attention(spec, l, x)?;
                x = b.tape.add(x, a)?;
                attention.push(att);
            }
            Variant::ModifiedLN => {
                let (a, att) = b.attention(spec, l, x)?;
                let xt = b.tape.add(x, a)?;
                let y = b.ffn(l, xt)?;
                let y = b.norm(spec, &format!("layer{l}.ln"), y)?;
                x = b.tape.add(y, xt)?;
                attention.push(att);
            }
            Variant::StandardPreLN => {
                let n1 = b.norm(spec, &format!("layer{l}.ln1"), x)?;
                let (a, att) = b.attention(spec, l, n1)?;
                let xt = b.tape.add(x, a)?;
                let n2 = b.norm(spec, &format!("layer{l}.ln2"), xt)?;
                let y = b.ffn(l, n2)?;
                x = b.tape.add(xt, y)?;
                attention.push(att);
            }
        }
        hidden.push(x);
    }
    if spec.variant == Variant::StandardPreLN {
        x = b.norm(spec, "ln_f", x)?;
    }
    let z = b.tape.matmul_nt(x, b.p("A"))?;
    let z = b.tape.add_row(z, b.p("b"))?;
    let logits = match spec.output {
        OutputFn::Softmax => b.tape.softmax(z, false)?,
        OutputFn::Relu => b.tape.relu(z),
        OutputFn::Identity => z,
    };
    Ok(Graph {
        logits,
        attention,
        hidden,
        params: b.params,
    })
}

fn trace_of<F: Scalar>(tape: &Tape<F>, g: &Graph) -> AttentionTrace {
    AttentionTrace {
        layers: g
            .attention
            .iter()
            .map(|heads| heads.iter().map(|&a| tape.tensor(a).cast()).collect())
            .collect(),
    }
}

/// Output rows (`T×S`) and every attention matrix.
pub fn forward(spec: &TransformerSpec, w: &WeightSet, seq: &[usize]) -> Result<(Tensor, AttentionTrace)> {
    let mut tape = Tape::<f64>::new();
    let g = build_graph(&mut tape, spec, w, seq, false)?;
    Ok((tape.tensor(g.logits), trace_of(&tape, &g)))
}

/// The same pass carried out in `F` arithmetic; results are widened to f64.
pub fn forward_in<F: Scalar>(spec: &TransformerSpec, w: &WeightSet, seq: &[usize]) -> Result<(Tensor, AttentionTrace)> {
    let mut tape = Tape::<F>::new();
    let g = build_graph(&mut tape, spec, w, seq, false)?;
    Ok((tape.tensor(g.logits).cast(), trace_of(&tape, &g)))
}

/// Residual stream before the first layer and after every layer (`L+1`
/// matrices of shape `T×d`).
pub fn hidden_states(spec: &TransformerSpec, w: &WeightSet, seq: &[usize]) -> Result<Vec<Tensor>> {
    let mut tape = Tape::<f64>::new();
    let g = build_graph(&mut tape, spec, w, seq, false)?;
    Ok(g.hidden.iter().map(|&h| tape.tensor(h)).collect())
}

/// Mean next-symbol cross-entropy over targets `seq[k..T]` and its gradient
/// with respect to every weight.
pub fn loss_and_grads(spec: &TransformerSpec, w: &WeightSet, seq: &[usize], k: usize) -> Result<(f64, NamedGrads)> {
    if seq.len() <= k || k == 0 {
        return Err(Error::Context(format!("need 0 < k < T, got k={k}, T={}", seq.len())));
    }
    let mut tape = Tape::<f64>::new();
    let g = build_graph(&mut tape, spec, w, seq, true)?;
    let targets: Vec<(usize, usize)> = (k..seq.len()).map(|t| (t - 1, seq[t])).collect();
    let loss = tape.nll(g.logits, &targets)?;
    let mut grads = tape.backward(loss)?;
    let named = g
        .params
        .iter()
        .map(|(n, &v)| (n.clone(), grads.take(v).unwrap_or_else(|| vec![0.0; tape.value(v).len()])))
        .collect();
    Ok((tape.scalar(loss), named))
}

/// A model bound to its weights, usable wherever a [`Predictor`] is expected.
pub struct ModelPredictor<'a> {
    pub spec: &'a TransformerSpec,
    pub weights: &'a WeightSet,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, seq: &[usize]) -> Result<Vec<Vec<f64>>> {
        let (logits, _) = forward(self.spec, self.weights, seq)?;
        let (t, _) = logits.dims2();
        Ok((0..t).map(|r| logits.row(r).to_vec()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;
    use crate::tensor::{grad_check, DEFAULT_EPS};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn attention_only(heads: Vec<usize>, d: usize, s: usize, t_max: usize) -> TransformerSpec {
        TransformerSpec {
            variant: Variant::AttentionOnly,
            heads,
            d,
            s,
            t_max,
            position: PositionMode::RelativeKV,
            layernorm: LayerNormMode::L2,
            output: OutputFn::Identity,
            d_ff: 0,
            ln_eps: 0.0,
        }
    }

    /// Fill every tensor with N(0, std²) draws.
    fn randomize(w: &mut WeightSet, std: f64, seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in w.iter_mut() {
            for x in t.data_mut() {
                *x = std * (r.random::<f64>() * 2.0 - 1.0) * 3f64.sqrt();
            }
        }
    }

    #[test]
    fn zero_network_outputs_bias() {
        let spec = attention_only(vec![1, 1], 4, 3, 8);
        let mut w = WeightSet::zeros(&spec).unwrap();
        w.get_mut("b").unwrap().data_mut().copy_from_slice(&[0.1, -0.2, 0.7]);
        let (logits, trace) = forward(&spec, &w, &[0, 2, 1, 1]).unwrap();
        for r in 0..4 {
            assert_eq!(logits.row(r), &[0.1, -0.2, 0.7]);
        }
        assert_eq!(trace.layers.len(), 2);
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = attention_only(vec![1], 4, 3, 4);
        let w = WeightSet::zeros(&spec).unwrap();
        assert!(matches!(forward(&spec, &w, &[0, 3]), Err(Error::Input(_))));
        assert!(matches!(forward(&spec, &w, &[0; 5]), Err(Error::Capacity(_))));
    }

    #[test]
    fn standard_model_is_deterministic_and_trace_rows_normalized() {
        let spec = TransformerSpec::standard(2, 2, 8, 3, 16);
        let w = init_weights(&spec, 3).unwrap();
        let seq = [0, 1, 2, 2, 1, 0, 0, 1];
        let (a, ta) = forward(&spec, &w, &seq).unwrap();
        let (b, tb) = forward(&spec, &w, &seq).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        for heads in &ta.layers {
            for m in heads {
                for n in 0..seq.len() {
                    let row = m.row(n);
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!(row[n + 1..].iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn two_heads_equal_sum_of_single_head_contributions() {
        let spec = attention_only(vec![2], 3, 3, 8);
        let mut w = WeightSet::zeros(&spec).unwrap();
        randomize(&mut w, 0.8, 21);
        let seq = [0, 2, 1, 1, 0, 2];
        let full = hidden_states(&spec, &w, &seq).unwrap();
        let delta_full: Vec<f64> = full[1].data().iter().zip(full[0].data()).map(|(a, b)| a - b).collect();

        let one = attention_only(vec![1], 3, 3, 8);
        let mut total = vec![0.0; delta_full.len()];
        let wo = w.get("layer0.W_O").unwrap().clone();
        for h in 0..2 {
            let mut wh = WeightSet::zeros(&one).unwrap();
            for m in ["W_K", "W_Q", "W_V"] {
                *wh.get_mut(&format!("layer0.head0.{m}")).unwrap() = w.get(&format!("layer0.head{h}.{m}")).unwrap().clone();
            }
            for p in ["emb", "layer0.pos_K", "layer0.pos_V"] {
                *wh.get_mut(p).unwrap() = w.get(p).unwrap().clone();
            }
            // rows h*d..(h+1)*d of W_O route this head
            let block = Tensor::from_fn(&[3, 3], |i| wo.data()[h * 9 + i]);
            *wh.get_mut("layer0.W_O").unwrap() = block;
            let hs = hidden_states(&one, &wh, &seq).unwrap();
            for (t, (a, b)) in total.iter_mut().zip(hs[1].data().iter().zip(hs[0].data())) {
                *t += a - b;
            }
        }
        for (a, b) in total.iter().zip(&delta_full) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn relative_attention_matches_direct_sum() {
        // x' = x + Σ_i att_{n,i} W_V (x_i + p^V_{n-i}),
        // att ∝ exp(<W_K (x_i + p^K_{n-i}), W_Q x_n>)
        let spec = attention_only(vec![1], 3, 2, 6);
        let mut w = WeightSet::zeros(&spec).unwrap();
        randomize(&mut w, 0.7, 8);
        *w.get_mut("layer0.W_O").unwrap() = Tensor::identity(3);
        let seq = [1, 0, 0, 1, 1];
        let hs = hidden_states(&spec, &w, &seq).unwrap();
        let get = |n: &str| w.get(n).unwrap().clone();
        let (emb, wk, wq, wv, pk, pv) = (
            get("emb"),
            get("layer0.head0.W_K"),
            get("layer0.head0.W_Q"),
            get("layer0.head0.W_V"),
            get("layer0.pos_K"),
            get("layer0.pos_V"),
        );
        let mv = |m: &Tensor, v: &[f64]| -> Vec<f64> { (0..3).map(|r| (0..3).map(|c| m.get2(r, c) * v[c]).sum()).collect() };
        let add = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + y).collect() };
        for n in 0..seq.len() {
            let xn = emb.row(seq[n]);
            let q = mv(&wq, xn);
            let scores: Vec<f64> = (0..=n)
                .map(|i| {
                    let key = mv(&wk, &add(emb.row(seq[i]), pk.row(n - i)));
                    key.iter().zip(&q).map(|(a, b)| a * b).sum()
                })
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            let mut out = xn.to_vec();
            for i in 0..=n {
                let a = scores[i].exp() / z;
                let v = mv(&wv, &add(emb.row(seq[i]), pv.row(n - i)));
                for c in 0..3 {
                    out[c] += a * v[c];
                }
            }
            for (c, o) in out.iter().enumerate() {
                assert!((hs[1].get2(n, c) - o).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_only_gradients_pass_check() {
        let spec = attention_only(vec![1], 6, 8, 8);
        let mut spec = spec;
        spec.output = OutputFn::Softmax;
        let mut w = WeightSet::zeros(&spec).unwrap();
        randomize(&mut w, 0.5, 2);
        let seq = [3, 1, 4, 1, 5, 7, 2, 6];
        let r = grad_check(|w: &WeightSet| loss_and_grads(&spec, w, &seq, 1), &w, DEFAULT_EPS, 1e-4).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn standard_two_layer_gradients_pass_check() {
        let spec = TransformerSpec::standard(2, 2, 8, 3, 12);
        let mut w = init_weights(&spec, 0).unwrap();
        randomize(&mut w, 0.4, 6);
        let seq = [0, 1, 2, 2, 1, 0, 0, 1, 2, 0];
        let r = grad_check(|w: &WeightSet| loss_and_grads(&spec, w, &seq, 2), &w, DEFAULT_EPS, 1e-4).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn modified_ln_gradients_pass_check() {
        for mode in [LayerNormMode::L2, LayerNormMode::Standard] {
            let spec = TransformerSpec {
                variant: Variant::ModifiedLN,
                heads: vec![1, 1],
                d: 5,
                s: 3,
                t_max: 8,
                position: PositionMode::RelativeKV,
                layernorm: mode,
                output: OutputFn::Softmax,
                d_ff: 16,
                ln_eps: 1e-5,
            };
            let mut w = WeightSet::zeros(&spec).unwrap();
            randomize(&mut w, 0.6, 9);
            let seq = [2, 0, 1, 1, 0, 2, 2];
            let r = grad_check(|w: &WeightSet| loss_and_grads(&spec, w, &seq, 1), &w, DEFAULT_EPS, 1e-4).unwrap();
            assert!(r.pass, "{mode:?}: {r:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn later_symbols_never_change_earlier_rows(seed in 0u64..1000, n in 0usize..11, m in 1usize..12, x in 0usize..3) {
            prop_assume!(m > n);
            let spec = TransformerSpec::standard(2, 1, 8, 3, 12);
            let mut w = init_weights(&spec, seed).unwrap();
            randomize(&mut w, 0.5, seed);
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let seq: Vec<usize> = (0..12).map(|_| r.random_range(0..3)).collect();
            let mut alt = seq.clone();
            alt[m] = x;
            let (a, _) = forward(&spec, &w, &seq).unwrap();
            let (b, _) = forward(&spec, &w, &alt).unwrap();
            prop_assert_eq!(a.row(n), b.row(n));
        }
    }
}
