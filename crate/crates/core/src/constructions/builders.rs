//! Hand-set weights that make a transformer compute the conditional k-gram
//! estimate. All positions and coordinates are 0-based.

use super::Construction;
use crate::error::{Error, Result};
use crate::model::{LayerNormMode, OutputFn, PositionMode, TransformerSpec, Variant, WeightSet};

fn check(s: usize, k: usize, kappa: f64, t_max: usize) -> Result<()> {
    if s < 2 || k < 1 {
        return Err(Error::Input(format!("need S >= 2 and k >= 1, got S={s}, k={k}")));
    }
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return Err(Error::Input(format!("kappa must be finite and non-negative, got {kappa}")));
    }
    if t_max == 0 {
        return Err(Error::Input("T_max must be positive".into()));
    }
    Ok(())
}

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

/// Mutable view for filling in individual weights.
struct Fill {
    w: WeightSet,
}

impl Fill {
    fn new(spec: &TransformerSpec) -> Result<Self> {
        Ok(Self {
            w: WeightSet::zeros(spec)?,
        })
    }

    fn set(&mut self, name: &str, r: usize, c: usize, v: f64) {
        self.w.get_mut(name).expect("parameter exists").set2(r, c, v);
    }

    fn add(&mut self, name: &str, r: usize, c: usize, v: f64) {
        let t = self.w.get_mut(name).expect("parameter exists");
        let old = t.get2(r, c);
        t.set2(r, c, old + v);
    }

    fn identity(&mut self, name: &str) {
        let d = self.w.get(name).expect("parameter exists").shape()[1];
        for i in 0..d {
            self.set(name, i, i, 1.0);
        }
    }

    fn embed(&mut self, s: usize, coords: impl Fn(usize) -> Vec<usize>) {
        for x in 0..s {
            for c in coords(x) {
                self.set("emb", x, c, 1.0);
            }
        }
    }

    fn readout(&mut self, s: usize, out: usize) {
        for x in 0..s {
            self.set("A", x, out + x, 1.0);
        }
    }
}

/// Two attention-only layers with one head each. Coordinates:
/// `[const, flag, tok(S), prev(S), out(S)]`, so `d = 3S + 2`.
///
/// Layer 0 attends to offset 1 and copies the previous token into `prev`. It
/// also sets `flag = 1` at every position that has a predecessor. Layer 1
/// scores `κ(⟨prev_i, tok_n⟩ + flag_i)` and copies `tok_i` into `out`.
pub fn theorem1(s: usize, kappa: f64, t_max: usize) -> Result<(TransformerSpec, WeightSet)> {
    check(s, 1, kappa, t_max)?;
    let (c, flag, tok, prev, out) = (0, 1, 2, 2 + s, 2 + 2 * s);
    let d = 3 * s + 2;
    let spec = attention_only(vec![1, 1], d, s, t_max);
    let mut f = Fill::new(&spec)?;
    let rk = kappa.sqrt();
    f.embed(s, |x| vec![c, tok + x]);

    f.set("layer0.head0.W_Q", c, c, rk);
    f.set("layer0.head0.W_K", c, c, rk);
    for o in 0..t_max {
        let hit = if o == 1 { 0.0 } else { -1.0 };
        f.set("layer0.pos_K", o, c, hit);
        f.set("layer0.pos_V", o, c, hit);
    }
    for x in 0..s {
        f.set("layer0.head0.W_V", prev + x, tok + x, 1.0);
    }
    f.set("layer0.head0.W_V", flag, c, 1.0);
    f.identity("layer0.W_O");

    for x in 0..s {
        f.set("layer1.head0.W_Q", prev + x, tok + x, rk);
        f.set("layer1.head0.W_K", prev + x, prev + x, rk);
        f.set("layer1.head0.W_V", out + x, tok + x, 1.0);
    }
    f.set("layer1.head0.W_Q", flag, c, rk);
    f.set("layer1.head0.W_K", flag, flag, rk);
    f.identity("layer1.W_O");
    f.readout(s, out);
    Ok((spec, f.w))
}

/// Two attention-only layers, `k` heads then one. Coordinates:
/// `[pos_1..pos_k, const, tok(S), prev_1(S)..prev_k(S), out(S)]`, so
/// `d = (k+2)S + k + 1`. The first position coordinate doubles as the flag
/// marking positions with a full length-`k` history.
pub fn theorem2(s: usize, k: usize, kappa: f64, t_max: usize) -> Result<(TransformerSpec, WeightSet)> {
    check(s, k, kappa, t_max)?;
    let c = k;
    let flag = 0;
    let tok = k + 1;
    let prev = |h: usize| k + 1 + h * s; // h in 1..=k
    let out = k + 1 + (k + 1) * s;
    let d = (k + 2) * s + k + 1;
    let spec = attention_only(vec![k, 1], d, s, t_max);
    let mut f = Fill::new(&spec)?;
    let rk = kappa.sqrt();
    f.embed(s, |x| vec![c, tok + x]);

    for o in 1..=k.min(t_max - 1) {
        f.set("layer0.pos_K", o, o - 1, 1.0);
    }
    for o in 0..t_max {
        if o != k {
            f.set("layer0.pos_V", o, c, -1.0);
        }
    }
    for h in 0..k {
        let name = |m: &str| format!("layer0.head{h}.{m}");
        f.set(&name("W_Q"), c, c, rk);
        f.set(&name("W_K"), c, h, rk);
        for x in 0..s {
            f.set(&name("W_V"), prev(h + 1) + x, tok + x, 1.0);
        }
        for i in 0..d {
            f.set("layer0.W_O", h * d + i, i, 1.0);
        }
    }
    f.set(&format!("layer0.head{}.W_V", k - 1), flag, c, 1.0);

    // query block j carries x_{n-j+1}: tok for j = 1, prev_{j-1} after that
    for x in 0..s {
        f.set("layer1.head0.W_Q", prev(1) + x, tok + x, rk);
        for j in 2..=k {
            f.set("layer1.head0.W_Q", prev(j) + x, prev(j - 1) + x, rk);
        }
        for j in 1..=k {
            f.set("layer1.head0.W_K", prev(j) + x, prev(j) + x, rk);
        }
        f.set("layer1.head0.W_V", out + x, tok + x, 1.0);
    }
    f.set("layer1.head0.W_Q", flag, c, k as f64 * rk);
    f.set("layer1.head0.W_K", flag, flag, rk);
    f.identity("layer1.W_O");
    f.readout(s, out);
    Ok((spec, f.w))
}

/// Slot-mixing matrix after `l` doubling layers: `M_0 = [1]`,
/// `M_{l+1} = [[M, 0], [M, M]]`.
fn mixing(l: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![1.0]];
    for _ in 0..l {
        let n = m.len();
        let mut next = vec![vec![0.0; 2 * n]; 2 * n];
        for i in 0..n {
            for j in 0..n {
                next[i][j] = m[i][j];
                next[n + i][j] = m[i][j];
                next[n + i][n + j] = m[i][j];
            }
        }
        m = next;
    }
    m
}

/// Inverse of [`mixing`]: `[[D, 0], [-D, D]]`.
fn unmixing(l: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![1.0]];
    for _ in 0..l {
        let n = m.len();
        let mut next = vec![vec![0.0; 2 * n]; 2 * n];
        for i in 0..n {
            for j in 0..n {
                next[i][j] = m[i][j];
                next[n + i][j] = -m[i][j];
                next[n + i][n + j] = m[i][j];
            }
        }
        m = next;
    }
    m
}

/// Number of doubling layers used by [`theorem3`] for order `k`.
pub fn doubling_layers(k: usize) -> usize {
    (k + 1).next_power_of_two().trailing_zeros() as usize
}

/// `⌈log₂(k+1)⌉` doubling layers and a matching layer, one head each.
///
/// Coordinates: `ℓ*` position coordinates, then `k* = 2^ℓ*` slots of
/// `[one-hot(S), valid]`, then `out(S)`: `d = ℓ* + k*(S+1) + S`. Slot 0
/// holds the current token and its valid bit, which is constant 1. Doubling
/// layer `ℓ` attends half to offset 0 and half to offset `2^ℓ` and adds
/// twice the average of slots `[0, 2^ℓ)` into slots `[2^ℓ, 2^{ℓ+1})`, so the
/// slot contents are the window `x_n, x_{n-1}, …` mixed by [`mixing`]. When
/// the shifted position does not exist, the value offsets leave the valid
/// bits of the new slots at or below zero. The matcher decodes the window
/// inside its key and query maps and scores
/// `κ Σ_{j=1..k} (⟨sym_j(i), sym_{j-1}(n)⟩ + valid_j(i))`.
pub fn theorem3(s: usize, k: usize, kappa: f64, t_max: usize) -> Result<(TransformerSpec, WeightSet)> {
    check(s, k, kappa, t_max)?;
    let lstar = doubling_layers(k);
    let kstar = 1usize << lstar;
    let slot = |j: usize| lstar + j * (s + 1);
    let sym = |j: usize, x: usize| slot(j) + x;
    let val = |j: usize| slot(j) + s;
    let c = val(0);
    let out = lstar + kstar * (s + 1);
    let d = out + s;
    let spec = attention_only(vec![1; lstar + 1], d, s, t_max);
    let mut f = Fill::new(&spec)?;
    let rk = kappa.sqrt();
    f.embed(s, |x| vec![sym(0, x), c]);

    for l in 0..lstar {
        let width = 1usize << l;
        let name = |m: &str| format!("layer{l}.head0.{m}");
        f.set(&name("W_Q"), l, c, rk);
        f.set(&name("W_K"), l, l, rk);
        for o in [0, width] {
            if o < t_max {
                f.set(&format!("layer{l}.pos_K"), o, l, 1.0);
            }
        }
        for t in 0..width * (s + 1) {
            f.set(&name("W_V"), slot(width) + t, slot(0) + t, 2.0);
        }
        let m = mixing(l);
        for (a, row) in m.iter().enumerate() {
            let ones: f64 = row.iter().sum();
            f.set(&format!("layer{l}.pos_V"), 0, val(a), -0.5 * ones);
            if width < t_max {
                f.set(&format!("layer{l}.pos_V"), width, val(a), 0.5 * ones);
            }
        }
        f.identity(&format!("layer{l}.W_O"));
    }

    // keys stay integer so matching positions get bit-identical scores
    let m = lstar;
    let dec = unmixing(lstar);
    let name = |w: &str| format!("layer{m}.head0.{w}");
    for j in 1..=k {
        #[allow(clippy::needless_range_loop)]
        for b in 0..kstar {
            let (dk, dq) = (dec[j][b], dec[j - 1][b]);
            for x in 0..s {
                if dk != 0.0 {
                    f.add(&name("W_K"), sym(j, x), sym(b, x), dk);
                }
                if dq != 0.0 {
                    f.add(&name("W_Q"), sym(j, x), sym(b, x), kappa * dq);
                }
            }
            if dk != 0.0 {
                f.add(&name("W_K"), val(j), val(b), dk);
            }
        }
        f.set(&name("W_Q"), val(j), c, kappa);
    }
    for x in 0..s {
        f.set(&name("W_V"), out + x, sym(0, x), 1.0);
    }
    f.identity(&format!("layer{m}.W_O"));
    f.readout(s, out);
    Ok((spec, f.w))
}

/// Three layers of attention, FFN and L2 normalization with one head each;
/// `d = 6S + 3`. Coordinates: `[const, pos, Z, tok, u, û, v, v̂, out]`.
///
/// Layer 0 averages `x_n … x_{n-k+1}` with weights `∝ 3^o` into `u`; its FFN
/// writes `û = u/‖u‖`. Layer 1 does the same over `x_{n-1} … x_{n-k}` into
/// `v`, `v̂`, and also writes the gate `Z_n = 3^{k+1}/5` at positions with a
/// full history (zero otherwise). Layer 2 scores
/// `2κ(Z_i Z_n + ⟨v̂_i, û_n⟩)` and copies `tok_i` into `out`; its FFN writes a
/// constant into `pos` so the normalization never sees a zero vector.
pub fn theorem4_compact(s: usize, k: usize, kappa: f64, t_max: usize) -> Result<(TransformerSpec, WeightSet)> {
    check(s, k, kappa, t_max)?;
    let (c, pos, z, tok) = (0, 1, 2, 3);
    let u = 3 + s;
    let uh = 3 + 2 * s;
    let v = 3 + 3 * s;
    let vh = 3 + 4 * s;
    let out = 3 + 5 * s;
    let d = 6 * s + 3;
    let spec = TransformerSpec {
        variant: Variant::ModifiedLN,
        heads: vec![1, 1, 1],
        d,
        s,
        t_max,
        position: PositionMode::RelativeKV,
        layernorm: LayerNormMode::L2,
        output: OutputFn::Identity,
        d_ff: s,
        ln_eps: 0.0,
    };
    let mut f = Fill::new(&spec)?;
    let ln3 = 3f64.ln();
    f.embed(s, |x| vec![c, tok + x]);

    for (l, window, dst, dst_hat) in [(0, 0..k, u, uh), (1, 1..k + 1, v, vh)] {
        let name = |m: &str| format!("layer{l}.head0.{m}");
        f.set(&name("W_Q"), c, c, 1.0);
        f.set(&name("W_K"), c, pos, 1.0);
        for o in window.clone() {
            if o < t_max {
                f.set(&format!("layer{l}.pos_K"), o, pos, kappa + o as f64 * ln3);
            }
        }
        for x in 0..s {
            f.set(&name("W_V"), dst + x, tok + x, 1.0);
            f.set(&format!("layer{l}.ffn.W_1"), x, dst + x, 1.0);
            f.set(&format!("layer{l}.ffn.W_2"), dst_hat + x, x, 1.0);
        }
        f.identity(&format!("layer{l}.W_O"));
    }
    // gate: attention on offset k at a full-history position is 2·3^k/(3^{k+1}-3)
    let p3 = |e: usize| 3f64.powi(e as i32);
    let att_k = 2.0 * p3(k) / (p3(k + 1) - 3.0);
    let gate = p3(k + 1) / 5.0;
    f.set("layer1.head0.W_V", z, z, 1.0);
    if k < t_max {
        f.set("layer1.pos_V", k, z, gate / att_k);
    }

    let r2k = (2.0 * kappa).sqrt();
    f.set("layer2.head0.W_Q", z, z, r2k);
    f.set("layer2.head0.W_K", z, z, r2k);
    for x in 0..s {
        f.set("layer2.head0.W_Q", vh + x, uh + x, r2k);
        f.set("layer2.head0.W_K", vh + x, vh + x, r2k);
        f.set("layer2.head0.W_V", out + x, tok + x, 1.0);
    }
    f.set("layer2.ffn.W_1", 0, c, 1.0);
    f.set("layer2.ffn.W_2", pos, 0, 1.0);
    f.identity("layer2.W_O");
    f.readout(s, out);
    Ok((spec, f.w))
}

/// Rewrite an L2-normalized single-head network to use standard layer norm
/// on a doubled stream `[h, -h]`. Standard layer norm of `[y, -y]` is
/// `√(2d)/‖[y,-y]‖ · [y, -y] = √d · [y, -y]/‖y‖`, so a gain of `1/√d` and
/// zero bias recover `y/‖y‖` on the first half.
pub fn double_network(spec: &TransformerSpec, w: &WeightSet) -> Result<(TransformerSpec, WeightSet)> {
    if spec.variant != Variant::ModifiedLN || spec.layernorm != LayerNormMode::L2 {
        return Err(Error::Input("doubling applies to L2-normalized post-norm networks".into()));
    }
    if spec.heads.iter().any(|&h| h != 1) || spec.position != PositionMode::RelativeKV {
        return Err(Error::Input(
            "doubling expects one head per layer and relative positions".into(),
        ));
    }
    let d = spec.d;
    let mut big = spec.clone();
    big.d = 2 * d;
    big.layernorm = LayerNormMode::Standard;
    big.ln_eps = 0.0;
    let mut out = WeightSet::zeros(&big)?;
    let gain = 1.0 / (d as f64).sqrt();

    for (name, t) in w.iter() {
        let dst = out.get_mut(name)?;
        let (r, c) = t.dims2();
        let mut put = |rr: usize, cc: usize, v: f64| dst.set2(rr, cc, v);
        let leaf = name.rsplit('.').next().unwrap_or(name);
        match leaf {
            // [x, -x] rows
            "emb" | "pos_K" | "pos_V" => {
                for i in 0..r {
                    for j in 0..c {
                        put(i, j, t.get2(i, j));
                        put(i, d + j, -t.get2(i, j));
                    }
                }
            }
            // read and write the first half only
            "W_K" | "W_Q" | "A" => {
                for i in 0..r {
                    for j in 0..c {
                        put(i, j, t.get2(i, j));
                    }
                }
            }
            "W_V" | "W_O" => {
                for i in 0..r {
                    for j in 0..c {
                        put(i, j, t.get2(i, j));
                        put(d + i, d + j, t.get2(i, j));
                    }
                }
            }
            // [W, -W] reads both halves, doubling the pre-activation; the
            // norm that follows removes the scale
            "W_1" => {
                for i in 0..r {
                    for j in 0..c {
                        put(i, j, t.get2(i, j));
                        put(i, d + j, -t.get2(i, j));
                    }
                }
            }
            // [[W], [-W]] keeps the output antisymmetric
            "W_2" => {
                for i in 0..r {
                    for j in 0..c {
                        put(i, j, t.get2(i, j));
                        put(d + i, j, -t.get2(i, j));
                    }
                }
            }
            "b" => {
                for j in 0..c {
                    put(0, j, t.get2(0, j));
                }
            }
            other => return Err(Error::Input(format!("cannot double parameter {other}"))),
        }
    }
    for l in 0..spec.layers() {
        let g = out.get_mut(&format!("layer{l}.ln.gain"))?;
        g.data_mut().iter_mut().for_each(|x| *x = gain);
    }
    Ok((big, out))
}

/// The layer-norm trick in isolation: standard layer norm of `[v, -v]` with
/// gain `1/√d`, first `d` coordinates. Equals `v/‖v‖`.
pub fn doubled_layernorm(v: &[f64]) -> Result<Vec<f64>> {
    let d = v.len();
    let mut tape = crate::tensor::Tape::<f64>::new();
    let x = tape.leaf_raw(1, 2 * d, v.iter().copied().chain(v.iter().map(|a| -a)).collect(), false);
    let g = tape.leaf_raw(1, 2 * d, vec![1.0 / (d as f64).sqrt(); 2 * d], false);
    let b = tape.leaf_raw(1, 2 * d, vec![0.0; 2 * d], false);
    let y = tape.layernorm(x, g, b, 0.0)?;
    Ok(tape.value(y)[..d].to_vec())
}

/// Theorem-4 network realized with standard layer norm via [`double_network`].
pub fn theorem4(s: usize, k: usize, kappa: f64, t_max: usize) -> Result<(TransformerSpec, WeightSet)> {
    let (spec, w) = theorem4_compact(s, k, kappa, t_max)?;
    double_network(&spec, &w)
}

pub fn build(c: Construction, s: usize, k: usize, kappa: f64, t_max: usize) -> Result<(TransformerSpec, WeightSet)> {
    match c {
        Construction::T1 if k != 1 => Err(Error::Input(format!("construction t1 is first order only, got k={k}"))),
        Construction::T1 => theorem1(s, kappa, t_max),
        Construction::T2 => theorem2(s, k, kappa, t_max),
        Construction::T3 => theorem3(s, k, kappa, t_max),
        Construction::T4 => theorem4(s, k, kappa, t_max),
    }
}
