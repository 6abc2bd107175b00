//! Central-difference check of reverse-mode gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use serde::Serialize;

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_EPS: f64 = 1e-5;
const MIN_SAMPLES: usize = 100;
/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error.
const REL_FLOOR: f64 = 1e-6;

/// Named parameter tensors that can be perturbed one coordinate at a time.
pub trait ParamSet: Clone {
    fn param_names(&self) -> Vec<String>;
    fn param(&self, name: &str) -> Option<&Tensor>;
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor>;
}

impl ParamSet for BTreeMap<String, Tensor> {
    fn param_names(&self) -> Vec<String> {
        self.keys().cloned().collect()
    }

    fn param(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.get_mut(name)
    }
}

/// Loss value plus gradient for each named parameter.
pub type NamedGrads = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst_coordinate: String,
    /// Coordinates left out because a kink lies inside their stencil.
    pub nonsmooth_skipped: Vec<String>,
    pub eps: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Compare `f`'s analytic gradient against central differences on at least
/// 100 coordinates (all of them if there are fewer). Coordinates whose
/// stencil straddles a kink are skipped, listed, and replaced.
pub fn grad_check<P, Fun>(f: Fun, w: &P, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    P: ParamSet,
    Fun: Fn(&P) -> Result<(f64, NamedGrads)>,
{
    grad_check_with(f, w, eps, tol, MIN_SAMPLES, 0)
}

pub fn grad_check_with<P, Fun>(f: Fun, w: &P, eps: f64, tol: f64, samples: usize, seed: u64) -> Result<GradCheckReport>
where
    P: ParamSet,
    Fun: Fn(&P) -> Result<(f64, NamedGrads)>,
{
    if !(eps > 0.0) {
        return Err(Error::Input(format!("eps must be positive, got {eps}")));
    }
    let (base, grads) = f(w)?;
    if !base.is_finite() {
        return Err(Error::NonFinite {
            coordinate: "base point".into(),
        });
    }

    let mut coords = Vec::new();
    for name in w.param_names() {
        let n = w.param(&name).map_or(0, Tensor::numel);
        coords.extend((0..n).map(|i| (name.clone(), i)));
    }
    let want = samples.max(MIN_SAMPLES).min(coords.len());
    // visiting order: a seeded permutation, so replacements for skipped
    // coordinates are reproducible too
    let mut r = rng::stream(seed, rng::tag::GRADCHECK, 0);
    let order = sample(&mut r, coords.len(), coords.len()).into_vec();

    let mut probe = w.clone();
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut checked = 0;
    let mut nonsmooth = Vec::new();
    for &c in &order {
        if checked == want {
            break;
        }
        let (name, i) = &coords[c];
        let id = format!("{name}[{i}]");
        let orig = w.param(name).expect("listed name").data()[*i];
        let mut eval = |x: f64| -> Result<f64> {
            probe.param_mut(name).expect("listed name").data_mut()[*i] = x;
            let v = f(&probe)?.0;
            if !v.is_finite() {
                return Err(Error::NonFinite { coordinate: id.clone() });
            }
            Ok(v)
        };
        let plus = eval(orig + eps)?;
        let minus = eval(orig - eps)?;
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads.get(name).map_or(0.0, |g| g[*i]);
        if !analytic.is_finite() {
            eval(orig)?;
            return Err(Error::NonFinite { coordinate: id });
        }
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > tol && !smooth_stencil(&mut eval, orig, base, plus, minus, eps)? {
            eval(orig)?;
            nonsmooth.push(id);
            continue;
        }
        eval(orig)?;
        checked += 1;
        if rel > max_rel || worst.is_empty() {
            max_rel = max_rel.max(rel);
            worst = id;
        }
    }

    Ok(GradCheckReport {
        coords_checked: checked,
        max_rel_err: max_rel,
        worst_coordinate: worst,
        nonsmooth_skipped: nonsmooth,
        eps,
        tol,
        pass: max_rel <= tol && checked == want,
    })
}

/// Whether `f` looks twice differentiable on `[x - eps, x + eps]`: the
/// second difference `f(x+h) - 2f(x) + f(x-h)` must scale like `h²` across
/// `h = eps, eps/2, eps/4`. A ReLU switching inside the stencil makes it
/// scale like `h` instead, and central differences there say nothing about
/// the gradient at `x`.
fn smooth_stencil(eval: &mut impl FnMut(f64) -> Result<f64>, x: f64, f0: f64, plus: f64, minus: f64, eps: f64) -> Result<bool> {
    let mut curv = vec![(plus - 2.0 * f0 + minus) / (eps * eps)];
    for h in [eps / 2.0, eps / 4.0] {
        let p = eval(x + h)?;
        let m = eval(x - h)?;
        curv.push((p - 2.0 * f0 + m) / (h * h));
    }
    let h_min = eps / 4.0;
    let noise = 64.0 * f64::EPSILON * f0.abs().max(1.0) / (h_min * h_min);
    let scale = curv.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let spread = curv.iter().fold(0.0f64, |m, c| m.max((c - curv[0]).abs()));
    Ok(spread <= 1e-2 * scale + noise)
}
