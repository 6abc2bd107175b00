use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::TransformerSpec;
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::{ParamSet, Tensor};

pub const INIT_STD: f64 = 0.02;

/// Every parameter tensor of a model, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightSet {
    /// Check names, shapes and finiteness against `spec`.
    pub fn new(spec: &TransformerSpec, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        for (name, shape) in &shapes {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Input(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "WeightSet::new",
                    lhs: shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
            if !t.is_finite() {
                return Err(Error::NonFinite {
                    coordinate: name.clone(),
                });
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !shapes.contains_key(*k)) {
            return Err(Error::Input(format!("unexpected parameter {extra}")));
        }
        Ok(Self { tensors })
    }

    /// All-zero weights of the right shapes.
    pub fn zeros(spec: &TransformerSpec) -> Result<Self> {
        let tensors = spec
            .param_shapes()
            .into_iter()
            .map(|(n, s)| {
                let t = Tensor::zeros(&s);
                (n, t)
            })
            .collect();
        Self::new(spec, tensors)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Input(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Input(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

impl ParamSet for WeightSet {
    fn param_names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    fn param(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }
}

/// True for parameters that are biases or norm gains (no weight decay, no
/// random init).
pub fn is_vector_param(name: &str) -> bool {
    name == "b" || name.ends_with(".gain") || name.ends_with(".bias")
}

/// Gaussian(0, 0.02²) matrices, zero biases and relative tables, unit norm
/// gains. Each tensor's stream is keyed by the seed hashed with its name and
/// shape.
pub fn init_weights(spec: &TransformerSpec, seed: u64) -> Result<WeightSet> {
    spec.validate()?;
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut tensors = BTreeMap::new();
    for (name, shape) in spec.param_shapes() {
        let t = if name.ends_with(".gain") {
            Tensor::from_fn(&shape, |_| 1.0)
        } else if is_vector_param(&name) || name.ends_with("pos_K") || name.ends_with("pos_V") {
            Tensor::zeros(&shape)
        } else {
            let key = rng::hash_bytes(format!("{name}:{shape:?}").as_bytes());
            let mut r = rng::stream(seed, tag::INIT, key);
            Tensor::from_fn(&shape, |_| normal.sample(&mut r))
        };
        tensors.insert(name, t);
    }
    WeightSet::new(spec, tensors)
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    spec: TransformerSpec,
    tensors: BTreeMap<String, StoredTensor>,
}

pub fn to_json(spec: &TransformerSpec, w: &WeightSet) -> Result<String> {
    let ck = Checkpoint {
        spec: spec.clone(),
        tensors: w
            .iter()
            .map(|(n, t)| {
                let st = StoredTensor {
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                };
                (n.clone(), st)
            })
            .collect(),
    };
    Ok(serde_json::to_string(&ck)?)
}

pub fn from_json(text: &str) -> Result<(TransformerSpec, WeightSet)> {
    let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Parse(format!("checkpoint: {e}")))?;
    let mut tensors = BTreeMap::new();
    for (name, st) in ck.tensors {
        let t = Tensor::new(st.shape, st.data).map_err(|e| Error::Parse(format!("tensor {name}: {e}")))?;
        tensors.insert(name, t);
    }
    let w = WeightSet::new(&ck.spec, tensors)?;
    Ok((ck.spec, w))
}

pub fn save_checkpoint(path: &Path, spec: &TransformerSpec, w: &WeightSet) -> Result<()> {
    std::fs::write(path, to_json(spec, w)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(TransformerSpec, WeightSet)> {
    from_json(&std::fs::read_to_string(path)?)
}
