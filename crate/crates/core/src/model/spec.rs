use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Residual attention layers only.
    AttentionOnly,
    /// `x̃ = x + attn(x)`, `x' = LN(W₂ ReLU(W₁ x̃)) + x̃`.
    ModifiedLN,
    /// GPT-2 style pre-norm blocks with a final norm.
    StandardPreLN,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositionMode {
    /// Per-layer offset tables added to keys and values.
    RelativeKV,
    /// A learned table added to the token embedding.
    LearnedAbsolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerNormMode {
    /// Standardize then apply learned gain and bias.
    Standard,
    /// Divide by the Euclidean norm.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputFn {
    Softmax,
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerSpec {
    pub variant: Variant,
    /// Head count for each layer; its length is the depth.
    pub heads: Vec<usize>,
    pub d: usize,
    pub s: usize,
    pub t_max: usize,
    pub position: PositionMode,
    pub layernorm: LayerNormMode,
    pub output: OutputFn,
    /// FFN hidden width. Must be 0 for attention-only models.
    pub d_ff: usize,
    pub ln_eps: f64,
}

impl TransformerSpec {
    /// Trainable GPT-2 style model with learned absolute positions and
    /// `d_ff = 4d`.
    pub fn standard(layers: usize, heads: usize, d: usize, s: usize, t_max: usize) -> Self {
        Self {
            variant: Variant::StandardPreLN,
            heads: vec![heads; layers],
            d,
            s,
            t_max,
            position: PositionMode::LearnedAbsolute,
            layernorm: LayerNormMode::Standard,
            output: OutputFn::Softmax,
            d_ff: 4 * d,
            ln_eps: 1e-5,
        }
    }

    pub fn layers(&self) -> usize {
        self.heads.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads.is_empty() {
            return bad("at least one layer is required".into());
        }
        if self.heads.contains(&0) {
            return bad("every layer needs at least one head".into());
        }
        if self.d == 0 || self.s == 0 || self.t_max == 0 {
            return bad(format!(
                "d, S and T_max must be positive (d={}, S={}, T_max={})",
                self.d, self.s, self.t_max
            ));
        }
        match self.variant {
            Variant::AttentionOnly if self.d_ff != 0 => bad("attention-only models have no FFN (d_ff must be 0)".into()),
            Variant::ModifiedLN | Variant::StandardPreLN if self.d_ff == 0 => bad("d_ff must be positive".into()),
            _ => Ok(()),
        }?;
        if !(self.ln_eps >= 0.0) {
            return bad(format!("ln_eps must be non-negative, got {}", self.ln_eps));
        }
        Ok(())
    }

    fn has_ln_params(&self) -> bool {
        match self.variant {
            Variant::AttentionOnly => false,
            Variant::ModifiedLN => self.layernorm == LayerNormMode::Standard,
            Variant::StandardPreLN => true,
        }
    }

    /// Every parameter name and its shape.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (d, s) = (self.d, self.s);
        let mut m = BTreeMap::new();
        m.insert("emb".to_string(), vec![s, d]);
        if self.position == PositionMode::LearnedAbsolute {
            m.insert("pos".to_string(), vec![self.t_max, d]);
        }
        for (l, &h) in self.heads.iter().enumerate() {
            for head in 0..h {
                for w in ["W_K", "W_Q", "W_V"] {
                    m.insert(format!("layer{l}.head{head}.{w}"), vec![d, d]);
                }
            }
            m.insert(format!("layer{l}.W_O"), vec![d * h, d]);
            if self.position == PositionMode::RelativeKV {
                m.insert(format!("layer{l}.pos_K"), vec![self.t_max, d]);
                m.insert(format!("layer{l}.pos_V"), vec![self.t_max, d]);
            }
            if self.variant != Variant::AttentionOnly {
                m.insert(format!("layer{l}.ffn.W_1"), vec![self.d_ff, d]);
                m.insert(format!("layer{l}.ffn.W_2"), vec![d, self.d_ff]);
            }
            if self.has_ln_params() {
                let norms: &[&str] = match self.variant {
                    Variant::StandardPreLN => &["ln1", "ln2"],
                    _ => &["ln"],
                };
                for ln in norms {
                    m.insert(format!("layer{l}.{ln}.gain"), vec![d]);
                    m.insert(format!("layer{l}.{ln}.bias"), vec![d]);
                }
            }
        }
        if self.variant == Variant::StandardPreLN {
            m.insert("ln_f.gain".to_string(), vec![d]);
            m.insert("ln_f.bias".to_string(), vec![d]);
        }
        m.insert("A".to_string(), vec![s, d]);
        m.insert("b".to_string(), vec![s]);
        m
    }

    /// Hash of the spec's JSON form, used to tag derived artifacts.
    pub fn hash(&self) -> u64 {
        crate::rng::hash_bytes(serde_json::to_string(self).expect("spec serializes").as_bytes())
    }
}
