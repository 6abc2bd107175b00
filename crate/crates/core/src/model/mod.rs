//! Decoder-only transformer in three variants: attention-only,
//! attention + FFN + post-norm residual, and GPT-2 style pre-norm.
//!
//! Checkpoint tensor names (layers and heads are 0-based):
//!
//! | name | shape |
//! |---|---|
//! | `emb` | `S×d` |
//! | `pos` (learned absolute positions) | `T_max×d` |
//! | `layer{l}.head{h}.W_K`, `.W_Q`, `.W_V` | `d×d` |
//! | `layer{l}.W_O` | `(d·H)×d` |
//! | `layer{l}.pos_K`, `layer{l}.pos_V` (relative positions) | `T_max×d` |
//! | `layer{l}.ffn.W_1`, `layer{l}.ffn.W_2` | `d_ff×d`, `d×d_ff` |
//! | `layer{l}.ln1.gain/bias`, `layer{l}.ln2.gain/bias` (pre-norm) | `d` |
//! | `layer{l}.ln.gain/bias` (post-norm, standard mode) | `d` |
//! | `ln_f.gain/bias` (pre-norm) | `d` |
//! | `A`, `b` | `S×d`, `S` |
//!
//! Matrices named `W_*` and `A` act on column vectors (`W x`); `W_O` maps the
//! concatenated head outputs as a row vector (`[o_1 … o_H] W_O`).

mod forward;
mod spec;
mod weights;

pub use forward::{build_graph, forward, forward_in, hidden_states, loss_and_grads, AttentionTrace, Graph, ModelPredictor};
pub use spec::{LayerNormMode, OutputFn, PositionMode, TransformerSpec, Variant};
pub use weights::{from_json, init_weights, is_vector_param, load_checkpoint, save_checkpoint, to_json, WeightSet, INIT_STD};
