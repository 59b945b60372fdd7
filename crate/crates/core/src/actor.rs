//! Action-aware cross-modal transformer.
//!
//! A global image embedding `I` is broadcast into `N_q` identical query
//! seeds, which then attend to the interaction prompt dictionary `T` through
//! `L` single-head cross-attention layers:
//!
//! ```text
//! S   = softmax(Q W_Q (T W_K)ᵀ / sqrt(d_t))
//! Q~  = S (T W_V)
//! Q'  = FFN(LN(Q + Q~))
//! ```
//!
//! A learned projection maps the final queries from `d_t` to the decoder
//! width `C'`, giving the action-aware queries `A`.

use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm};
use crate::numerics::{Graph, ParamId, ParamStore, Var};

pub const DEFAULT_LAYERS: usize = 3;

#[derive(Clone, Debug)]
pub struct ActorLayer {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub norm: LayerNorm,
    pub ffn: FeedForward,
    d_t: usize,
}

impl ActorLayer {
    pub fn new(store: &mut ParamStore, name: &str, d_t: usize, seed: u64) -> Self {
        ActorLayer {
            w_q: store.add_xavier(&format!("{name}.w_q"), d_t, d_t, seed),
            w_k: store.add_xavier(&format!("{name}.w_k"), d_t, d_t, seed),
            w_v: store.add_xavier(&format!("{name}.w_v"), d_t, d_t, seed),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d_t),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d_t, 4 * d_t, d_t, seed),
            d_t,
        }
    }

    /// One refinement step. Returns the next queries and the attention map
    /// `S` (`N_q x N_T`).
    pub fn forward(&self, g: &mut Graph, queries: Var, text: Var) -> Result<(Var, Var)> {
        let (qd, td) = (g.value(queries).cols(), g.value(text).cols());
        if qd != self.d_t || td != self.d_t {
            return Err(Error::dim("actor_layer", format!("queries width {qd}, text width {td}, layer {}", self.d_t)));
        }
        let (wq, wk, wv) = (g.param(self.w_q), g.param(self.w_k), g.param(self.w_v));
        let q = g.matmul(queries, wq)?;
        let k = g.matmul(text, wk)?;
        let v = g.matmul(text, wv)?;
        let logits = g.matmul_nt(q, k)?;
        let logits = g.scale(logits, 1.0 / (self.d_t as f64).sqrt())?;
        let s = g.softmax_rows(logits)?;
        let attended = g.matmul(s, v)?;
        let x = g.add(queries, attended)?;
        let x = self.norm.forward(g, x)?;
        Ok((self.ffn.forward(g, x)?, s))
    }
}

#[derive(Clone, Debug)]
pub struct ActorParams {
    pub layers: Vec<ActorLayer>,
    pub output: ParamId,
    pub n_queries: usize,
}

impl ActorParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d_t: usize, width: usize, layers: usize, n_queries: usize, seed: u64) -> Self {
        ActorParams {
            layers: (0..layers).map(|l| ActorLayer::new(store, &format!("{prefix}.layer{l}"), d_t, seed)).collect(),
            output: store.add_xavier(&format!("{prefix}.output"), d_t, width, seed),
            n_queries,
        }
    }
}

/// Attention maps of every layer and the final action-aware queries `A`.
#[derive(Clone, Debug)]
pub struct ActorTrace {
    pub attention: Vec<Var>,
    pub queries: Var,
}

/// Broadcasts the `1 x d_t` image embedding into `n_queries` identical rows.
pub fn seed_queries(g: &mut Graph, image: Var, n_queries: usize) -> Result<Var> {
    if n_queries < 1 {
        return Err(Error::Validation("need at least one query".into()));
    }
    if g.value(image).rows() != 1 {
        return Err(Error::dim("seed_queries", format!("image embedding shape {:?}", g.value(image).shape())));
    }
    g.repeat_rows(image, n_queries)
}

pub fn actor_forward(g: &mut Graph, image: Var, text: Var, params: &ActorParams) -> Result<ActorTrace> {
    let mut q = seed_queries(g, image, params.n_queries)?;
    let mut attention = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (next, s) = layer.forward(g, q, text)?;
        attention.push(s);
        q = next;
    }
    let out = g.param(params.output);
    let queries = g.matmul(q, out)?;
    Ok(ActorTrace { attention, queries })
}

/// `Q_a' = Q_a + γ1·A` (interaction decoder input).
pub fn enhance_action_queries(g: &mut Graph, q_a: Var, a: Var, gamma1: f64) -> Result<Var> {
    g.residual_enhance(q_a, a, gamma1)
}

/// `V_a' = V_a + γ2·A` (interaction decoder output).
pub fn enhance_action_outputs(g: &mut Graph, v_a: Var, a: Var, gamma2: f64) -> Result<Var> {
    g.residual_enhance(v_a, a, gamma2)
}

pub fn enhance_action(g: &mut Graph, q_a: Var, v_a: Var, a: Var, gamma1: f64, gamma2: f64) -> Result<(Var, Var)> {
    Ok((enhance_action_queries(g, q_a, a, gamma1)?, enhance_action_outputs(g, v_a, a, gamma2)?))
}
