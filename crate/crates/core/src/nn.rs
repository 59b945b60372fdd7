//! Transformer building blocks shared by the encoder, the decoders and PDQD.
//!
//! All attention here is single-head with post-residual layer norm.

use crate::error::Result;
use crate::numerics::{tol, Graph, ParamId, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, seed: u64) -> Self {
        let weight = store.add_xavier(&format!("{name}.weight"), fan_in, fan_out, seed);
        let bias = bias.then(|| store.add_const(&format!("{name}.bias"), 1, fan_out, 0.0));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add_const(&format!("{name}.gain"), 1, dim, 1.0),
            shift: store.add_const(&format!("{name}.shift"), 1, dim, 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (a, b) = (g.param(self.gain), g.param(self.shift));
        g.layer_norm(x, a, b, tol::LN_EPS)
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub first: Linear,
    pub second: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, out: usize, seed: u64) -> Self {
        FeedForward {
            first: Linear::new(store, &format!("{name}.0"), dim, hidden, true, seed),
            second: Linear::new(store, &format!("{name}.1"), hidden, out, true, seed),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.first.forward(g, x)?;
        let h = g.relu(h)?;
        self.second.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    dim: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, seed: u64) -> Self {
        Attention {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, true, seed),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, true, seed),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, true, seed),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, true, seed),
            dim,
        }
    }

    /// Returns the attended output and the `queries x keys` weight matrix.
    pub fn forward(&self, g: &mut Graph, queries: Var, memory: Var) -> Result<(Var, Var)> {
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, memory)?;
        let v = self.value.forward(g, memory)?;
        let logits = g.matmul_nt(q, k)?;
        let logits = g.scale(logits, 1.0 / (self.dim as f64).sqrt())?;
        let weights = g.softmax_rows(logits)?;
        let mixed = g.matmul(weights, v)?;
        Ok((self.out.forward(g, mixed)?, weights))
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn: Attention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, seed: u64) -> Self {
        EncoderBlock {
            attn: Attention::new(store, &format!("{name}.attn"), dim, seed),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, hidden, dim, seed),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (a, _) = self.attn.forward(g, x, x)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, x)?;
        let f = self.ffn.forward(g, x)?;
        let x = g.add(x, f)?;
        self.norm2.forward(g, x)
    }
}

/// Self-attention, cross-attention to a memory sequence, feed-forward; each
/// sub-layer followed by residual addition and layer norm.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub cross_attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, seed: u64) -> Self {
        DecoderBlock {
            self_attn: Attention::new(store, &format!("{name}.self_attn"), dim, seed),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), dim, seed),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, hidden, dim, seed),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var) -> Result<Var> {
        self.forward_traced(g, x, memory).map(|(y, _)| y)
    }

    /// Also returns the cross-attention weights.
    pub fn forward_traced(&self, g: &mut Graph, x: Var, memory: Var) -> Result<(Var, Var)> {
        let (a, _) = self.self_attn.forward(g, x, x)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, x)?;
        let (c, weights) = self.cross_attn.forward(g, x, memory)?;
        let x = g.add(x, c)?;
        let x = self.norm2.forward(g, x)?;
        let f = self.ffn.forward(g, x)?;
        let x = g.add(x, f)?;
        Ok((self.norm3.forward(g, x)?, weights))
    }
}

/// Runs `x` through `blocks` in order; zero blocks is the identity.
pub fn decode(g: &mut Graph, blocks: &[DecoderBlock], mut x: Var, memory: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(g, x, memory)?;
    }
    Ok(x)
}
