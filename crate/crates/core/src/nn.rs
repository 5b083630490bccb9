//! Small reusable layers on top of the autodiff graph.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::params::{glorot, ParamId, ParamStore};

/// Affine map `x · W + b` applied to every row of `x`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(rng, in_dim, out_dim));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Array2::zeros((1, out_dim))));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Layer normalisation with learnable gain and bias.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Array2::ones((1, dim))),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, dim))),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let n = g.layer_norm(x);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// Two-layer projection with a GELU in between.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), dim, hidden, true),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, dim, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Per-head query/key/value projections (`d → d/H`, no bias).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadProjection {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

/// Multi-head attention: `concat_h softmax(G_q G_kᵀ · scale) G_v · W_o`.
///
/// Normalisation of the inputs is left to the caller.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub heads: Vec<HeadProjection>,
    pub output: Linear,
    pub scale: f64,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        num_heads: usize,
        scale: f64,
    ) -> Self {
        assert!(num_heads > 0 && dim % num_heads == 0, "d must be divisible by H");
        let hd = dim / num_heads;
        let heads = (0..num_heads)
            .map(|h| HeadProjection {
                query: Linear::new(store, rng, &format!("{name}.h{h}.q"), dim, hd, false),
                key: Linear::new(store, rng, &format!("{name}.h{h}.k"), dim, hd, false),
                value: Linear::new(store, rng, &format!("{name}.h{h}.v"), dim, hd, false),
            })
            .collect();
        Self {
            heads,
            output: Linear::new(store, rng, &format!("{name}.out"), dim, dim, false),
            scale,
        }
    }

    /// `query`: `Lq × d`, `context`: `Lc × d`, `mask` over context rows.
    /// Attention matrices (`Lq × Lc`, one per head) are pushed to `probe`.
    pub fn forward(
        &self,
        g: &mut Graph,
        query: NodeId,
        context: NodeId,
        mask: Option<&[bool]>,
        mut probe: Option<&mut Vec<NodeId>>,
    ) -> NodeId {
        let outs: Vec<NodeId> = self
            .heads
            .iter()
            .map(|h| {
                let q = h.query.forward(g, query);
                let k = h.key.forward(g, context);
                let v = h.value.forward(g, context);
                let logits = g.matmul_t(q, k);
                let logits = g.scale(logits, self.scale);
                let att = g.softmax_rows(logits, mask.map(<[bool]>::to_vec));
                if let Some(p) = probe.as_deref_mut() {
                    p.push(att);
                }
                g.matmul(att, v)
            })
            .collect();
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        self.output.forward(g, cat)
    }
}

/// Inverted dropout driven by an explicit RNG stream; a no-op when off.
pub struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut rand_chacha::ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: &'a mut rand_chacha::ChaCha8Rng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn is_active(&self) -> bool {
        self.rate > 0.0 && self.rng.is_some()
    }

    pub fn apply(&mut self, g: &mut Graph, x: NodeId) -> NodeId {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => g.dropout(x, self.rate, rng),
            _ => x,
        }
    }

    /// The RNG stream, when training.
    pub fn rng(&mut self) -> Option<&mut rand_chacha::ChaCha8Rng> {
        self.rng.as_deref_mut()
    }
}
