//! Visual-linguistic feature fusion: a semantic graph over the question
//! streams, adaptive per-role gating, and semantics-conditioned reweighting
//! of the visual clues.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{validation, Result};
use crate::nn::Linear;
use crate::params::{glorot, ParamId, ParamStore};

/// Symmetric-normalised adjacency `D^-1/2 (A + I) D^-1/2` of a fully
/// connected graph on `n` nodes.
pub fn normalized_adjacency(n: usize) -> Array2<f64> {
    let a = Array2::<f64>::ones((n, n));
    let deg: Vec<f64> = a.rows().into_iter().map(|r| r.sum()).collect();
    Array2::from_shape_fn((n, n), |(i, j)| a[[i, j]] / (deg[i] * deg[j]).sqrt())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GcnParams {
    /// One `2d × 2d` weight per layer; empty means the identity map.
    pub layers: Vec<ParamId>,
}

impl GcnParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, width: usize, layers: usize) -> Self {
        Self {
            layers: (0..layers)
                .map(|l| store.add(format!("{name}.layer{l}"), glorot(rng, width, width)))
                .collect(),
        }
    }
}

/// `X ← act(Â X W)` per layer, GELU between layers and none after the last.
/// `nodes` is `n × 2d`, one row per linguistic stream.
pub fn semantic_gcn(g: &mut Graph, nodes: NodeId, params: &GcnParams) -> NodeId {
    let n = g.shape(nodes).0;
    let adj = g.input(normalized_adjacency(n));
    let mut x = nodes;
    for (l, &w) in params.layers.iter().enumerate() {
        let w = g.param(w);
        let ax = g.matmul(adj, x);
        x = g.matmul(ax, w);
        if l + 1 < params.layers.len() {
            x = g.gelu(x);
        }
    }
    x
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlffRole {
    /// `n·2d → d`
    pub squeeze: Linear,
    /// `d → 2d`
    pub excite: Linear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlffParams {
    pub roles: Vec<AlffRole>,
}

impl AlffParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, nodes: usize) -> Self {
        let roles = (0..nodes)
            .map(|k| AlffRole {
                squeeze: Linear::new(store, rng, &format!("{name}.role{k}.squeeze"), nodes * 2 * dim, dim, true),
                excite: Linear::new(store, rng, &format!("{name}.role{k}.excite"), dim, 2 * dim, true),
            })
            .collect();
        Self { roles }
    }
}

#[derive(Clone, Debug)]
pub struct FusedSemantics {
    /// Refined per-role vectors, each `1 × 2d`.
    pub roles: Vec<NodeId>,
    /// Their concatenation `L̃`.
    pub joint: NodeId,
    /// Gate activations `ReLU(E^k)`, empty when fusion is disabled.
    pub gates: Vec<NodeId>,
}

fn split_rows(g: &mut Graph, x: NodeId) -> Vec<NodeId> {
    (0..g.shape(x).0).map(|i| g.slice_rows(x, i, 1)).collect()
}

/// `G_u^k = W_s^k·[L_1..L_n] + b`, `E^k = W_e^k·G_u^k + b`,
/// `L̃_k = ReLU(E^k) ⊙ L_k`. With `params = None` every gate is the identity.
/// `scales`, when given, multiplies each role's excitation `E^k`.
pub fn adaptive_fusion(
    g: &mut Graph,
    nodes: NodeId,
    params: Option<&AlffParams>,
    scales: Option<&[f64]>,
) -> Result<FusedSemantics> {
    let (n, w) = g.shape(nodes);
    let rows = split_rows(g, nodes);
    let joint_in = g.concat_cols(&rows);
    let Some(params) = params else {
        return Ok(FusedSemantics {
            roles: rows,
            joint: joint_in,
            gates: Vec::new(),
        });
    };
    if params.roles.len() != n || scales.is_some_and(|s| s.len() != n) {
        return Err(validation(format!(
            "fusion has {} roles but the graph has {n} nodes",
            params.roles.len()
        )));
    }
    let mut roles = Vec::with_capacity(n);
    let mut gates = Vec::with_capacity(n);
    for (k, role) in params.roles.iter().enumerate() {
        if role.squeeze.in_dim != n * w || role.excite.out_dim != w {
            return Err(validation(format!(
                "fusion role {k} expects {}→{}, graph gives {} nodes of width {w}",
                role.squeeze.in_dim, role.excite.out_dim, n
            )));
        }
        let gu = role.squeeze.forward(g, joint_in);
        let mut e = role.excite.forward(g, gu);
        if let Some(s) = scales {
            e = g.scale(e, s[k]);
        }
        let gate = g.relu(e);
        roles.push(g.mul(gate, rows[k]));
        gates.push(gate);
    }
    let joint = g.concat_cols(&roles);
    Ok(FusedSemantics { roles, joint, gates })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionParams {
    /// `W^f`: `2d → h`
    pub visual: Linear,
    /// `W^l`: `2d → h`
    pub linguistic: Linear,
    /// `W^I`: `2h → h`, with bias
    pub joint: Linear,
    /// `W^I'`: `h → 2d`, with bias
    pub weights: Linear,
}

impl ConditionParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize) -> Self {
        let (w, h) = (2 * dim, dim);
        Self {
            visual: Linear::new(store, rng, &format!("{name}.wf"), w, h, false),
            linguistic: Linear::new(store, rng, &format!("{name}.wl"), w, h, false),
            joint: Linear::new(store, rng, &format!("{name}.wi"), 2 * h, h, true),
            weights: Linear::new(store, rng, &format!("{name}.wi2"), h, w, true),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConditionedVisual {
    pub output: NodeId,
    /// Channel weights, summing to one.
    pub weights: NodeId,
}

/// `I = ELU(W^I[W^f F, W^f F ⊙ W^l L] + b)`, `F̃ = softmax(W^I' I + b) ⊙ F`.
pub fn condition_visual(
    g: &mut Graph,
    visual: NodeId,
    semantics: NodeId,
    params: &ConditionParams,
) -> Result<ConditionedVisual> {
    let expected = (1, params.visual.in_dim);
    if g.shape(visual) != expected || g.shape(semantics) != expected {
        return Err(validation(format!(
            "conditioning expects two {expected:?} vectors, got {:?} and {:?}",
            g.shape(visual),
            g.shape(semantics)
        )));
    }
    let fv = params.visual.forward(g, visual);
    let lv = params.linguistic.forward(g, semantics);
    let inter = g.mul(fv, lv);
    let cat = g.concat_cols(&[fv, inter]);
    let i = params.joint.forward(g, cat);
    let i = g.elu(i);
    let s = params.weights.forward(g, i);
    let weights = g.softmax_rows(s, None);
    let output = g.mul(weights, visual);
    Ok(ConditionedVisual { output, weights })
}
