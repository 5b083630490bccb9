//! Local-global causal attention and the front-door feature estimate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::codebook::sample_indices;
use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LgcamParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    /// `2d → d`, with bias.
    pub hidden: Linear,
    /// `d → d`, with bias.
    pub score: Linear,
}

impl LgcamParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize) -> Self {
        Self {
            query: Linear::new(store, rng, &format!("{name}.wq"), dim, dim, false),
            key: Linear::new(store, rng, &format!("{name}.wk"), dim, dim, false),
            value: Linear::new(store, rng, &format!("{name}.wv"), dim, dim, false),
            hidden: Linear::new(store, rng, &format!("{name}.wh"), 2 * dim, dim, true),
            score: Linear::new(store, rng, &format!("{name}.wh2"), dim, dim, true),
        }
    }

    pub fn dim(&self) -> usize {
        self.query.in_dim
    }
}

/// Output of [`lgcam`] together with its attention weights.
#[derive(Clone, Copy, Debug)]
pub struct LgcamOutput {
    /// `n × d`
    pub output: NodeId,
    /// `n × d`, each column sums to one over positions.
    pub alpha: NodeId,
}

/// `H = [W_V·F_G, W_Q·F_L ⊙ W_K·F_G]`, `H' = GELU(W_H·H + b_H)`,
/// `α = softmax_positions(W_H'·H' + b_H')`, output `α ⊙ F_G`.
pub fn lgcam(g: &mut Graph, local: NodeId, global: NodeId, params: &LgcamParams) -> Result<LgcamOutput> {
    let (n, d) = g.shape(local);
    if g.shape(global) != (n, d) {
        return Err(Error::Validation(format!(
            "LGCAM inputs differ: local {:?}, global {:?}",
            (n, d),
            g.shape(global)
        )));
    }
    if d != params.dim() {
        return Err(Error::Validation(format!(
            "LGCAM width {d} does not match parameters ({})",
            params.dim()
        )));
    }
    let v = params.value.forward(g, global);
    let q = params.query.forward(g, local);
    let k = params.key.forward(g, global);
    let qk = g.mul(q, k);
    let h = g.concat_cols(&[v, qk]);
    let h = params.hidden.forward(g, h);
    let h = g.gelu(h);
    let s = params.score.forward(g, h);
    let alpha = g.softmax_cols(s);
    let output = g.mul(alpha, global);
    Ok(LgcamOutput { output, alpha })
}

#[derive(Clone, Copy, Debug)]
pub struct FrontDoorOutput {
    /// `n × 2d`, `[F_LG, F_LL]`
    pub features: NodeId,
    pub local_global: LgcamOutput,
    pub local_local: LgcamOutput,
}

/// Samples `n` global rows from `codebook` (a `K × d` node) with `rng`,
/// then concatenates `lgcam(F_L, F_G)` and `lgcam(F_L, F_L)`.
pub fn front_door_with_rng<R: Rng + ?Sized>(
    g: &mut Graph,
    local: NodeId,
    codebook: NodeId,
    params: &LgcamParams,
    rng: &mut R,
) -> Result<FrontDoorOutput> {
    let k = g.shape(codebook).0;
    if k == 0 {
        return Err(Error::Validation("cannot sample from an empty codebook".into()));
    }
    let n = g.shape(local).0;
    let global = g.gather_rows(codebook, sample_indices(k, n, rng));
    let local_global = lgcam(g, local, global, params)?;
    let local_local = lgcam(g, local, local, params)?;
    let features = g.concat_cols(&[local_global.output, local_local.output]);
    Ok(FrontDoorOutput {
        features,
        local_global,
        local_local,
    })
}

/// [`front_door_with_rng`] with a sampler seeded from `seed`.
pub fn front_door_features(
    g: &mut Graph,
    local: NodeId,
    codebook: NodeId,
    params: &LgcamParams,
    seed: u64,
) -> Result<FrontDoorOutput> {
    front_door_with_rng(g, local, codebook, params, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use ndarray::{array, Array2};

    fn toy(d: usize) -> (ParamStore, LgcamParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = LgcamParams::new(&mut store, &mut rng, "lgcam", d);
        (store, p)
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    #[test]
    fn unit_weights_match_scalar_evaluation() {
        let (mut store, p) = toy(1);
        for lin in [&p.query, &p.key, &p.value, &p.hidden, &p.score] {
            store.get_mut(lin.weight).fill(1.0);
            if let Some(b) = lin.bias {
                store.get_mut(b).fill(0.0);
            }
        }
        let fl = [0.4, -1.3];
        let fg = [1.1, 0.6];
        let mut g = Graph::new(&store);
        let l = g.input(array![[fl[0]], [fl[1]]]);
        let gl = g.input(array![[fg[0]], [fg[1]]]);
        let out = lgcam(&mut g, l, gl, &p).unwrap();

        // H = [v, q·k]; H' = gelu(v + q·k); α = softmax over the two positions
        let hp: Vec<f64> = (0..2).map(|i| gelu(fg[i] + fl[i] * fg[i])).collect();
        let z = hp[0].exp() + hp[1].exp();
        for i in 0..2 {
            let alpha = hp[i].exp() / z;
            assert!((g.value(out.alpha)[[i, 0]] - alpha).abs() < 1e-12);
            assert!((g.value(out.output)[[i, 0]] - alpha * fg[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_columns_normalised_and_output_bounded() {
        let (store, p) = toy(4);
        let mut g = Graph::new(&store);
        let l = g.input(Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 - j as f64) * 0.7));
        let fg = Array2::from_shape_fn((3, 4), |(i, j)| ((i * 4 + j) as f64).sin() * 2.0);
        let gl = g.input(fg.clone());
        let out = lgcam(&mut g, l, gl, &p).unwrap();
        assert_eq!(g.shape(out.output), (3, 4));
        for col in g.value(out.alpha).columns() {
            assert!((col.sum() - 1.0).abs() < 1e-6);
            assert!(col.iter().all(|&a| a >= 0.0));
        }
        for j in 0..4 {
            let bound = fg.column(j).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(g.value(out.output).column(j).iter().all(|v| v.abs() <= bound + 1e-12));
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (store, p) = toy(2);
        let mut g = Graph::new(&store);
        let a = g.input(Array2::zeros((3, 2)));
        let b = g.input(Array2::zeros((2, 2)));
        assert!(lgcam(&mut g, a, b, &p).is_err());
    }

    #[test]
    fn front_door_layout_and_determinism() {
        let (store, p) = toy(3);
        let fl = Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f64 * 0.3 - 0.5);
        let cb = Array2::from_shape_fn((5, 3), |(i, j)| (i * j) as f64 * 0.2);
        let run = || {
            let mut g = Graph::new(&store);
            let l = g.input(fl.clone());
            let c = g.input(cb.clone());
            let fd = front_door_features(&mut g, l, c, &p, 42).unwrap();
            let direct = lgcam(&mut g, l, l, &p).unwrap();
            assert_eq!(g.shape(fd.features), (4, 6));
            assert_eq!(g.value(fd.local_local.output), g.value(direct.output));
            g.value(fd.features).clone()
        };
        assert_eq!(run(), run());
    }
}
