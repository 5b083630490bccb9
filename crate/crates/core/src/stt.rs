//! Spatial-temporal transformer: stacks of multi-modal transformer blocks
//! pairing the question with appearance and motion (QA, QM), then visual
//! features with the resulting semantics (AS, MS).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{Dropout, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{normal, ParamId, ParamStore};

/// Multi-head multi-modal attention with normalised query and context.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MmaParams {
    pub query_norm: LayerNorm,
    pub context_norm: LayerNorm,
    pub attention: MultiHeadAttention,
}

impl MmaParams {
    /// Scores are scaled by `1/√d` (full width, not per head).
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query_norm: LayerNorm::new(store, &format!("{name}.query_norm"), dim),
            context_norm: LayerNorm::new(store, &format!("{name}.context_norm"), dim),
            attention: MultiHeadAttention::new(
                store,
                rng,
                &format!("{name}.attn"),
                dim,
                heads,
                1.0 / (dim as f64).sqrt(),
            ),
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MmaOptions {
    /// Apply the query/context layer norms (disable only in tests).
    pub normalize: bool,
}

impl Default for MmaOptions {
    fn default() -> Self {
        Self { normalize: true }
    }
}

/// Attention of `query` (`Lq × d`) over `context` (`Lc × d`); `mask` marks
/// valid context rows. Per-head attention matrices are pushed to `probe`.
pub fn mma(
    g: &mut Graph,
    query: NodeId,
    context: NodeId,
    params: &MmaParams,
    mask: Option<&[bool]>,
    options: MmaOptions,
    probe: Option<&mut Vec<NodeId>>,
) -> NodeId {
    let (q, c) = if options.normalize {
        (params.query_norm.forward(g, query), params.context_norm.forward(g, context))
    } else {
        (query, context)
    };
    params.attention.forward(g, q, c, mask, probe)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MtbLayer {
    pub mma: MmaParams,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

/// `U = LN(q) + MMA(q, ctx)`, `q' = U + σ(LN(U))`.
pub fn mtb_layer(
    g: &mut Graph,
    q_prev: NodeId,
    context: NodeId,
    layer: &MtbLayer,
    mask: Option<&[bool]>,
    dropout: &mut Dropout,
    probe: Option<&mut Vec<NodeId>>,
) -> NodeId {
    let nq = layer.mma.query_norm.forward(g, q_prev);
    let nc = layer.mma.context_norm.forward(g, context);
    let a = layer.mma.attention.forward(g, nq, nc, mask, probe);
    let a = dropout.apply(g, a);
    let u = g.add(nq, a);
    let h = layer.ff_norm.forward(g, u);
    let f = layer.ff.forward(g, h);
    let f = dropout.apply(g, f);
    g.add(u, f)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MtbStack {
    pub layers: Vec<MtbLayer>,
}

impl MtbStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        layers: usize,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("MTB needs at least one layer".into()));
        }
        let layers = (0..layers)
            .map(|r| {
                let p = format!("{name}.layer{r}");
                Ok(MtbLayer {
                    mma: MmaParams::new(store, rng, &format!("{p}.mma"), dim, heads)?,
                    ff_norm: LayerNorm::new(store, &format!("{p}.ff_norm"), dim),
                    ff: FeedForward::new(store, rng, &format!("{p}.ff"), dim, 2 * dim),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        q0: NodeId,
        context: NodeId,
        mask: Option<&[bool]>,
        dropout: &mut Dropout,
        mut probe: Option<&mut Vec<NodeId>>,
    ) -> NodeId {
        self.layers.iter().fold(q0, |q, layer| {
            mtb_layer(g, q, context, layer, mask, dropout, probe.as_deref_mut())
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SttParams {
    pub question_appearance: MtbStack,
    pub question_motion: MtbStack,
    pub appearance_semantics: MtbStack,
    pub motion_semantics: MtbStack,
    /// `2d → d` entry maps for front-door features; absent when the visual
    /// input is already `d` wide.
    pub entry_appearance: Option<Linear>,
    pub entry_motion: Option<Linear>,
    pub pos_appearance: ParamId,
    pub pos_motion: ParamId,
    pub dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct SttShape {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Appearance positions (`N·T`) and motion positions (`N`).
    pub positions: (usize, usize),
    /// Visual inputs are `2d` front-door features.
    pub front_door_input: bool,
}

impl SttParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, shape: SttShape) -> Result<Self> {
        let SttShape {
            dim: d,
            heads: h,
            layers: r,
            ..
        } = shape;
        let entry = |store: &mut ParamStore, rng: &mut R, which: &str| {
            shape
                .front_door_input
                .then(|| Linear::new(store, rng, &format!("{name}.entry_{which}"), 2 * d, d, true))
        };
        let entry_appearance = entry(store, rng, "app");
        let entry_motion = entry(store, rng, "mot");
        Ok(Self {
            question_appearance: MtbStack::new(store, rng, &format!("{name}.qa"), d, h, r)?,
            question_motion: MtbStack::new(store, rng, &format!("{name}.qm"), d, h, r)?,
            appearance_semantics: MtbStack::new(store, rng, &format!("{name}.as"), d, h, r)?,
            motion_semantics: MtbStack::new(store, rng, &format!("{name}.ms"), d, h, r)?,
            entry_appearance,
            entry_motion,
            pos_appearance: store.add(format!("{name}.pos_app"), normal(rng, shape.positions.0, d, 0.02)),
            pos_motion: store.add(format!("{name}.pos_mot"), normal(rng, shape.positions.1, d, 0.02)),
            dim: d,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SttOutputs {
    /// Semantics-aware features `L^a`, `L^m` (question length × d).
    pub semantic_appearance: NodeId,
    pub semantic_motion: NodeId,
    /// Visual clues `F_s^a`, `F_s^m` (visual length × d).
    pub clue_appearance: NodeId,
    pub clue_motion: NodeId,
    /// Pooled `[F_s^a, F_s^m]`, `1 × 2d`.
    pub visual: NodeId,
    /// Pooled `[L^a, L^m]`, `1 × 2d`.
    pub linguistic: NodeId,
}

fn prepare_stream(
    g: &mut Graph,
    x: NodeId,
    entry: Option<&Linear>,
    pos: ParamId,
    dim: usize,
) -> Result<NodeId> {
    let x = match entry {
        Some(lin) => {
            if g.shape(x).1 != lin.in_dim {
                return Err(Error::DimensionMismatch(format!(
                    "STT entry expects width {}, got {}",
                    lin.in_dim,
                    g.shape(x).1
                )));
            }
            lin.forward(g, x)
        }
        None => x,
    };
    let (n, w) = g.shape(x);
    if w != dim {
        return Err(Error::DimensionMismatch(format!("STT expects width {dim}, got {w}")));
    }
    let table = g.param(pos);
    let max = g.shape(table).0;
    if n > max {
        return Err(Error::Validation(format!(
            "{n} visual positions exceed the {max} positional embeddings"
        )));
    }
    let p = g.slice_rows(table, 0, n);
    Ok(g.add(x, p))
}

/// Applies the entry projections and positional embeddings to `F_C^a`, `F_C^m`.
pub fn prepare_visual(
    g: &mut Graph,
    appearance: NodeId,
    motion: NodeId,
    params: &SttParams,
) -> Result<(NodeId, NodeId)> {
    Ok((
        prepare_stream(g, appearance, params.entry_appearance.as_ref(), params.pos_appearance, params.dim)?,
        prepare_stream(g, motion, params.entry_motion.as_ref(), params.pos_motion, params.dim)?,
    ))
}

/// STT pass for one linguistic stream over prepared visual inputs.
pub fn stt_forward_prepared(
    g: &mut Graph,
    question: NodeId,
    mask: &[bool],
    appearance: NodeId,
    motion: NodeId,
    params: &SttParams,
    dropout: &mut Dropout,
) -> Result<SttOutputs> {
    let (len, w) = g.shape(question);
    if w != params.dim || len != mask.len() {
        return Err(Error::DimensionMismatch(format!(
            "question stream {:?} does not match width {} / mask {}",
            (len, w),
            params.dim,
            mask.len()
        )));
    }
    let l_app = params.question_appearance.forward(g, question, appearance, None, dropout, None);
    let l_mot = params.question_motion.forward(g, question, motion, None, dropout, None);
    let f_app = params.appearance_semantics.forward(g, appearance, l_app, Some(mask), dropout, None);
    let f_mot = params.motion_semantics.forward(g, motion, l_mot, Some(mask), dropout, None);

    let pa = g.mean_rows(f_app, None);
    let pm = g.mean_rows(f_mot, None);
    let visual = g.concat_cols(&[pa, pm]);
    let la = g.mean_rows(l_app, Some(mask.to_vec()));
    let lm = g.mean_rows(l_mot, Some(mask.to_vec()));
    let linguistic = g.concat_cols(&[la, lm]);
    Ok(SttOutputs {
        semantic_appearance: l_app,
        semantic_motion: l_mot,
        clue_appearance: f_app,
        clue_motion: f_mot,
        visual,
        linguistic,
    })
}

pub fn stt_forward(
    g: &mut Graph,
    question: NodeId,
    mask: &[bool],
    appearance: NodeId,
    motion: NodeId,
    params: &SttParams,
    dropout: &mut Dropout,
) -> Result<SttOutputs> {
    let (a, m) = prepare_visual(g, appearance, motion, params)?;
    stt_forward_prepared(g, question, mask, a, m, params, dropout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_head_hand_example() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = MmaParams::new(&mut store, &mut rng, "mma", 2, 1).unwrap();
        let h = &p.attention.heads[0];
        for lin in [&h.query, &h.key, &h.value, &p.attention.output] {
            *store.get_mut(lin.weight) = Array2::eye(2);
        }
        let mut g = Graph::new(&store);
        let q = g.input(array![[1.0, 0.0]]);
        let c = g.input(array![[1.0, 0.0], [0.0, 1.0]]);
        let mut probe = Vec::new();
        let out = mma(&mut g, q, c, &p, None, MmaOptions { normalize: false }, Some(&mut probe));
        let w = g.value(probe[0]);
        assert!((w[[0, 0]] - 0.6698).abs() < 1e-4, "{w}");
        assert!((w[[0, 1]] - 0.3302).abs() < 1e-4);
        assert!((g.value(out)[[0, 0]] - 0.6698).abs() < 1e-4);
        assert!((g.value(out)[[0, 1]] - 0.3302).abs() < 1e-4);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            MmaParams::new(&mut store, &mut rng, "mma", 6, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zeroed_attention_and_feedforward_leave_normalised_residual() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stack = MtbStack::new(&mut store, &mut rng, "mtb", 4, 2, 1).unwrap();
        let layer = &stack.layers[0];
        store.get_mut(layer.mma.attention.output.weight).fill(0.0);
        store.get_mut(layer.ff.down.weight).fill(0.0);
        store.get_mut(layer.ff.down.bias.unwrap()).fill(0.0);
        let mut g = Graph::new(&store);
        let q = g.input(Array2::from_shape_fn((3, 4), |(i, j)| (i * j) as f64 - 1.5 + i as f64));
        let c = g.input(Array2::from_shape_fn((5, 4), |(i, j)| (i + j) as f64));
        let out = mtb_layer(&mut g, q, c, layer, None, &mut Dropout::off(), None);
        let ln = g.layer_norm(q);
        for (a, b) in g.value(out).iter().zip(g.value(ln).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let stacked = stack.forward(&mut g, q, c, None, &mut Dropout::off(), None);
        assert_eq!(g.value(stacked), g.value(out));
    }

    fn stt_setup(front_door: bool) -> (ParamStore, SttParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = SttParams::new(
            &mut store,
            &mut rng,
            "stt",
            SttShape {
                dim: 8,
                heads: 2,
                layers: 1,
                positions: (6, 3),
                front_door_input: front_door,
            },
        )
        .unwrap();
        (store, p)
    }

    #[test]
    fn output_widths_and_padding_invariance() {
        let (store, p) = stt_setup(true);
        let qv = Array2::from_shape_fn((6, 8), |(i, j)| ((i * 8 + j) as f64 * 0.37).sin());
        let app = Array2::from_shape_fn((6, 16), |(i, j)| ((i + 2 * j) as f64 * 0.11).cos());
        let mot = Array2::from_shape_fn((3, 16), |(i, j)| ((3 * i + j) as f64 * 0.23).sin());
        let mask = vec![true, true, true, true, false, false];
        let run = |q: &Array2<f64>| {
            let mut g = Graph::new(&store);
            let qn = g.input(q.clone());
            let a = g.input(app.clone());
            let m = g.input(mot.clone());
            let out = stt_forward(&mut g, qn, &mask, a, m, &p, &mut Dropout::off()).unwrap();
            assert_eq!(g.shape(out.visual), (1, 16));
            assert_eq!(g.shape(out.linguistic), (1, 16));
            (g.value(out.visual).clone(), g.value(out.linguistic).clone())
        };
        let base = run(&qv);
        let mut swapped = qv.clone();
        for j in 0..8 {
            swapped.swap([4, j], [5, j]);
            swapped[[4, j]] += 3.0;
        }
        let other = run(&swapped);
        for (a, b) in base.0.iter().zip(other.0.iter()).chain(base.1.iter().zip(other.1.iter())) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(run(&qv), base);
    }

    #[test]
    fn entry_projection_is_required_for_double_width() {
        let (store, p) = stt_setup(false);
        let mut g = Graph::new(&store);
        let q = g.input(Array2::zeros((2, 8)));
        let a = g.input(Array2::zeros((6, 16)));
        let m = g.input(Array2::zeros((3, 16)));
        assert!(stt_forward(&mut g, q, &[true, true], a, m, &p, &mut Dropout::off()).is_err());
    }
}
