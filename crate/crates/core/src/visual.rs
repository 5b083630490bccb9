//! Clip segmentation and projection of raw visual features into `d`.

use ndarray::{s, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{validation, Error, Result};
use crate::features::FeatureRecord;
use crate::nn::Linear;
use crate::params::ParamStore;

/// Splits `L × d` frame features into `N` clips of `T = ⌊L/N⌋` frames.
/// Trailing frames beyond `N·T` are dropped.
pub fn segment_clips(frames: &Array2<f32>, n_clips: usize) -> Result<Array3<f32>> {
    let (l, d) = frames.dim();
    if n_clips == 0 {
        return Err(validation("clip count must be positive"));
    }
    if l < n_clips {
        return Err(validation(format!("{l} frames cannot fill {n_clips} clips")));
    }
    let t = l / n_clips;
    let used = frames.slice(s![..n_clips * t, ..]).to_owned();
    Ok(used
        .into_shape_with_order((n_clips, t, d))
        .expect("row-major reshape"))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProjectionParams {
    pub appearance: Linear,
    pub motion: Linear,
}

/// Projected features as graph nodes: appearance `(N·T) × d` (clip-major)
/// and motion `N × d`.
#[derive(Clone, Copy, Debug)]
pub struct VisualFeatures {
    pub appearance: NodeId,
    pub motion: NodeId,
    pub n_clips: usize,
    pub frames_per_clip: usize,
}

impl ProjectionParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        raw_dims: (usize, usize),
        dim: usize,
    ) -> Self {
        Self {
            appearance: Linear::new(store, rng, "visual.app_proj", raw_dims.0, dim, true),
            motion: Linear::new(store, rng, "visual.mot_proj", raw_dims.1, dim, true),
        }
    }

    pub fn raw_dims(&self) -> (usize, usize) {
        (self.appearance.in_dim, self.motion.in_dim)
    }
}

/// Applies the two affine projections to a raw record.
pub fn project_visual(
    g: &mut Graph,
    raw: &FeatureRecord,
    params: &ProjectionParams,
) -> Result<VisualFeatures> {
    if raw.dims() != params.raw_dims() {
        return Err(Error::Validation(format!(
            "record {} has raw dims {:?}, projection expects {:?}",
            raw.record_id,
            raw.dims(),
            params.raw_dims()
        )));
    }
    let app = g.input(raw.appearance_rows());
    let mot = g.input(raw.motion_rows());
    Ok(project_rows(g, app, mot, params, raw.n_clips(), raw.frames_per_clip()))
}

/// Projection of already-flattened raw inputs.
pub fn project_rows(
    g: &mut Graph,
    appearance: NodeId,
    motion: NodeId,
    params: &ProjectionParams,
    n_clips: usize,
    frames_per_clip: usize,
) -> VisualFeatures {
    VisualFeatures {
        appearance: params.appearance.forward(g, appearance),
        motion: params.motion.forward(g, motion),
        n_clips,
        frames_per_clip,
    }
}
