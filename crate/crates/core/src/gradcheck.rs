//! Finite-difference gradient checks for registered components.
//!
//! Each component is instantiated at toy size with seeded parameters and
//! inputs. Non-scalar outputs are reduced with a fixed random weighting so
//! every output entry contributes. Analytic gradients from the tape are
//! compared with central differences on a seeded subsample of parameter and
//! input coordinates.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::causal::{front_door_features, lgcam, LgcamParams};
use crate::data::prepare;
use crate::error::{validation, Result};
use crate::features::TaskType;
use crate::fusion::{adaptive_fusion, condition_visual, semantic_gcn, AlffParams, ConditionParams, GcnParams};
use crate::heads::{count_loss, hinge_loss, open_ended_loss, HeadParams};
use crate::model::CausalVqaModel;
use crate::nn::{Dropout, Linear};
use crate::params::{normal, Mat, ParamId, ParamStore};
use crate::stt::{mma, mtb_layer, stt_forward, MmaOptions, MmaParams, MtbStack, SttParams, SttShape};
use crate::synthetic::{generate_synthetic, SyntheticTaskSpec};
use crate::train::config::TrainConfig;

pub const STEP: f64 = 1e-5;
pub const MIN_COORDINATES: usize = 200;
/// Sample size when a component has more coordinates than this.
pub const MAX_COORDINATES: usize = 256;
/// Denominator floor for the relative error. Coordinates whose true
/// derivative is exactly zero (a bias shared by every hinge candidate, say)
/// still show central-difference roundoff of order `ε·|f|/h`.
pub const REL_FLOOR: f64 = 1e-5;

pub const COMPONENTS: [&str; 13] = [
    "linear_projection",
    "lgcam",
    "front_door_features",
    "mma",
    "mtb_layer",
    "stt_forward",
    "semantic_gcn",
    "adaptive_fusion",
    "condition_visual",
    "open_ended_loss",
    "hinge_loss",
    "count_loss",
    "full_model",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub component: String,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

struct Case {
    store: ParamStore,
    inputs: Vec<Mat>,
    build: Build,
}

#[derive(Clone, Copy)]
enum Coord {
    Param(ParamId, usize),
    Input(usize, usize),
}

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    normal(rng, r, c, 1.0)
}

fn eval_raw(case: &Case) -> Result<Mat> {
    let mut g = Graph::new(&case.store);
    let ids: Vec<NodeId> = case.inputs.iter().map(|m| g.input(m.clone())).collect();
    let out = (case.build)(&mut g, &ids)?;
    Ok(g.value(out).clone())
}

/// Scalar objective: `Σ out ⊙ weights`.
fn objective(case: &Case, weights: &Mat) -> Result<f64> {
    let mut g = Graph::new(&case.store);
    let ids: Vec<NodeId> = case.inputs.iter().map(|m| g.input(m.clone())).collect();
    let out = (case.build)(&mut g, &ids)?;
    Ok((g.value(out) * weights).sum())
}

fn check_case(name: &str, mut case: Case, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00c0_ffee);
    let probe = eval_raw(&case)?;
    let weights = randn(&mut rng, probe.nrows(), probe.ncols());

    // analytic
    let mut g = Graph::new(&case.store);
    let ids: Vec<NodeId> = case.inputs.iter().map(|m| g.input(m.clone())).collect();
    let out = (case.build)(&mut g, &ids)?;
    let w = g.input(weights.clone());
    let weighted = g.mul(out, w);
    let root = g.sum_all(weighted);
    let grads = g.backward(root);
    let mut param_grads: Vec<Option<Mat>> = vec![None; case.store.len()];
    grads.accumulate_into(&mut param_grads, 1.0);
    let input_grads: Vec<Mat> = ids
        .iter()
        .zip(&case.inputs)
        .map(|(&id, m)| grads.wrt(id).cloned().unwrap_or_else(|| Array2::zeros(m.dim())))
        .collect();
    drop(g);

    let mut coords = Vec::new();
    for (pid, _, v) in case.store.iter() {
        coords.extend((0..v.len()).map(|k| Coord::Param(pid, k)));
    }
    for (i, m) in case.inputs.iter().enumerate() {
        coords.extend((0..m.len()).map(|k| Coord::Input(i, k)));
    }
    coords.shuffle(&mut rng);
    coords.truncate(MAX_COORDINATES);

    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for &c in &coords {
        let (analytic, numeric) = match c {
            Coord::Param(pid, k) => {
                let cols = case.store.get(pid).ncols();
                let (r, col) = (k / cols, k % cols);
                let a = param_grads[pid.index()].as_ref().map_or(0.0, |m| m[[r, col]]);
                let orig = case.store.get(pid)[[r, col]];
                case.store.get_mut(pid)[[r, col]] = orig + STEP;
                let fp = objective(&case, &weights)?;
                case.store.get_mut(pid)[[r, col]] = orig - STEP;
                let fm = objective(&case, &weights)?;
                case.store.get_mut(pid)[[r, col]] = orig;
                (a, (fp - fm) / (2.0 * STEP))
            }
            Coord::Input(i, k) => {
                let cols = case.inputs[i].ncols();
                let (r, col) = (k / cols, k % cols);
                let a = input_grads[i][[r, col]];
                let orig = case.inputs[i][[r, col]];
                case.inputs[i][[r, col]] = orig + STEP;
                let fp = objective(&case, &weights)?;
                case.inputs[i][[r, col]] = orig - STEP;
                let fm = objective(&case, &weights)?;
                case.inputs[i][[r, col]] = orig;
                (a, (fp - fm) / (2.0 * STEP))
            }
        };
        let abs = (analytic - numeric).abs();
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR));
    }
    Ok(GradReport {
        component: name.to_string(),
        coordinates: coords.len(),
        max_rel_err: max_rel,
        max_abs_err: max_abs,
    })
}

fn build_case(component: &str, seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let case = match component {
        "linear_projection" => {
            let lin = Linear::new(&mut store, &mut rng, "proj", 16, 8, true);
            Case {
                inputs: vec![randn(&mut rng, 6, 16)],
                build: Box::new(move |g, x| Ok(lin.forward(g, x[0]))),
                store,
            }
        }
        "lgcam" => {
            let p = LgcamParams::new(&mut store, &mut rng, "lgcam", 4);
            Case {
                inputs: vec![randn(&mut rng, 3, 4), randn(&mut rng, 3, 4)],
                build: Box::new(move |g, x| Ok(lgcam(g, x[0], x[1], &p)?.output)),
                store,
            }
        }
        "front_door_features" => {
            let p = LgcamParams::new(&mut store, &mut rng, "lgcam", 4);
            let cb = store.add("codebook", randn(&mut rng, 5, 4));
            Case {
                inputs: vec![randn(&mut rng, 3, 4)],
                build: Box::new(move |g, x| {
                    let c = g.param(cb);
                    Ok(front_door_features(g, x[0], c, &p, 11)?.features)
                }),
                store,
            }
        }
        "mma" => {
            let p = MmaParams::new(&mut store, &mut rng, "mma", 8, 2)?;
            let mask = vec![true, true, false, true];
            Case {
                inputs: vec![randn(&mut rng, 3, 8), randn(&mut rng, 4, 8)],
                build: Box::new(move |g, x| Ok(mma(g, x[0], x[1], &p, Some(&mask), MmaOptions::default(), None))),
                store,
            }
        }
        "mtb_layer" => {
            let stack = MtbStack::new(&mut store, &mut rng, "mtb", 8, 2, 1)?;
            Case {
                inputs: vec![randn(&mut rng, 3, 8), randn(&mut rng, 4, 8)],
                build: Box::new(move |g, x| {
                    Ok(mtb_layer(g, x[0], x[1], &stack.layers[0], None, &mut Dropout::off(), None))
                }),
                store,
            }
        }
        "stt_forward" => {
            let p = SttParams::new(
                &mut store,
                &mut rng,
                "stt",
                SttShape {
                    dim: 8,
                    heads: 2,
                    layers: 1,
                    positions: (4, 2),
                    front_door_input: true,
                },
            )?;
            let mask = vec![true, true, true, false];
            Case {
                inputs: vec![randn(&mut rng, 4, 8), randn(&mut rng, 4, 16), randn(&mut rng, 2, 16)],
                build: Box::new(move |g, x| {
                    let o = stt_forward(g, x[0], &mask, x[1], x[2], &p, &mut Dropout::off())?;
                    Ok(g.concat_cols(&[o.visual, o.linguistic]))
                }),
                store,
            }
        }
        "semantic_gcn" => {
            let p = GcnParams::new(&mut store, &mut rng, "gcn", 10, 2);
            Case {
                inputs: vec![randn(&mut rng, 4, 10)],
                build: Box::new(move |g, x| Ok(semantic_gcn(g, x[0], &p))),
                store,
            }
        }
        "adaptive_fusion" => {
            let p = AlffParams::new(&mut store, &mut rng, "alff", 4, 4);
            Case {
                inputs: vec![randn(&mut rng, 4, 8)],
                build: Box::new(move |g, x| Ok(adaptive_fusion(g, x[0], Some(&p), None)?.joint)),
                store,
            }
        }
        "condition_visual" => {
            let p = ConditionParams::new(&mut store, &mut rng, "cond", 6);
            Case {
                inputs: vec![randn(&mut rng, 1, 12), randn(&mut rng, 1, 12)],
                build: Box::new(move |g, x| Ok(condition_visual(g, x[0], x[1], &p)?.output)),
                store,
            }
        }
        "open_ended_loss" => {
            let head = HeadParams::new(&mut store, &mut rng, "head", TaskType::OpenEnded, 16, 10, 5)?;
            Case {
                inputs: vec![randn(&mut rng, 1, 8), randn(&mut rng, 1, 8)],
                build: Box::new(move |g, x| {
                    let logits = head.forward(g, x[0], x[1])?;
                    open_ended_loss(g, logits, 2)
                }),
                store,
            }
        }
        "hinge_loss" => {
            let head = HeadParams::new(&mut store, &mut rng, "head", TaskType::MultiChoice, 16, 10, 1)?;
            let margin = head.margin;
            Case {
                inputs: (0..3).map(|_| randn(&mut rng, 1, 16)).collect(),
                build: Box::new(move |g, x| {
                    let half = g.shape(x[0]).1 / 2;
                    let scores = x
                        .iter()
                        .map(|&c| {
                            let a = g.slice_cols(c, 0, half);
                            let b = g.slice_cols(c, half, half);
                            head.forward(g, a, b)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    // a margin wide enough that every pair is active
                    hinge_loss(g, &scores, 1, margin + 10.0)
                }),
                store,
            }
        }
        "count_loss" => {
            let head = HeadParams::new(&mut store, &mut rng, "head", TaskType::Counting, 16, 12, 1)?;
            Case {
                inputs: vec![randn(&mut rng, 1, 8), randn(&mut rng, 1, 8)],
                build: Box::new(move |g, x| {
                    let x = head.forward(g, x[0], x[1])?;
                    Ok(count_loss(g, x, 3.0))
                }),
                store,
            }
        }
        "full_model" => {
            let spec = SyntheticTaskSpec {
                num_samples: 8,
                feature_dims: (6, 5),
                clip_shape: (2, 2),
                seed,
                ..Default::default()
            };
            let (m, r) = generate_synthetic(&spec)?;
            let data = prepare(&m, &r, None, "train")?;
            let config = TrainConfig {
                dim: 8,
                heads: 2,
                layers: 1,
                codebook_k: 3,
                kmeans_restarts: 1,
                seed,
                ..TrainConfig::toy()
            };
            let model = CausalVqaModel::new(&config, &data.shape, data.confounders.prior_weights())?;
            let sample = data.samples[0].clone();
            let store = model.store.clone();
            Case {
                store,
                inputs: vec![],
                build: Box::new(move |g, _| {
                    let mut sampler = ChaCha8Rng::seed_from_u64(5);
                    let out = model.forward(g, &sample, &mut sampler, &mut Dropout::off())?;
                    model.loss(g, &out, sample.label)
                }),
            }
        }
        other => {
            return Err(validation(format!(
                "unknown gradcheck component {other}; known: {}",
                COMPONENTS.join(", ")
            )))
        }
    };
    Ok(case)
}

/// Runs the finite-difference check for one registered component.
pub fn grad_check(component: &str, seed: u64) -> Result<GradReport> {
    let case = build_case(component, seed)?;
    check_case(component, case, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_is_exact() {
        let r = grad_check("linear_projection", 0).unwrap();
        assert!(r.coordinates >= MIN_COORDINATES);
        assert!(r.max_rel_err <= 1e-7, "{r:?}");
    }

    #[test]
    fn unknown_component() {
        assert!(grad_check("nope", 0).is_err());
    }
}
