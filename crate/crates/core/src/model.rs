//! The full question-answering model and its ablation wirings.

use ndarray::{concatenate, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId};
use crate::causal::{front_door_with_rng, kmeans, LgcamParams};
use crate::data::{DataShape, Sample};
use crate::error::{validation, Result};
use crate::features::TaskType;
use crate::fusion::{adaptive_fusion, condition_visual, semantic_gcn, AlffParams, ConditionParams, GcnParams};
use crate::heads::{argmax, count_loss, hinge_loss, open_ended_loss, round_count, HeadParams};
use crate::linguistic::LinguisticEncoder;
use crate::nn::{Dropout, Linear};
use crate::params::{normal, Mat, ParamId, ParamStore};
use crate::stt::{prepare_visual, stt_forward_prepared, SttOutputs, SttParams, SttShape};
use crate::train::config::{AblationSpec, PriorMode, TrainConfig};
use crate::visual::{project_rows, ProjectionParams};

/// Which parts of the model are active, derived from an [`AblationSpec`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Wiring {
    /// 4 with role parsing, 1 (whole question only) without.
    pub streams: usize,
    pub back_door: bool,
    pub front_door: bool,
    pub graph: bool,
    pub gating: bool,
    pub prior_weighted: bool,
}

/// Resolves ablation flags into a wiring. Disabling CVLR turns off both
/// causal paths.
pub fn apply_ablation(config: &TrainConfig) -> Result<Wiring> {
    config.validate()?;
    let a: AblationSpec = config.ablation;
    let back_door = a.lbci_active();
    Ok(Wiring {
        streams: if a.disable_hsrp { 1 } else { 4 },
        back_door,
        front_door: a.vfci_active(),
        graph: !a.disable_sge && config.gcn_layers > 0,
        gating: !a.disable_alff,
        prior_weighted: back_door && config.prior_mode == PriorMode::PriorWeighted,
    })
}

#[derive(Clone, Debug)]
pub struct FrontDoorParams {
    pub codebook_appearance: ParamId,
    pub codebook_motion: ParamId,
    pub lgcam_appearance: LgcamParams,
    pub lgcam_motion: LgcamParams,
}

#[derive(Clone, Debug)]
pub struct Modules {
    pub encoder: LinguisticEncoder,
    pub projection: ProjectionParams,
    pub front_door: Option<FrontDoorParams>,
    /// One entry when streams share stacks, otherwise one per stream.
    pub stt: Vec<SttParams>,
    pub gcn: GcnParams,
    pub alff: Option<AlffParams>,
    pub condition: ConditionParams,
    pub head: HeadParams,
}

pub struct CausalVqaModel {
    pub config: TrainConfig,
    pub shape: DataShape,
    pub wiring: Wiring,
    pub store: ParamStore,
    pub modules: Modules,
    /// Per-stream excitation scales for the prior-weighted mode.
    pub prior_weights: [f64; 4],
}

/// Prediction for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Raw head outputs: logits, per-candidate scores, or the count estimate.
    pub raw: Vec<f64>,
    /// Predicted class, candidate index, or rounded count.
    pub answer: u32,
}

impl CausalVqaModel {
    pub fn new(config: &TrainConfig, shape: &DataShape, prior_weights: [f64; 4]) -> Result<Self> {
        let wiring = apply_ablation(config)?;
        if let Some(t) = config.task_type {
            if t != shape.task_type {
                return Err(validation(format!(
                    "config expects {t:?} but the data is {:?}",
                    shape.task_type
                )));
            }
        }
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = LinguisticEncoder::new(
            &mut store,
            &mut rng,
            "ling",
            shape.vocab_size,
            d,
            config.heads,
            config.encoder_layers,
            shape.max_question_len,
        );
        let projection = ProjectionParams::new(&mut store, &mut rng, shape.raw_dims, d);
        let front_door = wiring.front_door.then(|| FrontDoorParams {
            codebook_appearance: store.add("causal.codebook_app", normal(&mut rng, config.codebook_k, d, 1.0)),
            codebook_motion: store.add("causal.codebook_mot", normal(&mut rng, config.codebook_k, d, 1.0)),
            lgcam_appearance: LgcamParams::new(&mut store, &mut rng, "causal.lgcam_app", d),
            lgcam_motion: LgcamParams::new(&mut store, &mut rng, "causal.lgcam_mot", d),
        });
        let (n, t) = shape.clip_shape;
        let stt_shape = SttShape {
            dim: d,
            heads: config.heads,
            layers: config.layers,
            positions: (n * t, n),
            front_door_input: wiring.front_door,
        };
        let stack_sets = if config.separate_stacks { wiring.streams } else { 1 };
        let stt = (0..stack_sets)
            .map(|s| SttParams::new(&mut store, &mut rng, &format!("stt{s}"), stt_shape))
            .collect::<Result<Vec<_>>>()?;
        let gcn = GcnParams::new(
            &mut store,
            &mut rng,
            "fusion.gcn",
            2 * d,
            if wiring.graph { config.gcn_layers } else { 0 },
        );
        let alff = wiring
            .gating
            .then(|| AlffParams::new(&mut store, &mut rng, "fusion.alff", d, wiring.streams));
        let condition = ConditionParams::new(&mut store, &mut rng, "fusion.cond", d);
        let head = HeadParams::new(
            &mut store,
            &mut rng,
            "head",
            shape.task_type,
            2 * wiring.streams * 2 * d,
            d,
            shape.answer_space,
        )?;
        Ok(Self {
            config: config.clone(),
            shape: shape.clone(),
            wiring,
            store,
            modules: Modules {
                encoder,
                projection,
                front_door,
                stt,
                gcn,
                alff,
                condition,
                head,
            },
            prior_weights,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    fn project_values(&self, lin: &Linear, rows: &Mat) -> Mat {
        let mut out = rows.dot(self.store.get(lin.weight));
        if let Some(b) = lin.bias {
            out += self.store.get(b);
        }
        out
    }

    /// Initialises both codebooks by K-means over the projected visual rows
    /// of `samples`. A no-op when the front-door path is off.
    pub fn init_codebooks(&mut self, samples: &[&Sample]) -> Result<()> {
        let Some(fd) = self.modules.front_door.clone() else {
            return Ok(());
        };
        if samples.is_empty() {
            return Err(validation("codebook initialisation needs training samples"));
        }
        let proj = &self.modules.projection;
        let app: Vec<Mat> = samples.iter().map(|s| self.project_values(&proj.appearance, &s.appearance)).collect();
        let mot: Vec<Mat> = samples.iter().map(|s| self.project_values(&proj.motion, &s.motion)).collect();
        let stack = |parts: &[Mat]| {
            let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
            concatenate(Axis(0), &views).expect("equal widths")
        };
        let (k, seed, restarts) = (self.config.codebook_k, self.config.seed, self.config.kmeans_restarts);
        let app_fit = kmeans(&stack(&app), k, seed, restarts)?;
        let mot_fit = kmeans(&stack(&mot), k, seed.wrapping_add(1), restarts)?;
        *self.store.get_mut(fd.codebook_appearance) = app_fit.centroids;
        *self.store.get_mut(fd.codebook_motion) = mot_fit.centroids;
        Ok(())
    }

    fn check_sample(&self, sample: &Sample) -> Result<()> {
        let expected = match self.shape.task_type {
            TaskType::MultiChoice => sample.bundles.len() >= 2,
            _ => sample.bundles.len() == 1,
        };
        if !expected {
            return Err(validation(format!(
                "sample {} has {} question bundles for a {:?} model",
                sample.record_id,
                sample.bundles.len(),
                self.shape.task_type
            )));
        }
        if (sample.n_clips, sample.frames_per_clip) != self.shape.clip_shape {
            return Err(validation(format!(
                "sample {} has clip shape {:?}, model expects {:?}",
                sample.record_id,
                (sample.n_clips, sample.frames_per_clip),
                self.shape.clip_shape
            )));
        }
        Ok(())
    }

    /// Head outputs for every question bundle of `sample`: `1 × A` logits
    /// (open-ended) or `1 × 1` scores. Global features for the front-door
    /// path are drawn from `sampler`.
    pub fn forward(
        &self,
        g: &mut Graph,
        sample: &Sample,
        sampler: &mut ChaCha8Rng,
        dropout: &mut Dropout,
    ) -> Result<Vec<NodeId>> {
        self.check_sample(sample)?;
        let m = &self.modules;
        let app_in = g.input(sample.appearance.clone());
        let mot_in = g.input(sample.motion.clone());
        let raw_dims = (g.shape(app_in).1, g.shape(mot_in).1);
        if raw_dims != self.shape.raw_dims {
            return Err(validation(format!(
                "sample {} has raw dims {raw_dims:?}, model expects {:?}",
                sample.record_id, self.shape.raw_dims
            )));
        }
        let vis = project_rows(g, app_in, mot_in, &m.projection, sample.n_clips, sample.frames_per_clip);
        let (app, mot) = match &m.front_door {
            Some(fd) => {
                let cb_a = g.param(fd.codebook_appearance);
                let cb_m = g.param(fd.codebook_motion);
                let a = front_door_with_rng(g, vis.appearance, cb_a, &fd.lgcam_appearance, sampler)?;
                let b = front_door_with_rng(g, vis.motion, cb_m, &fd.lgcam_motion, sampler)?;
                (a.features, b.features)
            }
            None => (vis.appearance, vis.motion),
        };
        let prepared: Vec<(NodeId, NodeId)> = m
            .stt
            .iter()
            .map(|p| prepare_visual(g, app, mot, p))
            .collect::<Result<_>>()?;

        let mut outputs = Vec::with_capacity(sample.bundles.len());
        for bundle in &sample.bundles {
            let streams = &bundle.streams()[..self.wiring.streams];
            let mut stt_out: Vec<SttOutputs> = Vec::with_capacity(streams.len());
            for (k, seq) in streams.iter().enumerate() {
                let q = m.encoder.encode_seq(g, seq, None)?;
                let s = k.min(m.stt.len() - 1);
                let (pa, pm) = prepared[s];
                stt_out.push(stt_forward_prepared(g, q, &seq.mask, pa, pm, &m.stt[s], dropout)?);
            }
            let ling: Vec<NodeId> = stt_out.iter().map(|o| o.linguistic).collect();
            let nodes = g.concat_rows(&ling);
            let nodes = semantic_gcn(g, nodes, &m.gcn);
            let scales = self.wiring.prior_weighted.then(|| &self.prior_weights[..self.wiring.streams]);
            let fused = adaptive_fusion(g, nodes, m.alff.as_ref(), scales)?;
            let conditioned: Vec<NodeId> = stt_out
                .iter()
                .zip(&fused.roles)
                .map(|(o, &l)| condition_visual(g, o.visual, l, &m.condition).map(|c| c.output))
                .collect::<Result<_>>()?;
            let visual = g.concat_cols(&conditioned);
            outputs.push(m.head.forward(g, visual, fused.joint)?);
        }
        Ok(outputs)
    }

    /// Task loss for head outputs produced by [`Self::forward`].
    pub fn loss(&self, g: &mut Graph, outputs: &[NodeId], label: u32) -> Result<NodeId> {
        match self.shape.task_type {
            TaskType::OpenEnded => open_ended_loss(g, outputs[0], label as usize),
            TaskType::MultiChoice => hinge_loss(g, outputs, label as usize, self.modules.head.margin),
            TaskType::Counting => Ok(count_loss(g, outputs[0], label as f64)),
        }
    }

    pub fn decode(&self, g: &Graph, outputs: &[NodeId]) -> Prediction {
        match self.shape.task_type {
            TaskType::OpenEnded => {
                let raw = g.value(outputs[0]).row(0).to_vec();
                Prediction {
                    answer: argmax(&raw) as u32,
                    raw,
                }
            }
            TaskType::MultiChoice => {
                let raw: Vec<f64> = outputs.iter().map(|&o| g.scalar(o)).collect();
                Prediction {
                    answer: argmax(&raw) as u32,
                    raw,
                }
            }
            TaskType::Counting => {
                let x = g.scalar(outputs[0]);
                Prediction {
                    raw: vec![x],
                    answer: round_count(x),
                }
            }
        }
    }

    /// Dropout-free prediction with a front-door sampler seeded from `seed`.
    pub fn predict(&self, sample: &Sample, seed: u64) -> Result<Prediction> {
        let mut g = Graph::new(&self.store);
        let mut sampler = ChaCha8Rng::seed_from_u64(seed);
        let out = self.forward(&mut g, sample, &mut sampler, &mut Dropout::off())?;
        Ok(self.decode(&g, &out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::prepare;
    use crate::synthetic::{generate_synthetic, SyntheticTaskSpec};
    use crate::train::config::VARIANT_NAMES;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            dim: 8,
            heads: 2,
            layers: 1,
            codebook_k: 4,
            kmeans_restarts: 1,
            ..TrainConfig::toy()
        }
    }

    fn data(task: TaskType) -> crate::data::PreparedData {
        let spec = SyntheticTaskSpec {
            num_samples: 12,
            task_type: task,
            feature_dims: (6, 5),
            ..Default::default()
        };
        let (m, r) = generate_synthetic(&spec).unwrap();
        prepare(&m, &r, None, "train").unwrap()
    }

    fn build(config: &TrainConfig, d: &crate::data::PreparedData) -> CausalVqaModel {
        let mut model = CausalVqaModel::new(config, &d.shape, d.confounders.prior_weights()).unwrap();
        let train: Vec<&Sample> = d.split("train").unwrap().iter().map(|&i| &d.samples[i]).collect();
        model.init_codebooks(&train).unwrap();
        model
    }

    #[test]
    fn every_variant_runs_forward_and_backward() {
        let d = data(TaskType::OpenEnded);
        let full = build(&tiny_config(), &d).num_parameters();
        for name in VARIANT_NAMES {
            let mut c = tiny_config();
            c.ablation = AblationSpec::named(name).unwrap();
            let model = build(&c, &d);
            let mut g = Graph::new(&model.store);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let s = &d.samples[0];
            let out = model.forward(&mut g, s, &mut rng, &mut Dropout::off()).unwrap();
            assert_eq!(g.shape(out[0]), (1, d.shape.answer_space));
            let loss = model.loss(&mut g, &out, s.label).unwrap();
            let grads = g.backward(loss);
            assert!(grads.params().count() > 0);
            assert!(model.num_parameters() <= full, "{name}");
            if c.ablation.disable_vfci {
                assert!(model.num_parameters() < full);
            }
        }
    }

    #[test]
    fn graph_ablation_changes_outputs() {
        let d = data(TaskType::OpenEnded);
        let full = build(&tiny_config(), &d);
        let mut c = tiny_config();
        c.ablation.disable_sge = true;
        let no_graph = build(&c, &d);
        let a = full.predict(&d.samples[1], 5).unwrap();
        let b = no_graph.predict(&d.samples[1], 5).unwrap();
        assert_ne!(a.raw, b.raw);
        assert_eq!(full.predict(&d.samples[1], 5).unwrap(), a);
    }

    #[test]
    fn multi_choice_and_counting_heads() {
        let d = data(TaskType::MultiChoice);
        let model = build(&tiny_config(), &d);
        let p = model.predict(&d.samples[0], 1).unwrap();
        assert_eq!(p.raw.len(), 4);
        assert!(p.answer < 4);

        let d = data(TaskType::Counting);
        let model = build(&tiny_config(), &d);
        let p = model.predict(&d.samples[0], 1).unwrap();
        assert!((1..=10).contains(&p.answer));
    }

    #[test]
    fn separate_stacks_and_task_mismatch() {
        let d = data(TaskType::OpenEnded);
        let mut c = tiny_config();
        c.separate_stacks = true;
        let m = build(&c, &d);
        assert_eq!(m.modules.stt.len(), 4);
        m.predict(&d.samples[0], 0).unwrap();
        c.task_type = Some(TaskType::Counting);
        assert!(CausalVqaModel::new(&c, &d.shape, [1.0; 4]).is_err());
    }

    #[test]
    fn wiring_flags() {
        let mut c = tiny_config();
        c.ablation.disable_cvlr = true;
        let w = apply_ablation(&c).unwrap();
        assert!(!w.back_door && !w.front_door);
        let w = apply_ablation(&tiny_config()).unwrap();
        assert_eq!(
            w,
            Wiring {
                streams: 4,
                back_door: true,
                front_door: true,
                graph: true,
                gating: true,
                prior_weighted: false
            }
        );
    }
}
