//! Synthetic bias-probe benchmark.
//!
//! Each sample has a latent event (rendered as the question's verb) and a
//! latent visual motif (planted in the features). The answer is
//! `(event + motif) mod A`, so neither modality alone determines it. A
//! nuisance colour word is appended to every question; in training data it
//! names the answer with probability `bias_strength`, while the `test_anti`
//! split never lets it name the answer.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::features::{DatasetManifest, FeatureRecord, LatentInfo, ManifestEntry, TaskType};

pub const EVENT_VERBS: [&str; 12] = [
    "hit", "crossed", "stopped", "turned", "parked", "overtook", "collided", "reversed", "skidded",
    "swerved", "braked", "merged",
];

const SUBJECTS: [&str; 8] = [
    "car", "truck", "bus", "cyclist", "pedestrian", "van", "taxi", "scooter",
];
const OBJECTS: [&str; 8] = [
    "pole", "barrier", "curb", "hydrant", "cone", "wall", "bench", "median",
];
pub const NUISANCE_WORDS: [&str; 12] = [
    "red", "blue", "green", "white", "black", "silver", "yellow", "orange", "gray", "brown",
    "purple", "pink",
];
const CANDIDATE_NAMES: [&str; 12] = [
    "collision", "near miss", "lane change", "sudden halt", "u turn", "rollover", "rear end",
    "side swipe", "pileup", "no incident", "blocked lane", "wrong way",
];

pub const SPLIT_TRAIN: &str = "train";
pub const SPLIT_IID: &str = "test_iid";
pub const SPLIT_ANTI: &str = "test_anti";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub num_samples: usize,
    /// Distinct subject and object nouns used by the question templates.
    pub vocab_size: usize,
    pub answer_space: usize,
    pub bias_strength: f64,
    /// `(N_clips, T_frames)`
    pub clip_shape: (usize, usize),
    /// `(d_app_raw, d_mot_raw)`
    pub feature_dims: (usize, usize),
    pub seed: u64,
    #[serde(default)]
    pub task_type: TaskType,
    /// Train / test_iid / test_anti fractions.
    #[serde(default = "default_ratios")]
    pub split_ratios: (f64, f64, f64),
    /// Standard deviation of per-frame feature noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_ratios() -> (f64, f64, f64) {
    (0.5, 0.25, 0.25)
}

fn default_noise() -> f64 {
    0.5
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            num_samples: 64,
            vocab_size: 8,
            answer_space: 4,
            bias_strength: 0.9,
            clip_shape: (4, 2),
            feature_dims: (48, 32),
            seed: 0,
            task_type: TaskType::OpenEnded,
            split_ratios: default_ratios(),
            noise: default_noise(),
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples < 4 {
            return Err(validation("num_samples must be at least 4"));
        }
        if self.vocab_size == 0 {
            return Err(validation("vocab_size must be positive"));
        }
        if !(2..=EVENT_VERBS.len()).contains(&self.answer_space) {
            return Err(validation(format!(
                "answer_space must be in 2..={}",
                EVENT_VERBS.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.bias_strength) {
            return Err(validation("bias_strength must lie in [0, 1]"));
        }
        let (n, t) = self.clip_shape;
        let (da, dm) = self.feature_dims;
        if n == 0 || t == 0 || da == 0 || dm == 0 {
            return Err(validation("clip_shape and feature_dims must be positive"));
        }
        let (a, b, c) = self.split_ratios;
        if a <= 0.0 || b <= 0.0 || c <= 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(validation("split ratios must be positive and sum to 1"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(validation("noise must be finite and nonnegative"));
        }
        Ok(())
    }
}

fn noun(pool: &[&str], i: u32) -> String {
    let i = i as usize;
    if i < pool.len() {
        pool[i].to_string()
    } else {
        format!("{}{}", pool[i % pool.len()], i / pool.len())
    }
}

/// Renders the question text for a latent assignment.
pub fn render_question(latent: &LatentInfo) -> String {
    format!(
        "why the {} {} the {} near the {} kiosk",
        noun(&SUBJECTS, latent.subject),
        EVENT_VERBS[latent.event as usize],
        noun(&OBJECTS, latent.object),
        NUISANCE_WORDS[latent.nuisance as usize],
    )
}

fn answer_of(latent: &LatentInfo, answer_space: usize) -> u32 {
    (latent.event + latent.motif) % answer_space as u32
}

fn label_for(task: TaskType, class: u32) -> u32 {
    match task {
        TaskType::Counting => class + 1,
        TaskType::OpenEnded | TaskType::MultiChoice => class,
    }
}

fn class_of(task: TaskType, answer: u32) -> u32 {
    match task {
        TaskType::Counting => answer - 1,
        TaskType::OpenEnded | TaskType::MultiChoice => answer,
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Generates a biased corpus with `train`, `test_iid` and `test_anti` splits.
pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<(DatasetManifest, Vec<FeatureRecord>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let a = spec.answer_space;
    let (n_clips, t_frames) = spec.clip_shape;
    let (d_app, d_mot) = spec.feature_dims;

    let app_patterns: Vec<Array1<f64>> = (0..a)
        .map(|_| Array1::from_shape_fn(d_app, |_| gaussian(&mut rng)))
        .collect();
    let mot_patterns: Vec<Array1<f64>> = (0..a)
        .map(|_| Array1::from_shape_fn(d_mot, |_| gaussian(&mut rng)))
        .collect();

    let mut entries = Vec::with_capacity(spec.num_samples);
    let mut records = Vec::with_capacity(spec.num_samples);
    for i in 0..spec.num_samples {
        let event = rng.random_range(0..a as u32);
        let motif = rng.random_range(0..a as u32);
        let mut latent = LatentInfo {
            event,
            motif,
            nuisance: 0,
            subject: rng.random_range(0..spec.vocab_size as u32),
            object: rng.random_range(0..spec.vocab_size as u32),
        };
        let class = answer_of(&latent, a);
        latent.nuisance = if rng.random::<f64>() < spec.bias_strength {
            class
        } else {
            rng.random_range(0..a as u32)
        };

        let noise = spec.noise;
        let m = motif as usize;
        let appearance = Array3::from_shape_fn((n_clips, t_frames, d_app), |(_, _, c)| {
            (app_patterns[m][c] + noise * gaussian(&mut rng)) as f32
        });
        let motion = Array2::from_shape_fn((n_clips, d_mot), |(_, c)| {
            (mot_patterns[m][c] + noise * gaussian(&mut rng)) as f32
        });
        let record_id = format!("s{i:05}");
        records.push(FeatureRecord {
            record_id: record_id.clone(),
            appearance,
            motion,
        });

        let candidates = (spec.task_type == TaskType::MultiChoice)
            .then(|| CANDIDATE_NAMES[..a].iter().map(|s| s.to_string()).collect());
        entries.push(ManifestEntry {
            record_id,
            question: render_question(&latent),
            candidates,
            answer: label_for(spec.task_type, class),
            latent: Some(latent),
        });
    }

    let manifest = DatasetManifest {
        task_type: spec.task_type,
        entries,
        splits: BTreeMap::new(),
        feature_dims: spec.feature_dims,
    };
    let manifest = make_bias_splits(&manifest, spec.seed.wrapping_add(1), spec.split_ratios)?;
    Ok((manifest, records))
}

/// Answer-space size implied by the manifest's latent annotations.
fn answer_space_of(manifest: &DatasetManifest) -> usize {
    match manifest.task_type {
        TaskType::MultiChoice => manifest.entries[0].candidates.as_ref().map_or(0, Vec::len),
        _ => {
            manifest
                .entries
                .iter()
                .filter_map(|e| e.latent.as_ref())
                .map(|l| l.event.max(l.motif).max(l.nuisance))
                .max()
                .unwrap_or(0) as usize
                + 1
        }
    }
}

/// Partitions the manifest into `train`, `test_iid` and `test_anti`.
///
/// `test_anti` entries get a fresh nuisance word drawn uniformly from the
/// words that do not name the answer, and their question text is rewritten.
pub fn make_bias_splits(
    manifest: &DatasetManifest,
    seed: u64,
    ratios: (f64, f64, f64),
) -> Result<DatasetManifest> {
    let n = manifest.entries.len();
    if n < 3 {
        return Err(validation(format!("{n} samples are too few to split three ways")));
    }
    if manifest.entries.iter().any(|e| e.latent.is_none()) {
        return Err(validation("bias splits need latent annotations on every entry"));
    }
    let n_train = (n as f64 * ratios.0).floor() as usize;
    let n_iid = (n as f64 * ratios.1).floor() as usize;
    if n_train == 0 || n_iid == 0 || n_train + n_iid >= n {
        return Err(validation(format!("{n} samples are too few for ratios {ratios:?}")));
    }
    let answer_space = answer_space_of(manifest).max(2);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut train = order[..n_train].to_vec();
    let mut iid = order[n_train..n_train + n_iid].to_vec();
    let mut anti = order[n_train + n_iid..].to_vec();
    train.sort_unstable();
    iid.sort_unstable();
    anti.sort_unstable();

    let mut out = manifest.clone();
    for &i in &anti {
        let entry = &mut out.entries[i];
        let class = class_of(manifest.task_type, entry.answer);
        let latent = entry.latent.as_mut().expect("checked above");
        let pick = rng.random_range(0..answer_space as u32 - 1);
        latent.nuisance = if pick >= class { pick + 1 } else { pick };
        entry.question = render_question(latent);
    }
    out.splits = BTreeMap::from([
        (SPLIT_TRAIN.to_string(), train),
        (SPLIT_IID.to_string(), iid),
        (SPLIT_ANTI.to_string(), anti),
    ]);
    Ok(out)
}

/// Fraction of entries in `split` whose nuisance word names the answer.
pub fn nuisance_cooccurrence(manifest: &DatasetManifest, split: &[usize]) -> f64 {
    let hits = split
        .iter()
        .filter(|&&i| {
            let e = &manifest.entries[i];
            let l = e.latent.as_ref().expect("latent annotations");
            l.nuisance == class_of(manifest.task_type, e.answer)
        })
        .count();
    hits as f64 / split.len() as f64
}

/// Plug-in mutual information (nats) between nuisance word and label.
pub fn nuisance_label_mi(manifest: &DatasetManifest, split: &[usize]) -> f64 {
    let mut joint: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    let mut pn: BTreeMap<u32, f64> = BTreeMap::new();
    let mut py: BTreeMap<u32, f64> = BTreeMap::new();
    let total = split.len() as f64;
    for &i in split {
        let e = &manifest.entries[i];
        let nu = e.latent.as_ref().expect("latent annotations").nuisance;
        *joint.entry((nu, e.answer)).or_default() += 1.0 / total;
        *pn.entry(nu).or_default() += 1.0 / total;
        *py.entry(e.answer).or_default() += 1.0 / total;
    }
    joint
        .iter()
        .map(|(&(nu, y), &p)| p * (p / (pn[&nu] * py[&y])).ln())
        .sum()
}
