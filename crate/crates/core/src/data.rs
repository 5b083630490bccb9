//! Turns a manifest plus feature records into model-ready samples.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::causal::{build_confounder_vocabulary, ConfounderVocabulary};
use crate::error::{validation, Result};
use crate::features::{DatasetManifest, FeatureRecord, TaskType};
use crate::linguistic::{build_bundle, tokenize, QuestionBundle, RuleParser, Vocabulary};
use crate::params::Mat;

/// One question with its clip features. Multi-choice samples carry one
/// bundle per candidate; the others carry exactly one.
#[derive(Clone, Debug)]
pub struct Sample {
    pub record_id: String,
    pub bundles: Vec<QuestionBundle>,
    /// `(N·T) × d_app` raw appearance rows, clip-major.
    pub appearance: Mat,
    /// `N × d_mot` raw motion rows.
    pub motion: Mat,
    pub n_clips: usize,
    pub frames_per_clip: usize,
    pub label: u32,
}

/// Data-dependent sizes the model is built against.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataShape {
    pub task_type: TaskType,
    pub vocab_size: usize,
    pub answer_space: usize,
    pub max_question_len: usize,
    pub raw_dims: (usize, usize),
    /// `(N, T)`
    pub clip_shape: (usize, usize),
}

pub struct PreparedData {
    pub shape: DataShape,
    pub vocab: Vocabulary,
    pub samples: Vec<Sample>,
    pub splits: BTreeMap<String, Vec<usize>>,
    pub confounders: ConfounderVocabulary,
}

impl PreparedData {
    pub fn split(&self, name: &str) -> Result<&[usize]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| validation(format!("unknown split {name}")))
    }
}

/// Builds the vocabulary from the training split's questions and all
/// answer candidates.
pub fn build_vocabulary(manifest: &DatasetManifest, train_split: &str) -> Result<Vocabulary> {
    let train = manifest.split(train_split)?;
    let mut texts: Vec<&str> = train.iter().map(|&i| manifest.entries[i].question.as_str()).collect();
    for e in &manifest.entries {
        if let Some(c) = &e.candidates {
            texts.extend(c.iter().map(String::as_str));
        }
    }
    Ok(Vocabulary::build(texts))
}

/// Prepares every manifest entry. `records` must be in entry order, as
/// returned by [`crate::features::load_records`].
pub fn prepare(
    manifest: &DatasetManifest,
    records: &[FeatureRecord],
    vocab: Option<Vocabulary>,
    train_split: &str,
) -> Result<PreparedData> {
    manifest.validate()?;
    if records.len() != manifest.entries.len() {
        return Err(validation(format!(
            "{} records for {} manifest entries",
            records.len(),
            manifest.entries.len()
        )));
    }
    if manifest.entries.is_empty() {
        return Err(validation("manifest has no entries"));
    }
    let vocab = match vocab {
        Some(v) => v,
        None => build_vocabulary(manifest, train_split)?,
    };
    let clip_shape = (records[0].n_clips(), records[0].frames_per_clip());
    let parser = RuleParser;
    let mut samples = Vec::with_capacity(records.len());
    for (e, r) in manifest.entries.iter().zip(records) {
        if r.record_id != e.record_id {
            return Err(validation(format!(
                "record {} does not match entry {}",
                r.record_id, e.record_id
            )));
        }
        r.validate()?;
        if (r.n_clips(), r.frames_per_clip()) != clip_shape || r.dims() != manifest.feature_dims {
            return Err(validation(format!(
                "record {} has clip shape {:?} and dims {:?}, expected {clip_shape:?} and {:?}",
                r.record_id,
                (r.n_clips(), r.frames_per_clip()),
                r.dims(),
                manifest.feature_dims
            )));
        }
        let bundles = match &e.candidates {
            Some(c) if manifest.task_type == TaskType::MultiChoice => c
                .iter()
                .map(|cand| build_bundle(&e.question, Some(cand), &vocab, &parser))
                .collect(),
            _ => vec![build_bundle(&e.question, None, &vocab, &parser)],
        };
        samples.push(Sample {
            record_id: e.record_id.clone(),
            bundles,
            appearance: r.appearance_rows(),
            motion: r.motion_rows(),
            n_clips: clip_shape.0,
            frames_per_clip: clip_shape.1,
            label: e.answer,
        });
    }

    let answer_space = match manifest.task_type {
        TaskType::MultiChoice => samples.iter().map(|s| s.bundles.len()).max().unwrap_or(0),
        TaskType::OpenEnded => manifest.entries.iter().map(|e| e.answer as usize + 1).max().unwrap_or(0).max(2),
        TaskType::Counting => 1,
    };
    let max_question_len = samples
        .iter()
        .flat_map(|s| &s.bundles)
        .map(|b| b.q.padded_len())
        .max()
        .unwrap_or(1);

    let train = manifest.split(train_split)?;
    if train.is_empty() {
        return Err(validation(format!("split {train_split} is empty")));
    }
    let train_bundles: Vec<QuestionBundle> = train.iter().map(|&i| samples[i].bundles[0].clone()).collect();
    let confounders = build_confounder_vocabulary(&train_bundles)?;

    Ok(PreparedData {
        shape: DataShape {
            task_type: manifest.task_type,
            vocab_size: vocab.len(),
            answer_space,
            max_question_len,
            raw_dims: manifest.feature_dims,
            clip_shape,
        },
        vocab,
        samples,
        splits: manifest.splits.clone(),
        confounders,
    })
}

/// Longest tokenised question plus candidate in the manifest.
pub fn max_tokens(manifest: &DatasetManifest) -> usize {
    manifest
        .entries
        .iter()
        .map(|e| {
            let q = tokenize(&e.question).len().max(1);
            let c = e
                .candidates
                .iter()
                .flatten()
                .map(|c| tokenize(c).len())
                .max()
                .unwrap_or(0);
            q + c
        })
        .max()
        .unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_synthetic, SyntheticTaskSpec};

    #[test]
    fn prepares_synthetic_open_ended() {
        let (m, r) = generate_synthetic(&SyntheticTaskSpec::default()).unwrap();
        let d = prepare(&m, &r, None, "train").unwrap();
        assert_eq!(d.samples.len(), 64);
        assert_eq!(d.shape.answer_space, 4);
        assert_eq!(d.shape.clip_shape, (4, 2));
        assert_eq!(d.samples[0].appearance.dim(), (8, 48));
        assert_eq!(d.shape.max_question_len, max_tokens(&m));
    }

    #[test]
    fn multi_choice_has_one_bundle_per_candidate() {
        let spec = SyntheticTaskSpec {
            task_type: TaskType::MultiChoice,
            ..Default::default()
        };
        let (m, r) = generate_synthetic(&spec).unwrap();
        let d = prepare(&m, &r, None, "train").unwrap();
        assert!(d.samples.iter().all(|s| s.bundles.len() == 4));
        assert_eq!(d.shape.answer_space, 4);
        // candidates only extend the whole-question stream
        let b = &d.samples[0].bundles;
        assert_ne!(b[0].q, b[1].q);
        assert_eq!(b[0].qs, b[1].qs);
    }

    #[test]
    fn mismatched_records_rejected() {
        let (m, mut r) = generate_synthetic(&SyntheticTaskSpec::default()).unwrap();
        r.pop();
        assert!(prepare(&m, &r, None, "train").is_err());
    }
}
