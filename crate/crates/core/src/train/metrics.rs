//! Evaluation metrics: accuracy for classification-style tasks, MSE over
//! rounded counts for counting.

use serde::{Deserialize, Serialize};

use crate::data::PreparedData;
use crate::error::{validation, Result};
use crate::features::TaskType;
use crate::heads::round_count;
use crate::model::{CausalVqaModel, Prediction};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub task_type: TaskType,
    pub count: usize,
    pub accuracy: Option<f64>,
    pub mse: Option<f64>,
}

impl Metrics {
    /// Higher is better: accuracy, or negated MSE.
    pub fn score(&self) -> f64 {
        match (self.accuracy, self.mse) {
            (Some(a), _) => a,
            (None, Some(m)) => -m,
            (None, None) => f64::NEG_INFINITY,
        }
    }
}

pub fn accuracy(predicted: &[u32], labels: &[u32]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != labels.len() {
        return Err(validation("accuracy needs equal, non-empty prediction and label lists"));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// MSE between half-up rounded, clamped predictions and integer labels.
pub fn counting_mse(raw: &[f64], labels: &[u32]) -> Result<f64> {
    if raw.is_empty() || raw.len() != labels.len() {
        return Err(validation("MSE needs equal, non-empty prediction and label lists"));
    }
    let sum: f64 = raw
        .iter()
        .zip(labels)
        .map(|(&x, &y)| (round_count(x) as f64 - y as f64).powi(2))
        .sum();
    Ok(sum / labels.len() as f64)
}

/// Deterministic front-door sampler seed for evaluating entry `index`.
pub fn eval_seed(seed: u64, index: usize) -> u64 {
    seed ^ 0x5eed_e7a1_0000_0000 ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Evaluates `model` on a split with dropout off.
pub fn evaluate(model: &CausalVqaModel, data: &PreparedData, split: &str) -> Result<(Metrics, Vec<Prediction>)> {
    let idx = data.split(split)?;
    if idx.is_empty() {
        return Err(validation(format!("split {split} is empty")));
    }
    let preds: Vec<Prediction> = idx
        .iter()
        .map(|&i| model.predict(&data.samples[i], eval_seed(model.config.seed, i)))
        .collect::<Result<_>>()?;
    let labels: Vec<u32> = idx.iter().map(|&i| data.samples[i].label).collect();
    let task_type = data.shape.task_type;
    let metrics = match task_type {
        TaskType::Counting => {
            let raw: Vec<f64> = preds.iter().map(|p| p.raw[0]).collect();
            Metrics {
                task_type,
                count: idx.len(),
                accuracy: None,
                mse: Some(counting_mse(&raw, &labels)?),
            }
        }
        _ => {
            let answers: Vec<u32> = preds.iter().map(|p| p.answer).collect();
            Metrics {
                task_type,
                count: idx.len(),
                accuracy: Some(accuracy(&answers, &labels)?),
                mse: None,
            }
        }
    };
    Ok((metrics, preds))
}
