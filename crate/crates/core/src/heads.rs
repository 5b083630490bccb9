//! Answer heads and their losses for open-ended, multi-choice, and counting
//! questions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{validation, Result};
use crate::features::TaskType;
use crate::nn::Linear;
use crate::params::ParamStore;

pub const DEFAULT_MARGIN: f64 = 1.0;
pub const COUNT_RANGE: (u32, u32) = (1, 10);

/// Combiner `concat[F̃, L̃] → Linear → GELU → Linear`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadParams {
    pub task: TaskType,
    pub hidden: Linear,
    pub output: Linear,
    pub margin: f64,
}

impl HeadParams {
    /// `outputs` is the answer-space size for open-ended questions and 1
    /// otherwise.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        task: TaskType,
        input: usize,
        hidden: usize,
        answer_space: usize,
    ) -> Result<Self> {
        let outputs = match task {
            TaskType::OpenEnded if answer_space < 2 => {
                return Err(validation("open-ended answer space must have at least 2 classes"))
            }
            TaskType::OpenEnded => answer_space,
            TaskType::MultiChoice | TaskType::Counting => 1,
        };
        Ok(Self {
            task,
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), input, hidden, true),
            output: Linear::new(store, rng, &format!("{name}.output"), hidden, outputs, true),
            margin: DEFAULT_MARGIN,
        })
    }

    pub fn forward(&self, g: &mut Graph, visual: NodeId, semantics: NodeId) -> Result<NodeId> {
        let x = g.concat_cols(&[visual, semantics]);
        if g.shape(x) != (1, self.hidden.in_dim) {
            return Err(validation(format!(
                "head expects a 1 × {} input, got {:?}",
                self.hidden.in_dim,
                g.shape(x)
            )));
        }
        let h = self.hidden.forward(g, x);
        let h = g.gelu(h);
        Ok(self.output.forward(g, h))
    }
}

/// `−log p_label` for `1 × A` logits.
pub fn open_ended_loss(g: &mut Graph, logits: NodeId, label: usize) -> Result<NodeId> {
    let a = g.shape(logits).1;
    if label >= a {
        return Err(validation(format!("label {label} outside answer space of {a}")));
    }
    Ok(g.cross_entropy(logits, label))
}

/// `Σ_{i≠p} max(0, m + s_i − s_p)` over `1 × 1` candidate scores.
pub fn hinge_loss(g: &mut Graph, scores: &[NodeId], correct: usize, margin: f64) -> Result<NodeId> {
    if scores.len() < 2 {
        return Err(validation("multi-choice needs at least two candidates"));
    }
    if correct >= scores.len() {
        return Err(validation(format!(
            "correct candidate {correct} not among {} candidates",
            scores.len()
        )));
    }
    let sp = scores[correct];
    let terms: Vec<NodeId> = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != correct)
        .map(|(_, &sn)| {
            let d = g.sub(sn, sp);
            let d = g.add_scalar(d, margin);
            g.relu(d)
        })
        .collect();
    let all = g.concat_cols(&terms);
    Ok(g.sum_all(all))
}

/// `(x − y)²`
pub fn count_loss(g: &mut Graph, prediction: NodeId, target: f64) -> NodeId {
    let d = g.add_scalar(prediction, -target);
    g.square(d)
}

/// Rounds half-up and clamps to [`COUNT_RANGE`].
pub fn round_count(x: f64) -> u32 {
    let (lo, hi) = COUNT_RANGE;
    if !x.is_finite() {
        return lo;
    }
    (x + 0.5).floor().clamp(lo as f64, hi as f64) as u32
}

/// Softmax of one logit row, for reporting.
pub fn probabilities(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cross_entropy_hand_values() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        // p = (0.25, 0.25, 0.5)
        let l = g.input(array![[0.0, 0.0, 2f64.ln()]]);
        let loss = open_ended_loss(&mut g, l, 2).unwrap();
        assert!((g.scalar(loss) - 0.5f64.ln().abs()).abs() < 1e-12);
        assert!(open_ended_loss(&mut g, l, 3).is_err());
        let sure = g.input(array![[0.0, 800.0]]);
        let zero = open_ended_loss(&mut g, sure, 1).unwrap();
        assert_eq!(g.scalar(zero), 0.0);
    }

    #[test]
    fn hinge_hand_values() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let s: Vec<NodeId> = [2.0, 0.5, 1.5].iter().map(|&v| g.input(array![[v]])).collect();
        let loss = hinge_loss(&mut g, &s, 0, 1.0).unwrap();
        assert!((g.scalar(loss) - 0.5).abs() < 1e-12);
        let shifted: Vec<NodeId> = [12.0, 10.5, 11.5].iter().map(|&v| g.input(array![[v]])).collect();
        let loss2 = hinge_loss(&mut g, &shifted, 0, 1.0).unwrap();
        assert!((g.scalar(loss2) - 0.5).abs() < 1e-12);
        let clear: Vec<NodeId> = [5.0, 0.5, 4.0].iter().map(|&v| g.input(array![[v]])).collect();
        let zero = hinge_loss(&mut g, &clear, 0, 1.0).unwrap();
        assert_eq!(g.scalar(zero), 0.0);
        assert!(hinge_loss(&mut g, &s, 3, 1.0).is_err());
        assert!(hinge_loss(&mut g, &s[..1], 0, 1.0).is_err());
    }

    #[test]
    fn counting_hand_values() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(array![[3.4]]);
        let loss = count_loss(&mut g, x, 3.0);
        assert!((g.scalar(loss) - 0.16).abs() < 1e-12);
        assert_eq!(round_count(3.4), 3);
        assert_eq!(round_count(3.5), 4);
        assert_eq!(round_count(-2.0), 1);
        assert_eq!(round_count(40.0), 10);
        assert_eq!(round_count(f64::NAN), 1);
    }

    #[test]
    fn shift_invariant_probabilities() {
        let a = probabilities(&[0.1, 2.0, -1.0]);
        let b = probabilities(&[5.1, 7.0, 4.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(argmax(&a), 1);
    }
}
