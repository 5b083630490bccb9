//! The epoch loop: shuffled mini-batches, Adam, plateau schedule,
//! best-on-validation selection.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState};
use super::config::TrainConfig;
use super::metrics::evaluate;
use super::optim::{clip_global_norm, lr_on_plateau, Adam, PlateauState};
use crate::autograd::Graph;
use crate::data::{PreparedData, Sample};
use crate::error::{validation, Error, Result};
use crate::model::CausalVqaModel;
use crate::nn::Dropout;
use crate::params::Mat;

const SHUFFLE_STREAM: u64 = 0x7261_6e64;
const SAMPLER_STREAM: u64 = 0x6672_6f6e;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    /// Validation score (accuracy, or negated MSE for counting).
    pub metric: f64,
    /// Whether this epoch set a new best validation score.
    pub best: bool,
}

pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub adam: Adam,
    pub plateau: PlateauState,
    /// Shuffling and dropout stream.
    pub rng: ChaCha8Rng,
    /// Front-door global-feature sampling stream.
    pub sampler: ChaCha8Rng,
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_params: Option<Vec<Mat>>,
    pub trace: Vec<EpochRecord>,
}

pub struct Trainer<'d> {
    pub model: CausalVqaModel,
    pub state: TrainState,
    data: &'d PreparedData,
}

pub struct TrainOutcome {
    pub model: CausalVqaModel,
    pub trace: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
}

impl<'d> Trainer<'d> {
    /// Builds a fresh model, initialises its codebooks from the training
    /// split and sets up the optimizer and RNG streams.
    pub fn new(config: &TrainConfig, data: &'d PreparedData) -> Result<Self> {
        config.validate()?;
        let mut model = CausalVqaModel::new(config, &data.shape, data.confounders.prior_weights())?;
        let train: Vec<&Sample> = data
            .split(&config.train_split)?
            .iter()
            .map(|&i| &data.samples[i])
            .collect();
        model.init_codebooks(&train)?;
        let adam = Adam::new(&model.store, config.lr);
        let state = TrainState {
            epoch: 0,
            adam,
            plateau: PlateauState::new(config.plateau_patience, config.plateau_tolerance),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM),
            sampler: ChaCha8Rng::seed_from_u64(config.seed ^ SAMPLER_STREAM),
            best_metric: None,
            best_epoch: None,
            best_params: None,
            trace: Vec::new(),
        };
        Ok(Self { model, state, data })
    }

    /// Restores a trainer from a checkpoint. `config` may differ from the
    /// stored one only in fields excluded from the fingerprint.
    pub fn resume(checkpoint: Checkpoint, config: &TrainConfig, data: &'d PreparedData) -> Result<Self> {
        config.validate()?;
        let current = config.fingerprint();
        if checkpoint.fingerprint != current {
            return Err(Error::Fingerprint {
                stored: checkpoint.fingerprint,
                current,
            });
        }
        if checkpoint.shape != data.shape {
            return Err(validation(format!(
                "checkpoint was trained on data shaped {:?}, got {:?}",
                checkpoint.shape, data.shape
            )));
        }
        if checkpoint.vocab.len() != data.vocab.len() {
            return Err(validation("checkpoint vocabulary differs from the prepared data"));
        }
        let mut model = CausalVqaModel::new(config, &checkpoint.shape, checkpoint.prior_weights)?;
        model.store.load_values(checkpoint.params)?;
        let state = TrainState {
            epoch: checkpoint.epoch,
            adam: checkpoint.adam,
            plateau: checkpoint.plateau,
            rng: checkpoint.rng.restore(),
            sampler: checkpoint.sampler.restore(),
            best_metric: checkpoint.best_metric,
            best_epoch: checkpoint.best_epoch,
            best_params: checkpoint.best_params,
            trace: checkpoint.trace,
        };
        Ok(Self { model, state, data })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            fingerprint: self.model.config.fingerprint(),
            config: self.model.config.clone(),
            shape: self.model.shape.clone(),
            vocab: self.data.vocab.clone(),
            prior_weights: self.model.prior_weights,
            epoch: self.state.epoch,
            adam: self.state.adam.clone(),
            plateau: self.state.plateau.clone(),
            rng: RngState::capture(&self.state.rng),
            sampler: RngState::capture(&self.state.sampler),
            best_metric: self.state.best_metric,
            best_epoch: self.state.best_epoch,
            best_params: self.state.best_params.clone(),
            trace: self.state.trace.clone(),
            params: self
                .model
                .store
                .iter()
                .map(|(_, n, v)| (n.to_string(), v.clone()))
                .collect(),
        }
    }

    fn validation_split(&self) -> &str {
        let c = &self.model.config;
        if self.data.splits.contains_key(&c.val_split) {
            &c.val_split
        } else {
            &c.train_split
        }
    }

    /// Runs one epoch and returns its trace record.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let config = &self.model.config;
        let mut order = self.data.split(&config.train_split)?.to_vec();
        if order.is_empty() {
            return Err(validation(format!("training split {} is empty", config.train_split)));
        }
        order.shuffle(&mut self.state.rng);
        let epoch = self.state.epoch + 1;
        let lr = self.state.adam.lr;
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc: Vec<Option<Mat>> = vec![None; self.model.store.len()];
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let sample = &self.data.samples[i];
                let mut g = Graph::new(&self.model.store);
                let mut dropout = Dropout::new(config.dropout, &mut self.state.rng);
                let out = self.model.forward(&mut g, sample, &mut self.state.sampler, &mut dropout)?;
                let loss = self.model.loss(&mut g, &out, sample.label)?;
                let value = g.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Divergence(format!(
                        "epoch {epoch}: loss {value} on sample {} (lr {lr})",
                        sample.record_id
                    )));
                }
                total += value;
                g.backward(loss).accumulate_into(&mut acc, scale);
            }
            if let Some(max) = config.grad_clip {
                clip_global_norm(&mut acc, max);
            }
            if acc.iter().flatten().any(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::Divergence(format!("epoch {epoch}: non-finite gradient")));
            }
            self.state.adam.update(&mut self.model.store, &acc)?;
        }
        let loss = total / order.len() as f64;
        self.state.adam.lr = lr_on_plateau(&mut self.state.plateau, loss, lr);

        let split = self.validation_split().to_string();
        let (metrics, _) = evaluate(&self.model, self.data, &split)?;
        let metric = metrics.score();
        let best = self.state.best_metric.is_none_or(|b| metric > b);
        if best {
            self.state.best_metric = Some(metric);
            self.state.best_epoch = Some(epoch);
            self.state.best_params = Some(self.model.store.values().to_vec());
        }
        self.state.epoch = epoch;
        let record = EpochRecord {
            epoch,
            loss,
            lr,
            metric,
            best,
        };
        self.state.trace.push(record.clone());
        Ok(record)
    }

    /// Trains until `config.epochs` epochs have completed, reporting each
    /// record to `observe`.
    pub fn run(&mut self, mut observe: impl FnMut(&Self, &EpochRecord) -> Result<()>) -> Result<()> {
        while self.state.epoch < self.model.config.epochs {
            let record = self.run_epoch()?;
            observe(self, &record)?;
        }
        Ok(())
    }

    /// Consumes the trainer, restoring the best parameters when selection
    /// is enabled.
    pub fn finish(self) -> TrainOutcome {
        let mut model = self.model;
        if model.config.select_best {
            if let Some(best) = self.state.best_params {
                for (dst, src) in model.store.values_mut().iter_mut().zip(best) {
                    *dst = src;
                }
            }
        }
        TrainOutcome {
            model,
            trace: self.state.trace,
            best_epoch: self.state.best_epoch,
            best_metric: self.state.best_metric,
        }
    }
}

/// Trains a fresh model for `config.epochs` epochs.
pub fn train(config: &TrainConfig, data: &PreparedData) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, data)?;
    trainer.run(|_, _| Ok(()))?;
    Ok(trainer.finish())
}

pub fn trace_csv(trace: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,lr,metric,best\n");
    for r in trace {
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.loss, r.lr, r.metric, r.best));
    }
    out
}

pub fn write_trace_csv(path: &Path, trace: &[EpochRecord]) -> Result<()> {
    fs::write(path, trace_csv(trace)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::prepare;
    use crate::synthetic::{generate_synthetic, SyntheticTaskSpec};

    fn setup() -> (TrainConfig, PreparedData) {
        let spec = SyntheticTaskSpec {
            num_samples: 16,
            feature_dims: (6, 5),
            answer_space: 2,
            ..Default::default()
        };
        let (m, r) = generate_synthetic(&spec).unwrap();
        let data = prepare(&m, &r, None, "train").unwrap();
        let config = TrainConfig {
            dim: 8,
            heads: 2,
            layers: 1,
            codebook_k: 4,
            kmeans_restarts: 1,
            batch_size: 4,
            epochs: 3,
            ..TrainConfig::toy()
        };
        (config, data)
    }

    #[test]
    fn identical_seeds_identical_traces() {
        let (config, data) = setup();
        let a = train(&config, &data).unwrap();
        let b = train(&config, &data).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.len(), 3);
        assert!(a.trace[0].best);
        let csv = trace_csv(&a.trace);
        assert!(csv.starts_with("epoch,loss,lr,metric,best\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn empty_training_split_rejected() {
        let (config, mut data) = setup();
        data.splits.insert("train".into(), vec![]);
        assert!(Trainer::new(&config, &data).is_err());
    }
}
