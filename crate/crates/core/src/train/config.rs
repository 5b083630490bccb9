//! Training configuration, ablation switches and dotted-key overrides.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::TaskType;

/// How the linguistic confounder priors enter the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// All four streams are fused; priors are computed but not applied.
    #[default]
    Structural,
    /// Each role's excitation is additionally scaled by a prior-entropy weight.
    PriorWeighted,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    pub disable_hsrp: bool,
    pub disable_lbci: bool,
    pub disable_vfci: bool,
    pub disable_cvlr: bool,
    pub disable_sge: bool,
    pub disable_alff: bool,
}

pub const VARIANT_NAMES: [&str; 7] = [
    "full", "wo_hsrp", "wo_lbci", "wo_vfci", "wo_cvlr", "wo_sge", "wo_alff",
];

impl AblationSpec {
    pub fn named(name: &str) -> Result<Self> {
        let mut s = Self::default();
        match name {
            "full" => {}
            "wo_hsrp" => s.disable_hsrp = true,
            "wo_lbci" => s.disable_lbci = true,
            "wo_vfci" => s.disable_vfci = true,
            "wo_cvlr" => s.disable_cvlr = true,
            "wo_sge" => s.disable_sge = true,
            "wo_alff" => s.disable_alff = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown variant {other}; expected one of {}",
                    VARIANT_NAMES.join(", ")
                )))
            }
        }
        Ok(s)
    }

    pub fn lbci_active(&self) -> bool {
        !(self.disable_lbci || self.disable_cvlr)
    }

    pub fn vfci_active(&self) -> bool {
        !(self.disable_vfci || self.disable_cvlr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Hidden width `d`.
    pub dim: usize,
    pub heads: usize,
    /// MTB layers per stack (`R`).
    pub layers: usize,
    /// Semantic GCN layers (`g`).
    pub gcn_layers: usize,
    /// Codebook size `K` per visual stream.
    pub codebook_k: usize,
    pub kmeans_restarts: usize,
    pub encoder_layers: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Must match the manifest when set.
    pub task_type: Option<TaskType>,
    pub ablation: AblationSpec,
    pub prior_mode: PriorMode,
    /// One STT stack set per linguistic stream instead of a shared one.
    pub separate_stacks: bool,
    /// Global gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
    pub plateau_patience: usize,
    pub plateau_tolerance: f64,
    pub train_split: String,
    /// Split used for best-model selection; falls back to the training
    /// split when the manifest lacks it.
    pub val_split: String,
    pub select_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 512,
            heads: 8,
            layers: 3,
            gcn_layers: 1,
            codebook_k: 512,
            kmeans_restarts: crate::causal::codebook::DEFAULT_RESTARTS,
            encoder_layers: 1,
            dropout: 0.15,
            batch_size: 64,
            lr: 2e-4,
            epochs: 50,
            seed: 0,
            task_type: None,
            ablation: AblationSpec::default(),
            prior_mode: PriorMode::Structural,
            separate_stacks: false,
            grad_clip: None,
            plateau_patience: 5,
            plateau_tolerance: 1e-6,
            train_split: "train".into(),
            val_split: "test_iid".into(),
            select_best: true,
        }
    }
}

fn cfg(msg: String) -> Error {
    Error::Config(msg)
}

impl TrainConfig {
    /// Desk-scale configuration used by tests and smoke runs.
    pub fn toy() -> Self {
        Self {
            dim: 32,
            heads: 4,
            layers: 2,
            gcn_layers: 1,
            codebook_k: 8,
            kmeans_restarts: 3,
            batch_size: 16,
            lr: 1e-3,
            epochs: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.layers == 0 || self.codebook_k == 0 {
            return Err(cfg("dim, heads, layers and codebook_k must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(cfg(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(cfg(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.batch_size == 0 {
            return Err(cfg("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(cfg(format!("learning rate {} must be positive", self.lr)));
        }
        if self.grad_clip.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return Err(cfg("grad_clip must be positive".into()));
        }
        if self.plateau_patience == 0 {
            return Err(cfg("plateau_patience must be positive".into()));
        }
        let a = &self.ablation;
        if self.prior_mode == PriorMode::PriorWeighted && a.lbci_active() && a.disable_alff {
            return Err(Error::Validation(
                "prior_weighted mode scales the fusion excitation, which disable_alff removes".into(),
            ));
        }
        Ok(())
    }

    /// Hash of every field that shapes the model or its training dynamics;
    /// `epochs` and the split names are excluded so runs can be extended.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.epochs = 0;
        c.val_split.clear();
        c.select_best = true;
        let bytes = serde_json::to_vec(&c).expect("config serialises");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| cfg(format!("invalid config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies `key=value` with a dotted key (e.g. `ablation.disable_sge=true`).
    /// Values are parsed as JSON, falling back to a plain string. Unknown keys
    /// are rejected.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| cfg(format!("override {assignment:?} is not key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| cfg(format!("unknown config key {key}")))?;
        }
        *slot = value;
        let updated: Self =
            serde_json::from_value(root).map_err(|e| cfg(format!("bad value for {key}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}
