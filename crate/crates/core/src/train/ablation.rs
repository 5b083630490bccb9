//! Runs the ablation variants side by side and tabulates them.

use serde::{Deserialize, Serialize};

use super::config::{AblationSpec, TrainConfig};
use super::metrics::{evaluate, Metrics};
use super::trainer::train;
use crate::data::PreparedData;
use crate::error::{validation, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub num_parameters: usize,
    pub final_loss: f64,
    /// `(split, metrics)` in the order requested.
    pub results: Vec<(String, Metrics)>,
}

impl AblationRun {
    pub fn score(&self, split: &str) -> Option<f64> {
        self.results.iter().find(|(s, _)| s == split).map(|(_, m)| m.score())
    }
}

/// Trains `variant` from `base` with `seed` and evaluates the final model
/// on each of `splits`.
pub fn run_variant(
    base: &TrainConfig,
    variant: &str,
    seed: u64,
    data: &PreparedData,
    splits: &[&str],
) -> Result<AblationRun> {
    let config = TrainConfig {
        ablation: AblationSpec::named(variant)?,
        seed,
        ..base.clone()
    };
    let outcome = train(&config, data)?;
    let mut results = Vec::with_capacity(splits.len());
    for &split in splits {
        let (metrics, _) = evaluate(&outcome.model, data, split)?;
        results.push((split.to_string(), metrics));
    }
    Ok(AblationRun {
        variant: variant.to_string(),
        seed,
        num_parameters: outcome.model.num_parameters(),
        final_loss: outcome.trace.last().map_or(f64::NAN, |r| r.loss),
        results,
    })
}

/// Every variant under every seed, variant-major.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[&str],
    seeds: &[u64],
    data: &PreparedData,
    splits: &[&str],
) -> Result<Vec<AblationRun>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(validation("ablation needs at least one variant and one seed"));
    }
    let mut runs = Vec::with_capacity(variants.len() * seeds.len());
    for &v in variants {
        for &s in seeds {
            runs.push(run_variant(base, v, s, data, splits)?);
        }
    }
    Ok(runs)
}

/// Median of a non-empty list; the mean of the two middle values for
/// even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

/// One row per variant, one column per split holding the median score over
/// seeds, followed by the parameter count.
pub fn comparison_table(runs: &[AblationRun], splits: &[&str]) -> String {
    let mut variants: Vec<&str> = Vec::new();
    for r in runs {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    let mut out = format!("{:<10}", "variant");
    for s in splits {
        out.push_str(&format!(" {s:>10}"));
    }
    out.push_str(&format!(" {:>10}\n", "params"));
    for v in variants {
        let rows: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == v).collect();
        out.push_str(&format!("{v:<10}"));
        for s in splits {
            let scores: Vec<f64> = rows.iter().filter_map(|r| r.score(s)).collect();
            match median(&scores) {
                Some(m) => out.push_str(&format!(" {m:>10.4}")),
                None => out.push_str(&format!(" {:>10}", "-")),
            }
        }
        out.push_str(&format!(" {:>10}\n", rows[0].num_parameters));
    }
    out
}
