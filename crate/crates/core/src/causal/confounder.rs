//! Linguistic confounder sets built from role phrases and their priors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::linguistic::QuestionBundle;

pub const ROLE_NAMES: [&str; 4] = ["question", "subject", "action", "object"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhraseStat {
    pub phrase: String,
    pub count: u64,
    pub prior: f64,
}

/// Four phrase sets (whole question, subject, action, object), each with
/// occurrence counts and priors `P(z) = count(z) / Σ_j count(j)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfounderVocabulary {
    pub sets: [Vec<PhraseStat>; 4],
}

fn normalise(counts: BTreeMap<String, u64>) -> Vec<PhraseStat> {
    let total: u64 = counts.values().sum();
    counts
        .into_iter()
        .map(|(phrase, count)| PhraseStat {
            prior: count as f64 / total as f64,
            phrase,
            count,
        })
        .collect()
}

impl ConfounderVocabulary {
    /// Builds the sets from phrase tuples `[question, subject, action, object]`.
    pub fn from_phrases<'a>(tuples: impl IntoIterator<Item = &'a [String; 4]>) -> Result<Self> {
        let mut counts: [BTreeMap<String, u64>; 4] = Default::default();
        let mut any = false;
        for t in tuples {
            any = true;
            for (set, phrase) in counts.iter_mut().zip(t) {
                *set.entry(phrase.clone()).or_default() += 1;
            }
        }
        if !any {
            return Err(validation("confounder vocabulary needs a non-empty corpus"));
        }
        Ok(Self {
            sets: counts.map(normalise),
        })
    }

    pub fn prior(&self, set: usize, phrase: &str) -> Option<f64> {
        self.sets[set]
            .binary_search_by(|s| s.phrase.as_str().cmp(phrase))
            .ok()
            .map(|i| self.sets[set][i].prior)
    }

    /// Shannon entropy (nats) of one set's prior.
    pub fn entropy(&self, set: usize) -> f64 {
        self.sets[set]
            .iter()
            .filter(|s| s.prior > 0.0)
            .map(|s| -s.prior * s.prior.ln())
            .sum()
    }

    /// Per-set scale `1 − H/(2·ln n)` in `[0.5, 1]`: 1 for a single phrase,
    /// 0.5 for a uniform set. Used by the prior-weighted fusion mode.
    pub fn prior_weights(&self) -> [f64; 4] {
        std::array::from_fn(|k| {
            let n = self.sets[k].len();
            if n <= 1 {
                1.0
            } else {
                1.0 - 0.5 * self.entropy(k) / (n as f64).ln()
            }
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Builds the confounder vocabulary from parsed bundles.
pub fn build_confounder_vocabulary(corpus: &[QuestionBundle]) -> Result<ConfounderVocabulary> {
    ConfounderVocabulary::from_phrases(corpus.iter().map(|b| &b.phrases))
}
