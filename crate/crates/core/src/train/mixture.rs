use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bundled four-stage pre-training mixture, raw per-dataset percentages.
pub const CURRICULUM_MIXTURE_JSON: &str = include_str!("../../data/curriculum_mixture.json");

/// Bundled four-stage learning-rate schedule of the smaller model.
pub const NANO_SCHEDULE_JSON: &str = include_str!("../../data/nano_schedule.json");

const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureStage {
    #[serde(default)]
    pub name: String,
    pub token_budget: f64,
    /// Dataset id to sampling weight. Raw weights are accepted and
    /// normalized by [`MixtureSchedule::normalized`].
    pub weights: IndexMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSchedule {
    pub stages: Vec<MixtureStage>,
}

/// One row of a mixture plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpan {
    pub index: usize,
    pub name: String,
    pub start_tokens: f64,
    pub end_tokens: f64,
    pub token_budget: f64,
    pub datasets: usize,
    /// Largest normalized weight and its dataset.
    pub top_dataset: String,
    pub top_weight: f64,
}

impl MixtureSchedule {
    pub fn single(dataset: &str) -> Self {
        Self {
            stages: vec![MixtureStage {
                name: "stage-1".into(),
                token_budget: f64::INFINITY,
                weights: IndexMap::from([(dataset.to_string(), 1.0)]),
            }],
        }
    }

    pub fn curriculum() -> Self {
        serde_json::from_str::<Self>(CURRICULUM_MIXTURE_JSON)
            .expect("bundled mixture parses")
            .normalized()
            .expect("bundled mixture is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str::<Self>(&text)?.normalized()
    }

    /// Validates and rescales every stage's weights to sum to one.
    pub fn normalized(mut self) -> Result<Self> {
        if self.stages.is_empty() {
            return Err(Error::Config("mixture has no stages".into()));
        }
        for (i, stage) in self.stages.iter_mut().enumerate() {
            if !(stage.token_budget > 0.0) {
                return Err(Error::Config(format!("mixture stage {i} has a non-positive budget")));
            }
            if let Some((k, w)) = stage.weights.iter().find(|(_, w)| !(**w >= 0.0 && w.is_finite())) {
                return Err(Error::Config(format!("stage {i}: dataset {k} has weight {w}")));
            }
            let sum: f64 = stage.weights.values().sum();
            if !(sum > 0.0) {
                return Err(Error::Config(format!("stage {i} has no positive weight")));
            }
            for w in stage.weights.values_mut() {
                *w /= sum;
            }
            let check: f64 = stage.weights.values().sum();
            debug_assert!((check - 1.0).abs() < WEIGHT_SUM_TOL);
        }
        Ok(self)
    }

    /// Index of the stage active after `tokens_seen` tokens. A stage owns
    /// `[start, start + budget)`; past the end the last stage stays active.
    pub fn stage_index(&self, tokens_seen: f64) -> usize {
        let mut end = 0.0;
        for (i, s) in self.stages.iter().enumerate() {
            end += s.token_budget;
            if tokens_seen < end {
                return i;
            }
        }
        self.stages.len() - 1
    }

    pub fn boundaries(&self) -> Vec<f64> {
        self.stages
            .iter()
            .scan(0.0, |acc, s| {
                *acc += s.token_budget;
                Some(*acc)
            })
            .collect()
    }

    /// Stage spans covering the first `total_tokens` tokens.
    pub fn plan(&self, total_tokens: f64) -> Vec<StageSpan> {
        let mut out = Vec::new();
        let mut start = 0.0;
        for (index, s) in self.stages.iter().enumerate() {
            if start >= total_tokens {
                break;
            }
            let end = (start + s.token_budget).min(total_tokens);
            let (top_dataset, top_weight) = s
                .weights
                .iter()
                .fold((String::new(), f64::NEG_INFINITY), |acc, (k, &w)| {
                    if w > acc.1 {
                        (k.clone(), w)
                    } else {
                        acc
                    }
                });
            out.push(StageSpan {
                index,
                name: s.name.clone(),
                start_tokens: start,
                end_tokens: end,
                token_budget: end - start,
                datasets: s.weights.values().filter(|w| **w > 0.0).count(),
                top_dataset,
                top_weight,
            });
            start += s.token_budget;
        }
        out
    }
}
