use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    Constant,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrStage {
    pub token_budget: f64,
    pub start_lr: f64,
    pub end_lr: f64,
    pub decay: Decay,
}

/// Warmup-stable-decay schedule measured in tokens.
///
/// Stage budgets are consecutive and start at token 0; the linear warmup
/// overlaps the beginning of the first stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LRSchedule {
    pub warmup_tokens: f64,
    pub stages: Vec<LrStage>,
}

const CONTINUITY_TOL: f64 = 1e-12;

impl LRSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("learning-rate schedule has no stages".into()));
        }
        if !(self.warmup_tokens >= 0.0 && self.warmup_tokens.is_finite()) {
            return Err(Error::Config("warmup_tokens must be a finite non-negative number".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !(s.token_budget > 0.0 && s.token_budget.is_finite()) {
                return Err(Error::Config(format!("stage {i} has a non-positive budget")));
            }
            if s.start_lr < 0.0 || s.end_lr < 0.0 || !s.start_lr.is_finite() || !s.end_lr.is_finite() {
                return Err(Error::Config(format!("stage {i} has an invalid learning rate")));
            }
            if s.decay == Decay::Constant && s.start_lr != s.end_lr {
                return Err(Error::Config(format!(
                    "constant stage {i} starts at {} but ends at {}",
                    s.start_lr, s.end_lr
                )));
            }
            if i > 0 {
                let prev = self.stages[i - 1].end_lr;
                let scale = prev.abs().max(s.start_lr.abs()).max(f64::MIN_POSITIVE);
                if (prev - s.start_lr).abs() > CONTINUITY_TOL * scale {
                    return Err(Error::Config(format!(
                        "stage {i} starts at {} but stage {} ends at {prev}",
                        s.start_lr,
                        i - 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Cumulative token count at which each stage ends.
    pub fn boundaries(&self) -> Vec<f64> {
        self.stages
            .iter()
            .scan(0.0, |acc, s| {
                *acc += s.token_budget;
                Some(*acc)
            })
            .collect()
    }

    pub fn total_tokens(&self) -> f64 {
        self.stages.iter().map(|s| s.token_budget).sum()
    }

    pub fn peak_lr(&self) -> f64 {
        self.stages[0].start_lr
    }

    /// Constant learning rate after a linear warmup, for desk-scale runs.
    pub fn constant(lr: f64, warmup_tokens: f64, total_tokens: f64) -> Self {
        Self {
            warmup_tokens,
            stages: vec![LrStage {
                token_budget: total_tokens,
                start_lr: lr,
                end_lr: lr,
                decay: Decay::Constant,
            }],
        }
    }

    fn four_stage(peak: f64) -> Self {
        let stage = |budget: f64, start: f64, end: f64, decay| LrStage {
            token_budget: budget,
            start_lr: start,
            end_lr: end,
            decay,
        };
        Self {
            warmup_tokens: 8.4e9,
            stages: vec![
                stage(2.4e12, peak, peak, Decay::Constant),
                stage(1.7e12, peak, 1e-5, Decay::Linear),
                stage(5e11, 1e-5, 6e-6, Decay::Linear),
                stage(5e11, 6e-6, 0.0, Decay::Linear),
            ],
        }
    }

    /// Four-stage schedule of the smaller released model (peak 4.9505e-4).
    pub fn nano() -> Self {
        Self::four_stage(4.9505e-4)
    }

    /// Four-stage schedule of the larger released model (peak 4.6854e-4).
    pub fn mini() -> Self {
        Self::four_stage(4.6854e-4)
    }
}

/// Learning rate after `tokens_seen` tokens.
pub fn lr_at(tokens_seen: f64, schedule: &LRSchedule) -> f64 {
    let mut start = 0.0;
    let mut base = schedule.stages.last().map_or(0.0, |s| s.end_lr);
    for s in &schedule.stages {
        let end = start + s.token_budget;
        if tokens_seen < end {
            base = match s.decay {
                Decay::Constant => s.start_lr,
                Decay::Linear => {
                    let frac = ((tokens_seen - start) / s.token_budget).max(0.0);
                    s.start_lr + (s.end_lr - s.start_lr) * frac
                }
            };
            break;
        }
        start = end;
    }
    if tokens_seen < schedule.warmup_tokens {
        base * tokens_seen.max(0.0) / schedule.warmup_tokens
    } else {
        base
    }
}
