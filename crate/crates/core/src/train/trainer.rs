use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::data::{sample_batch, Batch, SequenceStream, TokenSource};
use super::mixture::MixtureSchedule;
use super::optim::{adamw_step, AdamWConfig, OptimizerState};
use super::schedule::{lr_at, LRSchedule};
use crate::error::{Error, Result};
use crate::kernels::Scalar;
use crate::model::{evaluate_loss, loss_and_grads, AuxCoefficients, Checkpoint, LossBreakdown};
use crate::moe::RoutingLog;

pub const METRICS_HEADER: &str = "step,tokens,lr,lm,balance,z,total";

/// Result of a single optimizer step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub losses: LossBreakdown,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub routing: Option<RoutingLog>,
}

fn check_finite(term: &'static str, value: f64, step: u64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { term, step, value })
    }
}

/// Computes `lm + c_b·balance + c_z·z` and its gradients on `batch`, clips
/// the gradient norm and applies one AdamW update.
///
/// Nothing is modified when a loss term or the gradient is non-finite.
pub fn train_step<T: Scalar>(
    ckpt: &mut Checkpoint<T>,
    optim: &mut OptimizerState<T>,
    batch: &Batch,
    coefficients: AuxCoefficients,
    lr: f64,
) -> Result<StepOutcome> {
    let step = optim.step + 1;
    let (report, mut grads) = loss_and_grads(ckpt, &batch.inputs, &batch.targets, coefficients)?;
    let l = report.losses;
    check_finite("lm", l.lm, step)?;
    check_finite("balance", l.balance, step)?;
    check_finite("z", l.z, step)?;
    check_finite("total", l.total, step)?;
    let grad_norm = grads.global_norm();
    check_finite("gradient", grad_norm, step)?;
    if let Some(clip) = optim.config.grad_clip {
        if grad_norm > clip {
            grads.scale_in_place(T::from_f64_lossy(clip / grad_norm));
        }
    }
    adamw_step(ckpt, &grads, optim, lr)?;
    Ok(StepOutcome {
        losses: l,
        grad_norm,
        routing: report.routing,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    /// Tokens consumed after this step.
    pub tokens_seen: u64,
    pub lr: f64,
    pub lm: f64,
    pub balance: f64,
    pub z: f64,
    pub total: f64,
    pub grad_norm: f64,
    /// Entropy of the expert token shares per MoE layer (nats).
    #[serde(default)]
    pub expert_entropy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub tokens_seen: u64,
    pub lm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRunReport {
    pub steps: Vec<StepMetrics>,
    pub evals: Vec<EvalPoint>,
    /// Where the final checkpoint was written, when it was.
    pub final_checkpoint: Option<String>,
}

impl TrainRunReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for m in &self.steps {
            let _ = writeln!(
                out,
                "{},{},{:e},{},{},{},{}",
                m.step, m.tokens_seen, m.lr, m.lm, m.balance, m.z, m.total
            );
        }
        out
    }

    pub fn eval_at(&self, step: u64) -> Option<f64> {
        self.evals.iter().find(|e| e.step == step).map(|e| e.lm)
    }
}

/// Entropy of each routed layer's expert token shares.
pub fn expert_share_entropy(log: &RoutingLog) -> Vec<f64> {
    log.layers
        .iter()
        .filter(|s| s.tokens > 0)
        .map(|s| {
            let total: u64 = s.counts.iter().sum();
            s.counts
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / total as f64;
                    -p * p.ln()
                })
                .sum()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seq_len: usize,
    pub batch_size: usize,
    pub schedule: LRSchedule,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub coefficients: AuxCoefficients,
    /// Evaluate the held-out batch every this many steps (0 disables).
    #[serde(default)]
    pub eval_every: u64,
}

impl TrainConfig {
    pub fn tokens_per_step(&self) -> u64 {
        (self.seq_len * self.batch_size) as u64
    }
}

/// Fixed batch used to track the loss at checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub inputs: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
}

impl EvalSet {
    pub fn from_batch(batch: Batch) -> Self {
        Self {
            inputs: batch.inputs,
            targets: batch.targets,
        }
    }

    pub fn lm_loss<T: Scalar>(&self, ckpt: &Checkpoint<T>) -> Result<f64> {
        Ok(evaluate_loss(ckpt, &self.inputs, &self.targets, AuxCoefficients::NONE)?
            .losses
            .lm)
    }
}

/// Stateful training loop over a mixture of token sources.
pub struct Trainer<'a, T> {
    pub ckpt: Checkpoint<T>,
    pub optim: OptimizerState<T>,
    pub config: TrainConfig,
    pub report: TrainRunReport,
    mixture: MixtureSchedule,
    sources: &'a IndexMap<String, TokenSource>,
    stream: SequenceStream,
    tokens_seen: u64,
    eval: Option<EvalSet>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(
        ckpt: Checkpoint<T>,
        config: TrainConfig,
        mixture: MixtureSchedule,
        sources: &'a IndexMap<String, TokenSource>,
        data_seed: u64,
    ) -> Result<Self> {
        config.schedule.validate()?;
        if config.seq_len == 0 || config.batch_size == 0 {
            return Err(Error::Config("seq_len and batch_size must be positive".into()));
        }
        let optim = OptimizerState::new(&ckpt, config.optimizer.clone());
        Ok(Self {
            ckpt,
            optim,
            config,
            report: TrainRunReport::default(),
            mixture,
            sources,
            stream: SequenceStream::new(data_seed),
            tokens_seen: 0,
            eval: None,
        })
    }

    /// Tracks `eval` at step 0 and every `eval_every` steps.
    pub fn with_eval(mut self, eval: EvalSet) -> Result<Self> {
        let lm = eval.lm_loss(&self.ckpt)?;
        self.report.evals.push(EvalPoint {
            step: self.optim.step,
            tokens_seen: self.tokens_seen,
            lm,
        });
        self.eval = Some(eval);
        Ok(self)
    }

    pub fn tokens_seen(&self) -> u64 {
        self.tokens_seen
    }

    pub fn step(&mut self) -> Result<&StepMetrics> {
        let batch = sample_batch(
            &self.mixture,
            self.tokens_seen as f64,
            &mut self.stream,
            self.sources,
            self.config.batch_size,
            self.config.seq_len,
        )?;
        let lr = lr_at(self.tokens_seen as f64, &self.config.schedule);
        let out = train_step(
            &mut self.ckpt,
            &mut self.optim,
            &batch,
            self.config.coefficients,
            lr,
        )?;
        self.tokens_seen += batch.n_tokens() as u64;
        let step = self.optim.step;
        if let Some(eval) = &self.eval {
            if self.config.eval_every > 0 && step.is_multiple_of(self.config.eval_every) {
                let lm = eval.lm_loss(&self.ckpt)?;
                self.report.evals.push(EvalPoint {
                    step,
                    tokens_seen: self.tokens_seen,
                    lm,
                });
            }
        }
        self.report.steps.push(StepMetrics {
            step,
            tokens_seen: self.tokens_seen,
            lr,
            lm: out.losses.lm,
            balance: out.losses.balance,
            z: out.losses.z,
            total: out.losses.total,
            grad_norm: out.grad_norm,
            expert_entropy: out.routing.as_ref().map(expert_share_entropy).unwrap_or_default(),
        });
        Ok(self.report.steps.last().expect("just pushed"))
    }

    pub fn run(mut self, steps: u64) -> Result<(Checkpoint<T>, TrainRunReport)> {
        for _ in 0..steps {
            self.step()?;
        }
        Ok((self.ckpt, self.report))
    }
}
