use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::data::{sample_batch, SequenceStream, TokenSource};
use super::mixture::MixtureSchedule;
use super::schedule::LRSchedule;
use super::trainer::{EvalSet, TrainConfig, TrainRunReport, Trainer};
use crate::error::{Error, Result};
use crate::kernels::Scalar;
use crate::model::{init_dense, init_moe, AuxCoefficients, Checkpoint, ModelConfig};
use crate::upcycle::{upcycle, UpcyclePlan};

const CORPUS_ID: &str = "corpus";
const EVAL_STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Paired comparison of an upcycled MoE against the same MoE from random init.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub dense: ModelConfig,
    pub plan: UpcyclePlan,
    /// Dense pre-training steps before upcycling.
    pub warm_steps: u64,
    /// Steps each MoE arm trains for.
    pub steps: u64,
    pub seq_len: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    #[serde(default)]
    pub coefficients: AuxCoefficients,
    pub eval_every: u64,
    pub eval_sequences: usize,
    pub seed: u64,
}

impl AblationConfig {
    fn train_config(&self, steps: u64) -> TrainConfig {
        let per_step = (self.seq_len * self.batch_size) as f64;
        TrainConfig {
            seq_len: self.seq_len,
            batch_size: self.batch_size,
            schedule: LRSchedule::constant(
                self.peak_lr,
                self.warmup_steps as f64 * per_step,
                (steps.max(1)) as f64 * per_step,
            ),
            optimizer: Default::default(),
            coefficients: self.coefficients,
            eval_every: self.eval_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dense_warmup: TrainRunReport,
    pub upcycled: TrainRunReport,
    pub scratch: TrainRunReport,
}

impl AblationReport {
    /// Checkpoints (step ≥ `from_step`) where the upcycled arm is not strictly lower.
    pub fn violations(&self, from_step: u64) -> Vec<(u64, f64, f64)> {
        self.upcycled
            .evals
            .iter()
            .filter(|e| e.step >= from_step)
            .filter_map(|e| {
                let s = self.scratch.eval_at(e.step)?;
                (e.lm >= s).then_some((e.step, e.lm, s))
            })
            .collect()
    }

    /// First step at which the upcycled arm's checkpoint loss is at or below
    /// the scratch arm's final checkpoint loss.
    pub fn upcycled_steps_to_scratch_final(&self) -> Option<u64> {
        let target = self.scratch.evals.last()?.lm;
        self.upcycled.evals.iter().find(|e| e.lm <= target).map(|e| e.step)
    }
}

/// Pre-trains a dense model, upcycles it and trains both MoE arms on the
/// same data order. Seeds: dense init `seed`, MoE random init `seed + 1`,
/// data `seed + 2`; the eval batch comes from a separate stream.
pub fn ablation_run<T: Scalar>(corpus: &TokenSource, cfg: &AblationConfig) -> Result<AblationReport> {
    cfg.plan.validate_for(cfg.dense.d_ffn)?;
    let sources = IndexMap::from([(CORPUS_ID.to_string(), corpus.clone())]);
    let mixture = MixtureSchedule::single(CORPUS_ID);
    let eval = EvalSet::from_batch(sample_batch(
        &mixture,
        0.0,
        &mut SequenceStream::new(cfg.seed ^ EVAL_STREAM_SALT),
        &sources,
        cfg.eval_sequences,
        cfg.seq_len,
    )?);

    let dense: Checkpoint<T> = init_dense(&cfg.dense, cfg.seed)?;
    let (dense, dense_warmup) = Trainer::new(dense, cfg.train_config(cfg.warm_steps), mixture.clone(), &sources, cfg.seed)?
        .with_eval(eval.clone())?
        .run(cfg.warm_steps)?;

    let upcycled = upcycle(&dense, &cfg.plan)?;
    let scratch: Checkpoint<T> = init_moe(&upcycled.config, cfg.seed + 1)?;
    if upcycled.config != scratch.config {
        return Err(Error::Comparison("ablation arms have different configurations".into()));
    }
    let data_seed = cfg.seed + 2;
    let run_arm = |ckpt: Checkpoint<T>| -> Result<TrainRunReport> {
        let trainer = Trainer::new(ckpt, cfg.train_config(cfg.steps), mixture.clone(), &sources, data_seed)?
            .with_eval(eval.clone())?;
        Ok(trainer.run(cfg.steps)?.1)
    };
    Ok(AblationReport {
        dense_warmup,
        upcycled: run_arm(upcycled)?,
        scratch: run_arm(scratch)?,
    })
}
