//! Training loop: AdamW, warmup-stable-decay schedule, staged data mixtures
//! and the upcycled-vs-scratch ablation harness.

mod ablation;
mod data;
mod mixture;
mod optim;
mod schedule;
mod trainer;

use std::path::PathBuf;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use ablation::{ablation_run, AblationConfig, AblationReport};
pub use data::{
    encode, read_documents, sample_batch, synthetic_language, toy_corpus, Batch, SequenceStream, TokenSource, BOS, EOS, PAD,
};
pub use mixture::{MixtureSchedule, MixtureStage, StageSpan, NANO_SCHEDULE_JSON, CURRICULUM_MIXTURE_JSON};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use schedule::{lr_at, Decay, LRSchedule, LrStage};
pub use trainer::{
    expert_share_entropy, train_step, EvalPoint, EvalSet, StepMetrics, StepOutcome, TrainConfig, TrainRunReport,
    Trainer, METRICS_HEADER,
};

use crate::model::ModelConfig;
use crate::upcycle::UpcyclePlan;

/// JSON run configuration read by the command-line tool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub plan: Option<UpcyclePlan>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub mixture: Option<MixtureSchedule>,
    /// Dataset id to corpus file (one document per line).
    #[serde(default)]
    pub sources: IndexMap<String, PathBuf>,
}
