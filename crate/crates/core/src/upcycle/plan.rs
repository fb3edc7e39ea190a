use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the pseudo-MoE compensates the `1/N` router weight of each slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Layer output multiplied by `N`; weights untouched.
    #[serde(alias = "multiplier")]
    ForwardMultiplier,
    /// Each sliced matrix multiplied by `λ = N^(1/3)`.
    #[serde(alias = "weight")]
    WeightScale,
}

fn default_top_k() -> usize {
    8
}

fn default_drop_ratio() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpcyclePlan {
    pub d_expert: usize,
    /// `N = d_ffn / d_expert`.
    pub n_slices: usize,
    /// `E`, experts per layer after expansion.
    pub n_total_experts: usize,
    /// `E / N` copies of every slice.
    pub replication: usize,
    pub scale_mode: ScaleMode,
    /// `N^(1/3)`; only applied in weight-scale mode.
    pub lambda: f64,
    #[serde(default = "default_drop_ratio")]
    pub drop_ratio: f64,
    pub seed: u64,
    /// Experts activated per token after expansion.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Keep the first replica of every slice untouched by Drop-Upcycling.
    #[serde(default)]
    pub spare_first_replica: bool,
}

impl UpcyclePlan {
    /// Plan with every derived field filled in; fails on any divisibility violation.
    pub fn new(
        d_ffn: usize,
        d_expert: usize,
        n_total_experts: usize,
        top_k: usize,
        scale_mode: ScaleMode,
        drop_ratio: f64,
        seed: u64,
    ) -> Result<Self> {
        if d_expert == 0 || !d_ffn.is_multiple_of(d_expert) {
            return Err(Error::Plan(format!(
                "expert width {d_expert} does not divide the FFN width {d_ffn}"
            )));
        }
        let n = d_ffn / d_expert;
        if !n_total_experts.is_multiple_of(n) {
            return Err(Error::Plan(format!(
                "{n_total_experts} experts is not a multiple of {n} slices"
            )));
        }
        let plan = Self {
            d_expert,
            n_slices: n,
            n_total_experts,
            replication: n_total_experts / n,
            scale_mode,
            lambda: (n as f64).cbrt(),
            drop_ratio,
            seed,
            top_k,
            spare_first_replica: false,
        };
        plan.validate_for(d_ffn)?;
        Ok(plan)
    }

    /// Checks internal consistency and agreement with a dense FFN width.
    pub fn validate_for(&self, d_ffn: usize) -> Result<()> {
        if self.d_expert == 0 || !d_ffn.is_multiple_of(self.d_expert) {
            return Err(Error::Plan(format!(
                "expert width {} does not divide the FFN width {d_ffn}",
                self.d_expert
            )));
        }
        let n = d_ffn / self.d_expert;
        if self.n_slices != n {
            return Err(Error::Plan(format!(
                "plan says {} slices, FFN width {d_ffn} / {} gives {n}",
                self.n_slices, self.d_expert
            )));
        }
        if self.n_total_experts == 0
            || !self.n_total_experts.is_multiple_of(n)
            || self.replication * n != self.n_total_experts
        {
            return Err(Error::Plan(format!(
                "{} experts with replication {} do not tile {n} slices",
                self.n_total_experts, self.replication
            )));
        }
        if self.scale_mode == ScaleMode::WeightScale
            && (self.lambda - (n as f64).cbrt()).abs() > 1e-12
        {
            return Err(Error::Plan(format!(
                "lambda {} is not the cube root of {n}",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.drop_ratio) {
            return Err(Error::Plan(format!(
                "drop ratio {} outside [0, 1]",
                self.drop_ratio
            )));
        }
        if self.top_k == 0 || self.top_k > self.n_total_experts {
            return Err(Error::Plan(format!(
                "top_k {} must lie in 1..={}",
                self.top_k, self.n_total_experts
            )));
        }
        Ok(())
    }
}
