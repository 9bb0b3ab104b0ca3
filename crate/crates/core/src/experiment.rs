//! Canned experiments on the synthetic testbed.
//!
//! [`inflate_demo`] trains the same policy twice on one testbed with one
//! seed, once per reward mode, and reports whether the similarity run
//! raised similarity without raising recall while the rank run raised
//! recall.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::optim::{ols_slope, train, RunSummary, StepReport, TrainConfig, TrainFailure};
use crate::policy::PolicyParams;
use crate::reward::RewardMode;
use crate::synthenv::{make_testbed, Testbed, TestbedEnv, TestbedSpec};

/// Learning rate of the acceptance preset.
pub const ACCEPTANCE_LEARNING_RATE: f64 = 2.0;

/// Seeds the acceptance checks sweep.
pub const ACCEPTANCE_SEEDS: [u64; 5] = [1, 3, 5, 7, 9];

/// Default training config with the acceptance learning rate.
pub fn acceptance_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        learning_rate: ACCEPTANCE_LEARNING_RATE,
        ..TrainConfig::default()
    }
}

/// Fresh all-zeros (uniform) policy sized for `tb`.
pub fn uniform_policy(tb: &Testbed) -> Result<PolicyParams> {
    PolicyParams::zeros(tb.spec.featurizer().dim(), tb.action_count(), 1.0)
}

/// Output of one training run on a testbed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRun {
    pub reward_mode: RewardMode,
    pub reports: Vec<StepReport>,
    pub summary: RunSummary,
}

impl ModeRun {
    /// Final minus initial validation R@1.
    pub fn recall_delta(&self) -> f64 {
        self.summary.final_.recall[0] - self.summary.initial.recall[0]
    }

    /// Least-squares slope of per-step mean similarity to target.
    pub fn similarity_slope(&self) -> f64 {
        let ys: Vec<f64> = self.reports.iter().map(|r| r.mean_similarity_to_target).collect();
        ols_slope(&ys)
    }
}

/// Train a uniform policy on `tb` under `config`.
pub fn run_mode(tb: &Testbed, config: &TrainConfig) -> std::result::Result<ModeRun, TrainFailure> {
    let mut params = uniform_policy(tb).map_err(|error| TrainFailure {
        step: 0,
        error,
        partial: Default::default(),
    })?;
    let out = train(&mut TestbedEnv::new(tb), &mut params, config)?;
    Ok(ModeRun {
        reward_mode: config.reward_mode,
        reports: out.reports,
        summary: out.summary.unwrap_or_else(|| RunSummary {
            initial: empty_table(),
            final_: empty_table(),
        }),
    })
}

fn empty_table() -> crate::optim::RecallTable {
    crate::optim::RecallTable {
        ks: crate::optim::RECALL_TABLE_KS.to_vec(),
        recall: vec![0.0; crate::optim::RECALL_TABLE_KS.len()],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InflationVerdict {
    pub sim_mode_sim_slope: f64,
    pub sim_mode_recall_delta: f64,
    pub rank_mode_recall_delta: f64,
}

impl InflationVerdict {
    /// Similarity rose without recall rising, and rank training helped.
    pub fn reproduced(&self) -> bool {
        self.sim_mode_sim_slope > 0.0
            && self.sim_mode_recall_delta <= 0.0
            && self.rank_mode_recall_delta > 0.0
    }
}

/// Paired rank-vs-similarity run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InflationDemo {
    pub rank: ModeRun,
    pub similarity: ModeRun,
    pub verdict: InflationVerdict,
}

/// Build the testbed from `spec` and train once per reward mode with
/// everything else in `config` shared.
pub fn inflate_demo(
    spec: &TestbedSpec,
    config: &TrainConfig,
) -> std::result::Result<InflationDemo, TrainFailure> {
    let tb = make_testbed(spec).map_err(|error| TrainFailure {
        step: 0,
        error,
        partial: Default::default(),
    })?;
    inflate_demo_on(&tb, config)
}

pub fn inflate_demo_on(
    tb: &Testbed,
    config: &TrainConfig,
) -> std::result::Result<InflationDemo, TrainFailure> {
    let with = |mode| TrainConfig {
        reward_mode: mode,
        ..config.clone()
    };
    let rank = run_mode(tb, &with(RewardMode::Rank))?;
    let similarity = run_mode(tb, &with(RewardMode::Similarity))?;
    let verdict = InflationVerdict {
        sim_mode_sim_slope: similarity.similarity_slope(),
        sim_mode_recall_delta: similarity.recall_delta(),
        rank_mode_recall_delta: rank.recall_delta(),
    };
    Ok(InflationDemo {
        rank,
        similarity,
        verdict,
    })
}
