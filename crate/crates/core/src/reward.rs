//! Format gate, rank/similarity rewards and group-relative advantages.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::vecindex::{cosine, Embedding};

/// Default variance floor below which a group carries no signal.
pub const DEFAULT_STD_EPS: f64 = 1e-8;

const TAGS: [&str; 4] = ["<think>", "</think>", "<answer>", "</answer>"];

/// Result of checking a raw rewriter output against the tag grammar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatOutcome {
    pub valid: bool,
    pub answer_text: Option<String>,
    pub think_text: Option<String>,
}

impl FormatOutcome {
    pub fn invalid() -> Self {
        Self {
            valid: false,
            answer_text: None,
            think_text: None,
        }
    }
}

/// Accepts exactly `<think>..</think>` followed by `<answer>..</answer>`,
/// with only whitespace around and between the blocks, no nested or
/// repeated tags, and a non-blank answer.
pub fn validate_format(text: &str) -> FormatOutcome {
    parse_blocks(text).unwrap_or_else(FormatOutcome::invalid)
}

fn parse_blocks(text: &str) -> Option<FormatOutcome> {
    let rest = text.trim().strip_prefix("<think>")?;
    let (think, rest) = rest.split_once("</think>")?;
    let rest = rest.trim_start().strip_prefix("<answer>")?;
    let answer = rest.strip_suffix("</answer>")?;
    if TAGS.iter().any(|t| think.contains(t) || answer.contains(t)) {
        return None;
    }
    let answer = answer.trim();
    if answer.is_empty() {
        return None;
    }
    Some(FormatOutcome {
        valid: true,
        answer_text: Some(answer.to_string()),
        think_text: Some(think.trim().to_string()),
    })
}

pub fn format_reward(outcome: &FormatOutcome) -> f64 {
    if outcome.valid {
        1.0
    } else {
        -1.0
    }
}

/// Linear map of rank `1..=n` onto `[1, -1]`.
///
/// A one-item corpus has only the best rank, which maps to `1.0`.
pub fn rank_reward(rank: usize, n: usize) -> Result<f64> {
    if n == 0 || rank == 0 || rank > n {
        return Err(param(format!("rank {rank} outside 1..={n}")));
    }
    if n == 1 {
        log::warn!("rank reward on a single-item corpus; returning 1.0");
        return Ok(1.0);
    }
    Ok(1.0 - 2.0 * (rank - 1) as f64 / (n - 1) as f64)
}

/// Similarity of the rewrite to the target item. Contrast baseline only.
pub fn similarity_reward(rewrite: &Embedding, target: &Embedding) -> Result<f64> {
    cosine(rewrite, target)
}

pub fn total_reward(format: f64, active: f64) -> f64 {
    format + active
}

/// Which retrieval reward is added to the format reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    #[default]
    Rank,
    Similarity,
}

impl fmt::Display for RewardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RewardMode::Rank => "rank",
            RewardMode::Similarity => "similarity",
        })
    }
}

impl FromStr for RewardMode {
    type Err = crate::error::GrapeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank" => Ok(RewardMode::Rank),
            "similarity" => Ok(RewardMode::Similarity),
            _ => Err(param(format!("unknown reward mode `{s}`"))),
        }
    }
}

/// Full reward record of one sampled rewrite.
#[derive(Debug, Clone, PartialEq)]
pub struct RewriteOutcome {
    pub format_reward: f64,
    pub rank: Option<usize>,
    pub rank_reward: f64,
    pub similarity_reward: f64,
    pub total: f64,
}

impl RewriteOutcome {
    /// Outcome for an output that failed the format gate; retrieval is skipped.
    pub fn skipped() -> Self {
        Self {
            format_reward: -1.0,
            rank: None,
            rank_reward: 0.0,
            similarity_reward: 0.0,
            total: total_reward(-1.0, 0.0),
        }
    }

    /// Outcome for a conforming output whose target landed at `rank` of `n`.
    pub fn scored(rank: usize, n: usize, similarity: f64, mode: RewardMode) -> Result<Self> {
        let rank_r = rank_reward(rank, n)?;
        let active = match mode {
            RewardMode::Rank => rank_r,
            RewardMode::Similarity => similarity,
        };
        Ok(Self {
            format_reward: 1.0,
            rank: Some(rank),
            rank_reward: rank_r,
            similarity_reward: similarity,
            total: total_reward(1.0, active),
        })
    }

    pub fn is_valid(&self) -> bool {
        self.format_reward > 0.0
    }
}

/// Population mean and standard deviation.
pub fn population_stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(R_k - mean) / std` over the group; all zeros when `std <= eps`.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(param(format!(
            "group needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let (mean, std) = population_stats(rewards);
    Ok(standardize(rewards, mean, std, eps))
}

fn standardize(rewards: &[f64], mean: f64, std: f64, eps: f64) -> Vec<f64> {
    if std <= eps || !std.is_finite() {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// The `K` outcomes of one query with their group statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RewriteGroup {
    pub outcomes: Vec<RewriteOutcome>,
    pub mean: f64,
    pub std: f64,
    pub advantages: Vec<f64>,
}

impl RewriteGroup {
    /// Invalid outcomes enter the statistics unless `exclude_invalid` is
    /// set, in which case mean/std come from the valid outcomes (when at
    /// least two exist) and every outcome is standardized against them.
    pub fn from_outcomes(
        outcomes: Vec<RewriteOutcome>,
        eps: f64,
        exclude_invalid: bool,
    ) -> Result<Self> {
        if outcomes.len() < 2 {
            return Err(param(format!(
                "group needs at least 2 outcomes, got {}",
                outcomes.len()
            )));
        }
        let totals: Vec<f64> = outcomes.iter().map(|o| o.total).collect();
        let valid: Vec<f64> = outcomes
            .iter()
            .filter(|o| o.is_valid())
            .map(|o| o.total)
            .collect();
        let (mean, std) = if exclude_invalid && valid.len() >= 2 {
            population_stats(&valid)
        } else {
            population_stats(&totals)
        };
        let advantages = standardize(&totals, mean, std, eps);
        Ok(Self {
            outcomes,
            mean,
            std,
            advantages,
        })
    }
}

/// One line of the per-rewrite outcome log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub query_id: u64,
    pub rewrite_index: usize,
    pub valid: bool,
    pub rank: Option<usize>,
    pub reward_f: f64,
    pub reward_r: f64,
    pub reward_s: f64,
    pub total: f64,
    pub advantage: f64,
}

impl OutcomeRecord {
    pub fn from_group(query_id: u64, group: &RewriteGroup) -> Vec<Self> {
        group
            .outcomes
            .iter()
            .zip(&group.advantages)
            .enumerate()
            .map(|(k, (o, &a))| OutcomeRecord {
                query_id,
                rewrite_index: k,
                valid: o.is_valid(),
                rank: o.rank,
                reward_f: o.format_reward,
                reward_r: o.rank_reward,
                reward_s: o.similarity_reward,
                total: o.total,
                advantage: a,
            })
            .collect()
    }
}
