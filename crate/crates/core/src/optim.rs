//! Group-relative policy optimization of the rewrite policy.
//!
//! Each step samples a batch of queries, draws `K` rewrites per query,
//! scores them against the frozen index, standardizes rewards within each
//! group and takes one gradient-ascent step on
//!
//! ```text
//! J(theta) = mean_q [ (1/K) sum_k A_k log pi(a_k | q) ] - lambda * mean_q KL(pi || pi_ref)
//! ```
//!
//! Advantages are constants with respect to `theta`.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, GrapeError, Result};
use crate::policy::{
    accumulate_theta_grad, dkl_dlogits, dlogprob_dlogits, greedy_action, kl_to_reference,
    sample_group, PolicyParams, QueryContext, ReferencePolicy,
};
use crate::reward::{OutcomeRecord, RewardMode, RewriteGroup, RewriteOutcome, DEFAULT_STD_EPS};
use crate::vecindex::{cosine, recall_from_ranks, CorpusIndex, Embedding};

/// Cut-offs reported in the final validation table.
pub const RECALL_TABLE_KS: [usize; 4] = [1, 5, 10, 50];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub group_size: usize,
    pub kl_weight: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_queries: usize,
    pub reward_mode: RewardMode,
    pub eps_std: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub exclude_invalid_from_stats: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            kl_weight: 0.04,
            learning_rate: 0.05,
            steps: 300,
            batch_queries: 16,
            reward_mode: RewardMode::Rank,
            eps_std: DEFAULT_STD_EPS,
            seed: 7,
            eval_every: 10,
            exclude_invalid_from_stats: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(param("group_size must be at least 2"));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(param("kl_weight must be finite and non-negative"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(param("learning_rate must be finite and positive"));
        }
        if self.batch_queries == 0 {
            return Err(param("batch_queries must be positive"));
        }
        if !(self.eps_std >= 0.0 && self.eps_std.is_finite()) {
            return Err(param("eps_std must be finite and non-negative"));
        }
        if self.eval_every == 0 {
            return Err(param("eval_every must be positive"));
        }
        Ok(())
    }
}

/// Per-step metrics. Recalls come from the most recent validation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub objective: f64,
    pub mean_total_reward: f64,
    pub mean_kl: f64,
    pub recall_at_1: f64,
    pub recall_at_10: f64,
    pub mean_similarity_to_target: f64,
    pub invalid_format_rate: f64,
}

/// Validation recall at each of [`RECALL_TABLE_KS`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallTable {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
}

impl RecallTable {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }
}

/// Trailing record of a report stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub initial: RecallTable,
    #[serde(rename = "final")]
    pub final_: RecallTable,
}

/// Where sampled rewrites become retrieval-space embeddings.
pub trait RewriteEnv {
    fn index(&self) -> &CorpusIndex;
    fn queries(&self) -> &[QueryContext];
    fn action_count(&self) -> usize;
    /// One entry per action; `None` marks an output that failed the
    /// format gate (retrieval is skipped for it).
    fn realize(
        &mut self,
        query_index: usize,
        actions: &[usize],
        request_seed: u64,
    ) -> Result<Vec<Option<Embedding>>>;
}

/// A scored group ready for the objective: the query, its sampled actions
/// and their rewards/advantages.
#[derive(Debug, Clone)]
pub struct ScoredGroup {
    pub ctx: QueryContext,
    pub actions: Vec<usize>,
    pub group: RewriteGroup,
}

impl ScoredGroup {
    fn check(&self) -> Result<()> {
        if self.group.advantages.len() != self.actions.len()
            || self.group.outcomes.len() != self.actions.len()
        {
            return Err(GrapeError::State(format!(
                "query {}: {} actions but {} advantages",
                self.ctx.query_id,
                self.actions.len(),
                self.group.advantages.len()
            )));
        }
        Ok(())
    }
}

fn check_groups(groups: &[ScoredGroup]) -> Result<()> {
    if groups.is_empty() {
        return Err(GrapeError::State("objective needs at least one group".into()));
    }
    groups.iter().try_for_each(ScoredGroup::check)
}

pub fn grpo_objective(
    groups: &[ScoredGroup],
    params: &PolicyParams,
    reference: &PolicyParams,
    kl_weight: f64,
) -> Result<f64> {
    check_groups(groups)?;
    let mut surrogate = 0.0;
    let mut kl = 0.0;
    for g in groups {
        let lp = params.log_probs(&g.ctx)?;
        let k = g.actions.len() as f64;
        surrogate += g
            .actions
            .iter()
            .zip(&g.group.advantages)
            .map(|(&a, &adv)| adv * lp[a])
            .sum::<f64>()
            / k;
        kl += kl_to_reference(params, reference, &g.ctx)?;
    }
    let q = groups.len() as f64;
    Ok(surrogate / q - kl_weight * kl / q)
}

/// Exact gradient of [`grpo_objective`] with respect to `theta`.
pub fn grpo_gradient(
    groups: &[ScoredGroup],
    params: &PolicyParams,
    reference: &PolicyParams,
    kl_weight: f64,
) -> Result<Array2<f64>> {
    check_groups(groups)?;
    let mut grad = Array2::zeros(params.theta.raw_dim());
    let q = groups.len() as f64;
    for g in groups {
        let lp = params.log_probs(&g.ctx)?;
        let k = g.actions.len() as f64;
        let mut dz = ndarray::Array1::zeros(lp.len());
        for (&a, &adv) in g.actions.iter().zip(&g.group.advantages) {
            if adv != 0.0 {
                dz.scaled_add(adv / k, &dlogprob_dlogits(&lp, a));
            }
        }
        if kl_weight != 0.0 {
            let lq = reference.log_probs(&g.ctx)?;
            dz.scaled_add(-kl_weight, &dkl_dlogits(&lp, &lq)?);
        }
        accumulate_theta_grad(&mut grad, &g.ctx.features, &dz, params.temperature, 1.0 / q);
    }
    if grad.iter().any(|x| !x.is_finite()) {
        return Err(GrapeError::Numerics("non-finite gradient".into()));
    }
    Ok(grad)
}

/// Gradient ascent: `theta + lr * grad`.
pub fn apply_step(
    params: &PolicyParams,
    gradient: &Array2<f64>,
    learning_rate: f64,
) -> Result<PolicyParams> {
    if gradient.raw_dim() != params.theta.raw_dim() {
        return Err(param("gradient shape does not match theta"));
    }
    let theta = &params.theta + &(gradient * learning_rate);
    if theta.iter().any(|x| !x.is_finite()) {
        return Err(GrapeError::Numerics("parameter update produced non-finite theta".into()));
    }
    Ok(PolicyParams {
        theta,
        temperature: params.temperature,
    })
}

/// SplitMix64 finalizer folded over `parts`; derives independent stream seeds.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut x = seed;
    for &p in parts {
        x ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

const TAG_BATCH: u64 = 1;
const TAG_SAMPLE: u64 = 2;
const TAG_REALIZE: u64 = 3;
const TAG_VALIDATE: u64 = 4;

/// Query indices used at `step`.
pub fn batch_indices(seed: u64, step: usize, queries: usize, batch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..queries).collect();
    if batch >= queries {
        return idx;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_BATCH, step as u64]));
    idx.shuffle(&mut rng);
    idx.truncate(batch);
    idx.sort_unstable();
    idx
}

/// Score realized rewrites for one query.
pub fn score_rewrites(
    index: &CorpusIndex,
    ctx: &QueryContext,
    realized: &[Option<Embedding>],
    mode: RewardMode,
) -> Result<Vec<RewriteOutcome>> {
    let target = index
        .get(ctx.target_id)
        .ok_or(GrapeError::TargetNotFound(ctx.target_id))?;
    realized
        .iter()
        .map(|r| match r {
            None => Ok(RewriteOutcome::skipped()),
            Some(e) => {
                let rank = index.rank_of_target(e, ctx.target_id)?;
                let sim = cosine(e, target)?;
                RewriteOutcome::scored(rank, index.len(), sim, mode)
            }
        })
        .collect()
}

/// Greedy-decode every query and report recall at each `k`.
pub fn validate<E: RewriteEnv>(
    env: &mut E,
    params: &PolicyParams,
    seed: u64,
    pass: u64,
    ks: &[usize],
) -> Result<RecallTable> {
    let ranks = validation_ranks(env, params, seed, pass)?;
    let recall = ks
        .iter()
        .map(|&k| recall_from_ranks(&ranks, k))
        .collect::<Result<_>>()?;
    Ok(RecallTable {
        ks: ks.to_vec(),
        recall,
    })
}

/// Target rank of each query's greedy rewrite; format failures count as
/// `N + 1` (never retrieved).
pub fn validation_ranks<E: RewriteEnv>(
    env: &mut E,
    params: &PolicyParams,
    seed: u64,
    pass: u64,
) -> Result<Vec<usize>> {
    let n = env.index().len();
    let mut ranks = Vec::with_capacity(env.queries().len());
    for qi in 0..env.queries().len() {
        let ctx = env.queries()[qi].clone();
        let a = greedy_action(params, &ctx)?;
        let req = derive_seed(seed, &[TAG_VALIDATE, pass, qi as u64]);
        let realized = env.realize(qi, &[a], req)?;
        ranks.push(match &realized[0] {
            Some(e) => env.index().rank_of_target(e, ctx.target_id)?,
            None => n + 1,
        });
    }
    Ok(ranks)
}

/// Everything a training run produced.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub reports: Vec<StepReport>,
    pub outcomes: Vec<OutcomeRecord>,
    pub summary: Option<RunSummary>,
}

/// A run that stopped early; `partial` holds the completed steps.
#[derive(Debug)]
pub struct TrainFailure {
    pub step: usize,
    pub error: GrapeError,
    pub partial: TrainOutput,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training failed at step {}: {}", self.step, self.error)
    }
}

impl std::error::Error for TrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

struct StepResult {
    report: StepReport,
    outcomes: Vec<OutcomeRecord>,
    next: PolicyParams,
}

/// Run `config.steps` optimization steps, updating `params` in place.
pub fn train<E: RewriteEnv>(
    env: &mut E,
    params: &mut PolicyParams,
    config: &TrainConfig,
) -> std::result::Result<TrainOutput, TrainFailure> {
    let fail = |step, error, partial| TrainFailure {
        step,
        error,
        partial,
    };
    let mut out = TrainOutput::default();
    if let Err(e) = check_env(env, params, config) {
        return Err(fail(0, e, out));
    }
    if config.steps == 0 {
        return Ok(out);
    }
    let reference = crate::policy::snapshot_reference(params);
    let initial = match validate(env, params, config.seed, 0, &RECALL_TABLE_KS) {
        Ok(t) => t,
        Err(e) => return Err(fail(0, e, out)),
    };
    let mut recall = (initial.at(1).unwrap(), initial.at(10).unwrap());

    for step in 0..config.steps {
        if step > 0 && step % config.eval_every == 0 {
            match validate(env, params, config.seed, step as u64, &[1, 10]) {
                Ok(t) => recall = (t.recall[0], t.recall[1]),
                Err(e) => return Err(fail(step, e, out)),
            }
        }
        match run_step(env, params, &reference, config, step, recall) {
            Ok(r) => {
                *params = r.next;
                out.reports.push(r.report);
                out.outcomes.extend(r.outcomes);
            }
            Err(e) => return Err(fail(step, e, out)),
        }
    }

    match validate(env, params, config.seed, config.steps as u64, &RECALL_TABLE_KS) {
        Ok(final_) => {
            out.summary = Some(RunSummary { initial, final_ });
            Ok(out)
        }
        Err(e) => Err(fail(config.steps, e, out)),
    }
}

fn check_env<E: RewriteEnv>(env: &E, params: &PolicyParams, config: &TrainConfig) -> Result<()> {
    config.validate()?;
    if env.queries().is_empty() {
        return Err(param("environment has no queries"));
    }
    if env.action_count() != params.action_count() {
        return Err(param(format!(
            "policy has {} actions, environment {}",
            params.action_count(),
            env.action_count()
        )));
    }
    for q in env.queries() {
        if q.features.len() != params.feature_dim() {
            return Err(GrapeError::Dimension {
                expected: params.feature_dim(),
                got: q.features.len(),
            });
        }
        if !env.index().contains(q.target_id) {
            return Err(GrapeError::TargetNotFound(q.target_id));
        }
    }
    Ok(())
}

fn run_step<E: RewriteEnv>(
    env: &mut E,
    params: &PolicyParams,
    reference: &ReferencePolicy,
    config: &TrainConfig,
    step: usize,
    recall: (f64, f64),
) -> Result<StepResult> {
    let batch = batch_indices(config.seed, step, env.queries().len(), config.batch_queries);
    let mut groups = Vec::with_capacity(batch.len());
    let mut outcomes = Vec::new();
    let (mut total, mut sim_sum, mut valid, mut invalid) = (0.0, 0.0, 0usize, 0usize);

    for &qi in &batch {
        let ctx = env.queries()[qi].clone();
        let sample_seed = derive_seed(config.seed, &[TAG_SAMPLE, step as u64, qi as u64]);
        let actions = sample_group(params, &ctx, config.group_size, sample_seed)?;
        let realize_seed = derive_seed(config.seed, &[TAG_REALIZE, step as u64, qi as u64]);
        let realized = env.realize(qi, &actions, realize_seed)?;
        if realized.len() != actions.len() {
            return Err(GrapeError::State(format!(
                "environment realized {} of {} rewrites",
                realized.len(),
                actions.len()
            )));
        }
        let scored = score_rewrites(env.index(), &ctx, &realized, config.reward_mode)?;
        for o in &scored {
            total += o.total;
            if o.is_valid() {
                valid += 1;
                sim_sum += o.similarity_reward;
            } else {
                invalid += 1;
            }
        }
        let group = RewriteGroup::from_outcomes(
            scored,
            config.eps_std,
            config.exclude_invalid_from_stats,
        )?;
        outcomes.extend(OutcomeRecord::from_group(ctx.query_id, &group));
        groups.push(ScoredGroup {
            ctx,
            actions,
            group,
        });
    }

    let objective = grpo_objective(&groups, params, reference, config.kl_weight)?;
    let mean_kl = groups
        .iter()
        .map(|g| kl_to_reference(params, reference, &g.ctx))
        .sum::<Result<f64>>()?
        / groups.len() as f64;
    let grad = grpo_gradient(&groups, params, reference, config.kl_weight)?;
    let next = apply_step(params, &grad, config.learning_rate)?;

    let n = (valid + invalid) as f64;
    Ok(StepResult {
        report: StepReport {
            step,
            objective,
            mean_total_reward: total / n,
            mean_kl,
            recall_at_1: recall.0,
            recall_at_10: recall.1,
            mean_similarity_to_target: if valid > 0 { sim_sum / valid as f64 } else { 0.0 },
            invalid_format_rate: invalid as f64 / n,
        },
        outcomes,
        next,
    })
}

/// Ordinary least-squares slope of `ys` against `0, 1, 2, ...`.
pub fn ols_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let xm = (n - 1.0) / 2.0;
    let ym = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &y) in ys.iter().enumerate() {
        let dx = i as f64 - xm;
        sxy += dx * (y - ym);
        sxx += dx * dx;
    }
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ctx(features: Vec<f64>) -> QueryContext {
        QueryContext {
            query_id: 0,
            features,
            target_id: 0,
        }
    }

    fn group_with(advantages: Vec<f64>) -> RewriteGroup {
        RewriteGroup {
            outcomes: advantages.iter().map(|_| RewriteOutcome::skipped()).collect(),
            mean: 0.0,
            std: 0.0,
            advantages,
        }
    }

    #[test]
    fn objective_by_hand() {
        // logits are the log-probs themselves: pi = [e^-0.5, e^-2, rest]
        let p0 = (-0.5f64).exp();
        let p1 = (-2.0f64).exp();
        let p = PolicyParams::new(array![[-0.5, -2.0, (1.0 - p0 - p1).ln()]], 1.0).unwrap();
        let g = ScoredGroup {
            ctx: ctx(vec![1.0]),
            actions: vec![0, 1],
            group: group_with(vec![1.0, -1.0]),
        };
        let j = grpo_objective(&[g], &p, &p, 0.0).unwrap();
        assert!((j - 0.75).abs() < 1e-12);
    }

    #[test]
    fn zero_advantage_at_reference_vanishes() {
        let p = PolicyParams::new(array![[0.3, -1.2, 0.4]], 1.0).unwrap();
        let g = ScoredGroup {
            ctx: ctx(vec![1.0]),
            actions: vec![0, 2, 2],
            group: group_with(vec![0.0; 3]),
        };
        assert_eq!(grpo_objective(&[g.clone()], &p, &p, 0.04).unwrap(), 0.0);
        let grad = grpo_gradient(&[g], &p, &p, 0.0).unwrap();
        assert!(grad.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn kl_weight_lowers_objective() {
        let p = PolicyParams::new(array![[0.3, -1.2, 0.4]], 1.0).unwrap();
        let r = PolicyParams::zeros(1, 3, 1.0).unwrap();
        let g = ScoredGroup {
            ctx: ctx(vec![1.0]),
            actions: vec![0, 1],
            group: group_with(vec![0.5, -0.5]),
        };
        let a = grpo_objective(&[g.clone()], &p, &r, 0.1).unwrap();
        let b = grpo_objective(&[g], &p, &r, 0.2).unwrap();
        assert!(b < a);
    }

    #[test]
    fn missing_advantages_is_state_error() {
        let p = PolicyParams::zeros(1, 3, 1.0).unwrap();
        let g = ScoredGroup {
            ctx: ctx(vec![1.0]),
            actions: vec![0, 1],
            group: group_with(vec![]),
        };
        assert!(matches!(
            grpo_objective(&[g.clone()], &p, &p, 0.0),
            Err(GrapeError::State(_))
        ));
        assert!(matches!(grpo_gradient(&[g], &p, &p, 0.0), Err(GrapeError::State(_))));
        assert!(matches!(grpo_objective(&[], &p, &p, 0.0), Err(GrapeError::State(_))));
    }

    #[test]
    fn step_edge_cases() {
        let p = PolicyParams::new(array![[0.3, -1.2]], 1.0).unwrap();
        let zero = Array2::zeros((1, 2));
        assert_eq!(apply_step(&p, &zero, 0.5).unwrap(), p);
        assert_eq!(apply_step(&p, &array![[1.0, 2.0]], 0.0).unwrap(), p);
        assert!(apply_step(&p, &array![[f64::INFINITY, 0.0]], 1.0).is_err());
        assert!(apply_step(&p, &array![[1.0]], 1.0).is_err());
    }

    #[test]
    fn ascent_increases_objective() {
        let p = PolicyParams::new(array![[0.3, -1.2, 0.4, 0.0]], 1.0).unwrap();
        let r = crate::policy::snapshot_reference(&p);
        let g = ScoredGroup {
            ctx: ctx(vec![1.0]),
            actions: vec![0, 1, 3, 3],
            group: group_with(vec![1.5, -0.5, -0.5, -0.5]),
        };
        let grad = grpo_gradient(&[g.clone()], &p, &r, 0.0).unwrap();
        let next = apply_step(&p, &grad, 1e-3).unwrap();
        assert!(
            grpo_objective(&[g.clone()], &next, &r, 0.0).unwrap()
                > grpo_objective(&[g], &p, &r, 0.0).unwrap()
        );
    }

    #[test]
    fn batches_are_seeded_subsets() {
        let a = batch_indices(3, 5, 64, 16);
        assert_eq!(a, batch_indices(3, 5, 64, 16));
        assert_ne!(a, batch_indices(3, 6, 64, 16));
        assert_eq!(a.len(), 16);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(batch_indices(3, 5, 8, 16), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn slope() {
        assert!((ols_slope(&[1.0, 3.0, 5.0, 7.0]) - 2.0).abs() < 1e-12);
        assert_eq!(ols_slope(&[4.0]), 0.0);
        assert!(ols_slope(&[3.0, 2.0, 1.0]) < 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { group_size: 1, ..Default::default() },
            TrainConfig { kl_weight: -1.0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { batch_queries: 0, ..Default::default() },
            TrainConfig { eval_every: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
