//! Linear-softmax rewrite policy.
//!
//! The policy picks one of `A` rewrite actions for a query with features
//! `x`: `pi(a | x) = softmax(x^T theta / tau)_a`. Log-probabilities, KL
//! to a frozen reference and their gradients are exact.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{param, GrapeError, Result};
use crate::vecindex::Embedding;

/// One rewrite the policy can choose, with its retrieval-space embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteAction {
    pub action_id: usize,
    pub embedding: Embedding,
    pub label: String,
}

/// What the policy sees of a query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryContext {
    pub query_id: u64,
    pub features: Vec<f64>,
    pub target_id: u64,
}

/// Query featurization used to build [`QueryContext::features`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Featurizer {
    /// Indicator of the query's position among `queries`.
    OneHot { queries: usize },
    /// Seeded Gaussian features of width `dim`, scaled by `1/sqrt(dim)`.
    RandomProjection { dim: usize, seed: u64 },
}

impl Featurizer {
    pub fn dim(&self) -> usize {
        match *self {
            Featurizer::OneHot { queries } => queries,
            Featurizer::RandomProjection { dim, .. } => dim,
        }
    }

    pub fn features(&self, query_index: usize) -> Vec<f64> {
        match *self {
            Featurizer::OneHot { queries } => {
                let mut v = vec![0.0; queries];
                v[query_index] = 1.0;
                v
            }
            Featurizer::RandomProjection { dim, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (query_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let scale = 1.0 / (dim as f64).sqrt();
                (0..dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        scale * z
                    })
                    .collect()
            }
        }
    }
}

/// Policy parameters: `theta` has shape `(feature_dim, action_count)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub theta: Array2<f64>,
    pub temperature: f64,
}

impl PolicyParams {
    pub fn zeros(feature_dim: usize, action_count: usize, temperature: f64) -> Result<Self> {
        Self::new(Array2::zeros((feature_dim, action_count)), temperature)
    }

    pub fn new(theta: Array2<f64>, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(param(format!("temperature must be positive, got {temperature}")));
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(GrapeError::Numerics("non-finite policy parameter".into()));
        }
        if theta.nrows() == 0 || theta.ncols() == 0 {
            return Err(param("policy needs at least one feature and one action"));
        }
        Ok(Self { theta, temperature })
    }

    pub fn feature_dim(&self) -> usize {
        self.theta.nrows()
    }

    pub fn action_count(&self) -> usize {
        self.theta.ncols()
    }

    fn check_ctx(&self, ctx: &QueryContext) -> Result<()> {
        if ctx.features.len() != self.feature_dim() {
            return Err(GrapeError::Dimension {
                expected: self.feature_dim(),
                got: ctx.features.len(),
            });
        }
        Ok(())
    }

    /// `x^T theta / tau`.
    pub fn logits(&self, ctx: &QueryContext) -> Result<Array1<f64>> {
        self.check_ctx(ctx)?;
        let x = ArrayView1::from(&ctx.features[..]);
        let z = x.dot(&self.theta) / self.temperature;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(GrapeError::Numerics(format!(
                "non-finite logits for query {}",
                ctx.query_id
            )));
        }
        Ok(z)
    }

    /// Log-probabilities of every action via log-sum-exp.
    pub fn log_probs(&self, ctx: &QueryContext) -> Result<Array1<f64>> {
        Ok(log_softmax(&self.logits(ctx)?))
    }
}

/// Read-only copy of the parameters the policy is regularized toward.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy(PolicyParams);

impl ReferencePolicy {
    pub fn params(&self) -> &PolicyParams {
        &self.0
    }
}

impl std::ops::Deref for ReferencePolicy {
    type Target = PolicyParams;
    fn deref(&self) -> &PolicyParams {
        &self.0
    }
}

pub fn snapshot_reference(params: &PolicyParams) -> ReferencePolicy {
    ReferencePolicy(params.clone())
}

pub fn log_softmax(z: &Array1<f64>) -> Array1<f64> {
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.mapv(|v| v - lse)
}

pub fn policy_probs(params: &PolicyParams, ctx: &QueryContext) -> Result<Array1<f64>> {
    Ok(params.log_probs(ctx)?.mapv(f64::exp))
}

pub fn log_prob(params: &PolicyParams, ctx: &QueryContext, action_id: usize) -> Result<f64> {
    if action_id >= params.action_count() {
        return Err(param(format!(
            "action {action_id} outside 0..{}",
            params.action_count()
        )));
    }
    Ok(params.log_probs(ctx)?[action_id])
}

/// Inverse-CDF draw from `probs` given `u` in `[0, 1)`.
fn draw(probs: &Array1<f64>, u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the accumulated mass
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// `k` independent draws from the policy, reproducible from `seed`.
pub fn sample_group(
    params: &PolicyParams,
    ctx: &QueryContext,
    k: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(param(format!("group size must be at least 2, got {k}")));
    }
    let probs = policy_probs(params, ctx)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..k).map(|_| draw(&probs, rng.random::<f64>())).collect())
}

/// Highest-probability action, ties to the lowest id.
pub fn greedy_action(params: &PolicyParams, ctx: &QueryContext) -> Result<usize> {
    let z = params.logits(ctx)?;
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Exact `KL(pi_theta || pi_ref)` for one query.
pub fn kl_to_reference(
    params: &PolicyParams,
    reference: &PolicyParams,
    ctx: &QueryContext,
) -> Result<f64> {
    if params.action_count() != reference.action_count() {
        return Err(param("policy and reference have different action spaces"));
    }
    let lp = params.log_probs(ctx)?;
    let lq = reference.log_probs(ctx)?;
    kl_from_logs(&lp, &lq)
}

fn kl_from_logs(lp: &Array1<f64>, lq: &Array1<f64>) -> Result<f64> {
    let mut kl = 0.0;
    for (&a, &b) in lp.iter().zip(lq) {
        let p = a.exp();
        if p == 0.0 {
            continue;
        }
        if b == f64::NEG_INFINITY {
            return Err(GrapeError::Numerics(
                "reference assigns zero mass where the policy does not".into(),
            ));
        }
        kl += p * (a - b);
    }
    // Gibbs: true KL is non-negative; rounding can leave -1e-17.
    Ok(kl.max(0.0))
}

/// Gradient of `log pi(action)` with respect to the logits `z`.
pub fn dlogprob_dlogits(log_probs: &Array1<f64>, action: usize) -> Array1<f64> {
    let mut g = log_probs.mapv(|l| -l.exp());
    g[action] += 1.0;
    g
}

/// Gradient of `KL(p || q)` with respect to the policy logits.
pub fn dkl_dlogits(lp: &Array1<f64>, lq: &Array1<f64>) -> Result<Array1<f64>> {
    let kl = kl_from_logs(lp, lq)?;
    Ok(ndarray::Zip::from(lp)
        .and(lq)
        .map_collect(|&a, &b| a.exp() * (a - b - kl)))
}

/// Pull a logit-space gradient back to `theta`: `x (dz)^T / tau`,
/// accumulated into `out` with weight `scale`.
pub fn accumulate_theta_grad(
    out: &mut Array2<f64>,
    features: &[f64],
    dz: &Array1<f64>,
    temperature: f64,
    scale: f64,
) {
    let w = scale / temperature;
    for (f, &x) in features.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let mut row = out.row_mut(f);
        row.scaled_add(w * x, dz);
    }
}

/// Gradient of `log pi(action | ctx)` with respect to `theta`.
pub fn grad_log_prob(
    params: &PolicyParams,
    ctx: &QueryContext,
    action: usize,
) -> Result<Array2<f64>> {
    let lp = params.log_probs(ctx)?;
    let mut g = Array2::zeros(params.theta.raw_dim());
    accumulate_theta_grad(&mut g, &ctx.features, &dlogprob_dlogits(&lp, action), params.temperature, 1.0);
    Ok(g)
}

/// Gradient of the per-query KL with respect to `theta`.
pub fn grad_kl(
    params: &PolicyParams,
    reference: &PolicyParams,
    ctx: &QueryContext,
) -> Result<Array2<f64>> {
    let lp = params.log_probs(ctx)?;
    let lq = reference.log_probs(ctx)?;
    let mut g = Array2::zeros(params.theta.raw_dim());
    accumulate_theta_grad(&mut g, &ctx.features, &dkl_dlogits(&lp, &lq)?, params.temperature, 1.0);
    Ok(g)
}

/// Per-query action table stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionTable {
    pub query_id: u64,
    /// `(action_id, label, embedding reference)`
    pub entries: Vec<(usize, String, String)>,
}

/// Checkpoint layout: header `feature_dim=<F> actions=<A> tau=<t>`, then
/// `F` rows of `theta`, then for every query a line `actions query=<id>`
/// followed by `<action_id> <label> <embedding reference>` lines.
pub fn write_checkpoint<W: Write>(
    params: &PolicyParams,
    tables: &[ActionTable],
    mut out: W,
) -> Result<()> {
    writeln!(
        out,
        "feature_dim={} actions={} tau={}",
        params.feature_dim(),
        params.action_count(),
        params.temperature
    )?;
    for row in params.theta.rows() {
        let mut line = String::new();
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            write!(line, "{v}").unwrap();
        }
        writeln!(out, "{line}")?;
    }
    for t in tables {
        writeln!(out, "actions query={}", t.query_id)?;
        for (id, label, reference) in &t.entries {
            if label.contains(char::is_whitespace) || reference.contains(char::is_whitespace) {
                return Err(param(format!("action label `{label}` contains whitespace")));
            }
            writeln!(out, "{id} {label} {reference}")?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<(PolicyParams, Vec<ActionTable>)> {
    let perr = |line: usize, m: String| GrapeError::Parse { line, message: m };
    let mut lines = input.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| perr(1, "empty checkpoint".into()))?;
    let header = header?;
    let mut fdim = None;
    let mut adim = None;
    let mut tau = None;
    for tok in header.split_whitespace() {
        match tok.split_once('=') {
            Some(("feature_dim", v)) => fdim = v.parse::<usize>().ok(),
            Some(("actions", v)) => adim = v.parse::<usize>().ok(),
            Some(("tau", v)) => tau = v.parse::<f64>().ok(),
            _ => return Err(perr(1, format!("unexpected header token `{tok}`"))),
        }
    }
    let (Some(fdim), Some(adim), Some(tau)) = (fdim, adim, tau) else {
        return Err(perr(1, "header must be `feature_dim=<F> actions=<A> tau=<t>`".into()));
    };
    let mut theta = Array2::zeros((fdim, adim));
    for f in 0..fdim {
        let (i, line) = lines
            .next()
            .ok_or_else(|| perr(f + 2, "missing theta row".into()))?;
        let line = line?;
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| perr(i + 1, format!("bad float `{t}`"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != adim {
            return Err(perr(i + 1, format!("expected {adim} values, found {}", vals.len())));
        }
        theta.row_mut(f).assign(&Array1::from(vals));
    }
    let mut tables: Vec<ActionTable> = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(q) = line.strip_prefix("actions query=") {
            let query_id = q
                .trim()
                .parse()
                .map_err(|_| perr(i + 1, format!("bad query id `{q}`")))?;
            tables.push(ActionTable {
                query_id,
                entries: Vec::new(),
            });
            continue;
        }
        let table = tables
            .last_mut()
            .ok_or_else(|| perr(i + 1, "action line before any `actions query=` line".into()))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        let [id, label, reference] = toks[..] else {
            return Err(perr(i + 1, "expected `<action_id> <label> <embedding reference>`".into()));
        };
        let id = id
            .parse()
            .map_err(|_| perr(i + 1, format!("bad action id `{id}`")))?;
        table.entries.push((id, label.to_string(), reference.to_string()));
    }
    Ok((PolicyParams::new(theta, tau)?, tables))
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

    #[test]
    fn uniform_at_zero() {
        let p = PolicyParams::zeros(3, 4, 1.0).unwrap();
        let c = ctx(vec![1.0, -2.0, 0.5]);
        let probs = policy_probs(&p, &c).unwrap();
        for &x in probs.iter() {
            assert!((x - 0.25).abs() < 1e-15);
        }
        assert!((log_prob(&p, &c, 2).unwrap() - 0.25f64.ln()).abs() < 1e-12);
        assert!((log_prob(&p, &c, 2).unwrap() + 1.3863).abs() < 1e-4);
        assert!(log_prob(&p, &c, 4).is_err());
    }

    #[test]
    fn saturation() {
        let p = PolicyParams::new(array![[50.0, 0.0, 0.0]], 1.0).unwrap();
        let probs = policy_probs(&p, &ctx(vec![1.0])).unwrap();
        // the other two carry e^-50 each
        assert!(probs[1] < 1e-20 && probs[2] < 1e-20);
        assert!(probs[0] > 1.0 - 1e-15);
        let lp = log_prob(&p, &ctx(vec![1.0]), 0).unwrap();
        assert!(lp <= 0.0 && lp > -1e-20);
        let s = sample_group(&p, &ctx(vec![1.0]), 16, 3).unwrap();
        assert!(s.iter().all(|&a| a == 0));
    }

    #[test]
    fn temperature_flattens() {
        let theta = array![[1.0, 0.2, -0.5]];
        let sharp = policy_probs(&PolicyParams::new(theta.clone(), 1.0).unwrap(), &ctx(vec![1.0])).unwrap();
        let flat = policy_probs(&PolicyParams::new(theta, 2.0).unwrap(), &ctx(vec![1.0])).unwrap();
        let entropy = |p: &Array1<f64>| -p.iter().map(|x| x * x.ln()).sum::<f64>();
        assert!(entropy(&flat) > entropy(&sharp));
        assert!(flat[0] > flat[1] && flat[1] > flat[2]);
    }

    #[test]
    fn invalid_params() {
        assert!(PolicyParams::zeros(2, 2, 0.0).is_err());
        assert!(PolicyParams::zeros(2, 2, f64::NAN).is_err());
        assert!(PolicyParams::new(array![[f64::INFINITY]], 1.0).is_err());
        let p = PolicyParams::zeros(2, 2, 1.0).unwrap();
        assert!(policy_probs(&p, &ctx(vec![1.0])).is_err());
        let p = PolicyParams::new(array![[1e308, 0.0]], 1e-10).unwrap();
        assert!(matches!(
            policy_probs(&p, &ctx(vec![1.0])),
            Err(GrapeError::Numerics(_))
        ));
    }

    #[test]
    fn sampling_is_seeded() {
        let p = PolicyParams::new(array![[0.3, -0.1, 0.8, 0.0]], 1.0).unwrap();
        let c = ctx(vec![1.0]);
        assert_eq!(sample_group(&p, &c, 32, 11).unwrap(), sample_group(&p, &c, 32, 11).unwrap());
        assert_ne!(sample_group(&p, &c, 32, 11).unwrap(), sample_group(&p, &c, 32, 12).unwrap());
        assert!(sample_group(&p, &c, 1, 0).is_err());
    }

    #[test]
    fn sampling_frequencies_match() {
        let p = PolicyParams::new(array![[0.3, -0.1, 0.8, 0.0]], 1.0).unwrap();
        let c = ctx(vec![1.0]);
        let n = 100_000;
        let probs = policy_probs(&p, &c).unwrap();
        let mut counts = [0usize; 4];
        for a in sample_group(&p, &c, n, 2024).unwrap() {
            counts[a] += 1;
        }
        for (i, &cnt) in counts.iter().enumerate() {
            let pi = probs[i];
            let sd = (n as f64 * pi * (1.0 - pi)).sqrt();
            assert!((cnt as f64 - n as f64 * pi).abs() < 3.0 * sd, "action {i}");
        }
    }

    #[test]
    fn kl_values() {
        let p = PolicyParams::new(array![[0.4, -1.0, 2.0]], 1.0).unwrap();
        let c = ctx(vec![1.0]);
        assert_eq!(kl_to_reference(&p, &p, &c).unwrap(), 0.0);

        // p = [0.5, 0.5], q = [0.9, 0.1]
        let pp = PolicyParams::zeros(1, 2, 1.0).unwrap();
        let q = PolicyParams::new(array![[9f64.ln(), 0.0]], 1.0).unwrap();
        let expected = 0.5 * (5.0f64 / 9.0).ln() + 0.5 * 5.0f64.ln();
        assert!((kl_to_reference(&pp, &q, &c).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn snapshot_is_frozen() {
        let mut p = PolicyParams::new(array![[0.1, 0.2], [0.3, -0.4]], 1.0).unwrap();
        let snap = snapshot_reference(&p);
        let c = ctx(vec![0.5, 1.0]);
        assert_eq!(kl_to_reference(&p, &snap, &c).unwrap(), 0.0);
        p.theta[[0, 0]] += 1.0;
        assert_eq!(snap.theta[[0, 0]], 0.1);
        assert!(kl_to_reference(&p, &snap, &c).unwrap() > 0.0);
    }

    #[test]
    fn featurizers() {
        let f = Featurizer::OneHot { queries: 4 };
        assert_eq!(f.features(2), vec![0.0, 0.0, 1.0, 0.0]);
        let r = Featurizer::RandomProjection { dim: 8, seed: 5 };
        assert_eq!(r.features(3), r.features(3));
        assert_ne!(r.features(3), r.features(4));
        assert_eq!(r.dim(), 8);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = PolicyParams::new(array![[0.1, -2.5e-9, 3.0], [1.0 / 3.0, 0.0, -7.0]], 0.7).unwrap();
        let tables = vec![ActionTable {
            query_id: 4,
            entries: vec![(0, "a".into(), "testbed:4/0".into()), (1, "b".into(), "testbed:4/1".into())],
        }];
        let mut buf = Vec::new();
        write_checkpoint(&p, &tables, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("feature_dim=2 actions=3 tau=0.7\n"));
        let (q, t) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(p, q);
        assert_eq!(tables, t);

        let bad = vec![ActionTable {
            query_id: 0,
            entries: vec![(0, "two words".into(), "r".into())],
        }];
        assert!(write_checkpoint(&p, &bad, Vec::new()).is_err());
        assert!(read_checkpoint(&b"feature_dim=1 actions=2\n0 0\n"[..]).is_err());
        assert!(read_checkpoint(&b"feature_dim=1 actions=2 tau=1\n0\n"[..]).is_err());
    }
}
