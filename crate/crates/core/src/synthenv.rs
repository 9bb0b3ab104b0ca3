//! Synthetic retrieval testbeds with a built-in score-inflation trap.
//!
//! Every corpus item mixes a corpus-wide shared direction `u` with a
//! private direction. Discriminative actions point along one item's private
//! direction, so the right one ranks its target first but with a moderate
//! cosine. Generic actions lean on `u`: their cosine to the target is high,
//! yet it is just as high for most other items, so the target's rank stays
//! poor.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{param, GrapeError, Result};
use crate::optim::RewriteEnv;
use crate::policy::{Featurizer, QueryContext, RewriteAction};
use crate::vecindex::{self, cosine, l2_normalize, CorpusIndex, Embedding};

/// Range of the shared-direction weight `alpha` in item embeddings.
pub const SHARED_MIX: (f64, f64) = (0.6, 0.7);

/// Attempts at redrawing a good action's noise before giving up.
const GOOD_ACTION_RETRIES: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestbedSpec {
    pub n: usize,
    pub dim: usize,
    pub queries: usize,
    pub disc_actions: usize,
    pub generic_actions: usize,
    pub generic_strength: f64,
    pub noise: f64,
    pub seed: u64,
    /// `None` selects one-hot query features.
    #[serde(default)]
    pub feature_dim: Option<usize>,
}

impl Default for TestbedSpec {
    fn default() -> Self {
        Self {
            n: 512,
            dim: 64,
            queries: 64,
            disc_actions: 8,
            generic_actions: 4,
            generic_strength: 0.9,
            noise: 0.05,
            seed: 7,
            feature_dim: None,
        }
    }
}

impl TestbedSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.dim < 2 || self.queries < 1 || self.disc_actions < 1 {
            return Err(param("testbed needs n >= 2, dim >= 2, queries >= 1, disc_actions >= 1"));
        }
        if !(0.0..=1.0).contains(&self.generic_strength) {
            return Err(param("generic_strength must lie in [0, 1]"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(param("noise must be non-negative"));
        }
        if self.feature_dim == Some(0) {
            return Err(param("feature_dim must be positive"));
        }
        Ok(())
    }

    pub fn featurizer(&self) -> Featurizer {
        match self.feature_dim {
            None => Featurizer::OneHot {
                queries: self.queries,
            },
            Some(dim) => Featurizer::RandomProjection {
                dim,
                seed: self.seed ^ 0xF3A7_0000,
            },
        }
    }

    pub fn action_count(&self) -> usize {
        self.disc_actions + self.generic_actions
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    /// Discriminative action aimed at the query's target.
    Good,
    /// Discriminative action aimed at some other item.
    Discriminative,
    Generic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Testbed {
    pub spec: TestbedSpec,
    pub index: CorpusIndex,
    pub queries: Vec<QueryContext>,
    /// `actions[q][a]` is action `a` of query `q`.
    pub actions: Vec<Vec<RewriteAction>>,
    pub kinds: Vec<Vec<ActionKind>>,
    pub common_direction: Embedding,
}

impl Testbed {
    pub fn good_action(&self, query_index: usize) -> Option<usize> {
        self.kinds[query_index]
            .iter()
            .position(|&k| k == ActionKind::Good)
    }

    pub fn action_count(&self) -> usize {
        self.actions.first().map_or(0, Vec::len)
    }

    pub fn query_index(&self, query_id: u64) -> Option<usize> {
        self.queries.iter().position(|q| q.query_id == query_id)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Random unit vector orthogonal to the unit vector `u`.
fn private_direction(rng: &mut ChaCha8Rng, u: &[f64]) -> Result<Vec<f64>> {
    for _ in 0..8 {
        let mut v = gaussian(rng, u.len());
        let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
        if let Ok(e) = l2_normalize(&v) {
            return Ok(e.into_inner());
        }
    }
    Err(GrapeError::Geometry("could not draw a private direction".into()))
}

fn mix(a: f64, x: &[f64], b: f64, y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(p, q)| a * p + b * q).collect()
}

/// Generate a testbed; fully determined by `spec` (including its seed).
pub fn make_testbed(spec: &TestbedSpec) -> Result<Testbed> {
    spec.validate()?;
    if spec.queries > spec.n {
        return Err(GrapeError::Geometry(format!(
            "{} queries need distinct targets among {} items",
            spec.queries, spec.n
        )));
    }
    if spec.disc_actions > spec.n {
        return Err(GrapeError::Geometry(format!(
            "{} discriminative actions need distinct items among {}",
            spec.disc_actions, spec.n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let u = l2_normalize(&gaussian(&mut rng, spec.dim))?.into_inner();

    let mut private = Vec::with_capacity(spec.n);
    let mut items = Vec::with_capacity(spec.n);
    for id in 0..spec.n {
        let w = private_direction(&mut rng, &u)?;
        let alpha = rng.random_range(SHARED_MIX.0..SHARED_MIX.1);
        items.push((id as u64, l2_normalize(&mix(alpha, &u, 1.0 - alpha, &w))?));
        private.push(w);
    }
    let index = CorpusIndex::new(items)?;

    let g = spec.generic_strength;
    let generic: Vec<Embedding> = (0..spec.generic_actions)
        .map(|_| {
            let v = private_direction(&mut rng, &u)?;
            l2_normalize(&mix(g, &u, 1.0 - g, &v))
        })
        .collect::<Result<_>>()?;

    let mut all_ids: Vec<usize> = (0..spec.n).collect();
    all_ids.shuffle(&mut rng);
    let targets = &all_ids[..spec.queries];
    let featurizer = spec.featurizer();

    let mut queries = Vec::with_capacity(spec.queries);
    let mut actions = Vec::with_capacity(spec.queries);
    let mut kinds = Vec::with_capacity(spec.queries);
    for (qi, &target) in targets.iter().enumerate() {
        let mut others: Vec<usize> = (0..spec.n).filter(|&i| i != target).collect();
        others.shuffle(&mut rng);
        let mut slots: Vec<(ActionKind, Embedding, String)> = Vec::new();

        let good = good_action(&mut rng, &index, &u, &private[target], target as u64, spec.noise)
            .map_err(|e| match e {
                GrapeError::Geometry(m) => GrapeError::Geometry(format!("query {qi}: {m}")),
                other => other,
            })?;
        slots.push((ActionKind::Good, good, format!("q{qi}/item-{target}")));
        for &item in &others[..spec.disc_actions - 1] {
            let e = noisy(&mut rng, &u, &private[item], spec.noise)?;
            slots.push((ActionKind::Discriminative, e, format!("q{qi}/item-{item}")));
        }
        for (gi, e) in generic.iter().enumerate() {
            slots.push((ActionKind::Generic, e.clone(), format!("generic-{gi}")));
        }
        slots.shuffle(&mut rng);

        queries.push(QueryContext {
            query_id: qi as u64,
            features: featurizer.features(qi),
            target_id: target as u64,
        });
        kinds.push(slots.iter().map(|s| s.0).collect());
        actions.push(
            slots
                .into_iter()
                .enumerate()
                .map(|(action_id, (_, embedding, label))| RewriteAction {
                    action_id,
                    embedding,
                    label,
                })
                .collect(),
        );
    }

    Ok(Testbed {
        spec: spec.clone(),
        index,
        queries,
        actions,
        kinds,
        common_direction: Embedding::from_unit(u)?,
    })
}

/// Private direction plus noise orthogonal to `u`.
fn noisy(rng: &mut ChaCha8Rng, u: &[f64], dir: &[f64], noise: f64) -> Result<Embedding> {
    let xi = private_direction(rng, u)?;
    l2_normalize(&mix(1.0, dir, noise, &xi))
}

fn good_action(
    rng: &mut ChaCha8Rng,
    index: &CorpusIndex,
    u: &[f64],
    dir: &[f64],
    target: u64,
    noise: f64,
) -> Result<Embedding> {
    for _ in 0..GOOD_ACTION_RETRIES {
        let e = noisy(rng, u, dir, noise)?;
        if index.rank_of_target(&e, target)? == 1 {
            return Ok(e);
        }
    }
    Err(GrapeError::Geometry(format!(
        "no noise draw ranks target {target} first; dimension too small for the corpus"
    )))
}

/// In-process environment: an action's rewrite is its stored embedding and
/// always passes the format gate.
#[derive(Debug, Clone, Copy)]
pub struct TestbedEnv<'a> {
    pub testbed: &'a Testbed,
}

impl<'a> TestbedEnv<'a> {
    pub fn new(testbed: &'a Testbed) -> Self {
        Self { testbed }
    }
}

impl RewriteEnv for TestbedEnv<'_> {
    fn index(&self) -> &CorpusIndex {
        &self.testbed.index
    }

    fn queries(&self) -> &[QueryContext] {
        &self.testbed.queries
    }

    fn action_count(&self) -> usize {
        self.testbed.action_count()
    }

    fn realize(
        &mut self,
        query_index: usize,
        actions: &[usize],
        _request_seed: u64,
    ) -> Result<Vec<Option<Embedding>>> {
        let table = &self.testbed.actions[query_index];
        actions
            .iter()
            .map(|&a| {
                table
                    .get(a)
                    .map(|act| Some(act.embedding.clone()))
                    .ok_or_else(|| param(format!("action {a} outside 0..{}", table.len())))
            })
            .collect()
    }
}

/// Similarity versus rank trade-off of generic actions for one query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InflationGap {
    /// Best generic similarity to target minus the good action's.
    pub delta_sim: f64,
    /// Good action's target rank minus the best generic target rank.
    pub delta_rank: i64,
}

impl InflationGap {
    /// Generic wins on similarity while losing on rank.
    pub fn inflated(&self) -> bool {
        self.delta_sim > 0.0 && self.delta_rank < 0
    }
}

pub fn inflation_gap(tb: &Testbed, query_index: usize) -> Result<InflationGap> {
    let q = tb
        .queries
        .get(query_index)
        .ok_or_else(|| param(format!("no query at index {query_index}")))?;
    let target = tb
        .index
        .get(q.target_id)
        .ok_or(GrapeError::TargetNotFound(q.target_id))?;
    let kinds = &tb.kinds[query_index];
    let good = kinds
        .iter()
        .position(|&k| k == ActionKind::Good)
        .ok_or_else(|| param("query has no discriminative action aimed at its target"))?;
    let generic: Vec<usize> = (0..kinds.len())
        .filter(|&a| kinds[a] == ActionKind::Generic)
        .collect();
    if generic.is_empty() {
        return Err(param("query has no generic action"));
    }
    let acts = &tb.actions[query_index];
    let good_sim = cosine(&acts[good].embedding, target)?;
    let good_rank = tb.index.rank_of_target(&acts[good].embedding, q.target_id)?;
    let mut best_sim = f64::NEG_INFINITY;
    let mut best_rank = usize::MAX;
    for &a in &generic {
        best_sim = best_sim.max(cosine(&acts[a].embedding, target)?);
        best_rank = best_rank.min(tb.index.rank_of_target(&acts[a].embedding, q.target_id)?);
    }
    Ok(InflationGap {
        delta_sim: best_sim - good_sim,
        delta_rank: good_rank as i64 - best_rank as i64,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ManifestLine {
    Spec {
        spec: TestbedSpec,
    },
    CommonDirection {
        embedding: Embedding,
    },
    Query {
        query_id: u64,
        target_id: u64,
        features: Vec<f64>,
        actions: Vec<ManifestAction>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestAction {
    action_id: usize,
    label: String,
    kind: ActionKind,
    embedding: Embedding,
}

pub const CORPUS_FILE: &str = "corpus.txt";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Write `corpus.txt` and `manifest.jsonl` into `dir`.
pub fn write_testbed(tb: &Testbed, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    vecindex::io::write_index(&tb.index, fs::File::create(dir.join(CORPUS_FILE))?)?;
    let mut out = std::io::BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
    write_manifest(tb, &mut out)?;
    out.flush()?;
    Ok(())
}

fn write_manifest<W: Write>(tb: &Testbed, mut out: W) -> Result<()> {
    let mut line = |rec: &ManifestLine| -> Result<()> {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
        Ok(())
    };
    line(&ManifestLine::Spec {
        spec: tb.spec.clone(),
    })?;
    line(&ManifestLine::CommonDirection {
        embedding: tb.common_direction.clone(),
    })?;
    for (qi, q) in tb.queries.iter().enumerate() {
        line(&ManifestLine::Query {
            query_id: q.query_id,
            target_id: q.target_id,
            features: q.features.clone(),
            actions: tb.actions[qi]
                .iter()
                .zip(&tb.kinds[qi])
                .map(|(a, &kind)| ManifestAction {
                    action_id: a.action_id,
                    label: a.label.clone(),
                    kind,
                    embedding: a.embedding.clone(),
                })
                .collect(),
        })?;
    }
    Ok(())
}

/// Load a testbed written by [`write_testbed`], keeping every bit.
pub fn read_testbed(dir: &Path) -> Result<Testbed> {
    let raw = vecindex::io::parse_text(&fs::read_to_string(dir.join(CORPUS_FILE))?)?;
    let items = raw
        .into_iter()
        .map(|(id, v)| Embedding::from_unit(v).map(|e| (id, e)))
        .collect::<Result<Vec<_>>>()?;
    let index = CorpusIndex::new(items)?;

    let reader = BufReader::new(fs::File::open(dir.join(MANIFEST_FILE))?);
    let mut spec = None;
    let mut common = None;
    let mut queries = Vec::new();
    let mut actions = Vec::new();
    let mut kinds = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestLine = serde_json::from_str(&line).map_err(|e| GrapeError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        match rec {
            ManifestLine::Spec { spec: s } => spec = Some(s),
            ManifestLine::CommonDirection { embedding } => common = Some(embedding),
            ManifestLine::Query {
                query_id,
                target_id,
                features,
                actions: acts,
            } => {
                if !index.contains(target_id) {
                    return Err(GrapeError::TargetNotFound(target_id));
                }
                queries.push(QueryContext {
                    query_id,
                    features,
                    target_id,
                });
                kinds.push(acts.iter().map(|a| a.kind).collect());
                actions.push(
                    acts.into_iter()
                        .map(|a| RewriteAction {
                            action_id: a.action_id,
                            embedding: a.embedding,
                            label: a.label,
                        })
                        .collect(),
                );
            }
        }
    }
    let spec = spec.ok_or_else(|| param("testbed manifest has no spec record"))?;
    let common_direction =
        common.ok_or_else(|| param("testbed manifest has no common_direction record"))?;
    Ok(Testbed {
        spec,
        index,
        queries,
        actions,
        kinds,
        common_direction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, g: f64) -> TestbedSpec {
        TestbedSpec {
            n: 96,
            dim: 32,
            queries: 16,
            disc_actions: 4,
            generic_actions: 3,
            generic_strength: g,
            noise: 0.05,
            seed,
            feature_dim: None,
        }
    }

    #[test]
    fn construction_invariants() {
        let tb = make_testbed(&small(3, 0.9)).unwrap();
        let u = &tb.common_direction;
        for e in tb.index.embeddings() {
            let n: f64 = e.as_slice().iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
            assert!(cosine(e, u).unwrap() >= 0.0);
        }
        for (qi, q) in tb.queries.iter().enumerate() {
            assert_eq!(tb.actions[qi].len(), 7);
            for (i, a) in tb.actions[qi].iter().enumerate() {
                assert_eq!(a.action_id, i);
                let n: f64 = a.embedding.as_slice().iter().map(|x| x * x).sum();
                assert!((n - 1.0).abs() < 1e-12);
            }
            let good = tb.good_action(qi).unwrap();
            let rank = tb
                .index
                .rank_of_target(&tb.actions[qi][good].embedding, q.target_id)
                .unwrap();
            assert_eq!(rank, 1);
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(make_testbed(&small(11, 0.9)).unwrap(), make_testbed(&small(11, 0.9)).unwrap());
        assert_ne!(
            make_testbed(&small(11, 0.9)).unwrap().index,
            make_testbed(&small(12, 0.9)).unwrap().index
        );
    }

    #[test]
    fn pure_generic_outscores_good_off_target() {
        // g = 1: the generic action is u itself.
        let tb = make_testbed(&small(5, 1.0)).unwrap();
        for (qi, q) in tb.queries.iter().enumerate() {
            let generic = tb.kinds[qi].iter().position(|&k| k == ActionKind::Generic).unwrap();
            let good = tb.good_action(qi).unwrap();
            let gen_scores = tb.index.scores(&tb.actions[qi][generic].embedding).unwrap();
            let good_scores = tb.index.scores(&tb.actions[qi][good].embedding).unwrap();
            let min_generic = gen_scores.iter().cloned().fold(f64::INFINITY, f64::min);
            let max_good_off_target = tb
                .index
                .ids()
                .iter()
                .zip(&good_scores)
                .filter(|(&id, _)| id != q.target_id)
                .map(|(_, &s)| s)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(min_generic > max_good_off_target);
        }
    }

    #[test]
    fn inflation_with_strong_generic() {
        let tb = make_testbed(&small(9, 0.9)).unwrap();
        let inflated = (0..tb.queries.len())
            .filter(|&q| inflation_gap(&tb, q).unwrap().inflated())
            .count();
        assert!(inflated as f64 >= 0.8 * tb.queries.len() as f64);
    }

    #[test]
    fn weak_generic_loses_both() {
        let tb = make_testbed(&small(9, 0.0)).unwrap();
        for q in 0..tb.queries.len() {
            let gap = inflation_gap(&tb, q).unwrap();
            assert!(gap.delta_sim < 0.0, "query {q}: {gap:?}");
            assert!(gap.delta_rank < 0, "query {q}: {gap:?}");
        }
    }

    #[test]
    fn identical_actions_have_zero_gap() {
        let mut tb = make_testbed(&small(2, 0.9)).unwrap();
        let good = tb.good_action(0).unwrap();
        let emb = tb.actions[0][good].embedding.clone();
        for (a, k) in tb.kinds[0].iter().enumerate() {
            if *k == ActionKind::Generic {
                tb.actions[0][a].embedding = emb.clone();
            }
        }
        let gap = inflation_gap(&tb, 0).unwrap();
        assert_eq!(gap.delta_sim, 0.0);
        assert_eq!(gap.delta_rank, 0);
    }

    #[test]
    fn missing_generic_is_an_error() {
        let mut spec = small(1, 0.9);
        spec.generic_actions = 0;
        let tb = make_testbed(&spec).unwrap();
        assert!(matches!(inflation_gap(&tb, 0), Err(GrapeError::Parameter(_))));
    }

    #[test]
    fn infeasible_specs() {
        let mut spec = small(1, 0.9);
        spec.queries = 200;
        assert!(matches!(make_testbed(&spec), Err(GrapeError::Geometry(_))));
        let mut spec = small(1, 0.9);
        spec.dim = 2;
        spec.n = 500;
        assert!(matches!(make_testbed(&spec), Err(GrapeError::Geometry(_))));
        let mut spec = small(1, 0.9);
        spec.n = 1;
        assert!(matches!(make_testbed(&spec), Err(GrapeError::Parameter(_))));
    }

    #[test]
    fn generic_strength_moves_toward_centroid() {
        let mut last = f64::NEG_INFINITY;
        for step in 0..=10 {
            let g = step as f64 / 10.0;
            let tb = make_testbed(&small(4, g)).unwrap();
            let mut centroid = vec![0.0; tb.index.dim()];
            for e in tb.index.embeddings() {
                centroid.iter_mut().zip(e.as_slice()).for_each(|(c, x)| *c += x);
            }
            let centroid = l2_normalize(&centroid).unwrap();
            let generic: Vec<f64> = tb.kinds[0]
                .iter()
                .zip(&tb.actions[0])
                .filter(|(k, _)| **k == ActionKind::Generic)
                .map(|(_, a)| cosine(&a.embedding, &centroid).unwrap())
                .collect();
            let mean = generic.iter().sum::<f64>() / generic.len() as f64;
            assert!(mean > last, "g = {g}");
            last = mean;
        }
    }

    #[test]
    fn serialization_keeps_bits() {
        let mut spec = small(8, 0.9);
        spec.feature_dim = Some(6);
        let tb = make_testbed(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_testbed(&tb, dir.path()).unwrap();
        let back = read_testbed(dir.path()).unwrap();
        assert_eq!(tb, back);
    }
}
