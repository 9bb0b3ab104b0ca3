//! Browser demo: three pure operations over `grape-core`, each taking plain
//! numbers or text and returning a JSON string for the page to draw.
//!
//! The `*_json` functions are ordinary Rust and are what the tests exercise;
//! the `#[wasm_bindgen]` wrappers only convert errors into JS exceptions.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use grape_core::experiment::acceptance_config;
use grape_core::optim::TrainConfig;
use grape_core::reward::{group_advantages, population_stats, rank_reward, DEFAULT_STD_EPS};
use grape_core::synthenv::{inflation_gap, make_testbed, ActionKind, InflationGap, Testbed, TestbedSpec};
use grape_core::vecindex::cosine;

/// Testbed sizes the page can ask for; big enough to show the effect,
/// small enough to train twice inside a click.
pub const MAX_ITEMS: usize = 2048;
pub const MAX_STEPS: usize = 400;

fn small_spec(n: usize, dim: usize, queries: usize, seed: u64) -> Result<TestbedSpec, String> {
    if n > MAX_ITEMS {
        return Err(format!("at most {MAX_ITEMS} items in the browser"));
    }
    Ok(TestbedSpec {
        n,
        dim,
        queries,
        seed,
        ..TestbedSpec::default()
    })
}

fn build(spec: &TestbedSpec) -> Result<Testbed, String> {
    make_testbed(spec).map_err(|e| e.to_string())
}

fn parse_list(src: &str) -> Result<Vec<f64>, String> {
    src.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("`{t}` is not a number")))
        .collect()
}

#[derive(Serialize)]
struct AdvantageView {
    rewards: Vec<f64>,
    advantages: Vec<f64>,
    mean: f64,
    std: f64,
    shifted: Vec<f64>,
    shifted_advantages: Vec<f64>,
    /// Largest |sign(a)·A(r) − A(a·r + b)| over the group.
    max_deviation: f64,
}

/// Group-normalized advantages of `rewards` and of `a·rewards + b`.
pub fn advantages_json(rewards: &str, a: f64, b: f64) -> Result<String, String> {
    let rewards = parse_list(rewards)?;
    let advantages = group_advantages(&rewards, DEFAULT_STD_EPS).map_err(|e| e.to_string())?;
    let (mean, std) = population_stats(&rewards);
    let shifted: Vec<f64> = rewards.iter().map(|r| a * r + b).collect();
    let shifted_advantages = group_advantages(&shifted, DEFAULT_STD_EPS).map_err(|e| e.to_string())?;
    let max_deviation = advantages
        .iter()
        .zip(&shifted_advantages)
        .map(|(x, y)| (a.signum() * x - y).abs())
        .fold(0.0, f64::max);
    let view = AdvantageView {
        rewards,
        advantages,
        mean,
        std,
        shifted,
        shifted_advantages,
        max_deviation,
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct ActionPoint {
    label: String,
    kind: ActionKind,
    similarity: f64,
    rank: usize,
    rank_reward: f64,
}

#[derive(Serialize)]
struct Landscape {
    query_id: u64,
    target_id: u64,
    n: usize,
    actions: Vec<ActionPoint>,
    gap: Option<InflationGap>,
}

/// Similarity to target against target rank for every action of one query.
pub fn landscape_json(n: usize, dim: usize, queries: usize, seed: u64, query: usize) -> Result<String, String> {
    let tb = build(&small_spec(n, dim, queries, seed)?)?;
    let q = tb.queries.get(query).ok_or_else(|| format!("query index {query} out of range"))?;
    let target = tb.index.get(q.target_id).ok_or("target missing from corpus")?;
    let err = |e: grape_core::GrapeError| e.to_string();
    let mut actions = Vec::new();
    for (act, &kind) in tb.actions[query].iter().zip(&tb.kinds[query]) {
        let rank = tb.index.rank_of_target(&act.embedding, q.target_id).map_err(err)?;
        actions.push(ActionPoint {
            label: act.label.clone(),
            kind,
            similarity: cosine(&act.embedding, target).map_err(err)?,
            rank,
            rank_reward: rank_reward(rank, tb.index.len()).map_err(err)?,
        });
    }
    let view = Landscape {
        query_id: q.query_id,
        target_id: q.target_id,
        n: tb.index.len(),
        actions,
        gap: inflation_gap(&tb, query).ok(),
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Curve {
    similarity: Vec<f64>,
    recall_at_1: Vec<f64>,
    final_recall_at_1: f64,
}

#[derive(Serialize)]
struct Curves {
    rank: Curve,
    similarity: Curve,
    sim_mode_sim_slope: f64,
    sim_mode_recall_delta: f64,
    rank_mode_recall_delta: f64,
    reproduced: bool,
}

/// Train once per reward mode on the same testbed and seed.
pub fn inflation_json(
    n: usize,
    dim: usize,
    queries: usize,
    seed: u64,
    steps: usize,
    learning_rate: f64,
) -> Result<String, String> {
    if steps > MAX_STEPS {
        return Err(format!("at most {MAX_STEPS} steps in the browser"));
    }
    let tb = build(&small_spec(n, dim, queries, seed)?)?;
    let cfg = TrainConfig {
        steps,
        learning_rate,
        ..acceptance_config(seed)
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let demo = grape_core::experiment::inflate_demo_on(&tb, &cfg).map_err(|f| f.to_string())?;
    let curve = |m: &grape_core::experiment::ModeRun| Curve {
        similarity: m.reports.iter().map(|r| r.mean_similarity_to_target).collect(),
        recall_at_1: m.reports.iter().map(|r| r.recall_at_1).collect(),
        final_recall_at_1: m.summary.final_.recall[0],
    };
    let v = demo.verdict;
    let view = Curves {
        rank: curve(&demo.rank),
        similarity: curve(&demo.similarity),
        sim_mode_sim_slope: v.sim_mode_sim_slope,
        sim_mode_recall_delta: v.sim_mode_recall_delta,
        rank_mode_recall_delta: v.rank_mode_recall_delta,
        reproduced: v.reproduced(),
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn advantages(rewards: &str, a: f64, b: f64) -> Result<String, JsError> {
    advantages_json(rewards, a, b).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn landscape(n: usize, dim: usize, queries: usize, seed: u32, query: usize) -> Result<String, JsError> {
    landscape_json(n, dim, queries, u64::from(seed), query).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn inflation(
    n: usize,
    dim: usize,
    queries: usize,
    seed: u32,
    steps: usize,
    learning_rate: f64,
) -> Result<String, JsError> {
    inflation_json(n, dim, queries, u64::from(seed), steps, learning_rate).map_err(|e| JsError::new(&e))
}
