#![allow(dead_code)]

use grape_core::optim::{grpo_gradient, grpo_objective, ScoredGroup};
use grape_core::policy::{PolicyParams, QueryContext};
use grape_core::reward::{RewardMode, RewriteGroup, RewriteOutcome, DEFAULT_STD_EPS};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;

pub struct GradInstance {
    pub groups: Vec<ScoredGroup>,
    pub params: PolicyParams,
    pub reference: PolicyParams,
    pub kl_weight: f64,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// A random objective instance: a few query groups with mixed valid and
/// invalid rewrites, random policy and reference parameters.
pub fn grad_instance(seed: u64, kl_weight: f64) -> GradInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = rng.random_range(2..6);
    let a = rng.random_range(3..8);
    let tau = rng.random_range(0.5..2.0);
    let params = PolicyParams::new(normal_matrix(&mut rng, f, a, 0.7), tau).unwrap();
    let reference = PolicyParams::new(normal_matrix(&mut rng, f, a, 0.7), tau).unwrap();
    let n = 100;
    let groups = (0..rng.random_range(1..4))
        .map(|qi| {
            let features: Vec<f64> = (0..f)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z
                })
                .collect();
            let k = rng.random_range(2..8);
            let actions: Vec<usize> = (0..k).map(|_| rng.random_range(0..a)).collect();
            let outcomes = (0..k)
                .map(|_| {
                    if rng.random::<f64>() < 0.2 {
                        RewriteOutcome::skipped()
                    } else {
                        let rank = rng.random_range(1..=n);
                        let sim = rng.random_range(-1.0..1.0);
                        RewriteOutcome::scored(rank, n, sim, RewardMode::Rank).unwrap()
                    }
                })
                .collect();
            ScoredGroup {
                ctx: QueryContext {
                    query_id: qi as u64,
                    features,
                    target_id: 0,
                },
                actions,
                group: RewriteGroup::from_outcomes(outcomes, DEFAULT_STD_EPS, false).unwrap(),
            }
        })
        .collect();
    GradInstance {
        groups,
        params,
        reference,
        kl_weight,
    }
}

/// Central-difference gradient of `f` at `theta`.
pub fn central_diff(theta: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(theta.raw_dim());
    for idx in ndarray::indices(theta.raw_dim()) {
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[idx] += FD_STEP;
        minus[idx] -= FD_STEP;
        g[idx] = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
    }
    g
}

/// `||a - b|| / max(||a||, ||b||)`; zero when both vanish.
pub fn relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let norm = |m: &Array2<f64>| m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&(a - b));
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Relative error of the analytic objective gradient against central
/// differences.
pub fn objective_grad_error(inst: &GradInstance) -> f64 {
    let analytic = grpo_gradient(&inst.groups, &inst.params, &inst.reference, inst.kl_weight).unwrap();
    let numeric = central_diff(&inst.params.theta, |theta| {
        let p = PolicyParams::new(theta.clone(), inst.params.temperature).unwrap();
        grpo_objective(&inst.groups, &p, &inst.reference, inst.kl_weight).unwrap()
    });
    relative_error(&analytic, &numeric)
}

pub const GRAD_LAMBDAS: [f64; 3] = [0.0, 0.04, 1.0];

/// 20 instances cycling through [`GRAD_LAMBDAS`]; returns the worst error.
pub fn worst_objective_grad_error() -> f64 {
    (0..20u64)
        .map(|i| objective_grad_error(&grad_instance(1000 + i, GRAD_LAMBDAS[i as usize % 3])))
        .fold(0.0, f64::max)
}

/// Independent reference ranking: normalize, dot, stable-sort by
/// `(-score, id)`.
pub fn brute_force_ordering(items: &[(u64, Vec<f64>)], query: &[f64]) -> Vec<u64> {
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let q = unit(query);
    let mut scored: Vec<(f64, u64)> = items
        .iter()
        .map(|(id, v)| {
            let e = unit(v);
            let s: f64 = q.iter().zip(&e).map(|(a, b)| a * b).sum();
            (s.clamp(-1.0, 1.0) + 0.0, *id)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, id)| id).collect()
}

/// Random corpus with distinct ids; every third instance is all ties.
pub fn oracle_instance(seed: u64) -> (Vec<(u64, Vec<f64>)>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=256usize);
    let d = rng.random_range(1..=32usize);
    let gauss = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z
            })
            .collect()
    };
    let mut ids: Vec<u64> = (0..n as u64 * 4).collect();
    rand::seq::SliceRandom::shuffle(&mut ids[..], &mut rng);
    let shared = gauss(&mut rng);
    let mut pool: Vec<Vec<f64>> = Vec::new();
    let items = ids[..n]
        .iter()
        .map(|&id| {
            let v = match seed % 3 {
                0 => shared.clone(),
                // a small pool of repeated vectors: partial ties
                1 if !pool.is_empty() && rng.random::<f64>() < 0.5 => {
                    let i = rng.random_range(0..pool.len());
                    pool[i].clone()
                }
                _ => {
                    let v = gauss(&mut rng);
                    pool.push(v.clone());
                    v
                }
            };
            (id, v)
        })
        .collect();
    (items, gauss(&mut rng))
}
