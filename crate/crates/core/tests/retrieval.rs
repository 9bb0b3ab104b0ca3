mod common;

use common::{brute_force_ordering, oracle_instance};
use grape_core::vecindex::{l2_normalize, CorpusIndex};
use grape_core::GrapeError;

#[test]
fn matches_brute_force_sort() {
    for seed in 0..1000u64 {
        let (items, query) = oracle_instance(seed);
        let expected = brute_force_ordering(&items, &query);
        let index = CorpusIndex::from_raw(items.clone()).unwrap();
        let q = l2_normalize(&query).unwrap();
        let n = index.len();

        assert_eq!(index.top_k(&q, n).unwrap(), expected, "seed {seed}");
        let k = 1 + (seed as usize % n);
        assert_eq!(index.top_k(&q, k).unwrap(), expected[..k], "seed {seed}");
        for (pos, id) in expected.iter().enumerate() {
            assert_eq!(index.rank_of_target(&q, *id).unwrap(), pos + 1, "seed {seed}");
        }
    }
}

#[test]
fn all_ties_order_by_id() {
    let items: Vec<(u64, Vec<f64>)> = [9u64, 2, 5, 7].iter().map(|&id| (id, vec![1.0, 1.0])).collect();
    let index = CorpusIndex::from_raw(items).unwrap();
    let q = l2_normalize(&[0.3, -2.0]).unwrap();
    assert_eq!(index.top_k(&q, 4).unwrap(), vec![2, 5, 7, 9]);
    assert_eq!(index.rank_of_target(&q, 9).unwrap(), 4);
}

#[test]
fn positive_query_scaling_keeps_ranks() {
    for seed in 0..200u64 {
        let (items, query) = oracle_instance(seed);
        let index = CorpusIndex::from_raw(items).unwrap();
        let q = l2_normalize(&query).unwrap();
        let target = index.ids()[seed as usize % index.len()];
        let base = index.rank_of_target(&q, target).unwrap();
        for c in [1e-3, 0.5, 3.0, 1e4] {
            let scaled: Vec<f64> = query.iter().map(|x| x * c).collect();
            let qs = l2_normalize(&scaled).unwrap();
            assert_eq!(index.rank_of_target(&qs, target).unwrap(), base, "seed {seed} scale {c}");
        }
    }
}

#[test]
fn exact_multiples_give_identical_rankings() {
    // Scaling by powers of two is exact in binary floating point, so the
    // normalized query is bit-identical and the ranking must match.
    for seed in 0..200u64 {
        let (items, query) = oracle_instance(seed);
        let index = CorpusIndex::from_raw(items).unwrap();
        let q = l2_normalize(&query).unwrap();
        let want = index.top_k(&q, index.len()).unwrap();
        for c in [0.25, 2.0, 1024.0] {
            let scaled: Vec<f64> = query.iter().map(|x| x * c).collect();
            let qs = l2_normalize(&scaled).unwrap();
            assert_eq!(index.top_k(&qs, index.len()).unwrap(), want, "seed {seed} scale {c}");
        }
    }
}

#[test]
fn bad_k_is_rejected() {
    let index = CorpusIndex::from_raw(vec![(1, vec![1.0, 0.0]), (2, vec![0.0, 1.0])]).unwrap();
    let q = l2_normalize(&[1.0, 1.0]).unwrap();
    assert!(matches!(index.top_k(&q, 3), Err(GrapeError::Parameter(_))));
    assert!(matches!(index.top_k(&q, 0), Err(GrapeError::Parameter(_))));
    assert!(matches!(index.rank_of_target(&q, 3), Err(GrapeError::TargetNotFound(3))));
}
