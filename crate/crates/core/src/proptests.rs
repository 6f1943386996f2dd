//! Property tests spanning several modules.

use std::collections::BTreeMap;

use crate::bc::{self, TrainConfig};
use crate::coverage::{self, CoverageParamsB, CoverageParamsS};
use crate::dataset::{self, Dataset, Trajectory};
use crate::mdp::{self, TabularMdp, TabularPolicy};
use crate::metrics::{self, ClusterParams, NeighborSearch, Norm};
use crate::rng;
use proptest::prelude::*;

type Episode = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn dataset_from(trajs: Vec<Episode>) -> Dataset {
    let trajs = trajs
        .into_iter()
        .enumerate()
        .map(|(i, (s, a))| Trajectory::from_states_actions(s, a, i % 2 == 0, i as u64, BTreeMap::new()).unwrap())
        .collect();
    Dataset::new(trajs, "synthetic", 2, 1).unwrap()
}

fn arb_trajectory() -> impl Strategy<Value = Episode> {
    (1usize..12).prop_flat_map(|len| {
        (
            prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 2), len + 1),
            prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 1), len),
        )
    })
}

fn arb_dataset() -> impl Strategy<Value = Dataset> {
    prop::collection::vec(arb_trajectory(), 1..6).prop_map(dataset_from)
}

fn arb_distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001..1.0f64, n).prop_map(|w| {
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    })
}

proptest! {
    #[test]
    fn similarity_grows_with_epsilon(ds in arb_dataset(), e1 in 0.0..1.5f64, e2 in 0.0..1.5f64) {
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let a = metrics::state_similarity(&ds, &ClusterParams::new(lo, Norm::Euclidean).unwrap()).unwrap();
        let b = metrics::state_similarity(&ds, &ClusterParams::new(hi, Norm::Euclidean).unwrap()).unwrap();
        let n = ds.n_transitions() as f64;
        prop_assert!(a <= b + 1e-15);
        prop_assert!(a >= 1.0 / n - 1e-15 && b <= 1.0 + 1e-15);
    }

    #[test]
    fn metrics_ignore_trajectory_order(ds in arb_dataset(), eps in 0.0..1.0f64, grid in any::<bool>()) {
        let mut shuffled = ds.clone();
        shuffled.trajectories.reverse();
        let search = if grid { NeighborSearch::Grid } else { NeighborSearch::Exact };
        let p = ClusterParams::new(eps, Norm::Chebyshev).unwrap().with_search(search);
        let v1 = metrics::action_variance(&ds, &p).unwrap();
        let v2 = metrics::action_variance(&shuffled, &p).unwrap();
        let s1 = metrics::state_similarity(&ds, &p).unwrap();
        let s2 = metrics::state_similarity(&shuffled, &p).unwrap();
        prop_assert!(v1 >= 0.0);
        prop_assert!((v1 - v2).abs() <= 1e-12 * v1.max(1.0));
        prop_assert!((s1 - s2).abs() <= 1e-12);
    }

    #[test]
    fn dataset_file_round_trip(ds in arb_dataset()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        dataset::save_dataset(&ds, &path).unwrap();
        prop_assert_eq!(dataset::load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn p_s_in_unit_interval_and_monotone(
        sigma in 0.01..1.0f64,
        factor in 1.0..3.0f64,
        eps in 0.0..0.5f64,
        n in 1usize..200,
        d in 1usize..5,
    ) {
        let p = coverage::p_s_coverage(&CoverageParamsS::new(sigma, eps, n, d).unwrap()).unwrap();
        let noisier = coverage::p_s_coverage(&CoverageParamsS::new(sigma * factor, eps, n, d).unwrap()).unwrap();
        let more = coverage::p_s_coverage(&CoverageParamsS::new(sigma, eps, n + 1, d).unwrap()).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(noisier <= p + 1e-12);
        prop_assert!(more + 1e-12 >= p);
    }

    #[test]
    fn p_s_depends_on_ratio_only(sigma in 0.01..1.0f64, eps in 0.0..0.5f64, k in 0.1..10.0f64, n in 1usize..100, d in 1usize..4) {
        let a = coverage::p_s_coverage(&CoverageParamsS::new(sigma, eps, n, d).unwrap()).unwrap();
        let b = coverage::p_s_coverage(&CoverageParamsS::new(k * sigma, k * eps, n, d).unwrap()).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn p_b_in_unit_interval_and_falls_with_policy_noise(
        sigma_s in 0.01..0.5f64,
        sigma_p in 0.0..0.5f64,
        extra in 0.0..0.5f64,
        alpha in 0.1..3.0f64,
        n in 1usize..100,
        d in 1usize..4,
    ) {
        let p = coverage::p_b_coverage(&CoverageParamsB::new(sigma_s, sigma_p, alpha, n, d).unwrap()).unwrap();
        let q = coverage::p_b_coverage(&CoverageParamsB::new(sigma_s, sigma_p + extra, alpha, n, d).unwrap()).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(q <= p + 1e-9);
    }

    #[test]
    fn kl_is_nonnegative(p in arb_distribution(5), q in arb_distribution(5)) {
        prop_assert!(mdp::kl_divergence(&p, &q).unwrap() >= 0.0);
        prop_assert!(mdp::kl_divergence(&p, &p).unwrap().abs() <= 1e-15);
    }

    #[test]
    fn visitation_is_a_distribution(seed in any::<u64>(), s in 1usize..8, a in 1usize..4, h in 1usize..8) {
        let mut r = rng::seeded(seed);
        let m = TabularMdp::random(s, a, h, &mut r).unwrap();
        let pi = TabularPolicy::random_full_support(s, a, &mut r).unwrap();
        let v = mdp::visitation(&m, &pi).unwrap();
        prop_assert_eq!(v.per_step.len(), h + 1);
        for rho in v.per_step.iter().chain(std::iter::once(&v.average)) {
            prop_assert!(rho.iter().all(|&x| x >= 0.0));
            prop_assert!((rho.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn bc_is_invariant_to_affine_state_changes(
        seed in any::<u64>(),
        scale in prop::array::uniform2(0.1..10.0f64),
        shift in prop::array::uniform2(-5.0..5.0f64),
    ) {
        let mut r = rng::seeded(seed);
        use rand::Rng as _;
        let states: Vec<Vec<f64>> = (0..40).map(|_| vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect();
        let actions: Vec<Vec<f64>> = states.iter().map(|s| vec![(2.0 * s[0]).sin(), s[0] * s[1]]).collect();
        let moved: Vec<Vec<f64>> = states.iter().map(|s| vec![scale[0] * s[0] + shift[0], scale[1] * s[1] + shift[1]]).collect();
        let config = TrainConfig { epochs: 20, batch_size: 16, seed, ..TrainConfig::default() };
        let (a, _) = bc::train_on_samples(&states, &actions, &config).unwrap();
        let (b, _) = bc::train_on_samples(&moved, &actions, &config).unwrap();
        for (s, m) in states.iter().zip(&moved) {
            let pa = a.predict(s).unwrap();
            let pb = b.predict(m).unwrap();
            for (x, y) in pa.iter().zip(&pb) {
                prop_assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
            }
        }
    }
}
