mod common;

use common::*;
use dspd::config::LearningSpec;
use dspd::graph::{DirectedGraph, TimeVaryingSchedule, WeightMatrix};
use dspd::pushsum::EstimateBank;
use proptest::prelude::*;
use rand::Rng as _;

/// One iteration's worth of bank traffic, in the order the learner uses.
fn iteration(
    bank: &mut EstimateBank,
    sched: &TimeVaryingSchedule,
    m: usize,
    d_mu: &[f64],
    d_theta: &[Vec<f64>],
) {
    let w = sched.weights(m).unwrap();
    let next = sched.weights(m + 1).unwrap();
    bank.inject_mu(w, d_mu).unwrap();
    bank.advance_weights(next).unwrap();
    bank.refresh_mu_hat(next).unwrap();
    bank.inject_theta(w, d_theta).unwrap();
    bank.refresh_theta_hat(next).unwrap();
}

#[test]
fn means_and_mass_survive_500_iterations() {
    let n = 4;
    let dim = 3;
    let sched = LearningSpec::default().schedule(n).unwrap();
    let mut bank = EstimateBank::new(n, &[dim; 4]);
    bank.pushsum_ratio_step(sched.weights(1).unwrap()).unwrap();
    let mut r = rng(8);
    let mut mu = vec![0.0; n];
    let mut theta = vec![vec![0.0; dim]; n];
    for m in 1..=500 {
        let d_mu: Vec<f64> = (0..n).map(|_| r.random_range(-0.5..0.5)).collect();
        let d_theta: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| r.random_range(-0.5..0.5)).collect())
            .collect();
        for j in 0..n {
            mu[j] += d_mu[j];
            for k in 0..dim {
                theta[j][k] += d_theta[j][k];
            }
        }
        iteration(&mut bank, &sched, m, &d_mu, &d_theta);
        assert!((bank.mass() - n as f64).abs() < 1e-10, "mass at {m}");
        assert!(max_abs_diff(&bank.breve_mu_mean(), &mu) < 1e-10, "mu mean at {m}");
        for (a, b) in bank.breve_theta_mean().iter().zip(&theta) {
            assert!(max_abs_diff(a, b) < 1e-10, "theta mean at {m}");
        }
    }
}

#[test]
fn consensus_error_decays_geometrically_with_frozen_targets() {
    let n = 4;
    let sched = LearningSpec::default().schedule(n).unwrap();
    let mut bank = EstimateBank::new(n, &[2; 4]);
    bank.pushsum_ratio_step(sched.weights(1).unwrap()).unwrap();
    let mu = vec![3.0, -1.0, 0.5, 2.0];
    let theta = vec![vec![1.0, -2.0]; n];
    iteration(&mut bank, &sched, 1, &mu, &theta);
    let zeros = vec![vec![0.0; 2]; n];
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for m in 2..400 {
        iteration(&mut bank, &sched, m, &[0.0; 4], &zeros);
        let e = bank.mu_consensus_error(&mu);
        if e < 1e-12 {
            break;
        }
        xs.push(m as f64);
        ys.push(e.ln());
    }
    assert!(xs.len() > 20, "decay too fast to fit: {} points", xs.len());
    let (slope, r2) = linear_fit(&xs, &ys);
    assert!(slope < 0.0);
    assert!(r2 > 0.99, "R² = {r2}");
}

#[test]
fn complete_and_identity_mixing() {
    let n = 3;
    let complete = WeightMatrix::from_graph(&DirectedGraph::complete(n).with_self_loops()).unwrap();
    let mut bank = EstimateBank::new(n, &[1; 3]);
    bank.inject_mu(&WeightMatrix::identity(n), &[1.0, 2.0, 6.0]).unwrap();
    bank.pushsum_ratio_step(&complete).unwrap();
    for row in &bank.hat_mu {
        assert!(max_abs_diff(row, &[1.0, 2.0, 6.0]) < 1e-12);
    }

    let mut frozen = EstimateBank::new(n, &[1; 3]);
    frozen.inject_mu(&WeightMatrix::identity(n), &[1.0, 2.0, 6.0]).unwrap();
    let before = frozen.breve_mu.clone();
    for _ in 0..10 {
        frozen.pushsum_ratio_step(&WeightMatrix::identity(n)).unwrap();
    }
    assert_eq!(frozen.breve_mu, before);
    assert_eq!(frozen.p, vec![1.0; n]);
    assert_eq!(frozen.hat_mu[1], vec![0.0, 6.0, 0.0]);
}

fn graph_strategy() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (2usize..6).prop_flat_map(|n| (Just(n), prop::collection::vec((0..n, 0..n), 0..12)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relabeling_agents_relabels_estimates(
        (n, edges) in graph_strategy(),
        seed in 0u64..1000,
        shift in 1usize..5,
    ) {
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let g = DirectedGraph::new(n, edges.iter().copied()).unwrap().with_self_loops();
        let gp = DirectedGraph::new(n, edges.iter().map(|&(a, b)| (perm[a], perm[b]))).unwrap().with_self_loops();
        let w = WeightMatrix::from_graph(&g).unwrap();
        let wp = WeightMatrix::from_graph(&gp).unwrap();
        let mut r = rng(seed);
        let mut a = EstimateBank::new(n, &vec![1; n]);
        let mut b = EstimateBank::new(n, &vec![1; n]);
        for _ in 0..5 {
            let d: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            let mut dp = vec![0.0; n];
            for j in 0..n {
                dp[perm[j]] = d[j];
            }
            a.inject_mu(&w, &d).unwrap();
            a.pushsum_ratio_step(&w).unwrap();
            b.inject_mu(&wp, &dp).unwrap();
            b.pushsum_ratio_step(&wp).unwrap();
        }
        for i in 0..n {
            prop_assert!((a.p[i] - b.p[perm[i]]).abs() < 1e-12);
            for j in 0..n {
                prop_assert!((a.hat_mu[i][j] - b.hat_mu[perm[i]][perm[j]]).abs() < 1e-12);
            }
        }
    }
}
