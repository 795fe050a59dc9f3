#![allow(dead_code)]

use dspd::estimators::{estimate_dual_grad, estimate_policy_grad, estimate_truncated_q};
use dspd::model::{CmarlModel, TableModel};
use dspd::policy::{sample_executed_joint_action, CoupledSoftmax};
use dspd::rng::BatchStreams;
use dspd::sampling::{agent_view, draw_horizon, rollout, Trajectory};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FIXTURES: [&str; 2] = ["chain2x3", "chain3x2"];

pub fn fixture(name: &str) -> TableModel {
    let path = format!("{}/fixtures/{name}.json", env!("CARGO_MANIFEST_DIR"));
    TableModel::load(path).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_theta(rng: &mut ChaCha8Rng, n: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

pub fn random_mu(rng: &mut ChaCha8Rng, n: usize, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..hi)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Least-squares slope and R² of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    (slope, sxy * sxy / (sxx * syy))
}

/// Every agent acts with the true parameters. Horizons are not capped.
pub fn true_rollout(
    model: &dyn CmarlModel,
    policy: &CoupledSoftmax,
    theta: &[Vec<f64>],
    horizon: usize,
    st: &mut BatchStreams,
) -> Trajectory {
    let rows = vec![theta.to_vec(); model.num_agents()];
    let mut act = |s: &[usize], r: &mut ChaCha8Rng| sample_executed_joint_action(policy, model, s, &rows, r);
    rollout(model, &mut act, horizon, &mut st.transitions, &mut st.policy).unwrap()
}

/// One dual batch: `ĥ_i` for every agent.
pub fn dual_batch(
    model: &dyn CmarlModel,
    policy: &CoupledSoftmax,
    theta: &[Vec<f64>],
    kappa: usize,
    st: &mut BatchStreams,
) -> Vec<f64> {
    let n = model.num_agents();
    let gamma = model.gamma();
    let t1 = draw_horizon(1.0 - gamma.sqrt(), &mut st.horizons).unwrap();
    let traj = true_rollout(model, policy, theta, t1, st);
    (0..n)
        .map(|i| {
            let v = agent_view(&traj, i, kappa, policy.kappa_p(), model.env_graph()).unwrap();
            estimate_dual_grad(&v, model.thresholds()[i], n, gamma).unwrap()
        })
        .collect()
}

/// One primal batch: `ĝ_i` for every agent, with exact multiplier estimates.
pub fn primal_batch(
    model: &dyn CmarlModel,
    policy: &CoupledSoftmax,
    theta: &[Vec<f64>],
    mu: &[f64],
    kappa: usize,
    st: &mut BatchStreams,
) -> Vec<Vec<f64>> {
    let n = model.num_agents();
    let gamma = model.gamma();
    let t2 = draw_horizon(1.0 - gamma, &mut st.horizons).unwrap();
    let t3 = draw_horizon(1.0 - gamma.sqrt(), &mut st.horizons).unwrap();
    let mut traj = true_rollout(model, policy, theta, t2 + t3, st);
    traj.split = Some(t2);
    (0..n)
        .map(|i| {
            let v = agent_view(&traj, i, kappa, policy.kappa_p(), model.env_graph()).unwrap();
            let q = estimate_truncated_q(&v, mu, n, gamma).unwrap();
            estimate_policy_grad(&v, q, theta, policy, model, gamma).unwrap()
        })
        .collect()
}
