//! The oracle check suite behind `dspd oracle verify`.

use rand::{Rng as _, SeedableRng};
use serde::Serialize;

use crate::error::Result;
use crate::model::{verify_factorization, CmarlModel};
use crate::oracle::{gradient_error_bound, Oracle, DEFAULT_SIZE_CAP};
use crate::policy::CoupledSoftmax;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    pub mu_max: f64,
    pub seed: u64,
    /// Random parameter points per `(κ, κp)` pair.
    pub trials: usize,
    pub size_cap: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            mu_max: crate::oracle::DEFAULT_MU_MAX,
            seed: 0,
            trials: 3,
            size_cap: DEFAULT_SIZE_CAP,
        }
    }
}

fn check(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Runs every check on `model` for κ ∈ {0, 1, 2} and κp ∈ {1, 2}.
pub fn verify_suite(model: &dyn CmarlModel, opts: SuiteOptions) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let n = model.num_agents();
    let gamma = model.gamma();
    let (r_f, r_g) = model.reward_bounds();
    let mut rng = Rng::seed_from_u64(opts.seed);
    out.push(check(
        "transition kernel factorizes",
        verify_factorization(model, opts.size_cap)?,
        "",
    ));

    let mut visit = 0.0_f64;
    let mut avg_q = 0.0_f64;
    let mut fd = 0.0_f64;
    let mut lemma3 = 0.0_f64;
    let mut thm1_worst = f64::NEG_INFINITY;
    let mut decay_ok = true;
    let mut decay_monotone = true;
    let mut residual = 0.0_f64;
    for kappa_p in [1, 2] {
        let policy = CoupledSoftmax::for_model(model, kappa_p)?;
        let oracle = Oracle::new(model, &policy, opts.size_cap)?;
        for _ in 0..opts.trials {
            let theta: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..policy.dim()).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let mu: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..opts.mu_max)).collect();
            let sol = oracle.solve(&theta, &mu)?;
            residual = residual.max(sol.residual);
            visit = visit.max(max_diff(&sol.d, &oracle.visitation_power_series(&theta, 400)?));
            let mean: Vec<f64> = (0..oracle.num_pairs())
                .map(|sa| (0..n).map(|i| sol.q_i[i][sa]).sum::<f64>() / n as f64)
                .collect();
            avg_q = avg_q.max(max_diff(&mean, &sol.q));

            let h = 1e-5;
            for i in 0..n {
                let grad = oracle.exact_policy_gradient(&sol, i)?;
                let scale = grad.iter().fold(1.0_f64, |a, x| a.max(x.abs()));
                for k in 0..policy.dim() {
                    let mut plus = theta.clone();
                    plus[i][k] += h;
                    let mut minus = theta.clone();
                    minus[i][k] -= h;
                    let num = (oracle.lagrangian(&oracle.solve(&plus, &mu)?)
                        - oracle.lagrangian(&oracle.solve(&minus, &mu)?))
                        / (2.0 * h);
                    fd = fd.max((num - grad[k]).abs() / scale);
                }
            }

            for kappa in 0..=2 {
                let bound = gradient_error_bound(r_f, r_g, opts.mu_max, policy.grad_bound(), n, gamma, kappa, kappa_p)?;
                for i in 0..n {
                    let app = oracle.approx_gradient_exact(&sol, i, kappa)?;
                    let tru = oracle.truncated_gradient_exact(&sol, i, kappa)?;
                    let exact = oracle.exact_policy_gradient(&sol, i)?;
                    lemma3 = lemma3.max(l2(&app, &tru));
                    thm1_worst = thm1_worst.max(l2(&app, &exact) - bound);
                }
            }
            for i in 0..n {
                let mut prev = f64::INFINITY;
                for kappa in 0..=2 {
                    let g = oracle.decay_gap(&sol, i, kappa, opts.mu_max)?;
                    decay_ok &= g.holds;
                    decay_monotone &= g.gap <= prev + 1e-12;
                    prev = g.gap;
                }
            }
        }
    }
    out.push(check("linear solve residual < 1e-10", residual < 1e-10, format!("{residual:.2e}")));
    out.push(check(
        "visitation: linear solve = power series",
        visit < 1e-8,
        format!("max diff {visit:.2e}"),
    ));
    out.push(check("mean of local Q = global Q", avg_q < 1e-12, format!("max diff {avg_q:.2e}")));
    out.push(check(
        "exact gradient = finite differences (1e-6 rel)",
        fd < 1e-6,
        format!("max rel diff {fd:.2e}"),
    ));
    out.push(check(
        "approximated = truncated gradient (1e-10)",
        lemma3 <= 1e-10,
        format!("max norm diff {lemma3:.2e}"),
    ));
    out.push(check(
        "approximation error within bound",
        thm1_worst <= 0.0,
        format!("worst margin {thm1_worst:.3e}"),
    ));
    out.push(check("Q decay gap within bound", decay_ok, ""));
    out.push(check("Q decay gap non-increasing in κ", decay_monotone, ""));
    Ok(out)
}
