//! Sample-based dual and policy gradient estimates.
//!
//! Every estimator reads only through an [`AgentView`], so an attempt to use
//! data outside the permitted neighborhoods surfaces as
//! [`Error::Locality`](crate::error::Error::Locality).

use crate::error::{Error, Result};
use crate::model::CmarlModel;
use crate::policy::CoupledSoftmax;
use crate::sampling::AgentView;

/// `(1/N)(Σ_{t=0}^{T} γ^{t/2} g_{i,t} − c_i)` over the whole view.
pub fn estimate_dual_grad(view: &AgentView, c_i: f64, n: usize, gamma: f64) -> Result<f64> {
    let i = view.agent();
    let root = gamma.sqrt();
    let mut disc = 1.0;
    let mut acc = 0.0;
    for t in 0..view.len() {
        acc += disc * view.g(t, i)?;
        disc *= root;
    }
    Ok((acc - c_i) / n as f64)
}

/// `(1/N) Σ_{t=0}^{T₃} γ^{t/2} Σ_{j ∈ N^{κ+2κp}_i} (f_j + μ̂^i_j g_j)`, read
/// from the split point (step 0 when the view has none) to the end.
///
/// `mu_hat_row[j]` is agent `i`'s estimate of `μ_j`.
pub fn estimate_truncated_q(
    view: &AgentView,
    mu_hat_row: &[f64],
    n: usize,
    gamma: f64,
) -> Result<f64> {
    let start = view.split().unwrap_or(0);
    let root = gamma.sqrt();
    let mut disc = 1.0;
    let mut acc = 0.0;
    for t in start..view.len() {
        let mut step = 0.0;
        for &j in view.reward_agents() {
            let mu = *mu_hat_row
                .get(j)
                .ok_or_else(|| Error::Contract(format!("no multiplier estimate for agent {}", j + 1)))?;
            step += view.f(t, j)? + mu * view.g(t, j)?;
        }
        acc += disc * step;
        disc *= root;
    }
    Ok(acc / n as f64)
}

/// `(1/(1−γ)) Q̂ Σ_{j ∈ N^κp_i} ∇_{θ_i} log π_j(a_j | ·)` at the split point,
/// with every parameter taken from agent `i`'s own estimate row.
pub fn estimate_policy_grad(
    view: &AgentView,
    q_hat: f64,
    theta_hat_row: &[Vec<f64>],
    policy: &CoupledSoftmax,
    model: &dyn CmarlModel,
    gamma: f64,
) -> Result<Vec<f64>> {
    let i = view.agent();
    let t = view.split().unwrap_or(0);
    let mut out = vec![0.0; policy.dim()];
    if q_hat == 0.0 {
        return Ok(out);
    }
    let scale = q_hat / (1.0 - gamma);
    for &j in policy.neighborhood(i) {
        let s_view = policy
            .neighborhood(j)
            .iter()
            .map(|&k| Ok(model.policy_state(k, view.state(t, k)?)))
            .collect::<Result<Vec<_>>>()?;
        let a_j = view.action(t, j)?;
        policy.add_grad_log_policy(i, j, &s_view, a_j, theta_hat_row, scale, &mut out)?;
    }
    Ok(out)
}

/// Pairwise (cascade) summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn batch_average(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract("batch average over zero batches".into()));
    }
    Ok(pairwise_sum(values) / values.len() as f64)
}

/// Componentwise [`batch_average`].
pub fn batch_average_vec(values: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = values
        .first()
        .ok_or_else(|| Error::Contract("batch average over zero batches".into()))?;
    let k = values.len() as f64;
    let mut column = vec![0.0; values.len()];
    Ok((0..first.len())
        .map(|c| {
            for (slot, v) in column.iter_mut().zip(values) {
                *slot = v[c];
            }
            pairwise_sum(&column) / k
        })
        .collect())
}

/// `L^μ₁ = (R_g + c_max) / ((1 − √γ) N)`.
pub fn dual_grad_bound(r_g: f64, c_max: f64, gamma: f64, n: usize) -> f64 {
    (r_g + c_max) / ((1.0 - gamma.sqrt()) * n as f64)
}

/// `L^θ₁ = B N (R_f + μ̃ R_g) / ((1 − γ)(1 − √γ))`.
pub fn policy_grad_bound(b: f64, n: usize, r_f: f64, r_g: f64, mu_tilde: f64, gamma: f64) -> f64 {
    b * n as f64 * (r_f + mu_tilde * r_g) / ((1.0 - gamma) * (1.0 - gamma.sqrt()))
}
