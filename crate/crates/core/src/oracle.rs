//! Exact computations on small, fully enumerable models.
//!
//! An [`Oracle`] tabulates the joint kernel and rewards once. [`Oracle::solve`]
//! then evaluates a parameter point: joint policy, discounted visitation,
//! per-agent value and Q tables, objective and constraint returns. Gradients,
//! truncated Q-functions and stationarity residuals are computed from the
//! resulting [`ExactSolution`].
//!
//! Joint state-action pairs are indexed `s * |A| + a` with `s` and `a` the
//! mixed-radix codes from [`JointSpace`].

use nalgebra::{DMatrix, DVector};

use crate::dspd::h_offset;
use crate::error::{Error, Result};
use crate::model::{CmarlModel, JointSpace};
use crate::policy::{policy_states, CoupledSoftmax};

/// Joint state count above which exact work is refused.
pub const DEFAULT_SIZE_CAP: usize = 20_000;
/// Multiplier box used when none is given.
pub const DEFAULT_MU_MAX: f64 = 10.0;
/// Largest dense kernel, in entries, the oracle will allocate.
const MAX_KERNEL_ENTRIES: usize = 50_000_000;

pub struct Oracle<'a> {
    model: &'a dyn CmarlModel,
    policy: &'a CoupledSoftmax,
    states: JointSpace,
    actions: JointSpace,
    /// `kernel[(s * nA + a) * nS + s']`.
    kernel: Vec<f64>,
    /// `f[sa][i]`, `g[sa][i]`.
    f: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    rho: Vec<f64>,
}

/// Everything the oracle knows at one `(θ, μ)`.
#[derive(Debug, Clone)]
pub struct ExactSolution {
    pub theta: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    /// `pi[s * nA + a] = π_θ(a | s)`.
    pub pi: Vec<f64>,
    /// Discounted state visitation.
    pub d: Vec<f64>,
    /// `ξ(s, a) = d(s) π(a | s)`.
    pub xi: Vec<f64>,
    /// Objective-only and constraint-only Q tables per agent, `[i][sa]`.
    pub q_f: Vec<Vec<f64>>,
    pub q_g: Vec<Vec<f64>>,
    /// Local Lagrangian Q, `q_f + μ_i q_g`.
    pub q_i: Vec<Vec<f64>>,
    /// Global Lagrangian Q from its own linear solve.
    pub q: Vec<f64>,
    /// `F_i(θ)` and `G_i(θ)`.
    pub f_ret: Vec<f64>,
    pub g_ret: Vec<f64>,
    /// Largest residual of the linear solves.
    pub residual: f64,
}

impl ExactSolution {
    pub fn objective(&self) -> f64 {
        self.f_ret.iter().sum::<f64>() / self.f_ret.len() as f64
    }
}

/// Truncated Q of one agent over `(s_{N^κ_i}, a_{N^κ_i})`.
#[derive(Debug, Clone)]
pub struct TruncatedQ {
    pub agents: Vec<usize>,
    /// Radices: the listed agents' states, then their actions.
    pub space: JointSpace,
    pub values: Vec<f64>,
    /// Conditional weights summed per cell. Each is 1 up to rounding.
    pub weight_sums: Vec<f64>,
}

impl TruncatedQ {
    pub fn key(&self, s: &[usize], a: &[usize]) -> usize {
        let tuple: Vec<usize> = self
            .agents
            .iter()
            .map(|&j| s[j])
            .chain(self.agents.iter().map(|&j| a[j]))
            .collect();
        self.space.encode(&tuple)
    }

    pub fn value_at(&self, s: &[usize], a: &[usize]) -> f64 {
        self.values[self.key(s, a)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayGap {
    pub gap: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fosp {
    pub x: f64,
    pub y: f64,
    pub e: f64,
}

/// Feasible sets entering the stationarity residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FospBoxes {
    pub mu_max: f64,
    pub theta_lo: f64,
    pub theta_hi: f64,
}

/// `2 (R_f + μ_max R_g) / (1 − γ) · γ^{h(κ,κp)+1}`, the truncation and
/// decay bound on local Q-functions.
pub fn q_truncation_bound(r_f: f64, r_g: f64, mu_max: f64, gamma: f64, kappa: usize, kappa_p: usize) -> Result<f64> {
    let h = h_offset(kappa, kappa_p)?;
    Ok(2.0 * (r_f + mu_max * r_g) / (1.0 - gamma) * gamma.powi(h as i32 + 1))
}

/// `2 (R_f + μ_max R_g) B N / (1 − γ)² · γ^{h(κ,κp)+1}`.
#[allow(clippy::too_many_arguments)]
pub fn gradient_error_bound(
    r_f: f64,
    r_g: f64,
    mu_max: f64,
    b: f64,
    n: usize,
    gamma: f64,
    kappa: usize,
    kappa_p: usize,
) -> Result<f64> {
    let h = h_offset(kappa, kappa_p)?;
    Ok(2.0 * (r_f + mu_max * r_g) * b * n as f64 / (1.0 - gamma).powi(2)
        * gamma.powi(h as i32 + 1))
}

impl<'a> Oracle<'a> {
    pub fn new(model: &'a dyn CmarlModel, policy: &'a CoupledSoftmax, size_cap: usize) -> Result<Self> {
        let states = JointSpace::states_of(model, size_cap)?;
        let actions = JointSpace::actions_of(model, usize::MAX)?;
        let (ns, na) = (states.size(), actions.size());
        let entries = ns
            .checked_mul(na)
            .and_then(|x| x.checked_mul(ns))
            .filter(|&x| x <= MAX_KERNEL_ENTRIES)
            .ok_or_else(|| Error::Refused(format!("dense kernel of {ns} states x {na} actions is too large")))?;
        if policy.num_agents() != model.num_agents() {
            return Err(Error::Config("policy and model disagree on the agent count".into()));
        }
        let n = model.num_agents();
        let mut kernel = vec![0.0; entries];
        let mut f = Vec::with_capacity(ns * na);
        let mut g = Vec::with_capacity(ns * na);
        let all_s: Vec<Vec<usize>> = states.iter().collect();
        let all_a: Vec<Vec<usize>> = actions.iter().collect();
        for (sc, s) in all_s.iter().enumerate() {
            for (ac, a) in all_a.iter().enumerate() {
                let local: Vec<Vec<f64>> = (0..n)
                    .map(|i| model.local_transition_probs(i, s, a[i]))
                    .collect();
                let row = &mut kernel[(sc * na + ac) * ns..(sc * na + ac + 1) * ns];
                for (nc, next) in all_s.iter().enumerate() {
                    row[nc] = (0..n).map(|i| local[i][next[i]]).product();
                }
                let r = model.rewards(s, a);
                f.push(r.f);
                g.push(r.g);
            }
        }
        let rho = all_s.iter().map(|s| model.initial_probability(s)).collect();
        Ok(Self {
            model,
            policy,
            states,
            actions,
            kernel,
            f,
            g,
            rho,
        })
    }

    pub fn model(&self) -> &dyn CmarlModel {
        self.model
    }

    pub fn policy(&self) -> &CoupledSoftmax {
        self.policy
    }

    pub fn states(&self) -> &JointSpace {
        &self.states
    }

    pub fn actions(&self) -> &JointSpace {
        &self.actions
    }

    pub fn num_pairs(&self) -> usize {
        self.states.size() * self.actions.size()
    }

    /// `P(s' | s, a)`.
    pub fn kernel_row(&self, sa: usize) -> &[f64] {
        let ns = self.states.size();
        &self.kernel[sa * ns..(sa + 1) * ns]
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    /// Joint `π(a | s)` table.
    pub fn joint_policy(&self, theta: &[Vec<f64>]) -> Result<Vec<f64>> {
        let (ns, na) = (self.states.size(), self.actions.size());
        let n = self.model.num_agents();
        let mut pi = vec![0.0; ns * na];
        for sc in 0..ns {
            let s = self.states.decode(sc);
            let ps = policy_states(self.model, &s);
            let local: Vec<Vec<f64>> = (0..n)
                .map(|i| self.policy.action_probabilities(i, &self.policy.view_of(i, &ps), theta))
                .collect::<Result<_>>()?;
            for ac in 0..na {
                let a = self.actions.decode(ac);
                pi[sc * na + ac] = (0..n).map(|i| local[i][a[i]]).product();
            }
        }
        Ok(pi)
    }

    /// `P_π(s, s') = Σ_a π(a | s) P(s' | s, a)`.
    pub fn state_kernel(&self, pi: &[f64]) -> DMatrix<f64> {
        let (ns, na) = (self.states.size(), self.actions.size());
        let mut p = DMatrix::zeros(ns, ns);
        for sc in 0..ns {
            for ac in 0..na {
                let w = pi[sc * na + ac];
                if w == 0.0 {
                    continue;
                }
                for (nc, &k) in self.kernel_row(sc * na + ac).iter().enumerate() {
                    p[(sc, nc)] += w * k;
                }
            }
        }
        p
    }

    pub fn solve(&self, theta: &[Vec<f64>], mu: &[f64]) -> Result<ExactSolution> {
        let n = self.model.num_agents();
        if mu.len() != n {
            return Err(Error::Contract("one multiplier per agent".into()));
        }
        let gamma = self.model.gamma();
        let (ns, na) = (self.states.size(), self.actions.size());
        let pi = self.joint_policy(theta)?;
        let p = self.state_kernel(&pi);
        let eye = DMatrix::<f64>::identity(ns, ns);

        let mut residual = 0.0_f64;
        let rho = DVector::from_vec(self.rho.clone());
        let a_d = &eye - p.transpose() * gamma;
        let b_d = &rho * (1.0 - gamma);
        let d = a_d
            .clone()
            .lu()
            .solve(&b_d)
            .ok_or_else(|| Error::Numerical("visitation system is singular".into()))?;
        residual = residual.max((&a_d * &d - &b_d).amax());

        let a_v = &eye - &p * gamma;
        let lu = a_v.clone().lu();
        let mut solve_q = |r: &dyn Fn(usize) -> f64| -> Result<(Vec<f64>, Vec<f64>)> {
            let r_pi = DVector::from_fn(ns, |sc, _| (0..na).map(|ac| pi[sc * na + ac] * r(sc * na + ac)).sum());
            let v = lu
                .solve(&r_pi)
                .ok_or_else(|| Error::Numerical("value system is singular".into()))?;
            residual = residual.max((&a_v * &v - &r_pi).amax());
            let q = (0..ns * na)
                .map(|sa| {
                    r(sa) + gamma
                        * self
                            .kernel_row(sa)
                            .iter()
                            .zip(v.iter())
                            .map(|(k, vv)| k * vv)
                            .sum::<f64>()
                })
                .collect();
            Ok((q, v.as_slice().to_vec()))
        };

        let mut q_f = Vec::with_capacity(n);
        let mut q_g = Vec::with_capacity(n);
        let mut f_ret = Vec::with_capacity(n);
        let mut g_ret = Vec::with_capacity(n);
        for i in 0..n {
            let (qf, vf) = solve_q(&|sa| self.f[sa][i])?;
            let (qg, vg) = solve_q(&|sa| self.g[sa][i])?;
            f_ret.push(vf.iter().zip(&self.rho).map(|(v, r)| v * r).sum());
            g_ret.push(vg.iter().zip(&self.rho).map(|(v, r)| v * r).sum());
            q_f.push(qf);
            q_g.push(qg);
        }
        let q_i: Vec<Vec<f64>> = (0..n)
            .map(|i| q_f[i].iter().zip(&q_g[i]).map(|(f, g)| f + mu[i] * g).collect())
            .collect();
        let nf = n as f64;
        let (q, _) = solve_q(&|sa| (0..n).map(|i| self.f[sa][i] + mu[i] * self.g[sa][i]).sum::<f64>() / nf)?;

        let d = d.as_slice().to_vec();
        let xi = (0..ns * na).map(|sa| d[sa / na] * pi[sa]).collect();
        Ok(ExactSolution {
            theta: theta.to_vec(),
            mu: mu.to_vec(),
            pi,
            d,
            xi,
            q_f,
            q_g,
            q_i,
            q,
            f_ret,
            g_ret,
            residual,
        })
    }

    /// `Σ_{t ≤ t_max} (1 − γ) γ^t Pr(s_t = ·)` by forward propagation.
    pub fn visitation_power_series(&self, theta: &[Vec<f64>], t_max: usize) -> Result<Vec<f64>> {
        let gamma = self.model.gamma();
        let p = self.state_kernel(&self.joint_policy(theta)?);
        let pt = p.transpose();
        let mut dist = DVector::from_vec(self.rho.clone());
        let mut acc = DVector::zeros(dist.len());
        let mut disc = 1.0 - gamma;
        for _ in 0..=t_max {
            acc += &dist * disc;
            dist = &pt * dist;
            disc *= gamma;
        }
        Ok(acc.as_slice().to_vec())
    }

    /// `L(θ, μ) = F(θ) + (1/N) Σ_i μ_i (G_i(θ) − c_i)`.
    pub fn lagrangian(&self, sol: &ExactSolution) -> f64 {
        let c = self.model.thresholds();
        let n = sol.mu.len() as f64;
        sol.objective()
            + (0..sol.mu.len())
                .map(|i| sol.mu[i] * (sol.g_ret[i] - c[i]))
                .sum::<f64>()
                / n
    }

    /// `∇_{μ_i} L = (G_i − c_i) / N`.
    pub fn exact_dual_gradient(&self, sol: &ExactSolution, i: usize) -> f64 {
        (sol.g_ret[i] - self.model.thresholds()[i]) / sol.mu.len() as f64
    }

    /// `(1/(1−γ)) Σ_{s,a} ξ(s,a) q(s,a) Σ_{j ∈ J} ∇_{θ_i} log π_j(a_j | s)`.
    fn score_weighted(
        &self,
        sol: &ExactSolution,
        i: usize,
        q: &dyn Fn(usize, &[usize], &[usize]) -> f64,
        partners: &[usize],
    ) -> Result<Vec<f64>> {
        let gamma = self.model.gamma();
        let na = self.actions.size();
        let mut out = vec![0.0; self.policy.dim()];
        for sc in 0..self.states.size() {
            let s = self.states.decode(sc);
            let ps = policy_states(self.model, &s);
            for ac in 0..na {
                let sa = sc * na + ac;
                let w = sol.xi[sa];
                if w == 0.0 {
                    continue;
                }
                let a = self.actions.decode(ac);
                let scale = w * q(sa, &s, &a) / (1.0 - gamma);
                for &j in partners {
                    let view = self.policy.view_of(j, &ps);
                    self.policy
                        .add_grad_log_policy(i, j, &view, a[j], &sol.theta, scale, &mut out)?;
                }
            }
        }
        Ok(out)
    }

    /// Exact `∇_{θ_i} L` with the global Q. Sums over every `j` whose policy
    /// reads `θ_i`.
    pub fn exact_policy_gradient(&self, sol: &ExactSolution, i: usize) -> Result<Vec<f64>> {
        let all: Vec<usize> = (0..self.model.num_agents()).collect();
        self.score_weighted(sol, i, &|sa, _, _| sol.q[sa], &all)
    }

    /// Neighbors' averaged Q, `(1/N) Σ_{j ∈ N^{κ+2κp}_i} Q_j`.
    pub fn neighbors_averaged_q(&self, sol: &ExactSolution, i: usize, kappa: usize) -> Result<Vec<f64>> {
        let n = self.model.num_agents();
        let reach = self
            .model
            .env_graph()
            .k_hop_neighborhood(i, kappa + 2 * self.policy.kappa_p())?;
        Ok((0..self.num_pairs())
            .map(|sa| reach.iter().map(|&j| sol.q_i[j][sa]).sum::<f64>() / n as f64)
            .collect())
    }

    /// Approximated gradient `g_app,i`.
    pub fn approx_gradient_exact(&self, sol: &ExactSolution, i: usize, kappa: usize) -> Result<Vec<f64>> {
        let q_hat = self.neighbors_averaged_q(sol, i, kappa)?;
        let partners = self.policy.neighborhood(i).to_vec();
        self.score_weighted(sol, i, &|sa, _, _| q_hat[sa], &partners)
    }

    /// Conditional expectation of `Q_i` under `ξ` given the coordinates of
    /// `N^κ_i`. Refuses when a conditioning cell has zero visitation.
    pub fn truncated_q(&self, sol: &ExactSolution, i: usize, kappa: usize) -> Result<TruncatedQ> {
        let agents = self.model.env_graph().k_hop_neighborhood(i, kappa)?;
        let radices: Vec<usize> = agents
            .iter()
            .map(|&j| self.model.num_states(j))
            .chain(agents.iter().map(|&j| self.model.num_actions(j)))
            .collect();
        let space = JointSpace::new(radices, usize::MAX)?;
        let mut num = vec![0.0; space.size()];
        let mut den = vec![0.0; space.size()];
        let mut keys = Vec::with_capacity(self.num_pairs());
        let na = self.actions.size();
        for sc in 0..self.states.size() {
            let s = self.states.decode(sc);
            for ac in 0..na {
                let a = self.actions.decode(ac);
                let tuple: Vec<usize> = agents
                    .iter()
                    .map(|&j| s[j])
                    .chain(agents.iter().map(|&j| a[j]))
                    .collect();
                let key = space.encode(&tuple);
                let sa = sc * na + ac;
                num[key] += sol.xi[sa] * sol.q_i[i][sa];
                den[key] += sol.xi[sa];
                keys.push(key);
            }
        }
        if let Some(k) = den.iter().position(|&x| !(x > 0.0)) {
            return Err(Error::Refused(format!(
                "conditioning cell {:?} of agent {} has zero visitation; state-action visitation must be positive everywhere",
                space.decode(k),
                i + 1
            )));
        }
        let mut weight_sums = vec![0.0; space.size()];
        for (sa, &key) in keys.iter().enumerate() {
            weight_sums[key] += sol.xi[sa] / den[key];
        }
        let values = num.iter().zip(&den).map(|(a, b)| a / b).collect();
        Ok(TruncatedQ {
            agents,
            space,
            values,
            weight_sums,
        })
    }

    /// Truncated gradient `g_tru,i` built from `(1/N) Σ_l Q_tru,l`.
    pub fn truncated_gradient_exact(&self, sol: &ExactSolution, i: usize, kappa: usize) -> Result<Vec<f64>> {
        let n = self.model.num_agents();
        let tables = (0..n)
            .map(|l| self.truncated_q(sol, l, kappa))
            .collect::<Result<Vec<_>>>()?;
        let partners = self.policy.neighborhood(i).to_vec();
        let q = |_sa: usize, s: &[usize], a: &[usize]| {
            tables.iter().map(|t| t.value_at(s, a)).sum::<f64>() / n as f64
        };
        self.score_weighted(sol, i, &q, &partners)
    }

    /// Largest spread of `Q_i` among pairs that agree on `N^κ_i`, against the
    /// exponential-decay bound.
    pub fn decay_gap(&self, sol: &ExactSolution, i: usize, kappa: usize, mu_max: f64) -> Result<DecayGap> {
        let agents = self.model.env_graph().k_hop_neighborhood(i, kappa)?;
        let na = self.actions.size();
        let mut lo: std::collections::HashMap<Vec<usize>, (f64, f64)> = Default::default();
        for sc in 0..self.states.size() {
            let s = self.states.decode(sc);
            for ac in 0..na {
                let a = self.actions.decode(ac);
                let key: Vec<usize> = agents
                    .iter()
                    .map(|&j| s[j])
                    .chain(agents.iter().map(|&j| a[j]))
                    .collect();
                let v = sol.q_i[i][sc * na + ac];
                let e = lo.entry(key).or_insert((v, v));
                e.0 = e.0.min(v);
                e.1 = e.1.max(v);
            }
        }
        let gap = lo.values().map(|(a, b)| b - a).fold(0.0, f64::max);
        let (r_f, r_g) = self.model.reward_bounds();
        let bound = q_truncation_bound(r_f, r_g, mu_max, self.model.gamma(), kappa, self.policy.kappa_p())?;
        Ok(DecayGap {
            gap,
            bound,
            holds: gap <= bound,
        })
    }

    /// Stationarity residual `E = X² + Y²` at the solved point.
    pub fn fosp_residual(&self, sol: &ExactSolution, boxes: FospBoxes) -> Result<Fosp> {
        let n = self.model.num_agents();
        let grad_mu: Vec<f64> = (0..n).map(|i| self.exact_dual_gradient(sol, i)).collect();
        let x = box_ball_linmax(&grad_mu, &sol.mu, &vec![0.0; n], &vec![boxes.mu_max; n], 1.0)?;
        let mut grad_theta = Vec::new();
        for i in 0..n {
            grad_theta.extend(self.exact_policy_gradient(sol, i)?);
        }
        let center: Vec<f64> = sol.theta.iter().flatten().copied().collect();
        let d = center.len();
        let y = box_ball_linmax(
            &grad_theta,
            &center,
            &vec![boxes.theta_lo; d],
            &vec![boxes.theta_hi; d],
            1.0,
        )?;
        Ok(Fosp { x, y, e: x * x + y * y })
    }
}

/// Maximizer of `⟨g, x − c⟩` over `{lo ≤ x ≤ hi, ‖x − c‖ ≤ r}`.
///
/// The optimum is `c + clamp(t g, lo − c, hi − c)` for the smallest `t` whose
/// step reaches the sphere, or the box corner when the corner lies inside the
/// ball. `t` is found by bisection.
pub fn box_ball_argmax(g: &[f64], center: &[f64], lo: &[f64], hi: &[f64], radius: f64) -> Result<Vec<f64>> {
    let d = g.len();
    if center.len() != d || lo.len() != d || hi.len() != d {
        return Err(Error::Contract("box_ball_linmax: dimension mismatch".into()));
    }
    if !(radius >= 0.0) {
        return Err(Error::Contract("box_ball_linmax: negative radius".into()));
    }
    if (0..d).any(|k| !(lo[k] <= center[k] && center[k] <= hi[k])) {
        return Err(Error::Contract("box_ball_linmax: center outside the box".into()));
    }
    let l: Vec<f64> = (0..d).map(|k| lo[k] - center[k]).collect();
    let u: Vec<f64> = (0..d).map(|k| hi[k] - center[k]).collect();
    let step = |t: f64| -> Vec<f64> { (0..d).map(|k| (t * g[k]).clamp(l[k], u[k])).collect() };
    let norm = |y: &[f64]| y.iter().map(|v| v * v).sum::<f64>().sqrt();

    let gnorm = norm(g);
    if gnorm == 0.0 || radius == 0.0 {
        return Ok(center.to_vec());
    }
    let corner: Vec<f64> = (0..d)
        .map(|k| match g[k].partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => u[k],
            Some(std::cmp::Ordering::Less) => l[k],
            _ => 0.0,
        })
        .collect();
    let y = if norm(&corner) <= radius {
        corner
    } else {
        // ‖step(t)‖ is continuous and non-decreasing in t.
        let mut lo_t = 0.0;
        let mut hi_t = radius / gnorm;
        while norm(&step(hi_t)) < radius {
            hi_t *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo_t + hi_t);
            if norm(&step(mid)) < radius {
                lo_t = mid;
            } else {
                hi_t = mid;
            }
            if hi_t - lo_t <= f64::EPSILON * hi_t {
                break;
            }
        }
        step(hi_t)
    };
    Ok((0..d).map(|k| center[k] + y[k]).collect())
}

/// Value of [`box_ball_argmax`].
pub fn box_ball_linmax(g: &[f64], center: &[f64], lo: &[f64], hi: &[f64], radius: f64) -> Result<f64> {
    let x = box_ball_argmax(g, center, lo, hi, radius)?;
    Ok(g.iter().zip(&x).zip(center).map(|((gk, xk), ck)| gk * (xk - ck)).sum())
}
