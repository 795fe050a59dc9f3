//! The primal-dual loop with push-sum estimates.
//!
//! One iteration `m`:
//!
//! 1. `K_μ` dual batches, each a rollout of horizon `T₁ ~ Geom(1 − √γ)`
//!    executed with every agent's own parameter estimates.
//! 2. `μ ← clamp(μ − η_μ h̄, 0, μ_max)`, injected into `μ̆` with `W_m`.
//! 3. The weights advance with `W_{m+1}` and `μ̂` is recomputed.
//! 4. `K_θ` primal batches, each a rollout of horizon `T₂ + T₃` split at `T₂`,
//!    with `Q̂` weighted by the fresh `μ̂`.
//! 5. `θ ← clamp(θ + η_θ ḡ)`, injected into `θ̆` with `W_m`, and `θ̂` is
//!    recomputed for the next iteration.
//!
//! Batches run in parallel, each on its own random substream, and are
//! reduced in batch order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    batch_average, batch_average_vec, dual_grad_bound, estimate_dual_grad, estimate_policy_grad,
    estimate_truncated_q, policy_grad_bound,
};
use crate::graph::TimeVaryingSchedule;
use crate::model::CmarlModel;
use crate::policy::{sample_executed_joint_action, CoupledSoftmax};
use crate::pushsum::EstimateBank;
use crate::rng::BatchStreams;
use crate::sampling::{agent_view, draw_capped, draw_horizon, horizon_cap, rollout, Trajectory};

/// θ-phase batch `k` draws from stream `THETA_BATCH_OFFSET + k`; μ-phase
/// batch `k` from stream `k`.
pub const THETA_BATCH_OFFSET: u64 = 1 << 32;
/// Slack for the per-iteration mean-preservation check.
const MEAN_TOLERANCE: f64 = 1e-8;

/// `h(κ, κp)`.
pub fn h_offset(kappa: usize, kappa_p: usize) -> Result<usize> {
    if kappa_p < 1 {
        return Err(Error::Config("kappa_p must be >= 1".into()));
    }
    let k = kappa + 1;
    Ok(if k.is_multiple_of(kappa_p) { k / kappa_p - 1 } else { k / kappa_p })
}

pub fn project_mu(mu: f64, mu_max: f64) -> f64 {
    mu.clamp(0.0, mu_max)
}

pub fn project_theta(theta: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    theta.iter().map(|x| x.clamp(lo, hi)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum LearningRateMode {
    /// `(c_θ / (m + m₀), c_μ / (m + m₀))`.
    Harmonic {
        c_theta: f64,
        c_mu: f64,
        #[serde(default)]
        offset: f64,
    },
    Constant { eta_theta: f64, eta_mu: f64 },
    /// `(1/(2m + L_θθ), 1/(2m))`. `L_θθ` is taken as given or computed from
    /// the Lipschitz constant of the score.
    Theoretical {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        l_theta_theta: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lipschitz: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mu_tilde: Option<f64>,
    },
}

impl Default for LearningRateMode {
    fn default() -> Self {
        LearningRateMode::Harmonic {
            c_theta: 0.5,
            c_mu: 1.0,
            offset: 250.0,
        }
    }
}

/// Problem constants entering `L_θθ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryConstants {
    pub lipschitz: f64,
    pub b: f64,
    pub n: usize,
    pub r_f: f64,
    pub r_g: f64,
    pub mu_tilde: f64,
    pub gamma: f64,
}

/// `L N^{3/2} R / (1−γ)² + (1+γ) B² N³ R / (1−γ)³` with `R = R_f + μ̃ R_g`.
pub fn l_theta_theta(c: &TheoryConstants) -> f64 {
    let r = c.r_f + c.mu_tilde * c.r_g;
    let n = c.n as f64;
    c.lipschitz * n.powf(1.5) * r / (1.0 - c.gamma).powi(2)
        + (1.0 + c.gamma) * c.b * c.b * n.powi(3) * r / (1.0 - c.gamma).powi(3)
}

/// `(η_θ, η_μ)` at iteration `m ≥ 1`. Theoretical mode needs either
/// `l_theta_theta` or `lipschitz` together with `constants`.
pub fn learning_rates(
    m: usize,
    mode: &LearningRateMode,
    constants: Option<&TheoryConstants>,
) -> Result<(f64, f64)> {
    if m == 0 {
        return Err(Error::Contract("iterations are numbered from 1".into()));
    }
    let mf = m as f64;
    match *mode {
        LearningRateMode::Harmonic { c_theta, c_mu, offset } => Ok((c_theta / (mf + offset), c_mu / (mf + offset))),
        LearningRateMode::Constant { eta_theta, eta_mu } => Ok((eta_theta, eta_mu)),
        LearningRateMode::Theoretical {
            l_theta_theta: given,
            lipschitz,
            mu_tilde,
        } => {
            let l = match (given, lipschitz, constants) {
                (Some(l), _, _) => l,
                (None, Some(lip), Some(c)) => l_theta_theta(&TheoryConstants {
                    lipschitz: lip,
                    mu_tilde: mu_tilde.unwrap_or(c.mu_tilde),
                    ..*c
                }),
                _ => {
                    return Err(Error::Config(
                        "theoretical learning rates need l_theta_theta, or lipschitz plus the problem constants".into(),
                    ))
                }
            };
            Ok((1.0 / (2.0 * mf + l), 1.0 / (2.0 * mf)))
        }
    }
}

/// Iteration and batch counts from the high-probability guarantee:
/// `M = exp(1/ε)`, `K = ln(2/δ) / (2ε²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoryBudget {
    pub iterations: f64,
    pub batches: f64,
}

pub fn theory_budget(epsilon: f64, delta: f64) -> Result<TheoryBudget> {
    if !(epsilon > 0.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config("need epsilon > 0 and delta in (0, 1)".into()));
    }
    Ok(TheoryBudget {
        iterations: (1.0 / epsilon).exp().ceil(),
        batches: ((2.0 / delta).ln() / (2.0 * epsilon * epsilon)).ceil(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DspdConfig {
    pub iterations: usize,
    pub k_mu: usize,
    pub k_theta: usize,
    pub kappa: usize,
    pub kappa_p: usize,
    pub mu_max: f64,
    pub theta_lo: f64,
    pub theta_hi: f64,
    pub learning_rate: LearningRateMode,
    /// Horizon cap as a multiple of the mean horizon.
    pub horizon_cap_factor: f64,
    /// Evaluation episodes per iteration. Zero skips evaluation.
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for DspdConfig {
    fn default() -> Self {
        Self {
            iterations: 2500,
            k_mu: 20,
            k_theta: 40,
            kappa: 1,
            kappa_p: 1,
            mu_max: 10.0,
            theta_lo: -1e6,
            theta_hi: 1e6,
            learning_rate: LearningRateMode::default(),
            horizon_cap_factor: 10.0,
            eval_episodes: 32,
            seed: 0,
        }
    }
}

impl DspdConfig {
    /// Every violated constraint, with the field name.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("iterations", self.iterations),
            ("k_mu", self.k_mu),
            ("k_theta", self.k_theta),
        ] {
            if v == 0 {
                errs.push(format!("{name}: must be a positive integer"));
            }
        }
        if self.kappa_p < 1 {
            errs.push("kappa_p: must satisfy kappa_p >= 1".into());
        }
        if !(self.mu_max > 0.0 && self.mu_max.is_finite()) {
            errs.push("mu_max: must be positive and finite".into());
        }
        if !(self.theta_lo <= 0.0 && 0.0 <= self.theta_hi) {
            errs.push("theta_lo/theta_hi: the box must contain 0".into());
        }
        if !(self.horizon_cap_factor >= 1.0) {
            errs.push("horizon_cap_factor: must be at least 1".into());
        }
        match self.learning_rate {
            LearningRateMode::Harmonic { c_theta, c_mu, offset }
                if !(c_theta > 0.0 && c_mu > 0.0 && offset >= 0.0) =>
            {
                errs.push("learning_rate: harmonic constants must be positive and the offset non-negative".into())
            }
            LearningRateMode::Constant { eta_theta, eta_mu } if !(eta_theta > 0.0 && eta_mu > 0.0) => {
                errs.push("learning_rate: constant rates must be positive".into())
            }
            LearningRateMode::Theoretical {
                l_theta_theta: None,
                lipschitz: None,
                ..
            } => errs.push("learning_rate: theoretical mode needs l_theta_theta or lipschitz".into()),
            _ => {}
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub m: usize,
    /// Parameters and multipliers the iteration started from.
    pub theta: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub h_bar: Vec<f64>,
    pub h_bar_norm: f64,
    pub g_bar_norm: f64,
    /// `(1/N²) Σ |μ̂^i_j − μ_j|` after the iteration.
    pub mu_consensus_err: f64,
    /// `(1/N²) Σ ‖θ̂^i_j − θ_j‖²` after the iteration.
    pub theta_consensus_err: f64,
    pub mu_hat_max: f64,
    /// Monte-Carlo `F(θ_m)` and `G_i(θ_m)`. NaN when evaluation is off.
    pub f_est: f64,
    pub g_est: Vec<f64>,
    pub eta_theta: f64,
    pub eta_mu: f64,
    pub cap_events: usize,
    /// Batches whose estimate exceeded its bound, capped batches excluded.
    pub bound_violations: usize,
}

impl IterationRecord {
    pub fn min_g_est(&self) -> f64 {
        self.g_est.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Result of [`run_dspd`]. A non-finite estimate stops the run early and is
/// reported in `failure` with the records up to that point.
#[derive(Debug, Clone)]
pub struct DspdRun {
    pub records: Vec<IterationRecord>,
    pub theta: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub bank: EstimateBank,
    pub warnings: Vec<String>,
    pub failure: Option<String>,
}

/// Step-by-step driver. [`run_dspd`] wraps it.
pub struct Dspd<'a> {
    config: DspdConfig,
    model: &'a dyn CmarlModel,
    schedule: &'a TimeVaryingSchedule,
    policy: CoupledSoftmax,
    bank: EstimateBank,
    theta: Vec<Vec<f64>>,
    mu: Vec<f64>,
    m: usize,
    mu_tilde: f64,
}

struct Phase<T> {
    values: Vec<T>,
    capped: Vec<bool>,
}

impl<T> Phase<T> {
    fn caps(&self) -> usize {
        self.capped.iter().filter(|&&c| c).count()
    }
}

impl<'a> Dspd<'a> {
    pub fn new(config: DspdConfig, model: &'a dyn CmarlModel, schedule: &'a TimeVaryingSchedule) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs.join("; ")));
        }
        let n = model.num_agents();
        if schedule.num_agents() != n {
            return Err(Error::Config(format!(
                "learning schedule has {} agents, model has {n}",
                schedule.num_agents()
            )));
        }
        let policy = CoupledSoftmax::for_model(model, config.kappa_p)?;
        let d = policy.dim();
        let mut bank = EstimateBank::new(n, &vec![d; n]);
        bank.pushsum_ratio_step(schedule.weights(1)?)?;
        Ok(Self {
            config,
            model,
            schedule,
            policy,
            bank,
            theta: vec![vec![0.0; d]; n],
            mu: vec![0.0; n],
            m: 1,
            mu_tilde: 0.0,
        })
    }

    pub fn policy(&self) -> &CoupledSoftmax {
        &self.policy
    }

    pub fn bank(&self) -> &EstimateBank {
        &self.bank
    }

    pub fn theta(&self) -> &[Vec<f64>] {
        &self.theta
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    /// Index of the next iteration.
    pub fn iteration(&self) -> usize {
        self.m
    }

    pub fn config(&self) -> &DspdConfig {
        &self.config
    }

    fn rates(&self) -> Result<(f64, f64)> {
        let (r_f, r_g) = self.model.reward_bounds();
        let c = TheoryConstants {
            lipschitz: 0.0,
            b: self.policy.grad_bound(),
            n: self.model.num_agents(),
            r_f,
            r_g,
            mu_tilde: self.config.mu_max,
            gamma: self.model.gamma(),
        };
        learning_rates(self.m, &self.config.learning_rate, Some(&c))
    }

    fn run_batches<T: Send>(
        &self,
        count: usize,
        offset: u64,
        body: &(dyn Fn(&mut BatchStreams) -> Result<(T, bool)> + Sync),
    ) -> Result<Phase<T>> {
        let seed = self.config.seed;
        let m = self.m as u64;
        let out: Vec<(T, bool)> = (0..count as u64)
            .into_par_iter()
            .map(|k| body(&mut BatchStreams::new(seed, m, offset + k)))
            .collect::<Result<_>>()?;
        let (values, capped) = out.into_iter().unzip();
        Ok(Phase { values, capped })
    }

    fn executed_rollout(&self, horizon: usize, streams: &mut BatchStreams) -> Result<Trajectory> {
        let rows = &self.bank.hat_theta;
        let mut act = |s: &[usize], rng: &mut crate::rng::Rng| {
            sample_executed_joint_action(&self.policy, self.model, s, rows, rng)
        };
        rollout(
            self.model,
            &mut act,
            horizon,
            &mut streams.transitions,
            &mut streams.policy,
        )
    }

    /// Monte-Carlo `F` and `G_i` at the true parameters.
    fn evaluate(&self) -> Result<(f64, Vec<f64>)> {
        let n = self.model.num_agents();
        if self.config.eval_episodes == 0 {
            return Ok((f64::NAN, vec![f64::NAN; n]));
        }
        let gamma = self.model.gamma();
        let rows = vec![self.theta.clone(); n];
        let (seed, m) = (self.config.seed, self.m as u64);
        let returns: Vec<(f64, Vec<f64>)> = (0..self.config.eval_episodes as u64)
            .into_par_iter()
            .map(|e| {
                let mut st = BatchStreams::evaluation(seed, m, e);
                let t = draw_horizon(1.0 - gamma, &mut st.horizons)?;
                let mut act = |s: &[usize], rng: &mut crate::rng::Rng| {
                    sample_executed_joint_action(&self.policy, self.model, s, &rows, rng)
                };
                let traj = rollout(self.model, &mut act, t, &mut st.transitions, &mut st.policy)?;
                let f = traj.steps.iter().map(|s| s.r.f.iter().sum::<f64>()).sum::<f64>() / n as f64;
                let g = (0..n)
                    .map(|i| traj.steps.iter().map(|s| s.r.g[i]).sum())
                    .collect();
                Ok((f, g))
            })
            .collect::<Result<_>>()?;
        let f = batch_average(&returns.iter().map(|r| r.0).collect::<Vec<_>>())?;
        let g = batch_average_vec(&returns.into_iter().map(|r| r.1).collect::<Vec<_>>())?;
        Ok((f, g))
    }

    fn check_means(&self) -> Result<()> {
        let n = self.model.num_agents() as f64;
        let scale = |x: f64| MEAN_TOLERANCE * x.abs().max(1.0);
        if (self.bank.mass() - n).abs() > scale(n) {
            return Err(Error::Protocol(format!("push-sum mass {} != {n}", self.bank.mass())));
        }
        for (j, (a, b)) in self.bank.breve_mu_mean().iter().zip(&self.mu).enumerate() {
            if (a - b).abs() > scale(*b) {
                return Err(Error::Protocol(format!("mean of multiplier copies of agent {} drifted", j + 1)));
            }
        }
        for (j, (a, b)) in self.bank.breve_theta_mean().iter().zip(&self.theta).enumerate() {
            if a.iter().zip(b).any(|(x, y)| (x - y).abs() > scale(*y)) {
                return Err(Error::Protocol(format!("mean of parameter copies of agent {} drifted", j + 1)));
            }
        }
        Ok(())
    }

    /// Runs iteration `m` and advances to `m + 1`.
    pub fn step(&mut self) -> Result<IterationRecord> {
        let n = self.model.num_agents();
        let gamma = self.model.gamma();
        let root = gamma.sqrt();
        let cfg = self.config.clone();
        let (eta_theta, eta_mu) = self.rates()?;
        let w_m = self.schedule.weights(self.m)?;
        let w_next = self.schedule.weights(self.m + 1)?;
        let env = self.model.env_graph();
        let (r_f, r_g) = self.model.reward_bounds();
        let c = self.model.thresholds().to_vec();
        let c_max = c.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
        let cap_tail = horizon_cap(1.0 - root, cfg.horizon_cap_factor);
        let cap_split = horizon_cap(1.0 - gamma, cfg.horizon_cap_factor);

        let (f_est, g_est) = self.evaluate()?;
        let theta_m = self.theta.clone();
        let mu_m = self.mu.clone();

        // Dual phase.
        let dual = self.run_batches(cfg.k_mu, 0, &|st| {
            let t1 = draw_capped(1.0 - root, cap_tail, &mut st.horizons)?;
            let traj = self.executed_rollout(t1.value, st)?;
            let h = (0..n)
                .map(|i| {
                    let view = agent_view(&traj, i, cfg.kappa, cfg.kappa_p, env)?;
                    estimate_dual_grad(&view, c[i], n, gamma)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((h, t1.capped))
        })?;
        let h_bound = dual_grad_bound(r_g, c_max, gamma, n);
        let mut violations = 0;
        for (h, capped) in dual.values.iter().zip(&dual.capped) {
            if !*capped && h.iter().any(|x| x.abs() > h_bound * (1.0 + 1e-12)) {
                violations += 1;
            }
        }
        let h_bar = batch_average_vec(&dual.values)?;
        if h_bar.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite dual gradient estimate at iteration {}", self.m)));
        }
        let new_mu: Vec<f64> = (0..n)
            .map(|i| project_mu(self.mu[i] - eta_mu * h_bar[i], cfg.mu_max))
            .collect();
        let d_mu: Vec<f64> = new_mu.iter().zip(&self.mu).map(|(a, b)| a - b).collect();
        self.mu = new_mu;
        self.bank.inject_mu(w_m, &d_mu)?;
        self.bank.advance_weights(w_next)?;
        self.bank.refresh_mu_hat(w_next)?;
        self.mu_tilde = self.mu_tilde.max(1.1 * self.bank.max_abs_mu_hat());

        // Primal phase.
        let primal = self.run_batches(cfg.k_theta, THETA_BATCH_OFFSET, &|st| {
            let t2 = draw_capped(1.0 - gamma, cap_split, &mut st.horizons)?;
            let t3 = draw_capped(1.0 - root, cap_tail, &mut st.horizons)?;
            let mut traj = self.executed_rollout(t2.value + t3.value, st)?;
            traj.split = Some(t2.value);
            let g = (0..n)
                .map(|i| {
                    let view = agent_view(&traj, i, cfg.kappa, cfg.kappa_p, env)?;
                    let q = estimate_truncated_q(&view, &self.bank.hat_mu[i], n, gamma)?;
                    estimate_policy_grad(&view, q, &self.bank.hat_theta[i], &self.policy, self.model, gamma)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((g, t2.capped || t3.capped))
        })?;
        let g_bound = policy_grad_bound(self.policy.grad_bound(), n, r_f, r_g, self.mu_tilde, gamma);
        for (g, capped) in primal.values.iter().zip(&primal.capped) {
            let over = g
                .iter()
                .any(|gi| gi.iter().map(|x| x * x).sum::<f64>().sqrt() > g_bound * (1.0 + 1e-12));
            if !*capped && over {
                violations += 1;
            }
        }
        let per_agent: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let rows: Vec<Vec<f64>> = primal.values.iter().map(|b| b[i].clone()).collect();
                batch_average_vec(&rows)
            })
            .collect::<Result<_>>()?;
        if per_agent.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite policy gradient estimate at iteration {}", self.m)));
        }
        let new_theta: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let stepped: Vec<f64> = self.theta[i]
                    .iter()
                    .zip(&per_agent[i])
                    .map(|(t, g)| t + eta_theta * g)
                    .collect();
                project_theta(&stepped, cfg.theta_lo, cfg.theta_hi)
            })
            .collect();
        let d_theta: Vec<Vec<f64>> = new_theta
            .iter()
            .zip(&self.theta)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect();
        self.theta = new_theta;
        self.bank.inject_theta(w_m, &d_theta)?;
        self.bank.refresh_theta_hat(w_next)?;
        self.check_means()?;

        let norm = |v: &mut dyn Iterator<Item = &f64>| v.map(|x| x * x).sum::<f64>().sqrt();
        let record = IterationRecord {
            m: self.m,
            theta: theta_m,
            mu: mu_m,
            h_bar_norm: norm(&mut h_bar.iter()),
            h_bar,
            g_bar_norm: norm(&mut per_agent.iter().flatten()),
            mu_consensus_err: self.bank.mu_consensus_error(&self.mu),
            theta_consensus_err: self.bank.theta_consensus_error(&self.theta),
            mu_hat_max: self.bank.max_abs_mu_hat(),
            f_est,
            g_est,
            eta_theta,
            eta_mu,
            cap_events: dual.caps() + primal.caps(),
            bound_violations: violations,
        };
        self.m += 1;
        Ok(record)
    }
}

/// Runs `config.iterations` iterations. Warns, without aborting, when the
/// learning schedule is not uniformly strongly connected.
pub fn run_dspd(config: &DspdConfig, model: &dyn CmarlModel, schedule: &TimeVaryingSchedule) -> Result<DspdRun> {
    let mut warnings = Vec::new();
    if !schedule.is_uniformly_strongly_connected(schedule.window()) {
        warnings.push(format!(
            "learning schedule is not strongly connected over windows of {} rounds",
            schedule.window()
        ));
    }
    let mut driver = Dspd::new(config.clone(), model, schedule)?;
    let mut records = Vec::with_capacity(config.iterations);
    let mut failure = None;
    for _ in 0..config.iterations {
        match driver.step() {
            Ok(r) => records.push(r),
            Err(Error::Numerical(msg)) => {
                failure = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(DspdRun {
        records,
        theta: driver.theta,
        mu: driver.mu,
        bank: driver.bank,
        warnings,
        failure,
    })
}
