//! Coupled softmax policies.
//!
//! Agent `i` acts with
//!
//! ```text
//! π_i(a | s) ∝ exp(α θ_{i,s_i,a} + β/(|N^κp_i| − 1) Σ_{j ∈ N^κp_i, j ≠ i} θ_{j,s_i,a})
//! ```
//!
//! with `α = 0.9`, `β = 0.1`. The neighbor term is zero when the coupling
//! neighborhood is `{i}` alone. Parameters are dense `|S| × |A|` tables stored
//! row-major, so entry `(s, a)` lives at `s * |A| + a`.
//!
//! State views passed to the policy are policy-state indices (see
//! [`CmarlModel::policy_state`]) of the agents in `N^κp_i`, in the sorted
//! order returned by [`CoupledSoftmax::neighborhood`].

use crate::error::{Error, Result};
use crate::graph::DirectedGraph;
use crate::model::{sample_categorical, CmarlModel, JointAction};
use crate::rng::Rng;

pub const SELF_WEIGHT: f64 = 0.9;
pub const NEIGHBOR_WEIGHT: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct CoupledSoftmax {
    n: usize,
    kappa_p: usize,
    nbhd: Vec<Vec<usize>>,
    num_states: usize,
    num_actions: usize,
    alpha: f64,
    beta: f64,
}

impl CoupledSoftmax {
    pub fn new(
        env_graph: &DirectedGraph,
        kappa_p: usize,
        num_states: usize,
        num_actions: usize,
    ) -> Result<Self> {
        if kappa_p < 1 {
            return Err(Error::Config("kappa_p must be at least 1".into()));
        }
        if num_states == 0 || num_actions == 0 {
            return Err(Error::Config("policy tables need states and actions".into()));
        }
        let n = env_graph.num_agents();
        let nbhd = (0..n)
            .map(|i| env_graph.k_hop_neighborhood(i, kappa_p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n,
            kappa_p,
            nbhd,
            num_states,
            num_actions,
            alpha: SELF_WEIGHT,
            beta: NEIGHBOR_WEIGHT,
        })
    }

    /// Coupled agents share one table shape, so the model must be homogeneous.
    pub fn for_model(model: &dyn CmarlModel, kappa_p: usize) -> Result<Self> {
        let n = model.num_agents();
        let (s, a) = (model.num_policy_states(0), model.num_actions(0));
        if (0..n).any(|i| model.num_policy_states(i) != s || model.num_actions(i) != a) {
            return Err(Error::Config(
                "coupled softmax needs equal policy-state and action counts for every agent".into(),
            ));
        }
        Self::new(model.env_graph(), kappa_p, s, a)
    }

    pub fn num_agents(&self) -> usize {
        self.n
    }

    pub fn kappa_p(&self) -> usize {
        self.kappa_p
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Length of every `θ_i`.
    pub fn dim(&self) -> usize {
        self.num_states * self.num_actions
    }

    /// `N^κp_i`, sorted, containing `i`.
    pub fn neighborhood(&self, i: usize) -> &[usize] {
        &self.nbhd[i]
    }

    fn coupled(&self, i: usize, j: usize) -> bool {
        self.nbhd[i].binary_search(&j).is_ok()
    }

    fn neighbor_coeff(&self, i: usize) -> f64 {
        let k = self.nbhd[i].len();
        if k > 1 {
            self.beta / (k - 1) as f64
        } else {
            0.0
        }
    }

    /// Weight of `θ_i` inside `π_j`'s logits.
    fn mixing_weight(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.alpha
        } else if self.coupled(j, i) {
            self.neighbor_coeff(j)
        } else {
            0.0
        }
    }

    /// Upper bound `B` on `‖∇_{θ_j} log π_i‖`. A single row of the score is
    /// `w (e_a − π)`, whose norm is below `√2 w`.
    pub fn grad_bound(&self) -> f64 {
        let w = (0..self.n).map(|i| self.neighbor_coeff(i)).fold(self.alpha, f64::max);
        std::f64::consts::SQRT_2 * w
    }

    /// Extracts the view of `N^κp_i` from a global vector of policy states.
    pub fn view_of(&self, i: usize, policy_states: &[usize]) -> Vec<usize> {
        self.nbhd[i].iter().map(|&j| policy_states[j]).collect()
    }

    fn own_state(&self, i: usize, s_view: &[usize]) -> Result<usize> {
        if s_view.len() != self.nbhd[i].len() {
            return Err(Error::Contract(format!(
                "state view for agent {} has {} entries, neighborhood has {}",
                i + 1,
                s_view.len(),
                self.nbhd[i].len()
            )));
        }
        let pos = self.nbhd[i].binary_search(&i).expect("neighborhood contains self");
        let s = s_view[pos];
        if s >= self.num_states {
            return Err(Error::Contract(format!("policy state {s} out of range")));
        }
        Ok(s)
    }

    fn params<'a>(&self, theta: &'a [Vec<f64>], j: usize) -> Result<&'a [f64]> {
        match theta.get(j) {
            Some(t) if t.len() == self.dim() => Ok(t),
            _ => Err(Error::Contract(format!("missing parameters for agent {}", j + 1))),
        }
    }

    /// Mixed logits of agent `i`. `theta` is indexed by agent; only entries
    /// in `N^κp_i` are read.
    pub fn logits(&self, i: usize, s_view: &[usize], theta: &[Vec<f64>]) -> Result<Vec<f64>> {
        let s = self.own_state(i, s_view)?;
        let row = s * self.num_actions..(s + 1) * self.num_actions;
        let mut out: Vec<f64> = self.params(theta, i)?[row.clone()]
            .iter()
            .map(|&x| self.alpha * x)
            .collect();
        let c = self.neighbor_coeff(i);
        for &j in &self.nbhd[i] {
            if j == i {
                continue;
            }
            for (o, &x) in out.iter_mut().zip(&self.params(theta, j)?[row.clone()]) {
                *o += c * x;
            }
        }
        Ok(out)
    }

    pub fn action_probabilities(
        &self,
        i: usize,
        s_view: &[usize],
        theta: &[Vec<f64>],
    ) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(i, s_view, theta)?))
    }

    /// `∇_{θ_wrt} log π_of(a_of | ·)`. `s_view` is the view of `N^κp_of`.
    pub fn grad_log_policy(
        &self,
        wrt: usize,
        of: usize,
        s_view: &[usize],
        a_of: usize,
        theta: &[Vec<f64>],
    ) -> Result<Vec<f64>> {
        if wrt >= self.n || of >= self.n {
            return Err(Error::AgentIndex {
                index: wrt.max(of),
                n: self.n,
            });
        }
        if !self.coupled(wrt, of) {
            return Err(Error::Contract(format!(
                "agent {} is outside the coupling range of agent {}",
                of + 1,
                wrt + 1
            )));
        }
        self.grad_log_policy_unchecked(wrt, of, s_view, a_of, theta)
    }

    /// Like [`grad_log_policy`](Self::grad_log_policy) without the coupling
    /// range check. Returns zeros when `θ_wrt` does not enter `π_of`.
    pub fn grad_log_policy_unchecked(
        &self,
        wrt: usize,
        of: usize,
        s_view: &[usize],
        a_of: usize,
        theta: &[Vec<f64>],
    ) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.add_grad_log_policy(wrt, of, s_view, a_of, theta, 1.0, &mut out)?;
        Ok(out)
    }

    /// `out += scale · ∇_{θ_wrt} log π_of(a_of | ·)`, no range check.
    #[allow(clippy::too_many_arguments)]
    pub fn add_grad_log_policy(
        &self,
        wrt: usize,
        of: usize,
        s_view: &[usize],
        a_of: usize,
        theta: &[Vec<f64>],
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        if a_of >= self.num_actions {
            return Err(Error::Contract(format!("action {a_of} out of range")));
        }
        let w = self.mixing_weight(wrt, of);
        if w == 0.0 {
            return Ok(());
        }
        let probs = self.action_probabilities(of, s_view, theta)?;
        let s = self.own_state(of, s_view)?;
        let base = s * self.num_actions;
        for (a, p) in probs.iter().enumerate() {
            let ind = if a == a_of { 1.0 } else { 0.0 };
            out[base + a] += scale * w * (ind - p);
        }
        Ok(())
    }

    pub fn sample_action(
        &self,
        i: usize,
        s_view: &[usize],
        theta: &[Vec<f64>],
        rng: &mut Rng,
    ) -> Result<usize> {
        Ok(sample_categorical(&self.action_probabilities(i, s_view, theta)?, rng))
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Policy-state index of every agent in a global state.
pub fn policy_states(model: &dyn CmarlModel, s: &[usize]) -> Vec<usize> {
    s.iter()
        .enumerate()
        .map(|(i, &si)| model.policy_state(i, si))
        .collect()
}

/// Each agent samples with its own estimate row `theta_rows[i]` (indexed by
/// agent), independently of the others.
pub fn sample_executed_joint_action(
    policy: &CoupledSoftmax,
    model: &dyn CmarlModel,
    s: &[usize],
    theta_rows: &[Vec<Vec<f64>>],
    rng: &mut Rng,
) -> Result<JointAction> {
    let ps = policy_states(model, s);
    (0..policy.num_agents())
        .map(|i| policy.sample_action(i, &policy.view_of(i, &ps), &theta_rows[i], rng))
        .collect()
}

/// Joint action probability `∏_i π_i(a_i | ·)` with a single shared
/// parameter set.
pub fn joint_action_probability(
    policy: &CoupledSoftmax,
    model: &dyn CmarlModel,
    s: &[usize],
    a: &[usize],
    theta: &[Vec<f64>],
) -> Result<f64> {
    let ps = policy_states(model, s);
    let mut p = 1.0;
    for i in 0..policy.num_agents() {
        p *= policy.action_probabilities(i, &policy.view_of(i, &ps), theta)?[a[i]];
    }
    Ok(p)
}
