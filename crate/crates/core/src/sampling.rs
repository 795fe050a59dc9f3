//! Geometric horizons, rollouts and locality-filtered views.

use std::io::Write;

use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DirectedGraph;
use crate::model::{CmarlModel, GlobalState, JointAction, RewardPair};
use crate::rng::Rng;

/// Number of failures before the first success, so `P(T ≥ t) = (1 − p)^t`.
pub fn draw_horizon(p: f64, rng: &mut Rng) -> Result<usize> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!("geometric success probability {p} not in (0, 1]")));
    }
    let dist = Geometric::new(p).map_err(|e| Error::Config(format!("geometric({p}): {e}")))?;
    Ok(dist.sample(rng) as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HorizonDraw {
    pub value: usize,
    pub capped: bool,
}

/// `factor · E[T]`, rounded up.
pub fn horizon_cap(p: f64, factor: f64) -> usize {
    (factor * (1.0 - p) / p).ceil() as usize
}

pub fn draw_capped(p: f64, cap: usize, rng: &mut Rng) -> Result<HorizonDraw> {
    let t = draw_horizon(p, rng)?;
    Ok(HorizonDraw {
        value: t.min(cap),
        capped: t > cap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub s: GlobalState,
    pub a: JointAction,
    pub r: RewardPair,
}

/// `{s, a}_{0:T}` with the rewards of every step. Holds `T + 1` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    /// Index of the split point for two-horizon rollouts.
    pub split: Option<usize>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")
    }
}

/// Draws `s_0 ~ ρ` from `trans_rng` and steps `horizon` times. The action
/// sampler gets the policy stream.
pub fn rollout(
    model: &dyn CmarlModel,
    act: &mut dyn FnMut(&[usize], &mut Rng) -> Result<JointAction>,
    horizon: usize,
    trans_rng: &mut Rng,
    policy_rng: &mut Rng,
) -> Result<Trajectory> {
    let mut steps = Vec::with_capacity(horizon + 1);
    let mut s = model.sample_initial(trans_rng);
    for t in 0..=horizon {
        let a = act(&s, policy_rng)?;
        let r = model.rewards(&s, &a);
        let next = if t < horizon {
            Some(model.transition(&s, &a, trans_rng))
        } else {
            None
        };
        steps.push(Step { s, a, r });
        match next {
            Some(n) => s = n,
            None => break,
        }
    }
    Ok(Trajectory { steps, split: None })
}

/// What agent `i` may see of a trajectory: state-actions of `N^{2κp}_i` and
/// rewards of `N^{κ+2κp}_i`. Nothing else is copied in.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentView {
    agent: usize,
    sa_agents: Vec<usize>,
    reward_agents: Vec<usize>,
    states: Vec<Vec<usize>>,
    actions: Vec<Vec<usize>>,
    f: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    split: Option<usize>,
}

pub fn agent_view(
    traj: &Trajectory,
    i: usize,
    kappa: usize,
    kappa_p: usize,
    env_graph: &DirectedGraph,
) -> Result<AgentView> {
    let sa_agents = env_graph.k_hop_neighborhood(i, 2 * kappa_p)?;
    let reward_agents = env_graph.k_hop_neighborhood(i, kappa + 2 * kappa_p)?;
    let pick = |v: &[usize], who: &[usize]| who.iter().map(|&j| v[j]).collect::<Vec<_>>();
    let pickf = |v: &[f64], who: &[usize]| who.iter().map(|&j| v[j]).collect::<Vec<_>>();
    Ok(AgentView {
        agent: i,
        states: traj.steps.iter().map(|st| pick(&st.s, &sa_agents)).collect(),
        actions: traj.steps.iter().map(|st| pick(&st.a, &sa_agents)).collect(),
        f: traj.steps.iter().map(|st| pickf(&st.r.f, &reward_agents)).collect(),
        g: traj.steps.iter().map(|st| pickf(&st.r.g, &reward_agents)).collect(),
        sa_agents,
        reward_agents,
        split: traj.split,
    })
}

impl AgentView {
    pub fn agent(&self) -> usize {
        self.agent
    }

    /// Number of recorded steps, `T + 1`.
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn split(&self) -> Option<usize> {
        self.split
    }

    pub fn sa_agents(&self) -> &[usize] {
        &self.sa_agents
    }

    pub fn reward_agents(&self) -> &[usize] {
        &self.reward_agents
    }

    fn slot(&self, set: &[usize], j: usize, what: &'static str) -> Result<usize> {
        set.binary_search(&j).map_err(|_| Error::Locality {
            agent: self.agent + 1,
            other: j + 1,
            what,
        })
    }

    fn step_check(&self, t: usize) -> Result<()> {
        if t < self.len() {
            Ok(())
        } else {
            Err(Error::Contract(format!("step {t} beyond trajectory of length {}", self.len())))
        }
    }

    pub fn state(&self, t: usize, j: usize) -> Result<usize> {
        let k = self.slot(&self.sa_agents, j, "the state")?;
        self.step_check(t)?;
        Ok(self.states[t][k])
    }

    pub fn action(&self, t: usize, j: usize) -> Result<usize> {
        let k = self.slot(&self.sa_agents, j, "the action")?;
        self.step_check(t)?;
        Ok(self.actions[t][k])
    }

    pub fn f(&self, t: usize, j: usize) -> Result<f64> {
        let k = self.slot(&self.reward_agents, j, "the objective reward")?;
        self.step_check(t)?;
        Ok(self.f[t][k])
    }

    pub fn g(&self, t: usize, j: usize) -> Result<f64> {
        let k = self.slot(&self.reward_agents, j, "the constraint reward")?;
        self.step_check(t)?;
        Ok(self.g[t][k])
    }
}
