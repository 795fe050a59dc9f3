//! The environment interface and small table-driven models.
//!
//! Local states and actions are plain indices `0..|S_i|` and `0..|A_i|`.
//! Joint states are encoded mixed-radix with agent 0 most significant, which
//! is also the order used inside table-model kernels.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DirectedGraph;
use crate::rng::Rng;

pub type GlobalState = Vec<usize>;
pub type JointAction = Vec<usize>;

/// Objective and constraint rewards of every agent at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardPair {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

impl RewardPair {
    pub fn zeros(n: usize) -> Self {
        Self {
            f: vec![0.0; n],
            g: vec![0.0; n],
        }
    }
}

/// A constrained multi-agent MDP with factorized local transitions.
///
/// `rewards` takes the global state because some environments (the grid
/// world's constraint reward, for one) count other agents. Table models only
/// read `(s_i, a_i)`.
pub trait CmarlModel: Send + Sync {
    fn num_agents(&self) -> usize;
    fn env_graph(&self) -> &DirectedGraph;
    fn num_states(&self, i: usize) -> usize;
    fn num_actions(&self, i: usize) -> usize;
    fn gamma(&self) -> f64;
    /// `(R_f, R_g)`.
    fn reward_bounds(&self) -> (f64, f64);
    /// Constraint thresholds `c_i`.
    fn thresholds(&self) -> &[f64];

    /// Row of the policy table used in local state `s_i`. Defaults to `s_i`.
    fn policy_state(&self, _i: usize, s_i: usize) -> usize {
        s_i
    }
    fn num_policy_states(&self, i: usize) -> usize {
        self.num_states(i)
    }

    fn initial_probability(&self, s: &[usize]) -> f64;
    fn sample_initial(&self, rng: &mut Rng) -> GlobalState;

    /// `P_i(· | s_{N^E_i}, a_i)` as a vector over `S_i`. Implementations must
    /// only read the entries of `s` inside `N^E_i`.
    fn local_transition_probs(&self, i: usize, s: &[usize], a_i: usize) -> Vec<f64>;

    fn rewards(&self, s: &[usize], a: &[usize]) -> RewardPair;

    fn transition(&self, s: &[usize], a: &[usize], rng: &mut Rng) -> GlobalState {
        (0..self.num_agents())
            .map(|i| sample_categorical(&self.local_transition_probs(i, s, a[i]), rng))
            .collect()
    }
}

/// Inverse-CDF draw. The last index absorbs rounding slack.
pub fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Mixed-radix codec for joint tuples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointSpace {
    radices: Vec<usize>,
    size: usize,
}

impl JointSpace {
    /// Fails with [`Error::Refused`] when the product exceeds `cap`.
    pub fn new(radices: Vec<usize>, cap: usize) -> Result<Self> {
        let mut size: usize = 1;
        for &r in &radices {
            size = size
                .checked_mul(r)
                .filter(|&s| s <= cap)
                .ok_or_else(|| {
                    Error::Refused(format!("joint space {radices:?} exceeds the size cap {cap}"))
                })?;
        }
        Ok(Self { radices, size })
    }

    pub fn states_of(model: &dyn CmarlModel, cap: usize) -> Result<Self> {
        Self::new((0..model.num_agents()).map(|i| model.num_states(i)).collect(), cap)
    }

    pub fn actions_of(model: &dyn CmarlModel, cap: usize) -> Result<Self> {
        Self::new((0..model.num_agents()).map(|i| model.num_actions(i)).collect(), cap)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radices(&self) -> &[usize] {
        &self.radices
    }

    pub fn encode(&self, x: &[usize]) -> usize {
        x.iter().zip(&self.radices).fold(0, |acc, (&v, &r)| acc * r + v)
    }

    pub fn decode(&self, mut code: usize) -> Vec<usize> {
        let mut out = vec![0; self.radices.len()];
        for (slot, &r) in out.iter_mut().zip(&self.radices).rev() {
            *slot = code % r;
            code /= r;
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        (0..self.size).map(|c| self.decode(c))
    }
}

/// Checks exhaustively that agent `i`'s kernel ignores agents outside `N^E_i`.
pub fn verify_factorization(model: &dyn CmarlModel, cap: usize) -> Result<bool> {
    let states = JointSpace::states_of(model, cap)?;
    let g = model.env_graph();
    for i in 0..model.num_agents() {
        let nbhd = g.k_hop_neighborhood(i, 1)?;
        for s in states.iter() {
            for a_i in 0..model.num_actions(i) {
                let base = model.local_transition_probs(i, &s, a_i);
                for s2 in states.iter() {
                    if nbhd.iter().any(|&j| s2[j] != s[j]) {
                        continue;
                    }
                    let other = model.local_transition_probs(i, &s2, a_i);
                    if base.iter().zip(&other).any(|(x, y)| (x - y).abs() > 1e-15) {
                        return Ok(false);
                    }
                }
            }
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialSpec {
    /// `"uniform"` over the joint state space.
    Named(String),
    /// Probabilities over encoded joint states.
    Table(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardBounds {
    pub f: f64,
    pub g: f64,
}

/// JSON form of a [`TableModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableModelSpec {
    #[serde(default)]
    pub name: String,
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    /// One-based `[from, to]` pairs.
    pub env_edges: Vec<[usize; 2]>,
    pub gamma: f64,
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub reward_bounds: Option<RewardBounds>,
    pub initial: InitialSpec,
    /// `kernels[i][config][a_i][s'_i]`, with `config` the mixed-radix code of
    /// `s_{N^E_i}` over the sorted neighborhood.
    pub kernels: Vec<Vec<Vec<Vec<f64>>>>,
    /// `f[i][s_i][a_i]`.
    pub f: Vec<Vec<Vec<f64>>>,
    pub g: Vec<Vec<Vec<f64>>>,
}

/// A fully tabulated model, small enough for exact computation.
#[derive(Debug, Clone)]
pub struct TableModel {
    spec: TableModelSpec,
    graph: DirectedGraph,
    nbhds: Vec<Vec<usize>>,
    initial: Vec<f64>,
    states: JointSpace,
    bounds: (f64, f64),
}

impl TableModel {
    pub fn from_spec(spec: TableModelSpec) -> Result<Self> {
        let n = spec.states.len();
        let bad = |msg: String| Err(Error::Config(format!("table model {:?}: {msg}", spec.name)));
        if n == 0 {
            return bad("needs at least one agent".into());
        }
        if spec.actions.len() != n || spec.thresholds.len() != n {
            return bad("states, actions and thresholds must have one entry per agent".into());
        }
        if spec.states.iter().chain(&spec.actions).any(|&x| x == 0) {
            return bad("state and action counts must be positive".into());
        }
        if !(spec.gamma > 0.0 && spec.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", spec.gamma));
        }
        let edges = spec
            .env_edges
            .iter()
            .map(|&[j, i]| {
                if j == 0 || i == 0 || j > n || i > n {
                    Err(Error::Config(format!("env edge [{j}, {i}] out of range 1..={n}")))
                } else {
                    Ok((j - 1, i - 1))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let graph = DirectedGraph::new(n, edges)?;
        let nbhds = (0..n)
            .map(|i| graph.k_hop_neighborhood(i, 1))
            .collect::<Result<Vec<_>>>()?;
        let states = JointSpace::new(spec.states.clone(), usize::MAX)?;

        if spec.kernels.len() != n || spec.f.len() != n || spec.g.len() != n {
            return bad("kernels, f and g need one table per agent".into());
        }
        for i in 0..n {
            let configs: usize = nbhds[i].iter().map(|&j| spec.states[j]).product();
            let k = &spec.kernels[i];
            if k.len() != configs {
                return bad(format!(
                    "agent {} kernel has {} neighborhood configurations, expected {configs}",
                    i + 1,
                    k.len()
                ));
            }
            for (c, per_action) in k.iter().enumerate() {
                if per_action.len() != spec.actions[i] {
                    return bad(format!("agent {} kernel config {c}: wrong action count", i + 1));
                }
                for (a, row) in per_action.iter().enumerate() {
                    let sum: f64 = row.iter().sum();
                    if row.len() != spec.states[i]
                        || row.iter().any(|&p| !(p >= 0.0))
                        || (sum - 1.0).abs() > 1e-9
                    {
                        return bad(format!(
                            "agent {} kernel config {c} action {a} is not a distribution over {} states",
                            i + 1,
                            spec.states[i]
                        ));
                    }
                }
            }
            for (name, table) in [("f", &spec.f[i]), ("g", &spec.g[i])] {
                if table.len() != spec.states[i]
                    || table.iter().any(|row| row.len() != spec.actions[i])
                {
                    return bad(format!("agent {} {name} table has the wrong shape", i + 1));
                }
            }
        }

        let initial = match &spec.initial {
            InitialSpec::Named(s) if s == "uniform" => {
                vec![1.0 / states.size() as f64; states.size()]
            }
            InitialSpec::Named(s) => return bad(format!("unknown initial distribution {s:?}")),
            InitialSpec::Table(p) => {
                let sum: f64 = p.iter().sum();
                if p.len() != states.size() || p.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                    return bad("initial table is not a distribution over joint states".into());
                }
                p.clone()
            }
        };

        let max_abs = |tables: &Vec<Vec<Vec<f64>>>| {
            tables
                .iter()
                .flatten()
                .flatten()
                .fold(0.0_f64, |m, &x| m.max(x.abs()))
        };
        let (rf, rg) = (max_abs(&spec.f), max_abs(&spec.g));
        let bounds = match &spec.reward_bounds {
            Some(b) if b.f >= rf && b.g >= rg => (b.f, b.g),
            Some(_) => return bad("declared reward bounds are smaller than the tables".into()),
            None => (rf, rg),
        };

        Ok(Self {
            spec,
            graph,
            nbhds,
            initial,
            states,
            bounds,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let spec: TableModelSpec =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("table model: {e}")))?;
        Self::from_spec(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: TableModelSpec = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::from_spec(spec)
    }

    pub fn spec(&self) -> &TableModelSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    /// A copy with a different discount factor.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let mut spec = self.spec.clone();
        spec.gamma = gamma;
        Self::from_spec(spec)
    }

    pub fn with_thresholds(&self, thresholds: Vec<f64>) -> Result<Self> {
        let mut spec = self.spec.clone();
        spec.thresholds = thresholds;
        Self::from_spec(spec)
    }

    fn config_index(&self, i: usize, s: &[usize]) -> usize {
        self.nbhds[i]
            .iter()
            .fold(0, |acc, &j| acc * self.spec.states[j] + s[j])
    }
}

impl CmarlModel for TableModel {
    fn num_agents(&self) -> usize {
        self.spec.states.len()
    }

    fn env_graph(&self) -> &DirectedGraph {
        &self.graph
    }

    fn num_states(&self, i: usize) -> usize {
        self.spec.states[i]
    }

    fn num_actions(&self, i: usize) -> usize {
        self.spec.actions[i]
    }

    fn gamma(&self) -> f64 {
        self.spec.gamma
    }

    fn reward_bounds(&self) -> (f64, f64) {
        self.bounds
    }

    fn thresholds(&self) -> &[f64] {
        &self.spec.thresholds
    }

    fn initial_probability(&self, s: &[usize]) -> f64 {
        self.initial[self.states.encode(s)]
    }

    fn sample_initial(&self, rng: &mut Rng) -> GlobalState {
        self.states.decode(sample_categorical(&self.initial, rng))
    }

    fn local_transition_probs(&self, i: usize, s: &[usize], a_i: usize) -> Vec<f64> {
        self.spec.kernels[i][self.config_index(i, s)][a_i].clone()
    }

    fn rewards(&self, s: &[usize], a: &[usize]) -> RewardPair {
        let n = self.num_agents();
        RewardPair {
            f: (0..n).map(|i| self.spec.f[i][s[i]][a[i]]).collect(),
            g: (0..n).map(|i| self.spec.g[i][s[i]][a[i]]).collect(),
        }
    }
}
