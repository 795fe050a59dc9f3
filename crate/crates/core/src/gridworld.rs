//! Multi-agent grid world with neighbor-dependent action noise.
//!
//! Each agent moves on a `width × height` grid toward a shared goal. A move is
//! the action vector plus a perturbation `ε`: no perturbation with
//! probability `1 − χ`, each unit step with probability `χ/4`, where
//!
//! ```text
//! χ_i = χ_max − (χ_max − χ_min) · #{j ∈ N^E_i at goal} / |N^E_i|
//! ```
//!
//! Coordinates are clamped to the grid. Objective reward is `10` on the step
//! an agent stands on the goal and `−1 − ‖s_i − s*‖` before that. The
//! constraint reward counts other agents still away from the goal, `−5` each,
//! over either the complement of `N^E_i` or the neighbors of `i` (see
//! [`GReading`]). Both rewards are zero from the step after arrival.
//!
//! Local state `s_i` is a cell index `y * width + x`, plus one extra index
//! `width * height` meaning "reached the goal on an earlier step". That extra
//! state is what lets rewards switch off after arrival while the position
//! stays at the goal; the policy sees it as the goal cell.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DirectedGraph;
use crate::model::{CmarlModel, GlobalState, RewardPair};
use crate::rng::Rng;

/// Up, Down, Left, Right, Stay.
pub const ACTIONS: [(i64, i64); 5] = [(0, 1), (0, -1), (-1, 0), (1, 0), (0, 0)];
pub const ACTION_NAMES: [&str; 5] = ["up", "down", "left", "right", "stay"];
const PERTURBATIONS: [(i64, i64); 5] = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)];

pub const GOAL_REWARD: f64 = 10.0;
pub const CONSTRAINT_PENALTY: f64 = 5.0;

/// Which agents the constraint reward of `i` counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GReading {
    /// `N \ N^E_i`, the agents outside the one-hop neighborhood.
    Complement,
    /// `N^E_i \ {i}`, the one-hop neighbors.
    Neighbors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridWorldSpec {
    pub width: usize,
    pub height: usize,
    pub goal: [usize; 2],
    pub starts: Vec<[usize; 2]>,
    pub chi_max: f64,
    pub chi_min: f64,
    pub gamma: f64,
    pub threshold: f64,
    /// One-based `"j i"` lines; empty means the bidirectional chain.
    pub env_edges: String,
    pub g_reading: GReading,
    /// Whether `N^E_i` in the noise formula counts `i` itself.
    pub chi_self_inclusive: bool,
}

impl Default for GridWorldSpec {
    fn default() -> Self {
        Self {
            width: 5,
            height: 5,
            goal: [4, 0],
            starts: vec![[2, 1], [3, 1], [2, 2], [1, 0]],
            chi_max: 0.1,
            chi_min: 0.02,
            gamma: 0.9,
            threshold: -5.0,
            env_edges: String::new(),
            g_reading: GReading::Complement,
            chi_self_inclusive: true,
        }
    }
}

impl GridWorldSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.width == 0 || self.height == 0 {
            errs.push("gridworld: width and height must be positive".to_string());
        }
        let inside = |p: &[usize; 2]| p[0] < self.width && p[1] < self.height;
        if !inside(&self.goal) {
            errs.push(format!("gridworld.goal {:?} is outside the grid", self.goal));
        }
        if self.starts.is_empty() {
            errs.push("gridworld.starts: need at least one agent".to_string());
        }
        for (k, s) in self.starts.iter().enumerate() {
            if !inside(s) {
                errs.push(format!("gridworld.starts[{k}] {s:?} is outside the grid"));
            }
        }
        if !(0.0 <= self.chi_min && self.chi_min <= self.chi_max && self.chi_max <= 1.0) {
            errs.push("gridworld: need 0 <= chi_min <= chi_max <= 1".to_string());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            errs.push("gridworld.gamma must lie in (0, 1)".to_string());
        }
        errs
    }
}

#[derive(Debug, Clone)]
pub struct GridWorld {
    spec: GridWorldSpec,
    graph: DirectedGraph,
    chi_set: Vec<Vec<usize>>,
    g_set: Vec<Vec<usize>>,
    thresholds: Vec<f64>,
    start: GlobalState,
    goal_cell: usize,
}

impl GridWorld {
    pub fn new(spec: GridWorldSpec) -> Result<Self> {
        let errs = spec.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs.join("; ")));
        }
        let n = spec.starts.len();
        let graph = if spec.env_edges.trim().is_empty() {
            DirectedGraph::bidirectional_chain(n)
        } else {
            DirectedGraph::parse_edge_list(n, &spec.env_edges)?
        };
        let mut chi_set = Vec::with_capacity(n);
        let mut g_set = Vec::with_capacity(n);
        for i in 0..n {
            let nbhd = graph.k_hop_neighborhood(i, 1)?;
            chi_set.push(if spec.chi_self_inclusive {
                nbhd.clone()
            } else {
                nbhd.iter().copied().filter(|&j| j != i).collect()
            });
            g_set.push(match spec.g_reading {
                GReading::Complement => graph.exclusion_sets(i, 1, i)?.1,
                GReading::Neighbors => nbhd.iter().copied().filter(|&j| j != i).collect(),
            });
        }
        let cell = |p: &[usize; 2]| p[1] * spec.width + p[0];
        let start = spec.starts.iter().map(cell).collect();
        let goal_cell = cell(&spec.goal);
        Ok(Self {
            thresholds: vec![spec.threshold; n],
            graph,
            chi_set,
            g_set,
            start,
            goal_cell,
            spec,
        })
    }

    pub fn paper() -> Self {
        Self::new(GridWorldSpec::default()).expect("default grid world is valid")
    }

    pub fn spec(&self) -> &GridWorldSpec {
        &self.spec
    }

    pub fn num_cells(&self) -> usize {
        self.spec.width * self.spec.height
    }

    /// Local state meaning "arrived on an earlier step".
    pub fn absorbed(&self) -> usize {
        self.num_cells()
    }

    pub fn goal_cell(&self) -> usize {
        self.goal_cell
    }

    pub fn cell_of(&self, x: usize, y: usize) -> usize {
        y * self.spec.width + x
    }

    /// `(x, y)` of a local state; the absorbed state maps to the goal.
    pub fn coords(&self, s_i: usize) -> (usize, usize) {
        let c = if s_i == self.absorbed() { self.goal_cell } else { s_i };
        (c % self.spec.width, c / self.spec.width)
    }

    pub fn at_goal(&self, s_i: usize) -> bool {
        s_i == self.goal_cell || s_i == self.absorbed()
    }

    /// Agents counted by `g_i`.
    pub fn constraint_set(&self, i: usize) -> &[usize] {
        &self.g_set[i]
    }

    /// Noise level `χ_i` in global state `s`.
    pub fn chi(&self, i: usize, s: &[usize]) -> f64 {
        let set = &self.chi_set[i];
        if set.is_empty() {
            return self.spec.chi_max;
        }
        let at = set.iter().filter(|&&j| self.at_goal(s[j])).count();
        self.spec.chi_max - (self.spec.chi_max - self.spec.chi_min) * at as f64 / set.len() as f64
    }

    /// Cell reached from `s_i` by action `a` and perturbation `e`, clamped.
    pub fn moved(&self, s_i: usize, a: usize, e: (i64, i64)) -> usize {
        let (x, y) = self.coords(s_i);
        let (dx, dy) = ACTIONS[a];
        let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
        let nx = clamp(x as i64 + dx + e.0, self.spec.width);
        let ny = clamp(y as i64 + dy + e.1, self.spec.height);
        self.cell_of(nx, ny)
    }

    pub fn objective_reward(&self, s_i: usize) -> f64 {
        if s_i == self.absorbed() {
            0.0
        } else if s_i == self.goal_cell {
            GOAL_REWARD
        } else {
            let (x, y) = self.coords(s_i);
            let dx = x as f64 - self.spec.goal[0] as f64;
            let dy = y as f64 - self.spec.goal[1] as f64;
            -1.0 - (dx * dx + dy * dy).sqrt()
        }
    }

    /// Best discounted objective return of one agent moving without noise,
    /// averaged over agents. No policy can beat it in the noiseless grid.
    pub fn deterministic_value_upper_bound(&self) -> f64 {
        let cells = self.num_cells();
        let gamma = self.spec.gamma;
        let mut v = vec![0.0; cells];
        for _ in 0..10_000 {
            let mut delta = 0.0_f64;
            for c in 0..cells {
                let new = if c == self.goal_cell {
                    GOAL_REWARD
                } else {
                    let best = (0..ACTIONS.len())
                        .map(|a| v[self.moved(c, a, (0, 0))])
                        .fold(f64::NEG_INFINITY, f64::max);
                    self.objective_reward(c) + gamma * best
                };
                delta = delta.max((new - v[c]).abs());
                v[c] = new;
            }
            if delta < 1e-13 {
                break;
            }
        }
        self.start.iter().map(|&c| v[c]).sum::<f64>() / self.start.len() as f64
    }
}

impl CmarlModel for GridWorld {
    fn num_agents(&self) -> usize {
        self.start.len()
    }

    fn env_graph(&self) -> &DirectedGraph {
        &self.graph
    }

    fn num_states(&self, _i: usize) -> usize {
        self.num_cells() + 1
    }

    fn num_actions(&self, _i: usize) -> usize {
        ACTIONS.len()
    }

    fn gamma(&self) -> f64 {
        self.spec.gamma
    }

    fn reward_bounds(&self) -> (f64, f64) {
        let widest = self.g_set.iter().map(Vec::len).max().unwrap_or(0);
        let far = ((self.spec.width - 1).pow(2) + (self.spec.height - 1).pow(2)) as f64;
        (
            GOAL_REWARD.max(1.0 + far.sqrt()),
            CONSTRAINT_PENALTY * widest.max(self.num_agents() - 1) as f64,
        )
    }

    fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    fn policy_state(&self, _i: usize, s_i: usize) -> usize {
        if s_i == self.absorbed() {
            self.goal_cell
        } else {
            s_i
        }
    }

    fn num_policy_states(&self, _i: usize) -> usize {
        self.num_cells()
    }

    fn initial_probability(&self, s: &[usize]) -> f64 {
        if s == self.start.as_slice() {
            1.0
        } else {
            0.0
        }
    }

    fn sample_initial(&self, _rng: &mut Rng) -> GlobalState {
        self.start.clone()
    }

    fn local_transition_probs(&self, i: usize, s: &[usize], a_i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_cells() + 1];
        if self.at_goal(s[i]) {
            out[self.absorbed()] = 1.0;
            return out;
        }
        let chi = self.chi(i, s);
        for (k, &e) in PERTURBATIONS.iter().enumerate() {
            let p = if k == 0 { 1.0 - chi } else { chi / 4.0 };
            out[self.moved(s[i], a_i, e)] += p;
        }
        out
    }

    fn rewards(&self, s: &[usize], _a: &[usize]) -> RewardPair {
        let n = self.num_agents();
        let mut r = RewardPair::zeros(n);
        for i in 0..n {
            if s[i] == self.absorbed() {
                continue;
            }
            r.f[i] = self.objective_reward(s[i]);
            let away = self.g_set[i].iter().filter(|&&j| !self.at_goal(s[j])).count();
            r.g[i] = -CONSTRAINT_PENALTY * away as f64;
        }
        r
    }
}
