//! Directed communication graphs.
//!
//! An edge `(j, i)` means agent `i` receives information from agent `j`.
//! Graph distance from `j` to `i` is the length of the shortest directed path
//! `j -> ... -> i`, so the κ-hop neighborhood of `i` is everything that can
//! reach `i` in at most κ hops, `i` included.
//!
//! Agents are indexed from zero in the API. The adjacency-list text format
//! ([`DirectedGraph::parse_edge_list`]) uses one-based indices so that config
//! files read like the usual `1 <-> 2 <-> 3 <-> 4` notation.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectedGraph {
    n: usize,
    /// `in_nbrs[i]`: sorted senders `j` with an edge `j -> i`.
    in_nbrs: Vec<Vec<usize>>,
    /// `out_nbrs[j]`: sorted receivers `i` with an edge `j -> i`.
    out_nbrs: Vec<Vec<usize>>,
}

impl DirectedGraph {
    /// Builds a graph from `(from, to)` pairs. Duplicate edges are merged.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (from, to) in edges {
            check_agent(from, n)?;
            check_agent(to, n)?;
            set.insert((from, to));
        }
        let mut in_nbrs = vec![Vec::new(); n];
        let mut out_nbrs = vec![Vec::new(); n];
        for (from, to) in set {
            in_nbrs[to].push(from);
            out_nbrs[from].push(to);
        }
        for v in in_nbrs.iter_mut().chain(out_nbrs.iter_mut()) {
            v.sort_unstable();
        }
        Ok(Self {
            n,
            in_nbrs,
            out_nbrs,
        })
    }

    /// `0 <-> 1 <-> ... <-> n-1`, stored with explicit edges in both directions.
    pub fn bidirectional_chain(n: usize) -> Self {
        let edges = (1..n).flat_map(|i| [(i - 1, i), (i, i - 1)]);
        Self::new(n, edges).expect("chain indices are in range")
    }

    /// All ordered pairs, self-loops included.
    pub fn complete(n: usize) -> Self {
        let edges = (0..n).flat_map(|i| (0..n).map(move |j| (i, j)));
        Self::new(n, edges).expect("complete graph indices are in range")
    }

    /// Directed ring `0 -> 1 -> ... -> n-1 -> 0`.
    pub fn ring(n: usize) -> Self {
        Self::new(n, (0..n).map(|i| (i, (i + 1) % n))).expect("ring indices are in range")
    }

    /// Parses an adjacency block with one edge `"j i"` per line, one-based,
    /// meaning `i` receives from `j`. Blank lines and `#` comments are skipped.
    pub fn parse_edge_list(n: usize, text: &str) -> Result<Self> {
        let mut edges = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let parsed: Vec<usize> = parts.iter().filter_map(|p| p.parse().ok()).collect();
            if parts.len() != 2 || parsed.len() != 2 {
                return Err(Error::Config(format!(
                    "edge list line {}: expected two agent ids \"j i\", got {raw:?}",
                    lineno + 1
                )));
            }
            let (j, i) = (parsed[0], parsed[1]);
            if j == 0 || i == 0 || j > n || i > n {
                return Err(Error::Config(format!(
                    "edge list line {}: agent ids must be in 1..={n}",
                    lineno + 1
                )));
            }
            edges.push((j - 1, i - 1));
        }
        Self::new(n, edges)
    }

    /// Renders the edges in the one-based `"j i"` format.
    pub fn to_edge_list(&self) -> String {
        self.edges()
            .map(|(j, i)| format!("{} {}\n", j + 1, i + 1))
            .collect()
    }

    /// Returns a copy with `i -> i` present for every agent.
    pub fn with_self_loops(&self) -> Self {
        let edges = self.edges().chain((0..self.n).map(|i| (i, i)));
        Self::new(self.n, edges).expect("indices already validated")
    }

    pub fn num_agents(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.out_nbrs
            .iter()
            .enumerate()
            .flat_map(|(j, outs)| outs.iter().map(move |&i| (j, i)))
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        from < self.n && self.out_nbrs[from].binary_search(&to).is_ok()
    }

    pub fn in_neighbors(&self, i: usize) -> &[usize] {
        &self.in_nbrs[i]
    }

    pub fn out_neighbors(&self, j: usize) -> &[usize] {
        &self.out_nbrs[j]
    }

    /// κ-hop neighborhood `N^κ_i`, sorted, always containing `i`.
    pub fn k_hop_neighborhood(&self, i: usize, kappa: usize) -> Result<Vec<usize>> {
        check_agent(i, self.n)?;
        let mut dist = vec![usize::MAX; self.n];
        dist[i] = 0;
        let mut queue = VecDeque::from([i]);
        while let Some(v) = queue.pop_front() {
            if dist[v] == kappa {
                continue;
            }
            for &u in &self.in_nbrs[v] {
                if dist[u] == usize::MAX {
                    dist[u] = dist[v] + 1;
                    queue.push_back(u);
                }
            }
        }
        Ok((0..self.n).filter(|&v| dist[v] != usize::MAX).collect())
    }

    /// `(N^κ_{i,-j}, N^κ_{-i})`: the neighborhood without `j`, and every
    /// agent outside the neighborhood.
    pub fn exclusion_sets(
        &self,
        i: usize,
        kappa: usize,
        j: usize,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        check_agent(j, self.n)?;
        let nbhd = self.k_hop_neighborhood(i, kappa)?;
        let without_j = nbhd.iter().copied().filter(|&v| v != j).collect();
        let outside = (0..self.n).filter(|v| nbhd.binary_search(v).is_err()).collect();
        Ok((without_j, outside))
    }

    /// Largest finite shortest-path distance between any ordered pair.
    pub fn diameter(&self) -> usize {
        (0..self.n)
            .map(|i| {
                let mut k = 0;
                let mut last = 1;
                loop {
                    let size = self.k_hop_neighborhood(i, k + 1).map(|v| v.len()).unwrap_or(0);
                    if size == last {
                        break k;
                    }
                    last = size;
                    k += 1;
                }
            })
            .max()
            .unwrap_or(0)
    }

    pub fn is_strongly_connected(&self) -> bool {
        if self.n == 0 {
            return true;
        }
        let reach = |adj: &Vec<Vec<usize>>| {
            let mut seen = vec![false; self.n];
            seen[0] = true;
            let mut stack = vec![0];
            while let Some(v) = stack.pop() {
                for &u in &adj[v] {
                    if !seen[u] {
                        seen[u] = true;
                        stack.push(u);
                    }
                }
            }
            seen.into_iter().all(|s| s)
        };
        reach(&self.out_nbrs) && reach(&self.in_nbrs)
    }

    /// Union of edge sets over graphs with the same agent count.
    pub fn union<'a>(graphs: impl IntoIterator<Item = &'a DirectedGraph>) -> Result<Self> {
        let mut n = None;
        let mut edges = Vec::new();
        for g in graphs {
            match n {
                None => n = Some(g.n),
                Some(m) if m != g.n => {
                    return Err(Error::Config("graphs differ in agent count".into()))
                }
                _ => {}
            }
            edges.extend(g.edges());
        }
        Self::new(n.unwrap_or(0), edges)
    }
}

fn check_agent(i: usize, n: usize) -> Result<()> {
    if i < n {
        Ok(())
    } else {
        Err(Error::AgentIndex { index: i, n })
    }
}

/// Column-stochastic mixing matrix `w_ij = 1/|N^out_j|` for `i ∈ N^out_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    n: usize,
    /// Row-major.
    entries: Vec<f64>,
    /// `senders[i]`: the `l` with `w_il > 0`, sorted.
    senders: Vec<Vec<usize>>,
}

impl WeightMatrix {
    pub fn from_graph(g: &DirectedGraph) -> Result<Self> {
        let n = g.num_agents();
        let mut entries = vec![0.0; n * n];
        for j in 0..n {
            let outs = g.out_neighbors(j);
            if outs.is_empty() {
                return Err(Error::Config(format!(
                    "agent {} has an empty out-neighborhood; learning graphs need self-loops",
                    j + 1
                )));
            }
            let w = 1.0 / outs.len() as f64;
            for &i in outs {
                entries[i * n + j] = w;
            }
        }
        let senders = (0..n).map(|i| g.in_neighbors(i).to_vec()).collect();
        Ok(Self {
            n,
            entries,
            senders,
        })
    }

    pub fn identity(n: usize) -> Self {
        let g = DirectedGraph::new(n, (0..n).map(|i| (i, i))).expect("in range");
        Self::from_graph(&g).expect("self-loops present")
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    /// Agents `l` with `w_il > 0`.
    pub fn senders(&self, i: usize) -> &[usize] {
        &self.senders[i]
    }

    pub fn column_sum(&self, j: usize) -> f64 {
        (0..self.n).map(|i| self.get(i, j)).sum()
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.senders[i].iter().map(|&l| self.get(i, l) * v[l]).sum())
            .collect()
    }
}

pub fn weight_matrix(g: &DirectedGraph) -> Result<WeightMatrix> {
    WeightMatrix::from_graph(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `G_m = graphs[(m - 1) mod len]`.
    Cyclic,
    /// `G_m = graphs[m - 1]`; indexing past the end is an error.
    Explicit,
}

/// A sequence of learning graphs `G_1, G_2, ...` with a connectivity window.
///
/// Every stored graph carries a self-loop on each agent.
#[derive(Debug, Clone)]
pub struct TimeVaryingSchedule {
    graphs: Vec<DirectedGraph>,
    weights: Vec<WeightMatrix>,
    kind: ScheduleKind,
    window: usize,
}

impl TimeVaryingSchedule {
    pub fn new(graphs: Vec<DirectedGraph>, kind: ScheduleKind, window: usize) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::Config("learning schedule needs at least one graph".into()));
        }
        if window == 0 {
            return Err(Error::Config("connectivity window D must be at least 1".into()));
        }
        let n = graphs[0].num_agents();
        if graphs.iter().any(|g| g.num_agents() != n) {
            return Err(Error::Config("learning graphs differ in agent count".into()));
        }
        let graphs: Vec<_> = graphs.iter().map(DirectedGraph::with_self_loops).collect();
        let weights = graphs
            .iter()
            .map(WeightMatrix::from_graph)
            .collect::<Result<_>>()?;
        Ok(Self {
            graphs,
            weights,
            kind,
            window,
        })
    }

    pub fn cyclic(graphs: Vec<DirectedGraph>, window: usize) -> Result<Self> {
        Self::new(graphs, ScheduleKind::Cyclic, window)
    }

    /// A single graph used at every iteration.
    pub fn fixed(graph: DirectedGraph) -> Result<Self> {
        Self::new(vec![graph], ScheduleKind::Cyclic, 1)
    }

    pub fn num_agents(&self) -> usize {
        self.graphs[0].num_agents()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn graphs(&self) -> &[DirectedGraph] {
        &self.graphs
    }

    fn index(&self, m: usize) -> Result<usize> {
        if m == 0 {
            return Err(Error::Contract("learning graphs are indexed from m = 1".into()));
        }
        match self.kind {
            ScheduleKind::Cyclic => Ok((m - 1) % self.graphs.len()),
            ScheduleKind::Explicit if m <= self.graphs.len() => Ok(m - 1),
            ScheduleKind::Explicit => Err(Error::Config(format!(
                "explicit learning schedule has {} graphs, iteration {m} requested",
                self.graphs.len()
            ))),
        }
    }

    pub fn graph(&self, m: usize) -> Result<&DirectedGraph> {
        Ok(&self.graphs[self.index(m)?])
    }

    pub fn weights(&self, m: usize) -> Result<&WeightMatrix> {
        Ok(&self.weights[self.index(m)?])
    }

    /// Checks every window `{kD+1, ..., (k+1)D}`. Cyclic schedules are checked
    /// over one full period of windows, explicit ones over complete windows.
    pub fn is_uniformly_strongly_connected(&self, window: usize) -> bool {
        if window == 0 {
            return false;
        }
        let len = self.graphs.len();
        let windows = match self.kind {
            ScheduleKind::Cyclic => lcm(len, window) / window,
            ScheduleKind::Explicit => (len / window).max(1),
        };
        (0..windows).all(|k| {
            let members: Vec<&DirectedGraph> = (k * window + 1..=(k + 1) * window)
                .map(|m| &self.graphs[(m - 1) % len])
                .collect();
            DirectedGraph::union(members)
                .map(|u| u.is_strongly_connected())
                .unwrap_or(false)
        })
    }
}

pub fn is_uniformly_strongly_connected(schedule: &TimeVaryingSchedule, window: usize) -> bool {
    schedule.is_uniformly_strongly_connected(window)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain4() -> DirectedGraph {
        DirectedGraph::bidirectional_chain(4)
    }

    #[test]
    fn chain_neighborhoods() {
        let g = chain4();
        assert_eq!(g.k_hop_neighborhood(1, 1).unwrap(), vec![0, 1, 2]);
        assert_eq!(g.k_hop_neighborhood(0, 3).unwrap(), vec![0, 1, 2, 3]);
        for i in 0..4 {
            assert_eq!(g.k_hop_neighborhood(i, 0).unwrap(), vec![i]);
        }
    }

    #[test]
    fn exclusion_sets_on_chain() {
        let g = chain4();
        let (without, outside) = g.exclusion_sets(1, 1, 1).unwrap();
        assert_eq!(without, vec![0, 2]);
        assert_eq!(outside, vec![3]);
        let (_, outside) = g.exclusion_sets(1, 5, 1).unwrap();
        assert!(outside.is_empty());
    }

    #[test]
    fn bad_index_is_an_error() {
        let g = chain4();
        assert!(matches!(
            g.k_hop_neighborhood(4, 1),
            Err(Error::AgentIndex { index: 4, n: 4 })
        ));
        assert!(g.exclusion_sets(0, 1, 9).is_err());
    }

    #[test]
    fn weight_matrix_example() {
        // self-loops, 3 -> 4, 4 -> 1 (one-based)
        let g = DirectedGraph::new(4, [(2, 3), (3, 0)]).unwrap().with_self_loops();
        let w = weight_matrix(&g).unwrap();
        assert_eq!(w.get(3, 2), 0.5);
        assert_eq!(w.get(2, 2), 0.5);
        assert_eq!(w.get(0, 3), 0.5);
        assert_eq!(w.get(3, 3), 0.5);
        assert_eq!(w.get(0, 0), 1.0);
        assert_eq!(w.get(1, 1), 1.0);
        let nonzero = (0..4)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .filter(|&(i, j)| w.get(i, j) != 0.0)
            .count();
        assert_eq!(nonzero, 6);
    }

    #[test]
    fn weight_matrix_identity_and_complete() {
        let id = weight_matrix(&DirectedGraph::new(3, [(0, 0), (1, 1), (2, 2)]).unwrap()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(id.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
        let full = weight_matrix(&DirectedGraph::complete(3)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((full.get(i, j) - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn weight_matrix_rejects_sink() {
        let g = DirectedGraph::new(2, [(0, 1)]).unwrap();
        assert!(matches!(weight_matrix(&g), Err(Error::Config(_))));
    }

    #[test]
    fn edge_list_round_trip() {
        let g = DirectedGraph::parse_edge_list(4, "1 2\n2 1 # back\n\n3 4\n").unwrap();
        assert!(g.has_edge(0, 1) && g.has_edge(1, 0) && g.has_edge(2, 3));
        let again = DirectedGraph::parse_edge_list(4, &g.to_edge_list()).unwrap();
        assert_eq!(g, again);
        assert!(DirectedGraph::parse_edge_list(4, "1 5").is_err());
        assert!(DirectedGraph::parse_edge_list(4, "1").is_err());
    }

    #[test]
    fn uniform_strong_connectivity() {
        let a = DirectedGraph::parse_edge_list(4, "1 2\n2 3").unwrap();
        let b = DirectedGraph::parse_edge_list(4, "3 4\n4 1").unwrap();
        let s = TimeVaryingSchedule::cyclic(vec![a.clone(), b], 2).unwrap();
        assert!(s.is_uniformly_strongly_connected(2));
        assert!(!s.is_uniformly_strongly_connected(1));

        let loops = DirectedGraph::new(4, []).unwrap();
        let s = TimeVaryingSchedule::cyclic(vec![loops.clone(), loops], 2).unwrap();
        for d in 1..5 {
            assert!(!s.is_uniformly_strongly_connected(d));
        }

        let ring = TimeVaryingSchedule::fixed(DirectedGraph::ring(5)).unwrap();
        assert!(ring.is_uniformly_strongly_connected(1));
    }

    #[test]
    fn schedule_adds_self_loops_and_indexes_from_one() {
        let a = DirectedGraph::parse_edge_list(3, "1 2").unwrap();
        let s = TimeVaryingSchedule::cyclic(vec![a], 1).unwrap();
        for i in 0..3 {
            assert!(s.graph(1).unwrap().has_edge(i, i));
        }
        assert!(s.graph(0).is_err());
        let e = TimeVaryingSchedule::new(
            vec![DirectedGraph::ring(3)],
            ScheduleKind::Explicit,
            1,
        )
        .unwrap();
        assert!(e.graph(1).is_ok());
        assert!(e.graph(2).is_err());
    }

    #[test]
    fn diameter_of_chain() {
        assert_eq!(chain4().diameter(), 3);
        assert_eq!(DirectedGraph::complete(5).diameter(), 1);
    }
}
