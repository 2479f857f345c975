//! Agent communication graph: hop distances and kappa-neighborhoods.

use std::collections::{HashSet, VecDeque};

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("edge ({0}, {1}) out of range for {2} agents")]
    EdgeOutOfRange(usize, usize, usize),
    #[error("self-loop on agent {0}")]
    SelfLoop(usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("graph generator `{kind}` needs at least {min} agents, got {got}")]
    GeneratorTooSmall { kind: String, min: usize, got: usize },
}

/// Undirected unit-weight graph over agents `0..n` with precomputed
/// all-pairs shortest-path hop counts.
///
/// Disconnected pairs hold the sentinel distance `n + 1`, which exceeds any
/// realizable hop count; use [`AgentGraph::connected`] before treating a
/// distance as finite.
#[derive(Clone, Debug)]
pub struct AgentGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    dist: Vec<usize>,
}

impl AgentGraph {
    pub fn build(n: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        assert!(n > 0, "need at least one agent");
        let mut seen = HashSet::new();
        let mut adj = vec![Vec::new(); n];
        let mut normalized = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(GraphError::EdgeOutOfRange(a, b, n));
            }
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                return Err(GraphError::DuplicateEdge(key.0, key.1));
            }
            adj[a].push(b);
            adj[b].push(a);
            normalized.push(key);
        }
        normalized.sort_unstable();

        let sentinel = n + 1;
        let mut dist = vec![sentinel; n * n];
        let mut queue = VecDeque::new();
        for src in 0..n {
            dist[src * n + src] = 0;
            queue.clear();
            queue.push_back(src);
            while let Some(u) = queue.pop_front() {
                let du = dist[src * n + u];
                for &v in &adj[u] {
                    if dist[src * n + v] == sentinel {
                        dist[src * n + v] = du + 1;
                        queue.push_back(v);
                    }
                }
            }
        }
        Ok(Self { n, edges: normalized, dist })
    }

    pub fn line(n: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect();
        Self::build(n, &edges)
    }

    pub fn ring(n: usize) -> Result<Self, GraphError> {
        if n < 3 {
            return Err(GraphError::GeneratorTooSmall { kind: "ring".into(), min: 3, got: n });
        }
        let mut edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
        edges.push((n - 1, 0));
        Self::build(n, &edges)
    }

    /// `side x side` four-neighbor grid; agent `(r, c)` has index `r * side + c`.
    pub fn grid(side: usize) -> Result<Self, GraphError> {
        if side == 0 {
            return Err(GraphError::GeneratorTooSmall { kind: "grid".into(), min: 1, got: 0 });
        }
        let mut edges = Vec::new();
        for r in 0..side {
            for c in 0..side {
                let idx = r * side + c;
                if c + 1 < side {
                    edges.push((idx, idx + 1));
                }
                if r + 1 < side {
                    edges.push((idx, idx + side));
                }
            }
        }
        Self::build(side * side, &edges)
    }

    pub fn complete(n: usize) -> Result<Self, GraphError> {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                edges.push((i, j));
            }
        }
        Self::build(n, &edges)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Sentinel value stored for unreachable pairs.
    pub fn unreachable(&self) -> usize {
        self.n + 1
    }

    pub fn dist(&self, i: usize, j: usize) -> usize {
        self.dist[i * self.n + j]
    }

    pub fn connected(&self, i: usize, j: usize) -> bool {
        self.dist(i, j) <= self.n
    }

    /// Largest hop distance; `None` when some pair is unreachable.
    pub fn diameter(&self) -> Option<usize> {
        let mut max = 0;
        for i in 0..self.n {
            for j in 0..self.n {
                if !self.connected(i, j) {
                    return None;
                }
                max = max.max(self.dist(i, j));
            }
        }
        Some(max)
    }

    /// Largest finite hop distance (0 for a single agent).
    pub fn max_finite_dist(&self) -> usize {
        let mut max = 0;
        for i in 0..self.n {
            for j in 0..self.n {
                if self.connected(i, j) {
                    max = max.max(self.dist(i, j));
                }
            }
        }
        max
    }

    pub fn neighborhood(&self, kappa: usize) -> NeighborhoodIndex {
        let mut members = Vec::with_capacity(self.n);
        let mut complement = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let mut inside = Vec::new();
            let mut outside = Vec::new();
            for j in 0..self.n {
                if self.connected(i, j) && self.dist(i, j) <= kappa {
                    inside.push(j);
                } else {
                    outside.push(j);
                }
            }
            members.push(inside);
            complement.push(outside);
        }
        NeighborhoodIndex { kappa, members, complement }
    }
}

/// For each agent, the sorted list of agents within hop distance `kappa`
/// and its complement.
#[derive(Clone, Debug)]
pub struct NeighborhoodIndex {
    kappa: usize,
    members: Vec<Vec<usize>>,
    complement: Vec<Vec<usize>>,
}

impl NeighborhoodIndex {
    pub fn kappa(&self) -> usize {
        self.kappa
    }

    pub fn members(&self, i: usize) -> &[usize] {
        &self.members[i]
    }

    pub fn complement(&self, i: usize) -> &[usize] {
        &self.complement[i]
    }

    pub fn n(&self) -> usize {
        self.members.len()
    }
}
