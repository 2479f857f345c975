//! Localized tabular softmax policies and their score functions.
//!
//! Agent `i` holds a logit table `theta[i]` indexed by the joint state of its
//! kappa-neighborhood (members sorted ascending, row-major, last member
//! fastest) and its own action. The global policy is the product of the
//! per-agent softmax rows.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::AgentGraph;
use crate::indexer::SubsetIndexer;
use crate::rng;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("truncation radius {requested} exceeds the policy radius {full}")]
    RadiusExceedsFull { requested: usize, full: usize },
    #[error("checkpoint is inconsistent: {0}")]
    BadCheckpoint(String),
}

#[derive(Clone, Debug)]
pub struct LocalizedPolicy {
    kappa: usize,
    state_sizes: Vec<usize>,
    action_sizes: Vec<usize>,
    members: Vec<Vec<usize>>,
    row_index: Vec<SubsetIndexer>,
    theta: Vec<Array2<f64>>,
}

impl LocalizedPolicy {
    /// Zero logits: uniform action distributions everywhere.
    pub fn zeros(
        graph: &AgentGraph,
        state_sizes: &[usize],
        action_sizes: &[usize],
        kappa: usize,
    ) -> Self {
        let nbr = graph.neighborhood(kappa);
        let n = graph.n();
        let members: Vec<Vec<usize>> = (0..n).map(|i| nbr.members(i).to_vec()).collect();
        let row_index: Vec<SubsetIndexer> =
            members.iter().map(|m| SubsetIndexer::new(m, state_sizes)).collect();
        let theta = (0..n)
            .map(|i| Array2::zeros((row_index[i].len(), action_sizes[i])))
            .collect();
        Self {
            kappa,
            state_sizes: state_sizes.to_vec(),
            action_sizes: action_sizes.to_vec(),
            members,
            row_index,
            theta,
        }
    }

    /// Logits drawn i.i.d. uniform on `[-scale, scale]`.
    pub fn random(
        graph: &AgentGraph,
        state_sizes: &[usize],
        action_sizes: &[usize],
        kappa: usize,
        scale: f64,
        seed: u64,
    ) -> Self {
        use rand::Rng;
        let mut policy = Self::zeros(graph, state_sizes, action_sizes, kappa);
        for (i, table) in policy.theta.iter_mut().enumerate() {
            let mut stream = rng::substream(seed, &[0x8e01, i as u64]);
            for v in table.iter_mut() {
                *v = scale * (2.0 * stream.gen::<f64>() - 1.0);
            }
        }
        policy
    }

    pub fn kappa(&self) -> usize {
        self.kappa
    }

    pub fn n_agents(&self) -> usize {
        self.theta.len()
    }

    pub fn state_sizes(&self) -> &[usize] {
        &self.state_sizes
    }

    pub fn action_sizes(&self) -> &[usize] {
        &self.action_sizes
    }

    pub fn members(&self, i: usize) -> &[usize] {
        &self.members[i]
    }

    pub fn theta(&self, i: usize) -> &Array2<f64> {
        &self.theta[i]
    }

    pub fn theta_mut(&mut self, i: usize) -> &mut Array2<f64> {
        &mut self.theta[i]
    }

    /// Row of agent `i`'s table for a global state tuple.
    pub fn state_row(&self, i: usize, state: &[usize]) -> usize {
        self.row_index[i].encode_global(state)
    }

    /// Softmax of row `row` of agent `i`'s logits, stabilized by
    /// max-subtraction.
    pub fn action_probs_row(&self, i: usize, row: usize) -> Vec<f64> {
        let logits = self.theta[i].row(row);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        probs
    }

    pub fn action_probs(&self, i: usize, state: &[usize]) -> Vec<f64> {
        self.action_probs_row(i, self.state_row(i, state))
    }

    /// Per-agent probability tables (softmax of every row), shaped like theta.
    pub fn prob_tables(&self) -> Vec<Array2<f64>> {
        self.theta
            .iter()
            .enumerate()
            .map(|(i, table)| {
                let mut out = table.clone();
                for row in 0..table.nrows() {
                    let probs = self.action_probs_row(i, row);
                    for (a, &p) in probs.iter().enumerate() {
                        out[(row, a)] = p;
                    }
                }
                out
            })
            .collect()
    }

    /// Nonzero row of the score table: entry `b` is `[b == a_i] - pi_i(b|row)`.
    pub fn score_row(&self, i: usize, row: usize, a_i: usize) -> Vec<f64> {
        let mut probs = self.action_probs_row(i, row);
        for (b, p) in probs.iter_mut().enumerate() {
            *p = f64::from(b == a_i) - *p;
        }
        probs
    }

    /// Full gradient of `log pi_i(a_i | s_nbr)` with respect to `theta[i]`:
    /// zero except on the active state row.
    pub fn score_table(&self, i: usize, state: &[usize], a_i: usize) -> Array2<f64> {
        let row = self.state_row(i, state);
        let mut out = Array2::zeros(self.theta[i].dim());
        for (b, v) in self.score_row(i, row, a_i).into_iter().enumerate() {
            out[(row, b)] = v;
        }
        out
    }

    /// Probability of the global action tuple at the global state tuple.
    pub fn joint_action_prob(&self, state: &[usize], action: &[usize]) -> f64 {
        let mut p = 1.0;
        for i in 0..self.n_agents() {
            p *= self.action_probs(i, state)[action[i]];
        }
        p
    }

    /// Gradient ascent step on agent `i`'s table.
    pub fn add_scaled(&mut self, i: usize, grad: &Array2<f64>, eta: f64) {
        self.theta[i].scaled_add(eta, grad);
    }

    /// Induced truncated policy of a smaller radius: the new logits are read
    /// off at the anchor values of the dropped coordinates, so the truncated
    /// probabilities agree with the full policy whenever the outside
    /// coordinates equal the anchor.
    pub fn truncate(
        &self,
        graph: &AgentGraph,
        kappa: usize,
        anchor_state: &[usize],
    ) -> Result<Self, PolicyError> {
        if kappa > self.kappa {
            return Err(PolicyError::RadiusExceedsFull { requested: kappa, full: self.kappa });
        }
        let mut out = Self::zeros(graph, &self.state_sizes, &self.action_sizes, kappa);
        let n = self.n_agents();
        let mut global = vec![0usize; self.state_sizes.len()];
        for i in 0..n {
            for slot in global.iter_mut() {
                *slot = 0;
            }
            // Coordinates outside the new neighborhood but inside the old one
            // are pinned to the anchor.
            for &j in &self.members[i] {
                global[j] = anchor_state[j];
            }
            for new_row in 0..out.row_index[i].len() {
                out.row_index[i].scatter_into(new_row, &mut global);
                let old_row = self.row_index[i].encode_global(&global);
                for a in 0..self.action_sizes[i] {
                    out.theta[i][(new_row, a)] = self.theta[i][(old_row, a)];
                }
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> PolicyCheckpoint {
        PolicyCheckpoint {
            kappa: self.kappa,
            state_sizes: self.state_sizes.clone(),
            action_sizes: self.action_sizes.clone(),
            agents: self
                .theta
                .iter()
                .enumerate()
                .map(|(i, table)| AgentCheckpoint {
                    agent: i,
                    members: self.members[i].clone(),
                    rows: table.nrows(),
                    actions: table.ncols(),
                    // Row-major: neighborhood state tuple (members ascending,
                    // last member fastest), then local action.
                    values: table.iter().cloned().collect(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &PolicyCheckpoint) -> Result<Self, PolicyError> {
        let n = ck.agents.len();
        if ck.state_sizes.len() != n || ck.action_sizes.len() != n {
            return Err(PolicyError::BadCheckpoint("size lists do not match agent count".into()));
        }
        let mut members = Vec::with_capacity(n);
        let mut row_index = Vec::with_capacity(n);
        let mut theta = Vec::with_capacity(n);
        for (i, agent) in ck.agents.iter().enumerate() {
            if agent.agent != i {
                return Err(PolicyError::BadCheckpoint(format!(
                    "agent entry {i} is labeled {}",
                    agent.agent
                )));
            }
            let idx = SubsetIndexer::new(&agent.members, &ck.state_sizes);
            if idx.len() != agent.rows
                || agent.actions != ck.action_sizes[i]
                || agent.values.len() != agent.rows * agent.actions
            {
                return Err(PolicyError::BadCheckpoint(format!("agent {i} table shape mismatch")));
            }
            let table = Array2::from_shape_vec((agent.rows, agent.actions), agent.values.clone())
                .map_err(|e| PolicyError::BadCheckpoint(e.to_string()))?;
            members.push(agent.members.clone());
            row_index.push(idx);
            theta.push(table);
        }
        Ok(Self {
            kappa: ck.kappa,
            state_sizes: ck.state_sizes.clone(),
            action_sizes: ck.action_sizes.clone(),
            members,
            row_index,
            theta,
        })
    }
}

/// Serialized policy: radius, per-agent neighborhood members, table shapes,
/// and flat logit arrays (state row-major, then action).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub kappa: usize,
    pub state_sizes: Vec<usize>,
    pub action_sizes: Vec<usize>,
    pub agents: Vec<AgentCheckpoint>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub agent: usize,
    pub members: Vec<usize>,
    pub rows: usize,
    pub actions: usize,
    pub values: Vec<f64>,
}
