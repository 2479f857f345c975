//! Factored networked MDP: per-agent transition kernels over the global
//! state-action pair, initial distribution, discount, and trajectory sampling.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::graph::AgentGraph;
use crate::indexer::MixedRadix;
use crate::policy::LocalizedPolicy;
use crate::rng;

const KERNEL_ROW_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("agent count mismatch: graph has {graph}, got {got} size entries")]
    AgentCountMismatch { graph: usize, got: usize },
    #[error("kernel for agent {agent} has shape {rows}x{cols}, expected {want_rows}x{want_cols}")]
    KernelShape { agent: usize, rows: usize, cols: usize, want_rows: usize, want_cols: usize },
    #[error("kernel row {row} of agent {agent} sums to {sum}, not 1")]
    KernelRowSum { agent: usize, row: usize, sum: f64 },
    #[error("initial distribution sums to {0}, not 1")]
    InitialDistributionSum(f64),
    #[error("initial distribution has {got} entries, expected {want}")]
    InitialDistributionLen { got: usize, want: usize },
    #[error("negative entry {value} at position {index}")]
    NegativeProbability { index: usize, value: f64 },
    #[error("discount {0} outside [0, 1)")]
    BadDiscount(f64),
    #[error("interaction strengths must be nonnegative with a positive total per agent")]
    BadInteractionStrength,
}

/// Factored MDP on an agent graph.
///
/// Agent `i`'s kernel is a dense `(|S|*|A|) x |S_i|` table: row `s*|A| + a`
/// holds the distribution of the agent's next local state given the global
/// pair `(s, a)`. The global transition is the product of the per-agent rows.
#[derive(Clone, Debug)]
pub struct FactoredMDP {
    graph: AgentGraph,
    state_sizes: Vec<usize>,
    action_sizes: Vec<usize>,
    state_index: MixedRadix,
    action_index: MixedRadix,
    kernels: Vec<Array2<f64>>,
    xi: Vec<f64>,
    gamma: f64,
}

impl FactoredMDP {
    pub fn new(
        graph: AgentGraph,
        state_sizes: Vec<usize>,
        action_sizes: Vec<usize>,
        kernels: Vec<Array2<f64>>,
        xi: Vec<f64>,
        gamma: f64,
    ) -> Result<Self, MdpError> {
        let n = graph.n();
        if state_sizes.len() != n || action_sizes.len() != n || kernels.len() != n {
            return Err(MdpError::AgentCountMismatch {
                graph: n,
                got: state_sizes.len().min(action_sizes.len()).min(kernels.len()),
            });
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(MdpError::BadDiscount(gamma));
        }
        let state_index = MixedRadix::new(&state_sizes);
        let action_index = MixedRadix::new(&action_sizes);
        let pairs = state_index.len() * action_index.len();
        for (i, kernel) in kernels.iter().enumerate() {
            if kernel.nrows() != pairs || kernel.ncols() != state_sizes[i] {
                return Err(MdpError::KernelShape {
                    agent: i,
                    rows: kernel.nrows(),
                    cols: kernel.ncols(),
                    want_rows: pairs,
                    want_cols: state_sizes[i],
                });
            }
            for (row, r) in kernel.rows().into_iter().enumerate() {
                let mut sum = 0.0;
                for (col, &v) in r.iter().enumerate() {
                    if v < 0.0 {
                        return Err(MdpError::NegativeProbability {
                            index: row * state_sizes[i] + col,
                            value: v,
                        });
                    }
                    sum += v;
                }
                if (sum - 1.0).abs() > KERNEL_ROW_TOL {
                    return Err(MdpError::KernelRowSum { agent: i, row, sum });
                }
            }
        }
        if xi.len() != state_index.len() {
            return Err(MdpError::InitialDistributionLen {
                got: xi.len(),
                want: state_index.len(),
            });
        }
        if let Some((index, &value)) = xi.iter().enumerate().find(|(_, &v)| v < 0.0) {
            return Err(MdpError::NegativeProbability { index, value });
        }
        let xi_sum: f64 = xi.iter().sum();
        if (xi_sum - 1.0).abs() > KERNEL_ROW_TOL {
            return Err(MdpError::InitialDistributionSum(xi_sum));
        }
        Ok(Self { graph, state_sizes, action_sizes, state_index, action_index, kernels, xi, gamma })
    }

    /// Build an instance whose cross-agent influence decays with hop distance.
    ///
    /// Agent `i`'s kernel is the mixture `sum_j w_ij * K_ij(. | s_j, a_j)` of
    /// random stochastic pairwise kernels, with `w_ij` proportional to
    /// `interaction_strength[d(i, j)]` (zero beyond the listed hops). Changing
    /// agent `j`'s coordinates moves agent `i`'s row by at most `w_ij` in
    /// total variation, so the influence matrix inherits the strength decay.
    pub fn make_spatial(
        graph: AgentGraph,
        state_sizes: Vec<usize>,
        action_sizes: Vec<usize>,
        interaction_strength: &[f64],
        seed: u64,
    ) -> Result<Self, MdpError> {
        let n = graph.n();
        if state_sizes.len() != n || action_sizes.len() != n {
            return Err(MdpError::AgentCountMismatch {
                graph: n,
                got: state_sizes.len().min(action_sizes.len()),
            });
        }
        if interaction_strength.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(MdpError::BadInteractionStrength);
        }
        let state_index = MixedRadix::new(&state_sizes);
        let action_index = MixedRadix::new(&action_sizes);
        let pairs = state_index.len() * action_index.len();

        let mut kernels = Vec::with_capacity(n);
        let mut s_buf = vec![0usize; n];
        let mut a_buf = vec![0usize; n];
        for i in 0..n {
            let mut weights = vec![0.0; n];
            for j in 0..n {
                if graph.connected(i, j) {
                    weights[j] =
                        interaction_strength.get(graph.dist(i, j)).copied().unwrap_or(0.0);
                }
            }
            let total: f64 = weights.iter().sum();
            if total <= 0.0 {
                return Err(MdpError::BadInteractionStrength);
            }
            for w in &mut weights {
                *w /= total;
            }

            // Pairwise component kernels: rows over (s_j, a_j), columns over S_i.
            use rand::Rng;
            let mut components: Vec<Option<Array2<f64>>> = vec![None; n];
            for j in 0..n {
                if weights[j] == 0.0 {
                    continue;
                }
                let rows = state_sizes[j] * action_sizes[j];
                let mut table = Array2::zeros((rows, state_sizes[i]));
                let mut stream = rng::substream(seed, &[0x5a71, i as u64, j as u64]);
                for mut row in table.rows_mut() {
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        // Cubing makes rows peaked, so the chain mixes slowly
                        // and kernels depend strongly on their conditioning
                        // coordinates; the decay structure stays visible in
                        // the Q-tables instead of washing out.
                        *v = (0.1 + stream.gen::<f64>()).powi(3);
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
                components[j] = Some(table);
            }

            let mut kernel = Array2::zeros((pairs, state_sizes[i]));
            for s in 0..state_index.len() {
                state_index.decode_into(s, &mut s_buf);
                for a in 0..action_index.len() {
                    action_index.decode_into(a, &mut a_buf);
                    let pair = s * action_index.len() + a;
                    let mut out = kernel.row_mut(pair);
                    for j in 0..n {
                        let Some(component) = &components[j] else { continue };
                        let row = component.row(s_buf[j] * action_sizes[j] + a_buf[j]);
                        for (o, &v) in out.iter_mut().zip(row.iter()) {
                            *o += weights[j] * v;
                        }
                    }
                }
            }
            kernels.push(kernel);
        }

        // Uniform initial distribution and a placeholder discount; callers set
        // gamma explicitly via `set_gamma`.
        let xi = vec![1.0 / state_index.len() as f64; state_index.len()];
        Self::new(graph, state_sizes, action_sizes, kernels, xi, 0.9)
    }

    pub fn set_gamma(&mut self, gamma: f64) -> Result<(), MdpError> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(MdpError::BadDiscount(gamma));
        }
        self.gamma = gamma;
        Ok(())
    }

    pub fn set_initial_distribution(&mut self, xi: Vec<f64>) -> Result<(), MdpError> {
        if xi.len() != self.num_states() {
            return Err(MdpError::InitialDistributionLen { got: xi.len(), want: self.num_states() });
        }
        if let Some((index, &value)) = xi.iter().enumerate().find(|(_, &v)| v < 0.0) {
            return Err(MdpError::NegativeProbability { index, value });
        }
        let sum: f64 = xi.iter().sum();
        if (sum - 1.0).abs() > KERNEL_ROW_TOL {
            return Err(MdpError::InitialDistributionSum(sum));
        }
        self.xi = xi;
        Ok(())
    }

    pub fn graph(&self) -> &AgentGraph {
        &self.graph
    }

    pub fn n_agents(&self) -> usize {
        self.graph.n()
    }

    pub fn state_sizes(&self) -> &[usize] {
        &self.state_sizes
    }

    pub fn action_sizes(&self) -> &[usize] {
        &self.action_sizes
    }

    pub fn state_space(&self) -> &MixedRadix {
        &self.state_index
    }

    pub fn action_space(&self) -> &MixedRadix {
        &self.action_index
    }

    pub fn num_states(&self) -> usize {
        self.state_index.len()
    }

    pub fn num_actions(&self) -> usize {
        self.action_index.len()
    }

    /// Number of global state-action pairs `|S| * |A|`.
    pub fn num_pairs(&self) -> usize {
        self.num_states() * self.num_actions()
    }

    pub fn pair_index(&self, s: usize, a: usize) -> usize {
        s * self.num_actions() + a
    }

    pub fn kernel(&self, agent: usize) -> &Array2<f64> {
        &self.kernels[agent]
    }

    pub fn xi(&self) -> &[f64] {
        &self.xi
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Probability of the global next state under the product transition.
    pub fn transition_prob(&self, s: usize, a: usize, s_next: usize) -> f64 {
        let pair = self.pair_index(s, a);
        let mut next = vec![0usize; self.n_agents()];
        self.state_index.decode_into(s_next, &mut next);
        let mut p = 1.0;
        for (i, &si) in next.iter().enumerate() {
            p *= self.kernels[i][(pair, si)];
        }
        p
    }

    /// Fill `out` (length `|S|`) with the full next-state distribution of the
    /// pair `(s, a)` by expanding the per-agent product progressively.
    pub fn next_state_distribution(&self, pair: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.num_states());
        out[0] = 1.0;
        let mut filled = 1usize;
        for i in 0..self.n_agents() {
            let row = self.kernels[i].row(pair);
            let size = self.state_sizes[i];
            // Expand in place: out[..filled] spreads into out[..filled * size].
            for idx in (0..filled).rev() {
                let base = out[idx];
                for (c, &p) in row.iter().enumerate() {
                    out[idx * size + c] = base * p;
                }
            }
            filled *= size;
        }
        debug_assert_eq!(filled, self.num_states());
    }

    /// Sample the global next state, drawing each agent's local transition
    /// independently in agent order.
    pub fn step(&self, s: usize, a: usize, rng: &mut ChaCha8Rng) -> usize {
        let pair = self.pair_index(s, a);
        let mut coords = vec![0usize; self.n_agents()];
        for i in 0..self.n_agents() {
            let row = self.kernels[i].row(pair);
            coords[i] = rng::sample_weighted(rng, row.as_slice().expect("contiguous row"));
        }
        self.state_index.encode(&coords)
    }

    /// Sample one trajectory of `horizon` steps under `policy`.
    pub fn sample_trajectory(
        &self,
        policy: &LocalizedPolicy,
        prob_tables: &[Array2<f64>],
        horizon: usize,
        rng: &mut ChaCha8Rng,
    ) -> Trajectory {
        let n = self.n_agents();
        let mut steps = Vec::with_capacity(horizon);
        let mut s_buf = vec![0usize; n];
        let mut a_buf = vec![0usize; n];
        let mut state = rng::sample_weighted(rng, &self.xi);
        for _ in 0..horizon {
            self.state_index.decode_into(state, &mut s_buf);
            for i in 0..n {
                let row = policy.state_row(i, &s_buf);
                let probs = prob_tables[i].row(row);
                a_buf[i] = rng::sample_weighted(rng, probs.as_slice().expect("contiguous row"));
            }
            let action = self.action_index.encode(&a_buf);
            steps.push((state, action));
            state = self.step(state, action, rng);
        }
        Trajectory { steps }
    }

    /// Sample `batch` independent trajectories; trajectory `b` uses the
    /// substream `(seed, [b])`, so the result is deterministic regardless of
    /// the parallel schedule.
    pub fn sample_batch(
        &self,
        policy: &LocalizedPolicy,
        batch: usize,
        horizon: usize,
        seed: u64,
    ) -> Vec<Trajectory> {
        assert!(batch >= 1 && horizon >= 1, "batch and horizon must be positive");
        let prob_tables = policy.prob_tables();
        (0..batch)
            .into_par_iter()
            .map(|b| {
                let mut stream = rng::substream(seed, &[b as u64]);
                self.sample_trajectory(policy, &prob_tables, horizon, &mut stream)
            })
            .collect()
    }
}

/// Ordered list of global `(state, action)` pairs, flat-encoded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trajectory {
    pub steps: Vec<(usize, usize)>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn validate(&self, mdp: &FactoredMDP) -> bool {
        self.steps
            .iter()
            .all(|&(s, a)| s < mdp.num_states() && a < mdp.num_actions())
    }
}
