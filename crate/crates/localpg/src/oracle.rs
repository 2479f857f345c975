//! Exact small-instance computations: occupancies, shadow Q-functions, exact
//! and truncated policy gradients, influence matrices, and decay
//! certificates.
//!
//! Everything here enumerates the global state-action space and uses dense
//! direct linear solves, guarded by a configurable size cap. The outputs are
//! the reference values against which the sampled estimators and every
//! truncation bound are checked.
//!
//! The occupancy and Q solves exploit the product structure
//! `lambda(s, a) = lambda_S(s) * pi(a|s)` and `Q = r + gamma * P V`, so the
//! factorized system has dimension `|S|` rather than `|S| * |A|`; one round
//! of iterative refinement brings residuals to machine precision.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use thiserror::Error;

use crate::estimation::{exact_truncated_q, Anchor, GradientEstimate, TruncatedQTable};
use crate::mdp::FactoredMDP;
use crate::policy::LocalizedPolicy;
use crate::utility::{self, LocalUtility, ShadowReward, UtilityError};

/// Default solver cap on `|S| * |A|`.
pub const DEFAULT_MAX_GLOBAL_PAIRS: usize = 200_000;
/// Default cap on kernel rows enumerated by [`influence_matrix`].
pub const DEFAULT_MAX_INFLUENCE_ROWS: usize = 1_000_000;

const DENSE_DYNAMICS_BUDGET: usize = 1 << 24;
const MASS_TOL: f64 = 1e-10;
const BELLMAN_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("instance has {pairs} global state-action pairs, exceeding max_global_pairs = {cap}")]
    SizeCapExceeded { pairs: usize, cap: usize },
    #[error("instance has {rows} kernel rows, exceeding the influence enumeration cap = {cap}")]
    InfluenceCapExceeded { rows: usize, cap: usize },
    #[error("linear solve failed: the factored system is singular")]
    SolveFailed,
    #[error("occupancy mass {mass} deviates from {expected} by {err}")]
    MassIdentity { mass: f64, expected: f64, err: f64 },
    #[error("Bellman residual {0} exceeds tolerance")]
    BellmanResidual(f64),
    #[error(transparent)]
    Utility(Box<UtilityError>),
}

impl From<UtilityError> for OracleError {
    fn from(e: UtilityError) -> Self {
        OracleError::Utility(Box::new(e))
    }
}

/// Exact discounted occupancy: the global table over `|S| * |A|` flat pairs
/// and the per-agent local marginals.
#[derive(Clone, Debug)]
pub struct OccupancyMeasure {
    pub gamma: f64,
    /// `lambda(s, a)` at flat pair `s * |A| + a`.
    pub global: Vec<f64>,
    pub locals: Vec<Array2<f64>>,
    pub total_mass: f64,
}

/// Entrywise sup total-variation sensitivity of each agent's kernel to each
/// other agent's state-action coordinates.
#[derive(Clone, Debug)]
pub struct InfluenceMatrix {
    pub values: Array2<f64>,
    dist: Vec<usize>,
    n: usize,
    unreachable: usize,
}

impl InfluenceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    fn dist(&self, i: usize, j: usize) -> usize {
        self.dist[i * self.n + j]
    }
}

/// Outcome of checking the weighted row-sum condition at one decay exponent.
#[derive(Clone, Debug)]
pub struct DecayCertificate {
    pub beta: f64,
    /// `max_i sum_j e^(beta d(i,j)) M_ij`.
    pub rho: f64,
    /// Decay constant `2 gamma rho M_f / (1 - gamma rho)`; infinite when the
    /// certificate does not hold.
    pub c0: f64,
    /// Decay base `e^(-beta)`.
    pub phi0: f64,
    /// Whether `rho < 1 / gamma`.
    pub holds: bool,
    pub gamma: f64,
    pub grad_bound: f64,
}

impl DecayCertificate {
    /// Certified bound on the truncated-Q error at radius `kappa`.
    pub fn q_bound(&self, kappa: usize) -> f64 {
        self.c0 * self.phi0.powi(kappa as i32)
    }

    /// Certified bound on the truncated-gradient error at radius `kappa`.
    pub fn gradient_bound(&self, kappa: usize, m_psi: f64) -> f64 {
        self.q_bound(kappa) * m_psi / (1.0 - self.gamma)
    }
}

/// Beta grid used by [`best_certificate`]: 0.25, 0.5, ..., 3.0.
pub fn default_beta_grid() -> Vec<f64> {
    (1..=12).map(|k| 0.25 * k as f64).collect()
}

fn check_cap(mdp: &FactoredMDP, cap: usize) -> Result<(), OracleError> {
    let pairs = mdp.num_pairs();
    if pairs > cap {
        return Err(OracleError::SizeCapExceeded { pairs, cap });
    }
    Ok(())
}

/// Per-pair next-state rows, cached densely when they fit in memory.
enum Dynamics {
    Dense(Vec<f64>),
    Lazy,
}

impl Dynamics {
    fn build(mdp: &FactoredMDP) -> Self {
        let pairs = mdp.num_pairs();
        let ns = mdp.num_states();
        if pairs.saturating_mul(ns) <= DENSE_DYNAMICS_BUDGET {
            let mut rows = vec![0.0; pairs * ns];
            for pair in 0..pairs {
                mdp.next_state_distribution(pair, &mut rows[pair * ns..(pair + 1) * ns]);
            }
            Dynamics::Dense(rows)
        } else {
            Dynamics::Lazy
        }
    }

    fn row<'a>(&'a self, mdp: &FactoredMDP, pair: usize, buf: &'a mut [f64]) -> &'a [f64] {
        match self {
            Dynamics::Dense(rows) => {
                let ns = mdp.num_states();
                &rows[pair * ns..(pair + 1) * ns]
            }
            Dynamics::Lazy => {
                mdp.next_state_distribution(pair, buf);
                buf
            }
        }
    }
}

/// Shared enumeration scaffolding for one `(mdp, policy)` pair.
struct Precomputed {
    n: usize,
    ns: usize,
    na: usize,
    /// Decoded state tuples, row-major `[s * n + agent]`.
    s_tuples: Vec<usize>,
    /// Decoded action tuples, row-major `[a * n + agent]`.
    a_tuples: Vec<usize>,
    /// Policy table row per `[agent * ns + s]`.
    rows: Vec<usize>,
    /// Per-agent softmax tables.
    probs: Vec<Array2<f64>>,
    /// Joint policy probability per flat pair.
    pi: Vec<f64>,
    dynamics: Dynamics,
}

impl Precomputed {
    fn build(mdp: &FactoredMDP, policy: &LocalizedPolicy) -> Self {
        let n = mdp.n_agents();
        let ns = mdp.num_states();
        let na = mdp.num_actions();
        let mut s_tuples = vec![0usize; ns * n];
        for s in 0..ns {
            mdp.state_space().decode_into(s, &mut s_tuples[s * n..(s + 1) * n]);
        }
        let mut a_tuples = vec![0usize; na * n];
        for a in 0..na {
            mdp.action_space().decode_into(a, &mut a_tuples[a * n..(a + 1) * n]);
        }
        let mut rows = vec![0usize; n * ns];
        for s in 0..ns {
            let tuple = &s_tuples[s * n..(s + 1) * n];
            for i in 0..n {
                rows[i * ns + s] = policy.state_row(i, tuple);
            }
        }
        let probs = policy.prob_tables();
        let mut pi = vec![0.0; ns * na];
        for s in 0..ns {
            for a in 0..na {
                let mut p = 1.0;
                for i in 0..n {
                    p *= probs[i][(rows[i * ns + s], a_tuples[a * n + i])];
                }
                pi[s * na + a] = p;
            }
        }
        let dynamics = Dynamics::build(mdp);
        Self { n, ns, na, s_tuples, a_tuples, rows, probs, pi, dynamics }
    }

    fn s_tuple(&self, s: usize) -> &[usize] {
        &self.s_tuples[s * self.n..(s + 1) * self.n]
    }

    fn a_tuple(&self, a: usize) -> &[usize] {
        &self.a_tuples[a * self.n..(a + 1) * self.n]
    }

    /// Row-major `|S| x |S|` state transition matrix under the policy.
    fn state_transition(&self, mdp: &FactoredMDP) -> Vec<f64> {
        let (ns, na) = (self.ns, self.na);
        let mut p_s = vec![0.0; ns * ns];
        let mut buf = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                let pair = s * na + a;
                let w = self.pi[pair];
                if w == 0.0 {
                    continue;
                }
                let row = self.dynamics.row(mdp, pair, &mut buf);
                let out = &mut p_s[s * ns..(s + 1) * ns];
                for (o, &p) in out.iter_mut().zip(row.iter()) {
                    *o += w * p;
                }
            }
        }
        p_s
    }
}

/// LU solve with one round of iterative refinement.
fn solve_refined(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, OracleError> {
    let lu = a.clone().lu();
    let mut x = lu.solve(b).ok_or(OracleError::SolveFailed)?;
    for _ in 0..2 {
        let resid = b - a * &x;
        let corr = lu.solve(&resid).ok_or(OracleError::SolveFailed)?;
        x += corr;
    }
    Ok(x)
}

fn occupancy_with(
    mdp: &FactoredMDP,
    pre: &Precomputed,
) -> Result<OccupancyMeasure, OracleError> {
    let (ns, na) = (pre.ns, pre.na);
    let gamma = mdp.gamma();
    let p_s = pre.state_transition(mdp);
    // (I - gamma P_S^T) lambda_S = xi
    let a = DMatrix::from_fn(ns, ns, |r, c| {
        let idt = if r == c { 1.0 } else { 0.0 };
        idt - gamma * p_s[c * ns + r]
    });
    let b = DVector::from_fn(ns, |r, _| mdp.xi()[r]);
    let lam_s = solve_refined(&a, &b)?;

    let mut global = vec![0.0; ns * na];
    for s in 0..ns {
        for aa in 0..na {
            global[s * na + aa] = lam_s[s] * pre.pi[s * na + aa];
        }
    }
    let total_mass: f64 = global.iter().sum();
    let expected = 1.0 / (1.0 - gamma);
    let err = (total_mass - expected).abs();
    if err > MASS_TOL {
        return Err(OracleError::MassIdentity { mass: total_mass, expected, err });
    }
    let locals = marginalize(mdp, pre, &global);
    Ok(OccupancyMeasure { gamma, global, locals, total_mass })
}

fn marginalize(mdp: &FactoredMDP, pre: &Precomputed, global: &[f64]) -> Vec<Array2<f64>> {
    let mut locals: Vec<Array2<f64>> = (0..pre.n)
        .map(|i| Array2::zeros((mdp.state_sizes()[i], mdp.action_sizes()[i])))
        .collect();
    for s in 0..pre.ns {
        let s_tuple = pre.s_tuple(s);
        for a in 0..pre.na {
            let v = global[s * pre.na + a];
            if v == 0.0 {
                continue;
            }
            let a_tuple = pre.a_tuple(a);
            for i in 0..pre.n {
                locals[i][(s_tuple[i], a_tuple[i])] += v;
            }
        }
    }
    locals
}

/// Exact discounted occupancy measure of the policy, with local marginals.
pub fn exact_occupancy(
    mdp: &FactoredMDP,
    policy: &LocalizedPolicy,
    max_pairs: usize,
) -> Result<OccupancyMeasure, OracleError> {
    check_cap(mdp, max_pairs)?;
    let pre = Precomputed::build(mdp, policy);
    occupancy_with(mdp, &pre)
}

/// Occupancy truncated at a finite horizon: `sum_{k < H} gamma^k` of the
/// step-k state-action distribution. Total mass `(1 - gamma^H) / (1 - gamma)`.
pub fn exact_occupancy_horizon(
    mdp: &FactoredMDP,
    policy: &LocalizedPolicy,
    horizon: usize,
    max_pairs: usize,
) -> Result<OccupancyMeasure, OracleError> {
    check_cap(mdp, max_pairs)?;
    let pre = Precomputed::build(mdp, policy);
    let (ns, na) = (pre.ns, pre.na);
    let gamma = mdp.gamma();
    let p_s = pre.state_transition(mdp);
    let mut d: Vec<f64> = mdp.xi().to_vec();
    let mut lam_s = vec![0.0; ns];
    let mut w = 1.0;
    for _ in 0..horizon {
        for (acc, &x) in lam_s.iter_mut().zip(d.iter()) {
            *acc += w * x;
        }
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            let row = &p_s[s * ns..(s + 1) * ns];
            let ds = d[s];
            if ds == 0.0 {
                continue;
            }
            for (nx, &p) in next.iter_mut().zip(row.iter()) {
                *nx += ds * p;
            }
        }
        d = next;
        w *= gamma;
    }
    let mut global = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            global[s * na + a] = lam_s[s] * pre.pi[s * na + a];
        }
    }
    let total_mass: f64 = global.iter().sum();
    let locals = marginalize(mdp, &pre, &global);
    Ok(OccupancyMeasure { gamma, global, locals, total_mass })
}

fn q_with(
    mdp: &FactoredMDP,
    pre: &Precomputed,
    reward: &ShadowReward,
    agent: usize,
) -> Result<Vec<f64>, OracleError> {
    let (ns, na) = (pre.ns, pre.na);
    let gamma = mdp.gamma();
    let mut r_pair = vec![0.0; ns * na];
    for s in 0..ns {
        let s_i = pre.s_tuple(s)[agent];
        for a in 0..na {
            let a_i = pre.a_tuple(a)[agent];
            r_pair[s * na + a] = reward.values[(s_i, a_i)];
        }
    }
    let mut r_pi = vec![0.0; ns];
    for s in 0..ns {
        let mut acc = 0.0;
        for a in 0..na {
            acc += pre.pi[s * na + a] * r_pair[s * na + a];
        }
        r_pi[s] = acc;
    }
    let p_s = pre.state_transition(mdp);
    // (I - gamma P_S) V = r_pi
    let a_mat = DMatrix::from_fn(ns, ns, |r, c| {
        let idt = if r == c { 1.0 } else { 0.0 };
        idt - gamma * p_s[r * ns + c]
    });
    let b = DVector::from_fn(ns, |r, _| r_pi[r]);
    let v = solve_refined(&a_mat, &b)?;

    let mut q = vec![0.0; ns * na];
    let mut buf = vec![0.0; ns];
    for pair in 0..ns * na {
        let row = pre.dynamics.row(mdp, pair, &mut buf);
        let mut exp_v = 0.0;
        for (p, vv) in row.iter().zip(v.iter()) {
            exp_v += p * vv;
        }
        q[pair] = r_pair[pair] + gamma * exp_v;
    }

    // Bellman residual of the defining equation, checked on every solve.
    let mut v_from_q = vec![0.0; ns];
    for s in 0..ns {
        let mut acc = 0.0;
        for a in 0..na {
            acc += pre.pi[s * na + a] * q[s * na + a];
        }
        v_from_q[s] = acc;
    }
    let mut resid: f64 = 0.0;
    for pair in 0..ns * na {
        let row = pre.dynamics.row(mdp, pair, &mut buf);
        let mut exp_v = 0.0;
        for (p, vv) in row.iter().zip(v_from_q.iter()) {
            exp_v += p * vv;
        }
        resid = resid.max((q[pair] - r_pair[pair] - gamma * exp_v).abs());
    }
    if resid > BELLMAN_TOL {
        return Err(OracleError::BellmanResidual(resid));
    }
    Ok(q)
}

/// Exact global Q-table of the broadcast local reward `r(s, a) =
/// reward[(s_i, a_i)]` under the policy; flat-indexed by `s * |A| + a`.
pub fn exact_q(
    mdp: &FactoredMDP,
    policy: &LocalizedPolicy,
    reward: &ShadowReward,
    agent: usize,
    max_pairs: usize,
) -> Result<Vec<f64>, OracleError> {
    check_cap(mdp, max_pairs)?;
    let pre = Precomputed::build(mdp, policy);
    q_with(mdp, &pre, reward, agent)
}

/// Exact occupancy, shadow rewards, and per-agent shadow Q-tables in one
/// shared enumeration pass.
pub struct ShadowSetup {
    pub occupancy: OccupancyMeasure,
    pub rewards: Vec<ShadowReward>,
    /// Full shadow Q-table per agent, flat-indexed by pair.
    pub q: Vec<Vec<f64>>,
}

pub fn exact_shadow_setup(
    mdp: &FactoredMDP,
    policy: &LocalizedPolicy,
    utilities: &[LocalUtility],
    max_pairs: usize,
) -> Result<ShadowSetup, OracleError> {
    check_cap(mdp, max_pairs)?;
    let pre = Precomputed::build(mdp, policy);
    let occupancy = occupancy_with(mdp, &pre)?;
    let mut rewards = Vec::with_capacity(pre.n);
    let mut q = Vec::with_capacity(pre.n);
    for (i, u) in utilities.iter().enumerate() {
        let reward = u.shadow_reward(&occupancy.locals[i], mdp.gamma())?;
        q.push(q_with(mdp, &pre, &reward, i)?);
        rewards.push(reward);
    }
    Ok(ShadowSetup { occupancy, rewards, q })
}

fn accumulate_gradient(
    pre: &Precomputed,
    agent: usize,
    coeff: &[f64],
    out: &mut Array2<f64>,
) {
    let (ns, na) = (pre.ns, pre.na);
    for s in 0..ns {
        let row = pre.rows[agent * ns + s];
        let p_row = pre.probs[agent].row(row);
        for a in 0..na {
            let c = coeff[s * na + a];
            if c == 0.0 {
                continue;
            }
            let a_i = pre.a_tuple(a)[agent];
            for b in 0..p_row.len() {
                out[(row, b)] += c * (f64::from(b == a_i) - p_row[b]);
            }
        }
    }
}

/// Exact policy gradient of the global objective: the occupancy-weighted
/// expectation of each agent's score times the average shadow Q-function.
pub fn exact_policy_gradient(
    mdp: &FactoredMDP,
    policy: &LocalizedPolicy,
    utilities: &[LocalUtility],
    max_pairs: usize,
) -> Result<GradientEstimate, OracleError> {
    let setup = exact_shadow_setup(mdp, policy, utilities, max_pairs)?;
    gradient_from_setup(mdp, policy, &setup)
}

pub fn gradient_from_setup(
    mdp: &FactoredMDP,
    policy: &LocalizedPolicy,
    setup: &ShadowSetup,
) -> Result<GradientEstimate, OracleError> {
    let pre = Precomputed::build(mdp, policy);
    let pairs = mdp.num_pairs();
    let n_f = pre.n as f64;
    // Same summation order (ascending j, then divide by n) as the truncated
    // route so the two agree bitwise when kappa covers the whole graph.
    let mut coeff = vec![0.0; pairs];
    for (pair, c) in coeff.iter_mut().enumerate() {
        let mut qsum = 0.0;
        for qj in &setup.q {
            qsum += qj[pair];
        }
        *c = setup.occupancy.global[pair] * (qsum / n_f);
    }
    let mut grad = GradientEstimate::zeros_like(policy);
    for i in 0..pre.n {
        let table = &mut grad.tables[i];
        accumulate_gradient(&pre, i, &coeff, table);
    }
    Ok(grad)
}

/// Exact truncated policy gradient: the same enumeration, but each agent
/// averages only its kappa-neighborhood's anchor-truncated Q-tables.
pub fn exact_truncated_gradient(
    mdp: &FactoredMDP,
    policy: &LocalizedPolicy,
    utilities: &[LocalUtility],
    kappa: usize,
    anchor: &Anchor,
    max_pairs: usize,
) -> Result<GradientEstimate, OracleError> {
    let setup = exact_shadow_setup(mdp, policy, utilities, max_pairs)?;
    truncated_gradient_from_setup(mdp, policy, &setup, kappa, anchor)
}

pub fn truncated_gradient_from_setup(
    mdp: &FactoredMDP,
    policy: &LocalizedPolicy,
    setup: &ShadowSetup,
    kappa: usize,
    anchor: &Anchor,
) -> Result<GradientEstimate, OracleError> {
    let pre = Precomputed::build(mdp, policy);
    let tables: Vec<TruncatedQTable> = (0..pre.n)
        .map(|j| exact_truncated_q(mdp, &setup.q[j], j, kappa, anchor))
        .collect();
    let nbr = mdp.graph().neighborhood(kappa);
    let n_f = pre.n as f64;
    let mut grad = GradientEstimate::zeros_like(policy);
    for i in 0..pre.n {
        let members = nbr.members(i);
        let mut coeff = vec![0.0; pre.ns * pre.na];
        for s in 0..pre.ns {
            let s_tuple = pre.s_tuple(s);
            for a in 0..pre.na {
                let a_tuple = pre.a_tuple(a);
                let mut qsum = 0.0;
                for &j in members {
                    qsum += tables[j].lookup(s_tuple, a_tuple);
                }
                coeff[s * pre.na + a] = setup.occupancy.global[s * pre.na + a] * (qsum / n_f);
            }
        }
        let table = &mut grad.tables[i];
        accumulate_gradient(&pre, i, &coeff, table);
    }
    Ok(grad)
}

/// For each agent and radius, the exact sup of `|Q_i(s,a) - Q_i(s',a')|` over
/// pairs agreeing on the radius-kappa neighborhood. Index: `[agent][kappa]`,
/// kappa from 0 to the largest finite hop distance.
pub fn measure_decay(
    mdp: &FactoredMDP,
    policy: &LocalizedPolicy,
    utilities: &[LocalUtility],
    max_pairs: usize,
) -> Result<Vec<Vec<f64>>, OracleError> {
    let setup = exact_shadow_setup(mdp, policy, utilities, max_pairs)?;
    measure_decay_from_setup(mdp, &setup)
}

pub fn measure_decay_from_setup(
    mdp: &FactoredMDP,
    setup: &ShadowSetup,
) -> Result<Vec<Vec<f64>>, OracleError> {
    let n = mdp.n_agents();
    let ns = mdp.num_states();
    let na = mdp.num_actions();
    let kmax = mdp.graph().max_finite_dist();
    let mut s_buf = vec![0usize; n];
    let mut a_buf = vec![0usize; n];
    let mut out = vec![vec![0.0; kmax + 1]; n];
    for kappa in 0..=kmax {
        let nbr = mdp.graph().neighborhood(kappa);
        for (i, row) in out.iter_mut().enumerate() {
            let st = crate::indexer::SubsetIndexer::new(nbr.members(i), mdp.state_sizes());
            let ac = crate::indexer::SubsetIndexer::new(nbr.members(i), mdp.action_sizes());
            let groups = st.len() * ac.len();
            let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); groups];
            for s in 0..ns {
                mdp.state_space().decode_into(s, &mut s_buf);
                let gs = st.encode_global(&s_buf);
                for a in 0..na {
                    mdp.action_space().decode_into(a, &mut a_buf);
                    let key = gs * ac.len() + ac.encode_global(&a_buf);
                    let v = setup.q[i][s * na + a];
                    let r = &mut ranges[key];
                    r.0 = r.0.min(v);
                    r.1 = r.1.max(v);
                }
            }
            row[kappa] =
                ranges.iter().fold(0.0f64, |m, &(lo, hi)| m.max(hi - lo));
        }
    }
    Ok(out)
}

/// Exact influence matrix by enumeration: entry `(i, j)` is the sup over all
/// contexts of the total-variation shift of agent `i`'s kernel row when agent
/// `j`'s state-action coordinates are substituted.
pub fn influence_matrix(mdp: &FactoredMDP, max_rows: usize) -> Result<InfluenceMatrix, OracleError> {
    let rows = mdp.num_pairs();
    if rows > max_rows {
        return Err(OracleError::InfluenceCapExceeded { rows, cap: max_rows });
    }
    let n = mdp.n_agents();
    let ns = mdp.num_states();
    let na = mdp.num_actions();
    let s_strides = mdp.state_space().strides().to_vec();
    let a_strides = mdp.action_space().strides().to_vec();
    let mut values = Array2::<f64>::zeros((n, n));
    let mut s_buf = vec![0usize; n];
    let mut a_buf = vec![0usize; n];
    for i in 0..n {
        let kernel = mdp.kernel(i);
        for s in 0..ns {
            mdp.state_space().decode_into(s, &mut s_buf);
            for a in 0..na {
                mdp.action_space().decode_into(a, &mut a_buf);
                let pair = s * na + a;
                let base = kernel.row(pair);
                for j in 0..n {
                    let mut worst: f64 = values[(i, j)];
                    for sj in 0..mdp.state_sizes()[j] {
                        let s_alt = (s as isize
                            + (sj as isize - s_buf[j] as isize) * s_strides[j] as isize)
                            as usize;
                        for aj in 0..mdp.action_sizes()[j] {
                            if sj == s_buf[j] && aj == a_buf[j] {
                                continue;
                            }
                            let a_alt = (a as isize
                                + (aj as isize - a_buf[j] as isize) * a_strides[j] as isize)
                                as usize;
                            let alt = kernel.row(s_alt * na + a_alt);
                            let mut l1 = 0.0;
                            for (x, y) in base.iter().zip(alt.iter()) {
                                l1 += (x - y).abs();
                            }
                            worst = worst.max(0.5 * l1);
                        }
                    }
                    values[(i, j)] = worst;
                }
            }
        }
    }
    let graph = mdp.graph();
    let dist = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| graph.dist(i, j))
        .collect();
    Ok(InfluenceMatrix { values, dist, n, unreachable: graph.unreachable() })
}

/// Check the exponentially weighted row-sum condition at one exponent and
/// derive the decay constants. `holds = false` is a valid answer.
pub fn certify_decay(
    m: &InfluenceMatrix,
    beta: f64,
    gamma: f64,
    grad_bound: f64,
) -> DecayCertificate {
    let mut rho: f64 = 0.0;
    for i in 0..m.n {
        let mut row = 0.0;
        for j in 0..m.n {
            let mij = m.values[(i, j)];
            if mij == 0.0 {
                continue;
            }
            let d = m.dist(i, j);
            if d >= m.unreachable {
                if beta == 0.0 {
                    row += mij;
                } else {
                    row = f64::INFINITY;
                    break;
                }
            } else {
                row += (beta * d as f64).exp() * mij;
            }
        }
        rho = rho.max(row);
    }
    let holds = rho < 1.0 / gamma;
    let c0 = if holds { 2.0 * gamma * rho * grad_bound / (1.0 - gamma * rho) } else { f64::INFINITY };
    DecayCertificate { beta, rho, c0, phi0: (-beta).exp(), holds, gamma, grad_bound }
}

/// Scan a beta grid and keep the certificate with the smallest `rho * e^-beta`
/// among those that hold; falls back to the smallest-rho candidate otherwise.
pub fn best_certificate(
    m: &InfluenceMatrix,
    gamma: f64,
    grad_bound: f64,
    grid: &[f64],
) -> DecayCertificate {
    let mut best_holding: Option<DecayCertificate> = None;
    let mut best_any: Option<DecayCertificate> = None;
    for &beta in grid {
        let cert = certify_decay(m, beta, gamma, grad_bound);
        if best_any.as_ref().map(|b| cert.rho < b.rho).unwrap_or(true) {
            best_any = Some(cert.clone());
        }
        if cert.holds {
            let score = cert.rho * cert.phi0;
            if best_holding
                .as_ref()
                .map(|b| score < b.rho * b.phi0)
                .unwrap_or(true)
            {
                best_holding = Some(cert);
            }
        }
    }
    best_holding.or(best_any).expect("beta grid must be nonempty")
}

/// Max over agents and states of the norm of the enumerated expectation
/// `E_{a ~ pi(.|s)}[psi_i(a_i|s) * sum_{j outside N_i} Qhat_j]`, which is
/// identically zero because the outside Q-sum cannot depend on `a_i`.
pub fn zero_expectation_residual(
    mdp: &FactoredMDP,
    policy: &LocalizedPolicy,
    utilities: &[LocalUtility],
    kappa: usize,
    anchor: &Anchor,
    max_pairs: usize,
) -> Result<f64, OracleError> {
    let setup = exact_shadow_setup(mdp, policy, utilities, max_pairs)?;
    let pre = Precomputed::build(mdp, policy);
    let tables: Vec<TruncatedQTable> = (0..pre.n)
        .map(|j| exact_truncated_q(mdp, &setup.q[j], j, kappa, anchor))
        .collect();
    let nbr = mdp.graph().neighborhood(kappa);
    let mut worst: f64 = 0.0;
    for i in 0..pre.n {
        let complement = nbr.complement(i);
        let actions = mdp.action_sizes()[i];
        for s in 0..pre.ns {
            let s_tuple = pre.s_tuple(s);
            let mut coeffs = vec![0.0; actions];
            for a in 0..pre.na {
                let a_tuple = pre.a_tuple(a);
                let mut outside = 0.0;
                for &j in complement {
                    outside += tables[j].lookup(s_tuple, a_tuple);
                }
                coeffs[a_tuple[i]] += pre.pi[s * pre.na + a] * outside;
            }
            let total: f64 = coeffs.iter().sum();
            let row = pre.rows[i * pre.ns + s];
            let p_row = pre.probs[i].row(row);
            let mut norm_sq = 0.0;
            for b in 0..actions {
                let residual = coeffs[b] - total * p_row[b];
                norm_sq += residual * residual;
            }
            worst = worst.max(norm_sq.sqrt());
        }
    }
    Ok(worst)
}

/// Central finite differences of the global objective over every policy
/// coordinate: the independent reference for the exact gradient.
pub fn finite_difference_gradient(
    mdp: &FactoredMDP,
    policy: &LocalizedPolicy,
    utilities: &[LocalUtility],
    h: f64,
    max_pairs: usize,
) -> Result<GradientEstimate, OracleError> {
    let mut probe = policy.clone();
    let mut grad = GradientEstimate::zeros_like(policy);
    for i in 0..policy.n_agents() {
        let (rows, cols) = policy.theta(i).dim();
        for r in 0..rows {
            for c in 0..cols {
                let original = probe.theta(i)[(r, c)];
                probe.theta_mut(i)[(r, c)] = original + h;
                let plus = utility::global_objective(mdp, &probe, utilities, max_pairs)?;
                probe.theta_mut(i)[(r, c)] = original - h;
                let minus = utility::global_objective(mdp, &probe, utilities, max_pairs)?;
                probe.theta_mut(i)[(r, c)] = original;
                grad.tables[i][(r, c)] = (plus - minus) / (2.0 * h);
            }
        }
    }
    Ok(grad)
}
