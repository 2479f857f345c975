//! Outer training loop: per-iteration sampling, shadow-reward computation,
//! truncated-Q estimation, truncated policy gradient, ascent step, and
//! metrics.
//!
//! Two estimator pipelines share the loop. `Td` runs the sampled algorithm
//! verbatim: a batch of trajectories feeds the occupancy and gradient
//! estimators and one shared trajectory drives all agents' TD updates.
//! `Exact` replaces every estimator with its oracle counterpart (exact
//! occupancy, exact shadow reward, exact truncated Q, enumerated
//! expectation), which gives the deterministic reference trajectory that the
//! convergence checks are measured against.

use std::collections::BTreeMap;
use std::time::Instant;

use thiserror::Error;

use crate::estimation::{
    self, Anchor, EstimationError, GradientEstimate, QEstimatorSpec, TdSchedule,
};
use crate::mdp::FactoredMDP;
use crate::oracle::{self, OracleError};
use crate::policy::{LocalizedPolicy, PolicyCheckpoint};
use crate::rng;
use crate::utility::{self, LocalUtility, UtilityError};

const DOMAIN_BATCH: u64 = 0xb47c;
const DOMAIN_TD: u64 = 0x7d7d;
/// Estimator mass-identity breaches above this are logged as violations.
const MASS_VIOLATION_TOL: f64 = 1e-10;
/// Slack factor on the `M_f / (1 - gamma)` bound for TD tables.
const Q_BOUND_SLACK: f64 = 1.1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Validation(String),
    #[error("non-finite gradient for agent {agent} at iteration {iter}")]
    NonFiniteGradient { iter: usize, agent: usize, snapshot: Box<DiagnosticSnapshot> },
    #[error("step size {eta} violates the smoothness guard 1/(4 L) = {limit}")]
    EtaGuard { eta: f64, limit: f64 },
    #[error("backtracking could not find a step size satisfying the ascent inequality")]
    BacktrackFailed,
    #[error("metrics are missing oracle columns; run with instrumentation enabled")]
    MissingOracleColumns,
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Utility(#[from] UtilityError),
}

/// State captured when a run aborts.
#[derive(Debug)]
pub struct DiagnosticSnapshot {
    pub policy: PolicyCheckpoint,
    pub metrics: Vec<IterationMetrics>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EtaSchedule {
    Fixed(f64),
    /// Halve from `start` until the exact-ascent inequality
    /// `F(theta') - F(theta) >= eta/4 * ||grad||^2` holds for `probe_steps`
    /// consecutive steps from the initial point.
    Backtrack { start: f64, probe_steps: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QEstimatorKind {
    Td,
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Instrumentation {
    /// Instrument when the instance fits under the oracle cap.
    Auto,
    On,
    Off,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub horizon: usize,
    pub td_horizon: usize,
    pub kappa: usize,
    pub eta: EtaSchedule,
    pub q_estimator: QEstimatorKind,
    pub seed: u64,
    pub td_schedule: TdSchedule,
    /// Checkpoint cadence in iterations; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    /// Optional smoothness constant; when set, enforces `eta <= 1/(4 L)`.
    pub smoothness_bound: Option<f64>,
    pub instrument: Instrumentation,
    pub max_global_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            batch_size: 256,
            horizon: 20,
            td_horizon: 10_000,
            kappa: 0,
            eta: EtaSchedule::Backtrack { start: 8.0, probe_steps: 5 },
            q_estimator: QEstimatorKind::Exact,
            seed: 0,
            td_schedule: TdSchedule::default(),
            checkpoint_every: 100,
            smoothness_bound: None,
            instrument: Instrumentation::Auto,
            max_global_pairs: oracle::DEFAULT_MAX_GLOBAL_PAIRS,
        }
    }
}

/// One row of the metrics log. Wall time is kept out of the on-disk log so
/// repeated runs are bitwise identical; it lands in the summary instead.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationMetrics {
    pub t: usize,
    pub eta: f64,
    pub f_exact: Option<f64>,
    pub grad_norm_sq_exact: Option<f64>,
    pub grad_norm_sq_est: f64,
    /// `sum_i ||grad_i F - g_i||^2` against the oracle gradient.
    pub grad_err_sq: Option<f64>,
    /// Worst estimator mass-identity residual this iteration.
    pub occ_mass_err: f64,
    /// Smallest per-agent fraction of Q-table cells hit by TD updates.
    pub td_coverage: f64,
    /// Per-agent `sup |Qtilde_i - Qhat_i|` against the exact truncation.
    pub q_sup_delta: Option<Vec<f64>>,
    pub wall_ms: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub policy: LocalizedPolicy,
    pub metrics: Vec<IterationMetrics>,
    pub final_f_exact: Option<f64>,
    pub final_grad_norm_sq_exact: Option<f64>,
    pub eta_used: f64,
    pub checkpoints: Vec<(usize, PolicyCheckpoint)>,
    pub violations: Vec<String>,
}

pub struct StationarityReport {
    /// `sum_t eta_t ||grad F(theta_t)||^2 / sum_t eta_t`.
    pub lhs: f64,
    /// `4 (F_end - F_0) / sum_t eta_t + 3 * max_t Delta_t`.
    pub rhs: f64,
    pub delta_max: f64,
    pub eta_sum: f64,
    pub f_start: f64,
    pub f_end: f64,
}

/// Weighted average stationarity of a logged prefix, and the matching upper
/// bound computed from the logged objective gain and the worst per-iteration
/// gradient error.
pub fn evaluate_stationarity(
    metrics: &[IterationMetrics],
    f_end: f64,
) -> Result<StationarityReport, TrainError> {
    if metrics.is_empty() {
        return Err(TrainError::Validation("empty metrics".into()));
    }
    let mut eta_sum = 0.0;
    let mut weighted = 0.0;
    let mut delta_max: f64 = 0.0;
    for row in metrics {
        let gns = row.grad_norm_sq_exact.ok_or(TrainError::MissingOracleColumns)?;
        let delta = row.grad_err_sq.ok_or(TrainError::MissingOracleColumns)?;
        eta_sum += row.eta;
        weighted += row.eta * gns;
        delta_max = delta_max.max(delta);
    }
    let f_start = metrics[0].f_exact.ok_or(TrainError::MissingOracleColumns)?;
    let lhs = weighted / eta_sum;
    let rhs = 4.0 * (f_end - f_start) / eta_sum + 3.0 * delta_max;
    Ok(StationarityReport { lhs, rhs, delta_max, eta_sum, f_start, f_end })
}

fn validate(
    mdp: &FactoredMDP,
    policy: &LocalizedPolicy,
    utilities: &[LocalUtility],
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let n = mdp.n_agents();
    if policy.n_agents() != n {
        return Err(TrainError::Validation(format!(
            "policy has {} agents, instance has {n}",
            policy.n_agents()
        )));
    }
    if policy.state_sizes() != mdp.state_sizes() || policy.action_sizes() != mdp.action_sizes() {
        return Err(TrainError::Validation("policy and instance sizes differ".into()));
    }
    if utilities.len() != n {
        return Err(TrainError::Validation(format!(
            "{} utilities for {n} agents",
            utilities.len()
        )));
    }
    if policy.kappa() != cfg.kappa {
        return Err(TrainError::Validation(format!(
            "policy radius {} differs from configured kappa {}",
            policy.kappa(),
            cfg.kappa
        )));
    }
    if cfg.q_estimator == QEstimatorKind::Td && (cfg.batch_size == 0 || cfg.horizon == 0) {
        return Err(TrainError::Validation("sampled mode needs batch_size and horizon >= 1".into()));
    }
    Ok(())
}

fn objective_from_setup(
    mdp: &FactoredMDP,
    setup: &oracle::ShadowSetup,
    utilities: &[LocalUtility],
) -> Result<f64, UtilityError> {
    let mut total = 0.0;
    for (i, u) in utilities.iter().enumerate() {
        total += u.value(&setup.occupancy.locals[i], mdp.gamma())?;
    }
    Ok(total / mdp.n_agents() as f64)
}

fn backtrack_eta(
    mdp: &FactoredMDP,
    policy0: &LocalizedPolicy,
    utilities: &[LocalUtility],
    cfg: &TrainConfig,
    start: f64,
    probe_steps: usize,
) -> Result<f64, TrainError> {
    let cap = cfg.max_global_pairs;
    let mut eta = start;
    'trial: loop {
        let mut policy = policy0.clone();
        let mut setup = oracle::exact_shadow_setup(mdp, &policy, utilities, cap)?;
        let mut f = objective_from_setup(mdp, &setup, utilities)?;
        for _ in 0..probe_steps {
            let grad = oracle::gradient_from_setup(mdp, &policy, &setup)?;
            let gns = grad.norm_sq();
            if gns < 1e-16 {
                // Already stationary at the probe point; any step is safe.
                return Ok(eta);
            }
            for i in 0..mdp.n_agents() {
                policy.add_scaled(i, &grad.tables[i], eta);
            }
            setup = oracle::exact_shadow_setup(mdp, &policy, utilities, cap)?;
            let f_next = objective_from_setup(mdp, &setup, utilities)?;
            if f_next - f < 0.25 * eta * gns {
                eta *= 0.5;
                if eta < 1e-9 {
                    return Err(TrainError::BacktrackFailed);
                }
                continue 'trial;
            }
            f = f_next;
        }
        return Ok(eta);
    }
}

/// Run the training loop. Deterministic given the config (including its
/// seed); the returned metrics are in iteration order.
pub fn train(
    mdp: &FactoredMDP,
    policy0: &LocalizedPolicy,
    utilities: &[LocalUtility],
    cfg: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    validate(mdp, policy0, utilities, cfg)?;
    let n = mdp.n_agents();
    let gamma = mdp.gamma();
    let cap = cfg.max_global_pairs;
    let oracle_fits = mdp.num_pairs() <= cap;
    let instrument = match cfg.instrument {
        Instrumentation::Auto => oracle_fits,
        Instrumentation::On => {
            if !oracle_fits {
                return Err(TrainError::Validation(format!(
                    "oracle instrumentation requested but the instance has {} pairs (cap {cap})",
                    mdp.num_pairs()
                )));
            }
            true
        }
        Instrumentation::Off => false,
    };
    if cfg.q_estimator == QEstimatorKind::Exact && !oracle_fits {
        return Err(TrainError::Validation(format!(
            "exact estimator requested but the instance has {} pairs (cap {cap})",
            mdp.num_pairs()
        )));
    }

    let eta = match cfg.eta {
        EtaSchedule::Fixed(e) => e,
        EtaSchedule::Backtrack { start, probe_steps } => {
            if !oracle_fits {
                return Err(TrainError::Validation(
                    "backtracking step-size probe needs the exact oracle; set a fixed eta".into(),
                ));
            }
            backtrack_eta(mdp, policy0, utilities, cfg, start, probe_steps)?
        }
    };
    if let Some(l_hat) = cfg.smoothness_bound {
        let limit = 1.0 / (4.0 * l_hat);
        if eta > limit {
            return Err(TrainError::EtaGuard { eta, limit });
        }
    }

    let anchor = Anchor::zeros(n);
    let m_f = utility::team_grad_bound(utilities, gamma);
    let q_bound = Q_BOUND_SLACK * m_f / (1.0 - gamma);
    let mut policy = policy0.clone();
    let mut metrics: Vec<IterationMetrics> = Vec::with_capacity(cfg.iterations);
    let mut checkpoints = Vec::new();
    let mut violations = Vec::new();

    for t in 0..cfg.iterations {
        let started = Instant::now();
        let mut occ_mass_err: f64 = 0.0;
        let mut td_coverage: f64 = 1.0;
        let mut q_sup_delta = None;
        let mut f_exact = None;
        let mut grad_norm_sq_exact = None;
        let mut grad_err_sq = None;

        let gradient: GradientEstimate = match cfg.q_estimator {
            QEstimatorKind::Exact => {
                let setup = oracle::exact_shadow_setup(mdp, &policy, utilities, cap)?;
                occ_mass_err = (setup.occupancy.total_mass - 1.0 / (1.0 - gamma)).abs();
                let grad = oracle::truncated_gradient_from_setup(
                    mdp, &policy, &setup, cfg.kappa, &anchor,
                )?;
                if instrument {
                    f_exact = Some(objective_from_setup(mdp, &setup, utilities)?);
                    let exact = oracle::gradient_from_setup(mdp, &policy, &setup)?;
                    grad_norm_sq_exact = Some(exact.norm_sq());
                    grad_err_sq = Some(exact.diff_norm_sq(&grad));
                    q_sup_delta = Some(vec![0.0; n]);
                }
                grad
            }
            QEstimatorKind::Td => {
                let batch_seed = rng::fold_seed(cfg.seed, &[DOMAIN_BATCH, t as u64]);
                let batch = mdp.sample_batch(&policy, cfg.batch_size, cfg.horizon, batch_seed);
                let expected_mass = (1.0 - gamma.powi(cfg.horizon as i32)) / (1.0 - gamma);
                let mut rewards = Vec::with_capacity(n);
                for i in 0..n {
                    let lambda = estimation::estimate_local_occupancy(&batch, mdp, i)?;
                    let mass: f64 = lambda.sum();
                    occ_mass_err = occ_mass_err.max((mass - expected_mass).abs());
                    rewards.push(utilities[i].shadow_reward(&lambda, gamma)?);
                }
                if occ_mass_err > MASS_VIOLATION_TOL {
                    violations.push(format!(
                        "iteration {t}: occupancy mass residual {occ_mass_err:e}"
                    ));
                }
                let mut td_rng = rng::substream(cfg.seed, &[DOMAIN_TD, t as u64]);
                let spec = QEstimatorSpec::Td {
                    horizon: cfg.td_horizon,
                    schedule: cfg.td_schedule,
                };
                let qout = estimation::estimate_q_tables(
                    &spec, mdp, &policy, &rewards, cfg.kappa, &anchor, &mut td_rng,
                )?;
                for (i, table) in qout.tables.iter().enumerate() {
                    td_coverage = td_coverage.min(qout.diagnostics[i].coverage());
                    let sup = table.sup_norm();
                    if sup > q_bound {
                        violations.push(format!(
                            "iteration {t}: TD table {i} sup {sup:.3e} exceeds bound {q_bound:.3e}"
                        ));
                    }
                }
                let table_refs: BTreeMap<usize, &estimation::TruncatedQTable> =
                    qout.tables.iter().map(|tb| (tb.agent, tb)).collect();
                let mut grad = GradientEstimate::zeros_like(&policy);
                for i in 0..n {
                    grad.tables[i] = estimation::truncated_gradient(
                        &batch, mdp, &policy, cfg.kappa, &table_refs, i,
                    )?;
                }
                if instrument {
                    let setup = oracle::exact_shadow_setup(mdp, &policy, utilities, cap)?;
                    f_exact = Some(objective_from_setup(mdp, &setup, utilities)?);
                    let exact = oracle::gradient_from_setup(mdp, &policy, &setup)?;
                    grad_norm_sq_exact = Some(exact.norm_sq());
                    grad_err_sq = Some(exact.diff_norm_sq(&grad));
                    let deltas: Vec<f64> = (0..n)
                        .map(|i| {
                            let reference = estimation::exact_truncated_q(
                                mdp, &setup.q[i], i, cfg.kappa, &anchor,
                            );
                            qout.tables[i].sup_delta(&reference)
                        })
                        .collect();
                    q_sup_delta = Some(deltas);
                }
                grad
            }
        };

        if !gradient.is_finite() {
            let agent = (0..n)
                .find(|&i| gradient.tables[i].iter().any(|v| !v.is_finite()))
                .unwrap_or(0);
            return Err(TrainError::NonFiniteGradient {
                iter: t,
                agent,
                snapshot: Box::new(DiagnosticSnapshot {
                    policy: policy.to_checkpoint(),
                    metrics,
                }),
            });
        }
        for i in 0..n {
            policy.add_scaled(i, &gradient.tables[i], eta);
        }

        metrics.push(IterationMetrics {
            t,
            eta,
            f_exact,
            grad_norm_sq_exact,
            grad_norm_sq_est: gradient.norm_sq(),
            grad_err_sq,
            occ_mass_err,
            td_coverage,
            q_sup_delta,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        if cfg.checkpoint_every > 0 && (t + 1) % cfg.checkpoint_every == 0 {
            checkpoints.push((t + 1, policy.to_checkpoint()));
        }
    }

    let (final_f_exact, final_grad_norm_sq_exact) = if instrument {
        let setup = oracle::exact_shadow_setup(mdp, &policy, utilities, cap)?;
        let f = objective_from_setup(mdp, &setup, utilities)?;
        let g = oracle::gradient_from_setup(mdp, &policy, &setup)?;
        (Some(f), Some(g.norm_sq()))
    } else {
        (None, None)
    };

    Ok(TrainResult {
        policy,
        metrics,
        final_f_exact,
        final_grad_norm_sq_exact,
        eta_used: eta,
        checkpoints,
        violations,
    })
}
