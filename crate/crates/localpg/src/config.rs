//! Experiment configuration: a single TOML file with instance, policy,
//! utilities, trainer, oracle, and output sections, plus the run-directory
//! layout written by the CLI.
//!
//! Table files and checkpoints use row-major index order throughout: state
//! tuples vary their last coordinate fastest, and a local table over
//! `(s_i, a_i)` lists `a_i` fastest.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::estimation::{self, Anchor, QEstimatorSpec, TdSchedule};
use crate::graph::AgentGraph;
use crate::mdp::FactoredMDP;
use crate::oracle;
use crate::policy::LocalizedPolicy;
use crate::trainer::{
    self, EtaSchedule, Instrumentation, QEstimatorKind, TrainConfig, TrainError, TrainResult,
};
use crate::utility::{self, LocalUtility};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
    #[error(transparent)]
    Mdp(#[from] crate::mdp::MdpError),
    #[error(transparent)]
    Utility(#[from] crate::utility::UtilityError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Oracle(#[from] oracle::OracleError),
    #[error(transparent)]
    Estimation(#[from] estimation::EstimationError),
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("cannot serialize report: {0}")]
    Serialize(#[from] serde_json::Error),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub instance: InstanceConfig,
    pub policy: PolicyConfig,
    pub utilities: UtilitiesConfig,
    pub trainer: TrainerSection,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceConfig {
    pub graph: GraphConfig,
    pub mdp: MdpConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    /// `line`, `ring`, `grid`, `complete`, or `edges`.
    pub kind: String,
    /// Generator size (grid: side length).
    #[serde(default)]
    pub size: Option<usize>,
    /// Agent count for `kind = "edges"`.
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub edges: Option<Vec<(usize, usize)>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SizeSpec {
    Uniform(usize),
    PerAgent(Vec<usize>),
}

impl SizeSpec {
    fn resolve(&self, n: usize, what: &str) -> Result<Vec<usize>, ConfigError> {
        match self {
            SizeSpec::Uniform(s) => Ok(vec![*s; n]),
            SizeSpec::PerAgent(v) => {
                if v.len() != n {
                    return Err(invalid(format!(
                        "{what} lists {} entries for {n} agents",
                        v.len()
                    )));
                }
                Ok(v.clone())
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum XiSpec {
    Named(String),
    Explicit(Vec<f64>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpConfig {
    /// `spatial` (generator) or `explicit` (kernel tables from a file).
    pub kind: String,
    pub state_sizes: SizeSpec,
    pub action_sizes: SizeSpec,
    pub gamma: f64,
    #[serde(default)]
    pub interaction_strength: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub kernels_file: Option<PathBuf>,
    /// `"uniform"` (default) or an explicit distribution over global states.
    #[serde(default)]
    pub xi: Option<XiSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kappa: usize,
    /// `zeros` (default) or `random`.
    #[serde(default)]
    pub init: Option<String>,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_init_scale() -> f64 {
    0.1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilitiesConfig {
    /// One utility broadcast to every agent.
    #[serde(default)]
    pub all: Option<UtilityConfig>,
    /// Per-agent utilities, in agent order.
    #[serde(default)]
    pub per_agent: Option<Vec<UtilityConfig>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityConfig {
    /// `linear`, `entropy`, or `distance`.
    pub kind: String,
    /// Row-major reward table over `(s_i, a_i)` for `linear`.
    #[serde(default)]
    pub rewards: Option<Vec<f64>>,
    #[serde(default)]
    pub rewards_file: Option<PathBuf>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Row-major target occupancy for `distance`.
    #[serde(default)]
    pub target: Option<Vec<f64>>,
    #[serde(default)]
    pub target_file: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EtaSpec {
    Fixed(f64),
    Backtrack {
        backtrack_start: f64,
        #[serde(default = "default_probe_steps")]
        probe_steps: usize,
    },
}

fn default_probe_steps() -> usize {
    5
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    pub iterations: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_td_horizon")]
    pub td_horizon: usize,
    pub eta: EtaSpec,
    /// `td` or `exact`.
    pub q_estimator: String,
    pub seed: u64,
    #[serde(default = "default_td_step_h")]
    pub td_step_h: f64,
    #[serde(default = "default_td_step_k0")]
    pub td_step_k0: f64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub smoothness_bound: Option<f64>,
}

fn default_batch() -> usize {
    256
}
fn default_horizon() -> usize {
    20
}
fn default_td_horizon() -> usize {
    10_000
}
fn default_td_step_h() -> f64 {
    10.0
}
fn default_td_step_k0() -> f64 {
    100.0
}
fn default_checkpoint_every() -> usize {
    100
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    /// `auto` (default), `on`, or `off`.
    #[serde(default = "default_instrument")]
    pub instrument: String,
    #[serde(default = "default_max_pairs")]
    pub max_global_pairs: usize,
    #[serde(default = "default_max_influence_rows")]
    pub max_influence_rows: usize,
    #[serde(default)]
    pub beta_grid: Option<Vec<f64>>,
}

fn default_instrument() -> String {
    "auto".into()
}
fn default_max_pairs() -> usize {
    oracle::DEFAULT_MAX_GLOBAL_PAIRS
}
fn default_max_influence_rows() -> usize {
    oracle::DEFAULT_MAX_INFLUENCE_ROWS
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            instrument: default_instrument(),
            max_global_pairs: default_max_pairs(),
            max_influence_rows: default_max_influence_rows(),
            beta_grid: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

pub fn load_config(path: &Path) -> Result<(ExperimentConfig, String), ConfigError> {
    let text = fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let cfg: ExperimentConfig = toml::from_str(&text)?;
    Ok((cfg, text))
}

/// Short hash of the canonical (JSON-serialized) config, used to name run
/// directories.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let canonical = serde_json::to_vec(cfg).expect("config serializes");
    let digest = Sha256::digest(&canonical);
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

pub fn build_graph(cfg: &GraphConfig) -> Result<AgentGraph, ConfigError> {
    let need_size = |what: &str| -> Result<usize, ConfigError> {
        cfg.size.ok_or_else(|| invalid(format!("graph kind `{what}` needs `size`")))
    };
    Ok(match cfg.kind.as_str() {
        "line" => AgentGraph::line(need_size("line")?)?,
        "ring" => AgentGraph::ring(need_size("ring")?)?,
        "grid" => AgentGraph::grid(need_size("grid")?)?,
        "complete" => AgentGraph::complete(need_size("complete")?)?,
        "edges" => {
            let n = cfg.n.ok_or_else(|| invalid("graph kind `edges` needs `n`"))?;
            let edges = cfg
                .edges
                .as_ref()
                .ok_or_else(|| invalid("graph kind `edges` needs `edges`"))?;
            AgentGraph::build(n, edges)?
        }
        other => return Err(invalid(format!("unknown graph kind `{other}`"))),
    })
}

#[derive(Serialize, Deserialize)]
struct KernelsFile {
    /// Per agent: rows indexed by the flat pair `s * |A| + a`, each row a
    /// distribution over the agent's next local state.
    kernels: Vec<Vec<Vec<f64>>>,
}

fn load_table_file(base: &Path, path: &Path) -> Result<Vec<f64>, ConfigError> {
    let resolved = if path.is_absolute() { path.to_path_buf() } else { base.join(path) };
    let text = fs::read_to_string(&resolved)
        .map_err(|source| ConfigError::Io { path: resolved.clone(), source })?;
    Ok(serde_json::from_str(&text)?)
}

fn table_from(
    values: Vec<f64>,
    rows: usize,
    cols: usize,
    what: &str,
) -> Result<Array2<f64>, ConfigError> {
    if values.len() != rows * cols {
        return Err(invalid(format!(
            "{what} has {} values, expected {rows}x{cols}",
            values.len()
        )));
    }
    Ok(Array2::from_shape_vec((rows, cols), values).expect("shape checked"))
}

fn build_utility(
    cfg: &UtilityConfig,
    base: &Path,
    rows: usize,
    cols: usize,
    agent: usize,
) -> Result<LocalUtility, ConfigError> {
    match cfg.kind.as_str() {
        "linear" => {
            let values = match (&cfg.rewards, &cfg.rewards_file) {
                (Some(v), None) => v.clone(),
                (None, Some(path)) => load_table_file(base, path)?,
                _ => {
                    return Err(invalid(format!(
                        "linear utility for agent {agent} needs exactly one of `rewards` or `rewards_file`"
                    )))
                }
            };
            Ok(LocalUtility::Linear {
                rewards: table_from(values, rows, cols, "reward table")?,
            })
        }
        "entropy" => {
            let epsilon = cfg.epsilon.unwrap_or(1e-6);
            Ok(LocalUtility::entropy(epsilon)?)
        }
        "distance" => {
            let values = match (&cfg.target, &cfg.target_file) {
                (Some(v), None) => v.clone(),
                (None, Some(path)) => load_table_file(base, path)?,
                _ => {
                    return Err(invalid(format!(
                        "distance utility for agent {agent} needs exactly one of `target` or `target_file`"
                    )))
                }
            };
            Ok(LocalUtility::Distance {
                target: table_from(values, rows, cols, "target table")?,
            })
        }
        other => Err(invalid(format!("unknown utility kind `{other}`"))),
    }
}

pub struct Instance {
    pub mdp: FactoredMDP,
    pub policy: LocalizedPolicy,
    pub utilities: Vec<LocalUtility>,
}

/// Materialize the configured instance. `base` resolves relative aux-file
/// paths (usually the config file's directory).
pub fn build_instance(cfg: &ExperimentConfig, base: &Path) -> Result<Instance, ConfigError> {
    let graph = build_graph(&cfg.instance.graph)?;
    let n = graph.n();
    let state_sizes = cfg.instance.mdp.state_sizes.resolve(n, "state_sizes")?;
    let action_sizes = cfg.instance.mdp.action_sizes.resolve(n, "action_sizes")?;

    let mut mdp = match cfg.instance.mdp.kind.as_str() {
        "spatial" => {
            let strengths = cfg
                .instance
                .mdp
                .interaction_strength
                .as_ref()
                .ok_or_else(|| invalid("spatial mdp needs `interaction_strength`"))?;
            let seed = cfg.instance.mdp.seed.unwrap_or(0);
            FactoredMDP::make_spatial(
                graph,
                state_sizes.clone(),
                action_sizes.clone(),
                strengths,
                seed,
            )?
        }
        "explicit" => {
            let path = cfg
                .instance
                .mdp
                .kernels_file
                .as_ref()
                .ok_or_else(|| invalid("explicit mdp needs `kernels_file`"))?;
            let resolved = if path.is_absolute() { path.clone() } else { base.join(path) };
            let text = fs::read_to_string(&resolved)
                .map_err(|source| ConfigError::Io { path: resolved.clone(), source })?;
            let file: KernelsFile = serde_json::from_str(&text)?;
            if file.kernels.len() != n {
                return Err(invalid(format!(
                    "kernels file lists {} agents, graph has {n}",
                    file.kernels.len()
                )));
            }
            let pairs: usize = state_sizes.iter().product::<usize>()
                * action_sizes.iter().product::<usize>();
            let mut kernels = Vec::with_capacity(n);
            for (i, rows) in file.kernels.iter().enumerate() {
                if rows.len() != pairs {
                    return Err(invalid(format!(
                        "agent {i} kernel has {} rows, expected {pairs}",
                        rows.len()
                    )));
                }
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                kernels.push(table_from(flat, pairs, state_sizes[i], "kernel")?);
            }
            let xi = vec![
                1.0 / state_sizes.iter().product::<usize>() as f64;
                state_sizes.iter().product::<usize>()
            ];
            FactoredMDP::new(graph, state_sizes.clone(), action_sizes.clone(), kernels, xi, 0.9)?
        }
        other => return Err(invalid(format!("unknown mdp kind `{other}`"))),
    };
    mdp.set_gamma(cfg.instance.mdp.gamma)?;
    match &cfg.instance.mdp.xi {
        None => {}
        Some(XiSpec::Named(name)) if name == "uniform" => {}
        Some(XiSpec::Named(other)) => {
            return Err(invalid(format!("unknown initial distribution `{other}`")))
        }
        Some(XiSpec::Explicit(values)) => mdp.set_initial_distribution(values.clone())?,
    }

    let kappa = cfg.policy.kappa;
    let policy = match cfg.policy.init.as_deref().unwrap_or("zeros") {
        "zeros" => LocalizedPolicy::zeros(mdp.graph(), &state_sizes, &action_sizes, kappa),
        "random" => LocalizedPolicy::random(
            mdp.graph(),
            &state_sizes,
            &action_sizes,
            kappa,
            cfg.policy.init_scale,
            cfg.policy.init_seed,
        ),
        other => return Err(invalid(format!("unknown policy init `{other}`"))),
    };

    let utilities = match (&cfg.utilities.all, &cfg.utilities.per_agent) {
        (Some(u), None) => (0..n)
            .map(|i| build_utility(u, base, state_sizes[i], action_sizes[i], i))
            .collect::<Result<Vec<_>, _>>()?,
        (None, Some(list)) => {
            if list.len() != n {
                return Err(invalid(format!(
                    "{} per-agent utilities for {n} agents",
                    list.len()
                )));
            }
            list.iter()
                .enumerate()
                .map(|(i, u)| build_utility(u, base, state_sizes[i], action_sizes[i], i))
                .collect::<Result<Vec<_>, _>>()?
        }
        _ => {
            return Err(invalid(
                "utilities need exactly one of `all` or `per_agent`",
            ))
        }
    };

    Ok(Instance { mdp, policy, utilities })
}

pub fn train_config_from(cfg: &ExperimentConfig) -> Result<TrainConfig, ConfigError> {
    let eta = match cfg.trainer.eta {
        EtaSpec::Fixed(e) => EtaSchedule::Fixed(e),
        EtaSpec::Backtrack { backtrack_start, probe_steps } => {
            EtaSchedule::Backtrack { start: backtrack_start, probe_steps }
        }
    };
    let q_estimator = match cfg.trainer.q_estimator.as_str() {
        "td" => QEstimatorKind::Td,
        "exact" => QEstimatorKind::Exact,
        other => return Err(invalid(format!("unknown q_estimator `{other}`"))),
    };
    let instrument = match cfg.oracle.instrument.as_str() {
        "auto" => Instrumentation::Auto,
        "on" => Instrumentation::On,
        "off" => Instrumentation::Off,
        other => return Err(invalid(format!("unknown instrument mode `{other}`"))),
    };
    Ok(TrainConfig {
        iterations: cfg.trainer.iterations,
        batch_size: cfg.trainer.batch_size,
        horizon: cfg.trainer.horizon,
        td_horizon: cfg.trainer.td_horizon,
        kappa: cfg.policy.kappa,
        eta,
        q_estimator,
        seed: cfg.trainer.seed,
        td_schedule: TdSchedule { h: cfg.trainer.td_step_h, k0: cfg.trainer.td_step_k0 },
        checkpoint_every: cfg.trainer.checkpoint_every,
        smoothness_bound: cfg.trainer.smoothness_bound,
        instrument,
        max_global_pairs: cfg.oracle.max_global_pairs,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Render the deterministic metrics log (wall time is excluded by design).
pub fn metrics_csv(metrics: &[trainer::IterationMetrics], n_agents: usize) -> String {
    let mut out = String::new();
    out.push_str("t,eta,f_exact,grad_norm_sq_exact,grad_norm_sq_est,grad_err_sq,occ_mass_err,td_coverage");
    for i in 0..n_agents {
        out.push_str(&format!(",q_sup_delta_{i}"));
    }
    out.push('\n');
    for row in metrics {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}",
            row.t,
            row.eta,
            fmt_opt(row.f_exact),
            fmt_opt(row.grad_norm_sq_exact),
            row.grad_norm_sq_est,
            fmt_opt(row.grad_err_sq),
            row.occ_mass_err,
            row.td_coverage
        ));
        for i in 0..n_agents {
            let cell = row.q_sup_delta.as_ref().map(|v| v[i]);
            out.push(',');
            out.push_str(&fmt_opt(cell));
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
pub struct StationaritySummary {
    pub lhs: f64,
    pub rhs: f64,
    pub delta_max: f64,
}

#[derive(Serialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub n_agents: usize,
    pub iterations: usize,
    pub eta_used: f64,
    pub final_f_exact: Option<f64>,
    pub final_grad_norm_sq_exact: Option<f64>,
    pub min_grad_norm_sq_exact: Option<f64>,
    pub stationarity: Option<StationaritySummary>,
    pub violations: Vec<String>,
    pub total_wall_ms: f64,
}

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub violations: usize,
    pub final_f_exact: Option<f64>,
}

fn write_file(path: &Path, contents: &str) -> Result<(), ConfigError> {
    fs::write(path, contents)
        .map_err(|source| ConfigError::Write { path: path.to_path_buf(), source })
}

/// Train per the config and lay out the run directory:
/// `config.toml` (verbatim copy), `config.json` (canonical), `metrics.csv`
/// (deterministic log), `timings.csv` (wall-clock sidecar),
/// `policy_final.json`, periodic `policy_iter*.json`, and `summary.json`.
pub fn run_train(
    cfg: &ExperimentConfig,
    config_text: &str,
    base: &Path,
    out_override: Option<&Path>,
) -> Result<TrainOutcome, ConfigError> {
    let instance = build_instance(cfg, base)?;
    let tcfg = train_config_from(cfg)?;
    let hash = config_hash(cfg);
    let out_root = out_override
        .map(Path::to_path_buf)
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    let run_dir = out_root.join(format!("{hash}-seed{}", tcfg.seed));
    fs::create_dir_all(&run_dir)
        .map_err(|source| ConfigError::Write { path: run_dir.clone(), source })?;

    let result: TrainResult =
        match trainer::train(&instance.mdp, &instance.policy, &instance.utilities, &tcfg) {
            Ok(r) => r,
            Err(TrainError::NonFiniteGradient { iter, agent, snapshot }) => {
                // Dump what we have before failing.
                let snap_path = run_dir.join("diagnostic_snapshot.json");
                let body = serde_json::to_string_pretty(&snapshot.policy)?;
                write_file(&snap_path, &body)?;
                write_file(
                    &run_dir.join("metrics.csv"),
                    &metrics_csv(&snapshot.metrics, instance.mdp.n_agents()),
                )?;
                return Err(TrainError::NonFiniteGradient { iter, agent, snapshot }.into());
            }
            Err(e) => return Err(e.into()),
        };

    write_file(&run_dir.join("config.toml"), config_text)?;
    write_file(&run_dir.join("config.json"), &serde_json::to_string_pretty(cfg)?)?;
    write_file(
        &run_dir.join("metrics.csv"),
        &metrics_csv(&result.metrics, instance.mdp.n_agents()),
    )?;
    let mut timings = String::from("t,wall_ms\n");
    for row in &result.metrics {
        timings.push_str(&format!("{},{}\n", row.t, row.wall_ms));
    }
    write_file(&run_dir.join("timings.csv"), &timings)?;
    for (t, ck) in &result.checkpoints {
        write_file(
            &run_dir.join(format!("policy_iter{t}.json")),
            &serde_json::to_string_pretty(ck)?,
        )?;
    }
    write_file(
        &run_dir.join("policy_final.json"),
        &serde_json::to_string_pretty(&result.policy.to_checkpoint())?,
    )?;

    let stationarity = match (result.final_f_exact, result.metrics.is_empty()) {
        (Some(f_end), false) => trainer::evaluate_stationarity(&result.metrics, f_end)
            .ok()
            .map(|r| StationaritySummary { lhs: r.lhs, rhs: r.rhs, delta_max: r.delta_max }),
        _ => None,
    };
    let summary = RunSummary {
        config_hash: hash,
        seed: tcfg.seed,
        n_agents: instance.mdp.n_agents(),
        iterations: result.metrics.len(),
        eta_used: result.eta_used,
        final_f_exact: result.final_f_exact,
        final_grad_norm_sq_exact: result.final_grad_norm_sq_exact,
        min_grad_norm_sq_exact: result
            .metrics
            .iter()
            .filter_map(|m| m.grad_norm_sq_exact)
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v)))),
        stationarity,
        violations: result.violations.clone(),
        total_wall_ms: result.metrics.iter().map(|m| m.wall_ms).sum(),
    };
    write_file(&run_dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;

    Ok(TrainOutcome {
        run_dir,
        violations: result.violations.len(),
        final_f_exact: result.final_f_exact,
    })
}

#[derive(Serialize)]
pub struct DecayReport {
    pub influence: Vec<Vec<f64>>,
    pub certificate: CertificateSummary,
    /// `decay[agent][kappa]`: measured sup Q-difference.
    pub decay: Vec<Vec<f64>>,
    /// Certified bound `c0 * phi0^kappa` per kappa.
    pub bounds: Vec<f64>,
    /// Whether every measurement is dominated by its bound (vacuous when the
    /// certificate does not hold).
    pub dominated: bool,
}

#[derive(Serialize)]
pub struct CertificateSummary {
    pub beta: f64,
    pub rho: f64,
    pub c0: f64,
    pub phi0: f64,
    pub holds: bool,
    pub grad_bound: f64,
}

/// Influence matrix, best decay certificate over the beta grid, and the
/// measured per-agent decay table; returns whether the certified bounds
/// dominate the measurements.
pub fn run_verify_decay(
    cfg: &ExperimentConfig,
    base: &Path,
    out_override: Option<&Path>,
) -> Result<(DecayReport, PathBuf), ConfigError> {
    let instance = build_instance(cfg, base)?;
    let m = oracle::influence_matrix(&instance.mdp, cfg.oracle.max_influence_rows)?;
    let m_f = utility::team_grad_bound(&instance.utilities, instance.mdp.gamma());
    let grid = cfg.oracle.beta_grid.clone().unwrap_or_else(oracle::default_beta_grid);
    let cert = oracle::best_certificate(&m, instance.mdp.gamma(), m_f, &grid);
    let decay = oracle::measure_decay(
        &instance.mdp,
        &instance.policy,
        &instance.utilities,
        cfg.oracle.max_global_pairs,
    )?;
    let kmax = instance.mdp.graph().max_finite_dist();
    let bounds: Vec<f64> = (0..=kmax).map(|k| cert.q_bound(k)).collect();
    let dominated = !cert.holds
        || decay
            .iter()
            .all(|row| row.iter().enumerate().all(|(k, &v)| v <= bounds[k] + 1e-12));
    let n = instance.mdp.n_agents();
    let report = DecayReport {
        influence: (0..n).map(|i| (0..n).map(|j| m.value(i, j)).collect()).collect(),
        certificate: CertificateSummary {
            beta: cert.beta,
            rho: cert.rho,
            c0: cert.c0,
            phi0: cert.phi0,
            holds: cert.holds,
            grad_bound: m_f,
        },
        decay,
        bounds,
        dominated,
    };
    let dir = out_dir(cfg, out_override)?;
    let path = dir.join("verify_decay.json");
    write_file(&path, &serde_json::to_string_pretty(&report)?)?;
    Ok((report, path))
}

#[derive(Serialize)]
pub struct GradientCheckReport {
    pub relative_error: f64,
    pub exact_norm: f64,
    pub fd_step: f64,
    pub pass: bool,
}

/// Exact policy gradient vs central finite differences on the configured
/// instance; passes at relative error 1e-5.
pub fn run_gradient_check(
    cfg: &ExperimentConfig,
    base: &Path,
    out_override: Option<&Path>,
) -> Result<(GradientCheckReport, PathBuf), ConfigError> {
    let instance = build_instance(cfg, base)?;
    let cap = cfg.oracle.max_global_pairs;
    let exact =
        oracle::exact_policy_gradient(&instance.mdp, &instance.policy, &instance.utilities, cap)?;
    let h = 1e-5;
    let fd = oracle::finite_difference_gradient(
        &instance.mdp,
        &instance.policy,
        &instance.utilities,
        h,
        cap,
    )?;
    let exact_norm = exact.norm_sq().sqrt();
    let relative_error = fd.diff_norm_sq(&exact).sqrt() / exact_norm.max(1e-12);
    let report = GradientCheckReport {
        relative_error,
        exact_norm,
        fd_step: h,
        pass: relative_error <= 1e-5,
    };
    let dir = out_dir(cfg, out_override)?;
    let path = dir.join("gradient_check.json");
    write_file(&path, &serde_json::to_string_pretty(&report)?)?;
    Ok((report, path))
}

#[derive(Serialize)]
pub struct OracleCompareReport {
    pub batch_size: usize,
    pub horizon: usize,
    pub td_horizon: usize,
    /// Per-agent 2-norm error of the sampled local occupancy.
    pub occupancy_error: Vec<f64>,
    /// High-probability bound at failure probability 0.01.
    pub occupancy_bound: f64,
    /// Per-agent sup-norm error of the TD Q-table against the exact
    /// truncation under the exact shadow reward.
    pub q_sup_error: Vec<f64>,
    /// Per-agent 2-norm error of the sampled truncated gradient against the
    /// enumerated one.
    pub gradient_error: Vec<f64>,
}

/// Compare every sampled estimator against its oracle counterpart at the
/// configured batch size, horizons, and radius.
pub fn run_oracle_compare(
    cfg: &ExperimentConfig,
    base: &Path,
    out_override: Option<&Path>,
) -> Result<(OracleCompareReport, PathBuf), ConfigError> {
    let instance = build_instance(cfg, base)?;
    let cap = cfg.oracle.max_global_pairs;
    let mdp = &instance.mdp;
    let policy = &instance.policy;
    let n = mdp.n_agents();
    let gamma = mdp.gamma();
    let kappa = cfg.policy.kappa;
    let anchor = Anchor::zeros(n);
    let tcfg = train_config_from(cfg)?;

    let setup = oracle::exact_shadow_setup(mdp, policy, &instance.utilities, cap)?;
    let batch = mdp.sample_batch(policy, tcfg.batch_size, tcfg.horizon, tcfg.seed);

    let b = tcfg.batch_size as f64;
    let occupancy_bound = ((4.0 + 2.0 * gamma.powi(2 * tcfg.horizon as i32) * b
        - 16.0 * 0.01f64.ln())
        / ((1.0 - gamma) * (1.0 - gamma) * b))
        .sqrt();
    let mut occupancy_error = Vec::with_capacity(n);
    let mut sampled_rewards = Vec::with_capacity(n);
    for i in 0..n {
        let lambda = estimation::estimate_local_occupancy(&batch, mdp, i)?;
        occupancy_error.push(
            (&lambda - &setup.occupancy.locals[i]).iter().map(|v| v * v).sum::<f64>().sqrt(),
        );
        sampled_rewards.push(instance.utilities[i].shadow_reward(&lambda, gamma)?);
    }

    let mut td_rng = crate::rng::substream(tcfg.seed, &[0x0c0c]);
    let spec = QEstimatorSpec::Td { horizon: tcfg.td_horizon, schedule: tcfg.td_schedule };
    let qout = estimation::estimate_q_tables(
        &spec,
        mdp,
        policy,
        &sampled_rewards,
        kappa,
        &anchor,
        &mut td_rng,
    )?;
    let q_sup_error: Vec<f64> = (0..n)
        .map(|i| {
            let reference =
                estimation::exact_truncated_q(mdp, &setup.q[i], i, kappa, &anchor);
            qout.tables[i].sup_delta(&reference)
        })
        .collect();

    let truncated = oracle::truncated_gradient_from_setup(mdp, policy, &setup, kappa, &anchor)?;
    let table_refs: std::collections::BTreeMap<usize, &estimation::TruncatedQTable> =
        qout.tables.iter().map(|t| (t.agent, t)).collect();
    let mut gradient_error = Vec::with_capacity(n);
    for i in 0..n {
        let sampled =
            estimation::truncated_gradient(&batch, mdp, policy, kappa, &table_refs, i)?;
        let err = (&sampled - &truncated.tables[i]).iter().map(|v| v * v).sum::<f64>().sqrt();
        gradient_error.push(err);
    }

    let report = OracleCompareReport {
        batch_size: tcfg.batch_size,
        horizon: tcfg.horizon,
        td_horizon: tcfg.td_horizon,
        occupancy_error,
        occupancy_bound,
        q_sup_error,
        gradient_error,
    };
    let dir = out_dir(cfg, out_override)?;
    let path = dir.join("oracle_compare.json");
    write_file(&path, &serde_json::to_string_pretty(&report)?)?;
    Ok((report, path))
}

fn out_dir(cfg: &ExperimentConfig, out_override: Option<&Path>) -> Result<PathBuf, ConfigError> {
    let dir = out_override
        .map(Path::to_path_buf)
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    fs::create_dir_all(&dir)
        .map_err(|source| ConfigError::Write { path: dir.clone(), source })?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
[instance.graph]
kind = "ring"
size = 4

[instance.mdp]
kind = "spatial"
state_sizes = 2
action_sizes = 2
gamma = 0.9
interaction_strength = [1.0, 0.3]
seed = 7

[policy]
kappa = 1

[utilities.all]
kind = "entropy"
epsilon = 1e-6

[trainer]
iterations = 3
batch_size = 8
horizon = 5
td_horizon = 50
eta = 0.4
q_estimator = "td"
seed = 11
"#;

    #[test]
    fn parses_and_builds_example() {
        let cfg: ExperimentConfig = toml::from_str(EXAMPLE).unwrap();
        let instance = build_instance(&cfg, Path::new(".")).unwrap();
        assert_eq!(instance.mdp.n_agents(), 4);
        assert_eq!(instance.mdp.gamma(), 0.9);
        assert_eq!(instance.policy.kappa(), 1);
        assert_eq!(instance.utilities.len(), 4);
        let tcfg = train_config_from(&cfg).unwrap();
        assert_eq!(tcfg.kappa, 1);
        assert!(matches!(tcfg.eta, EtaSchedule::Fixed(e) if e == 0.4));
    }

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        let cfg: ExperimentConfig = toml::from_str(EXAMPLE).unwrap();
        let h1 = config_hash(&cfg);
        let h2 = config_hash(&toml::from_str(EXAMPLE).unwrap());
        assert_eq!(h1, h2);
        let mut other: ExperimentConfig = toml::from_str(EXAMPLE).unwrap();
        other.trainer.seed = 12;
        assert_ne!(h1, config_hash(&other));
    }

    #[test]
    fn rejects_unknown_fields_and_bad_kinds() {
        let bad = EXAMPLE.replace("kind = \"ring\"", "kind = \"ring\"\nnonsense = 1");
        assert!(toml::from_str::<ExperimentConfig>(&bad).is_err());
        let bad_kind = EXAMPLE.replace("q_estimator = \"td\"", "q_estimator = \"guess\"");
        let cfg: ExperimentConfig = toml::from_str(&bad_kind).unwrap();
        assert!(train_config_from(&cfg).is_err());
    }

    #[test]
    fn per_agent_utilities_must_match_count() {
        let text = EXAMPLE.replace(
            "[utilities.all]\nkind = \"entropy\"\nepsilon = 1e-6",
            "[[utilities.per_agent]]\nkind = \"entropy\"",
        );
        let cfg: ExperimentConfig = toml::from_str(&text).unwrap();
        assert!(matches!(
            build_instance(&cfg, Path::new(".")),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn metrics_csv_renders_missing_oracle_columns_blank() {
        let rows = vec![trainer::IterationMetrics {
            t: 0,
            eta: 0.5,
            f_exact: None,
            grad_norm_sq_exact: None,
            grad_norm_sq_est: 0.125,
            grad_err_sq: None,
            occ_mass_err: 0.0,
            td_coverage: 0.75,
            q_sup_delta: None,
            wall_ms: 3.0,
        }];
        let csv = metrics_csv(&rows, 2);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,eta,f_exact,grad_norm_sq_exact,grad_norm_sq_est,grad_err_sq,occ_mass_err,td_coverage,q_sup_delta_0,q_sup_delta_1"
        );
        assert_eq!(lines.next().unwrap(), "0,0.5,,,0.125,,0,0.75,,");
        assert!(!csv.contains("wall"));
    }
}
