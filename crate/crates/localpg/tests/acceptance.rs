//! Acceptance gate: every criterion below prints one PASS/FAIL line and
//! fails the suite on violation. Instances are desk scale (2-6 agents on
//! line/ring graphs, local sizes 2-3, gamma in {0.8, 0.9, 0.95}); tolerances
//! are pinned in the asserts.

mod common;

use std::time::{Duration, Instant};

use common::{decaying_instance, entropy_ring_instance, linear_line_instance, random_instance};
use localpg::estimation::{self, Anchor, TdSchedule};
use localpg::graph::AgentGraph;
use localpg::mdp::FactoredMDP;
use localpg::oracle::{self, DEFAULT_MAX_GLOBAL_PAIRS as CAP};
use localpg::policy::LocalizedPolicy;
use localpg::rng;
use localpg::trainer::{self, EtaSchedule, Instrumentation, QEstimatorKind, TrainConfig};
use localpg::utility::{self, ShadowReward};
use ndarray::Array2;

/// Score-norm constant of the tabular softmax class.
const M_PSI: f64 = 2.0;

fn report(n: usize, name: &str, pass: bool, elapsed: Duration, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("acceptance criterion {n} ({name}): {verdict} [{:.1}s] {detail}", elapsed.as_secs_f64());
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

#[test]
fn criterion_1_gradient_oracle_gate() {
    let started = Instant::now();
    let budget = Duration::from_secs(120);
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let inst = random_instance(seed);
        let exact =
            oracle::exact_policy_gradient(&inst.mdp, &inst.policy, &inst.utilities, CAP).unwrap();
        let fd = oracle::finite_difference_gradient(
            &inst.mdp,
            &inst.policy,
            &inst.utilities,
            1e-5,
            CAP,
        )
        .unwrap();
        let rel = fd.diff_norm_sq(&exact).sqrt() / exact.norm_sq().sqrt().max(1e-12);
        worst = worst.max(rel);
    }
    let elapsed = started.elapsed();
    let pass = worst <= 1e-5 && elapsed <= budget;
    report(
        1,
        "gradient-oracle gate",
        pass,
        elapsed,
        &format!("worst relative error {worst:.3e} over 20 triples (tol 1e-5)"),
    );
}

#[test]
fn criterion_2_zero_expectation_identity() {
    let started = Instant::now();
    let budget = Duration::from_secs(60);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut seed = 0u64;
    while checked < 10 {
        let inst = random_instance(100 + seed);
        seed += 1;
        let diameter = inst.mdp.graph().diameter().unwrap();
        if diameter == 0 {
            continue;
        }
        let kappa = (seed as usize) % diameter;
        let anchor = Anchor::zeros(inst.mdp.n_agents());
        let residual = oracle::zero_expectation_residual(
            &inst.mdp,
            &inst.policy,
            &inst.utilities,
            kappa,
            &anchor,
            CAP,
        )
        .unwrap();
        worst = worst.max(residual);
        checked += 1;
    }
    let elapsed = started.elapsed();
    let pass = worst <= 1e-10 && elapsed <= budget;
    report(
        2,
        "zero-expectation identity",
        pass,
        elapsed,
        &format!("worst residual norm {worst:.3e} over {checked} triples (tol 1e-10)"),
    );
}

#[test]
fn criterion_3_truncation_bound_sweep() {
    let started = Instant::now();
    let budget = Duration::from_secs(300);
    let mut certified = 0;
    let mut detail = String::new();
    let mut pass = true;
    // Gradient errors below this are float noise around exact zero.
    let zero_floor = 1e-13;
    for seed in 0..8u64 {
        let inst = decaying_instance(seed);
        let m = oracle::influence_matrix(&inst.mdp, oracle::DEFAULT_MAX_INFLUENCE_ROWS).unwrap();
        let m_f = utility::team_grad_bound(&inst.utilities, inst.mdp.gamma());
        let cert =
            oracle::best_certificate(&m, inst.mdp.gamma(), m_f, &oracle::default_beta_grid());
        if !cert.holds {
            continue;
        }
        certified += 1;
        let diameter = inst.mdp.graph().diameter().unwrap();
        let decay =
            oracle::measure_decay(&inst.mdp, &inst.policy, &inst.utilities, CAP).unwrap();
        let exact =
            oracle::exact_policy_gradient(&inst.mdp, &inst.policy, &inst.utilities, CAP).unwrap();
        let anchor = Anchor::zeros(inst.mdp.n_agents());
        let n = inst.mdp.n_agents();
        let mut grad_sup: Vec<f64> = Vec::with_capacity(diameter + 1);
        for kappa in 0..=diameter {
            let truncated = oracle::exact_truncated_gradient(
                &inst.mdp,
                &inst.policy,
                &inst.utilities,
                kappa,
                &anchor,
                CAP,
            )
            .unwrap();
            let mut kappa_sup: f64 = 0.0;
            for i in 0..n {
                // (a) pointwise decay bound.
                if decay[i][kappa] > cert.q_bound(kappa) + 1e-12 {
                    pass = false;
                    detail = format!(
                        "seed {seed} agent {i} kappa {kappa}: decay {:.3e} > bound {:.3e}",
                        decay[i][kappa],
                        cert.q_bound(kappa)
                    );
                }
                // (b) gradient error bound for every agent.
                let err = truncated.agent_diff_norm(&exact, i);
                if err > cert.gradient_bound(kappa, M_PSI) + 1e-12 {
                    pass = false;
                    detail = format!(
                        "seed {seed} agent {i} kappa {kappa}: grad err {err:.3e} > bound {:.3e}",
                        cert.gradient_bound(kappa, M_PSI)
                    );
                }
                kappa_sup = kappa_sup.max(err);
            }
            grad_sup.push(kappa_sup);
        }
        // (c) both measured quantities non-increasing in kappa and exactly
        // zero at the diameter. Decay is checked per agent (the sup over a
        // shrinking pair set cannot grow); the gradient error is summarized
        // per kappa as the sup over agents, since per-agent signed errors may
        // cancel fortuitously at small radii.
        for i in 0..n {
            for kappa in 0..diameter {
                if decay[i][kappa + 1] > decay[i][kappa] {
                    pass = false;
                    detail = format!(
                        "seed {seed} agent {i} kappa {kappa}: decay not monotone ({:.3e}->{:.3e})",
                        decay[i][kappa],
                        decay[i][kappa + 1]
                    );
                }
            }
            if decay[i][diameter] != 0.0 {
                pass = false;
                detail = format!(
                    "seed {seed} agent {i}: nonzero decay at diameter ({:.3e})",
                    decay[i][diameter]
                );
            }
        }
        for kappa in 0..diameter {
            let monotone = grad_sup[kappa + 1] <= grad_sup[kappa]
                || (grad_sup[kappa + 1] <= zero_floor && grad_sup[kappa] <= zero_floor);
            if !monotone {
                pass = false;
                detail = format!(
                    "seed {seed} kappa {kappa}: grad error not monotone ({:.3e}->{:.3e})",
                    grad_sup[kappa],
                    grad_sup[kappa + 1]
                );
            }
        }
        if grad_sup[diameter] != 0.0 {
            pass = false;
            detail =
                format!("seed {seed}: nonzero grad error at diameter ({:.3e})", grad_sup[diameter]);
        }
    }
    let elapsed = started.elapsed();
    if certified < 5 {
        pass = false;
        detail = format!("only {certified} certified instances (need 5)");
    }
    if elapsed > budget {
        pass = false;
    }
    if pass {
        detail = format!("{certified} certified instances, all bounds dominated and monotone");
    }
    report(3, "truncation bound sweep", pass, elapsed, &detail);
}

#[test]
fn criterion_4_occupancy_estimator() {
    let started = Instant::now();
    let budget = Duration::from_secs(180);
    let gamma: f64 = 0.9;
    let horizon = 88; // gamma^88 < 1e-4
    let batch_size = 4096usize;
    let mut mdp = FactoredMDP::make_spatial(
        AgentGraph::line(2).unwrap(),
        vec![2, 2],
        vec![2, 2],
        &[1.0, 0.25],
        7,
    )
    .unwrap();
    mdp.set_gamma(gamma).unwrap();
    let policy = LocalizedPolicy::random(
        mdp.graph(),
        mdp.state_sizes(),
        mdp.action_sizes(),
        1,
        0.3,
        3,
    );
    let exact = oracle::exact_occupancy(&mdp, &policy, CAP).unwrap();
    let delta0: f64 = 0.01;
    let eps1 = ((4.0 + 2.0 * gamma.powi(2 * horizon as i32) * batch_size as f64
        - 16.0 * delta0.ln())
        / ((1.0 - gamma) * (1.0 - gamma) * batch_size as f64))
        .sqrt();
    let expected_mass = (1.0 - gamma.powi(horizon as i32)) / (1.0 - gamma);
    let mut ok_seeds = 0;
    let mut worst_mass: f64 = 0.0;
    let mut worst_err: f64 = 0.0;
    for seed in 0..100u64 {
        let batch = mdp.sample_batch(&policy, batch_size, horizon, seed);
        let mut seed_ok = true;
        for agent in 0..2 {
            let est = estimation::estimate_local_occupancy(&batch, &mdp, agent).unwrap();
            let mass: f64 = est.sum();
            worst_mass = worst_mass.max((mass - expected_mass).abs());
            // Mass identity on every call.
            assert!(
                (mass - expected_mass).abs() <= 1e-12,
                "seed {seed} agent {agent}: mass residual {:.3e}",
                (mass - expected_mass).abs()
            );
            let err = (&est - &exact.locals[agent]).iter().map(|v| v * v).sum::<f64>().sqrt();
            worst_err = worst_err.max(err);
            if err > eps1 {
                seed_ok = false;
            }
        }
        ok_seeds += usize::from(seed_ok);
    }
    let elapsed = started.elapsed();
    let pass = ok_seeds >= 99 && elapsed <= budget;
    report(
        4,
        "occupancy estimator",
        pass,
        elapsed,
        &format!(
            "{ok_seeds}/100 seeds within eps1 {eps1:.3} (worst error {worst_err:.3}), worst mass residual {worst_mass:.2e}"
        ),
    );
}

#[test]
fn criterion_5_td_estimator() {
    let started = Instant::now();
    let budget = Duration::from_secs(240);
    // Two-state single-action chain with closed-form Q (2x2 inverse).
    let gamma = 0.9;
    let (p, q) = (0.4, 0.5);
    let (r0, r1) = (0.15, 0.03);
    let graph = AgentGraph::line(1).unwrap();
    let mut kernel = Array2::zeros((2, 2));
    kernel[(0, 0)] = 1.0 - p;
    kernel[(0, 1)] = p;
    kernel[(1, 0)] = q;
    kernel[(1, 1)] = 1.0 - q;
    let mdp =
        FactoredMDP::new(graph, vec![2], vec![1], vec![kernel], vec![0.5, 0.5], gamma).unwrap();
    let a = 1.0 - gamma * (1.0 - p);
    let b = -gamma * p;
    let c = -gamma * q;
    let d = 1.0 - gamma * (1.0 - q);
    let det = a * d - b * c;
    let closed_form = [(d * r0 - b * r1) / det, (-c * r0 + a * r1) / det];

    let policy = LocalizedPolicy::zeros(mdp.graph(), mdp.state_sizes(), mdp.action_sizes(), 0);
    let mut reward = Array2::zeros((2, 1));
    reward[(0, 0)] = r0;
    reward[(1, 0)] = r1;
    let reward = ShadowReward { values: reward };
    let sup_err = |h_q: usize, seed: u64| -> f64 {
        let mut stream = rng::substream(seed, &[0x7d]);
        let (table, _) = estimation::td_truncated_q(
            &mdp,
            &policy,
            &reward,
            0,
            0,
            h_q,
            TdSchedule::default(),
            &mut stream,
        )
        .unwrap();
        (0..2)
            .map(|s| (table.values[(s, 0)] - closed_form[s]).abs())
            .fold(0.0f64, f64::max)
    };

    let worst_long = (0..5).map(|seed| sup_err(100_000, seed)).fold(0.0f64, f64::max);

    let median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(|x, y| x.partial_cmp(y).unwrap());
        v[v.len() / 2]
    };
    let m_small = median((0..20).map(|seed| sup_err(10_000, 100 + seed)).collect());
    let m_large = median((0..20).map(|seed| sup_err(40_000, 200 + seed)).collect());
    let ratio = m_small / m_large;

    let elapsed = started.elapsed();
    let pass = worst_long <= 0.05 && (1.6..=2.6).contains(&ratio) && elapsed <= budget;
    report(
        5,
        "TD estimator",
        pass,
        elapsed,
        &format!(
            "sup error {worst_long:.4} at H=1e5 (tol 0.05); quadrupling ratio {ratio:.3} (window [1.6, 2.6])"
        ),
    );
}

#[test]
fn criterion_6_exact_convergence() {
    let started = Instant::now();
    let budget = Duration::from_secs(300);
    let (mdp, policy, utilities) = linear_line_instance(0);
    let cfg = TrainConfig {
        iterations: 300,
        kappa: 1,
        q_estimator: QEstimatorKind::Exact,
        eta: EtaSchedule::Backtrack { start: 8.0, probe_steps: 5 },
        instrument: Instrumentation::On,
        seed: 0,
        ..TrainConfig::default()
    };
    let result = trainer::train(&mdp, &policy, &utilities, &cfg).unwrap();
    let min_gns = result
        .metrics
        .iter()
        .filter_map(|m| m.grad_norm_sq_exact)
        .fold(f64::INFINITY, f64::min);
    let fs: Vec<f64> = result
        .metrics
        .iter()
        .map(|m| m.f_exact.unwrap())
        .chain(result.final_f_exact)
        .collect();
    let nondecreasing =
        fs.windows(2).filter(|w| w[1] >= w[0]).count() as f64 / (fs.len() - 1) as f64;
    // Theorem-style bound at every prefix, with Delta measured as the worst
    // per-iteration squared gradient error.
    let mut prefix_ok = true;
    for t_prime in 1..=result.metrics.len() {
        let f_end = if t_prime < result.metrics.len() {
            result.metrics[t_prime].f_exact.unwrap()
        } else {
            result.final_f_exact.unwrap()
        };
        let rep = trainer::evaluate_stationarity(&result.metrics[..t_prime], f_end).unwrap();
        if rep.lhs > rep.rhs {
            prefix_ok = false;
        }
    }
    let elapsed = started.elapsed();
    let pass =
        min_gns <= 1e-4 && nondecreasing >= 0.9 && prefix_ok && elapsed <= budget;
    report(
        6,
        "end-to-end convergence, exact pipeline",
        pass,
        elapsed,
        &format!(
            "min ||grad F||^2 = {min_gns:.3e} (tol 1e-4), F non-decreasing {:.1}% (need 90%), prefix bound {}",
            100.0 * nondecreasing,
            if prefix_ok { "holds" } else { "VIOLATED" }
        ),
    );
}

#[test]
fn criterion_7_sampled_convergence() {
    let started = Instant::now();
    let budget = Duration::from_secs(900);
    let mut ok_seeds = 0;
    let mut worst_ratio: f64 = 0.0;
    for seed in 0..10u64 {
        let (mdp, policy, utilities) = entropy_ring_instance(0.9);
        let cfg = TrainConfig {
            iterations: 200,
            batch_size: 256,
            horizon: 100,
            td_horizon: 24_000,
            kappa: 1,
            q_estimator: QEstimatorKind::Td,
            eta: EtaSchedule::Fixed(8.0),
            seed,
            td_schedule: TdSchedule { h: 1280.0, k0: 12_800.0 },
            instrument: Instrumentation::On,
            ..TrainConfig::default()
        };
        let result = trainer::train(&mdp, &policy, &utilities, &cfg).unwrap();
        let f20 = result.metrics[20].f_exact.unwrap();
        let lhs20 = trainer::evaluate_stationarity(&result.metrics[..20], f20).unwrap().lhs;
        let lhs200 = trainer::evaluate_stationarity(
            &result.metrics,
            result.final_f_exact.unwrap(),
        )
        .unwrap()
        .lhs;
        let ratio = lhs200 / lhs20;
        worst_ratio = worst_ratio.max(ratio);
        if ratio <= 0.5 {
            ok_seeds += 1;
        }
    }
    let elapsed = started.elapsed();
    let pass = ok_seeds >= 8 && elapsed <= budget;
    report(
        7,
        "end-to-end convergence, sampled pipeline",
        pass,
        elapsed,
        &format!(
            "{ok_seeds}/10 seeds with stationarity ratio <= 0.5 (worst ratio {worst_ratio:.3})"
        ),
    );
}

#[test]
fn criterion_8_determinism() {
    let started = Instant::now();
    let config_text = r#"
[instance.graph]
kind = "ring"
size = 4

[instance.mdp]
kind = "spatial"
state_sizes = 2
action_sizes = 2
gamma = 0.9
interaction_strength = [1.0, 0.25]
seed = 5

[policy]
kappa = 1

[utilities.all]
kind = "entropy"
epsilon = 1e-6

[trainer]
iterations = 6
batch_size = 64
horizon = 12
td_horizon = 800
eta = 0.5
q_estimator = "td"
seed = 31
checkpoint_every = 3
"#;
    let cfg: localpg::config::ExperimentConfig = toml::from_str(config_text).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    let run_a =
        localpg::config::run_train(&cfg, config_text, tmp.path(), Some(&out_a)).unwrap();
    let run_b =
        localpg::config::run_train(&cfg, config_text, tmp.path(), Some(&out_b)).unwrap();
    let metrics_a = std::fs::read(run_a.run_dir.join("metrics.csv")).unwrap();
    let metrics_b = std::fs::read(run_b.run_dir.join("metrics.csv")).unwrap();
    let policy_a = std::fs::read(run_a.run_dir.join("policy_final.json")).unwrap();
    let policy_b = std::fs::read(run_b.run_dir.join("policy_final.json")).unwrap();
    let elapsed = started.elapsed();
    let pass = metrics_a == metrics_b && policy_a == policy_b && !metrics_a.is_empty();
    report(
        8,
        "determinism",
        pass,
        elapsed,
        &format!(
            "metrics log {} bytes, bitwise {}",
            metrics_a.len(),
            if metrics_a == metrics_b { "identical" } else { "DIFFERENT" }
        ),
    );
}
