//! Shared desk-scale instance generators for integration tests.
#![allow(dead_code)]

use localpg::graph::AgentGraph;
use localpg::mdp::FactoredMDP;
use localpg::policy::LocalizedPolicy;
use localpg::rng;
use localpg::utility::LocalUtility;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct TestInstance {
    pub mdp: FactoredMDP,
    pub policy: LocalizedPolicy,
    pub utilities: Vec<LocalUtility>,
    pub kappa: usize,
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, options: &[T]) -> T {
    options[rng.gen_range(0..options.len())]
}

pub fn random_occupancy_like(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    gamma: f64,
) -> Array2<f64> {
    let mut table = Array2::zeros((rows, cols));
    let mut sum = 0.0;
    for v in table.iter_mut() {
        *v = rng.gen::<f64>();
        sum += *v;
    }
    let scale = 1.0 / ((1.0 - gamma) * sum);
    table.mapv_inplace(|v| v * scale);
    table
}

pub fn random_utility(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gamma: f64) -> LocalUtility {
    match rng.gen_range(0..3u32) {
        0 => {
            let mut rewards = Array2::zeros((rows, cols));
            for v in rewards.iter_mut() {
                *v = rng.gen::<f64>();
            }
            LocalUtility::Linear { rewards }
        }
        1 => LocalUtility::entropy(1e-6).unwrap(),
        _ => LocalUtility::Distance { target: random_occupancy_like(rng, rows, cols, gamma) },
    }
}

/// A small random instance: 2-4 agents on a line or ring, local sizes in
/// {2, 3}, gamma in {0.8, 0.9, 0.95}, one-hop spatial coupling, random
/// policy logits and a random utility kind per agent.
pub fn random_instance(seed: u64) -> TestInstance {
    let mut r = rng::substream(seed, &[0x7e57]);
    let n = pick(&mut r, &[2usize, 2, 3, 3, 4]);
    let graph = if n >= 3 && r.gen::<bool>() {
        AgentGraph::ring(n).unwrap()
    } else {
        AgentGraph::line(n).unwrap()
    };
    // Keep the global space small when there are many agents.
    let size_options: &[usize] = if n >= 4 { &[2] } else { &[2, 3] };
    let state_sizes: Vec<usize> = (0..n).map(|_| pick(&mut r, size_options)).collect();
    let action_sizes: Vec<usize> = (0..n).map(|_| pick(&mut r, size_options)).collect();
    let gamma = pick(&mut r, &[0.8, 0.9, 0.95]);
    let hop = 0.1 + 0.2 * r.gen::<f64>();
    let mut mdp = FactoredMDP::make_spatial(
        graph,
        state_sizes.clone(),
        action_sizes.clone(),
        &[1.0, hop],
        seed ^ 0x51ab,
    )
    .unwrap();
    mdp.set_gamma(gamma).unwrap();
    let diameter = mdp.graph().diameter().unwrap();
    let kappa = r.gen_range(0..=diameter);
    let policy = LocalizedPolicy::random(
        mdp.graph(),
        &state_sizes,
        &action_sizes,
        kappa,
        0.5,
        seed ^ 0x90c4,
    );
    let utilities: Vec<LocalUtility> = (0..n)
        .map(|i| random_utility(&mut r, state_sizes[i], action_sizes[i], gamma))
        .collect();
    TestInstance { mdp, policy, utilities, kappa }
}

/// Two-agent line with one-hop coupling and random linear utilities: the
/// reference instance for exact-pipeline convergence runs.
pub fn linear_line_instance(seed: u64) -> (FactoredMDP, LocalizedPolicy, Vec<LocalUtility>) {
    let mut mdp = FactoredMDP::make_spatial(
        AgentGraph::line(2).unwrap(),
        vec![2, 2],
        vec![2, 2],
        &[1.0, 0.2],
        seed,
    )
    .unwrap();
    mdp.set_gamma(0.8).unwrap();
    let policy = LocalizedPolicy::zeros(mdp.graph(), mdp.state_sizes(), mdp.action_sizes(), 1);
    let mut r = rng::substream(seed, &[0x6d]);
    let utilities: Vec<LocalUtility> = (0..2)
        .map(|_| {
            let mut rewards = Array2::zeros((2, 2));
            for v in rewards.iter_mut() {
                *v = r.gen::<f64>();
            }
            LocalUtility::Linear { rewards }
        })
        .collect();
    (mdp, policy, utilities)
}

/// Four-agent ring with entropy utilities where the uniform policy is
/// clearly suboptimal: action 0 pulls the local state hard toward 0, action
/// 1 pulls it weakly toward 1, so equalizing the state distribution requires
/// a biased policy. A small mixture weight copies each neighbor's state,
/// giving one-hop coupling.
pub fn entropy_ring_instance(gamma: f64) -> (FactoredMDP, LocalizedPolicy, Vec<LocalUtility>) {
    let graph = AgentGraph::ring(4).unwrap();
    let n = 4;
    let own_w = 0.94;
    let nbr_w = 0.03; // per neighbor
    let pairs = 16 * 16;
    let state_idx = localpg::indexer::MixedRadix::new(&[2; 4]);
    let action_idx = localpg::indexer::MixedRadix::new(&[2; 4]);
    let mut kernels = Vec::with_capacity(n);
    let mut s_buf = vec![0usize; n];
    let mut a_buf = vec![0usize; n];
    for i in 0..n {
        let left = (i + n - 1) % n;
        let right = (i + 1) % n;
        let mut kernel = Array2::zeros((pairs, 2));
        for s in 0..16 {
            state_idx.decode_into(s, &mut s_buf);
            for a in 0..16 {
                action_idx.decode_into(a, &mut a_buf);
                let pair = s * 16 + a;
                // Own action: a = 0 pulls to state 0 strongly, a = 1 pulls to
                // state 1 weakly.
                let own_p1 = if a_buf[i] == 0 { 0.03 } else { 0.58 };
                // Neighbor components copy the neighbor's state most of the time.
                let left_p1 = if s_buf[left] == 1 { 0.8 } else { 0.2 };
                let right_p1 = if s_buf[right] == 1 { 0.8 } else { 0.2 };
                let p1 = own_w * own_p1 + nbr_w * left_p1 + nbr_w * right_p1;
                kernel[(pair, 0)] = 1.0 - p1;
                kernel[(pair, 1)] = p1;
            }
        }
        kernels.push(kernel);
    }
    let xi = vec![1.0 / 16.0; 16];
    let mut mdp = FactoredMDP::new(graph, vec![2; 4], vec![2; 4], kernels, xi, gamma).unwrap();
    mdp.set_gamma(gamma).unwrap();
    let policy = LocalizedPolicy::zeros(mdp.graph(), mdp.state_sizes(), mdp.action_sizes(), 1);
    let utilities: Vec<LocalUtility> =
        (0..n).map(|_| LocalUtility::entropy(1e-6).unwrap()).collect();
    (mdp, policy, utilities)
}

/// Instance family with pronounced geometric influence decay, suitable for
/// decay certification: line graphs, nearest-neighbor coupling with strength
/// ratio around 0.15-0.25, gamma in {0.8, 0.9}. Influence beyond one hop
/// arises only through temporal propagation, so measured decay is cleanly
/// geometric in the radius.
pub fn decaying_instance(seed: u64) -> TestInstance {
    let mut r = rng::substream(seed, &[0xdeca]);
    let n = pick(&mut r, &[3usize, 4, 5]);
    let graph = AgentGraph::line(n).unwrap();
    let state_sizes = vec![2usize; n];
    let action_sizes = vec![2usize; n];
    let gamma = pick(&mut r, &[0.8, 0.9]);
    let q = 0.15 + 0.1 * r.gen::<f64>();
    let strengths = [1.0, q];
    let mut mdp = FactoredMDP::make_spatial(
        graph,
        state_sizes.clone(),
        action_sizes.clone(),
        &strengths,
        seed ^ 0x33d1,
    )
    .unwrap();
    mdp.set_gamma(gamma).unwrap();
    // Radius-0 policy: it belongs to every kappa-localized class, so the
    // decay bounds apply at every radius in a sweep.
    let policy = LocalizedPolicy::random(
        mdp.graph(),
        &state_sizes,
        &action_sizes,
        0,
        0.4,
        seed ^ 0x1fe2,
    );
    let mut rewards_util = Vec::with_capacity(n);
    for i in 0..n {
        let mut rewards = Array2::zeros((state_sizes[i], action_sizes[i]));
        for v in rewards.iter_mut() {
            *v = r.gen::<f64>();
        }
        rewards_util.push(LocalUtility::Linear { rewards });
    }
    TestInstance { mdp, policy, utilities: rewards_util, kappa: 0 }
}
