//! Seeded random MDPs for testing solvers.

use rand::Rng;

use super::{assemble, BuildOptions, EdgeCount, Mdp, MdpMeta, State};
use crate::seeding::batch_rng;

#[derive(Clone, Debug, PartialEq)]
pub struct RandomMdpConfig {
    /// Upper bound on states, terminal states included.
    pub max_states: usize,
    pub max_actions: usize,
    /// Upper bound on successors per `(state, action)` group.
    pub max_branching: usize,
    /// Edge rewards are drawn uniformly from this integer range.
    pub reward_range: (i32, i32),
}

impl Default for RandomMdpConfig {
    fn default() -> Self {
        RandomMdpConfig { max_states: 20, max_actions: 5, max_branching: 3, reward_range: (-2, 10) }
    }
}

fn label(i: usize) -> String {
    format!("s{i:02}")
}

/// Random layered MDP: every edge goes from a state to one with a larger
/// index, so every policy terminates. States `s00` (initial) through the
/// last non-terminal state all have at least one action.
pub fn random_mdp(seed: u64, config: &RandomMdpConfig) -> Mdp {
    let mut rng = batch_rng(seed, 0);
    let n = rng.random_range(4..=config.max_states.max(4));
    let n_terminal = rng.random_range(1..=(n / 4).max(1));
    let n_live = n - n_terminal;
    let states: Vec<State> = (0..n)
        .map(|i| State { last_activity: label(i), history: vec![], env: vec![], terminal: i >= n_live })
        .collect();
    let mut edges = Vec::new();
    for i in 0..n_live {
        let k = rng.random_range(1..=config.max_actions.max(1));
        let mut actions: Vec<usize> = (0..config.max_actions.max(1)).collect();
        for j in 0..k {
            let pick = rng.random_range(j..actions.len());
            actions.swap(j, pick);
        }
        for &a in &actions[..k] {
            let branches = rng.random_range(1..=config.max_branching.max(1));
            for _ in 0..branches {
                let dst = rng.random_range(i + 1..n);
                let reward = rng.random_range(config.reward_range.0..=config.reward_range.1) as f64;
                edges.push(EdgeCount {
                    src: states[i].clone(),
                    action: format!("a{a}"),
                    dst: states[dst].clone(),
                    count: rng.random_range(1..=20),
                    successes: 0,
                    plain_reward: reward,
                    attenuated_reward: 0.0,
                });
            }
        }
    }
    let meta = MdpMeta {
        scenario_id: format!("random-{seed}"),
        history_names: vec![],
        env_names: vec![],
        lambda: None,
        gamma: 1.0,
        longest_trace: n_live,
    };
    let mdp = assemble(meta, edges, vec![(states[0].clone(), 1)], BuildOptions::default())
        .expect("random MDPs are well formed");
    prune_unreachable(mdp)
}

/// Drops states not reachable from the initial distribution.
fn prune_unreachable(mdp: Mdp) -> Mdp {
    let mut seen = vec![false; mdp.states().len()];
    let mut stack: Vec<_> = mdp.initial().iter().map(|i| i.state).collect();
    while let Some(s) = stack.pop() {
        if std::mem::replace(&mut seen[s.0], true) {
            continue;
        }
        for g in mdp.groups_at(s) {
            stack.extend(mdp.group_edges(g).iter().map(|e| e.dst));
        }
    }
    if seen.iter().all(|&b| b) {
        return mdp;
    }
    let body = mdp.body();
    let edges = body
        .edges
        .iter()
        .filter(|e| seen[e.src.0])
        .map(|e| EdgeCount {
            src: mdp.state(e.src).clone(),
            action: mdp.action(e.action).to_string(),
            dst: mdp.state(e.dst).clone(),
            count: e.count,
            successes: e.successes,
            plain_reward: e.plain_reward,
            attenuated_reward: e.attenuated_reward,
        })
        .collect();
    let initial = body.initial.iter().map(|i| (mdp.state(i.state).clone(), i.count)).collect();
    let meta = MdpMeta {
        scenario_id: body.scenario_id.clone(),
        history_names: vec![],
        env_names: vec![],
        lambda: None,
        gamma: body.gamma,
        longest_trace: body.longest_trace,
    };
    assemble(meta, edges, initial, BuildOptions::default()).expect("pruning keeps the MDP well formed")
}
