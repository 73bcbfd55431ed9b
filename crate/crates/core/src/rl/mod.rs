//! Policies over a compiled MDP: Monte Carlo policy iteration with
//! exploring starts, the Random and Customary baselines, and an exact
//! dynamic-programming solver.

pub mod exact;
mod io;
mod policy;

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{load_policy, save_policy, PolicyArtifact, QEntry, TrainingSummary, POLICY_FORMAT_VERSION};
pub use policy::{customary_group, customary_policy, random_policy, Choice, Policy, PolicyKind, ResolvedPolicy};

use crate::artifact::ArtifactError;
use crate::mdp::{GroupId, Mdp, StateId};
use crate::seeding::{batch_rng, batches, mix};

#[derive(Debug, Error)]
pub enum RlError {
    #[error("state {0} is not terminal but has no outgoing edges")]
    DeadEnd(String),
    #[error("policy is improper: it does not reach a terminal state from {0}")]
    Improper(String),
    #[error("policy for `{policy}` cannot be used with the `{mdp}` MDP")]
    Incompatible { policy: String, mdp: String },
    #[error("Q table does not match the MDP: {0}")]
    QMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Start {
    /// Draw from the MDP's initial distribution.
    Initial,
    State(StateId),
    /// Take the group's action first, then follow the policy.
    StateAction(GroupId),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub state: StateId,
    pub group: GroupId,
    /// Index of the traversed edge in [`Mdp::edges`].
    pub edge: usize,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub steps: Vec<Step>,
    pub total_return: f64,
    /// Ended at `max_len` rather than at a terminal state.
    pub truncated: bool,
}

/// Index drawn with probability proportional to `weights`.
pub(crate) fn draw_weighted(rng: &mut ChaCha8Rng, weights: impl Iterator<Item = u64> + Clone) -> usize {
    let total: u64 = weights.clone().sum();
    let mut u = rng.random_range(0..total);
    for (i, w) in weights.enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    unreachable!("draw below total weight")
}

pub(crate) fn draw_initial(mdp: &Mdp, rng: &mut ChaCha8Rng) -> StateId {
    let init = mdp.initial();
    init[draw_weighted(rng, init.iter().map(|i| i.count))].state
}

pub(crate) fn draw_edge(mdp: &Mdp, group: GroupId, rng: &mut ChaCha8Rng) -> usize {
    let g = mdp.group(group);
    g.edges.start + draw_weighted(rng, mdp.group_edges(group).iter().map(|e| e.count))
}

/// Group the policy takes at `state`, `None` at terminal states.
pub(crate) fn act(
    mdp: &Mdp,
    policy: &ResolvedPolicy,
    state: StateId,
    rng: &mut ChaCha8Rng,
) -> Result<Option<GroupId>, RlError> {
    match policy.choice.get(state.0).copied().unwrap_or(Choice::Stop) {
        Choice::Fixed(g) => Ok(Some(g)),
        Choice::Uniform => {
            let groups = mdp.groups_at(state);
            let n = groups.len();
            let mut groups = groups;
            Ok(groups.nth(rng.random_range(0..n)))
        }
        Choice::Stop if mdp.state(state).terminal => Ok(None),
        Choice::Stop => Err(RlError::DeadEnd(mdp.state(state).to_string())),
    }
}

pub fn sample_episode(
    mdp: &Mdp,
    policy: &ResolvedPolicy,
    rng: &mut ChaCha8Rng,
    start: Start,
    max_len: usize,
) -> Result<Episode, RlError> {
    let gamma = mdp.gamma();
    let mut steps = Vec::new();
    let mut total = 0.0;
    let mut discount = 1.0;
    let (mut state, mut forced) = match start {
        Start::Initial => (draw_initial(mdp, rng), None),
        Start::State(s) => (s, None),
        Start::StateAction(g) => (mdp.group(g).state, Some(g)),
    };
    loop {
        if mdp.state(state).terminal {
            return Ok(Episode { steps, total_return: total, truncated: false });
        }
        if steps.len() >= max_len {
            return Ok(Episode { steps, total_return: total, truncated: true });
        }
        let group = match forced.take() {
            Some(g) => g,
            None => match act(mdp, policy, state, rng)? {
                Some(g) => g,
                None => return Ok(Episode { steps, total_return: total, truncated: false }),
            },
        };
        let edge = draw_edge(mdp, group, rng);
        let e = &mdp.edges()[edge];
        total += discount * e.reward;
        discount *= gamma;
        steps.push(Step { state, group, edge, reward: e.reward });
        state = e.dst;
        if !mdp.state(state).terminal && !mdp.is_decision_state(state) {
            return Err(RlError::DeadEnd(mdp.state(state).to_string()));
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisitMode {
    #[default]
    FirstVisit,
    EveryVisit,
}

/// Monte Carlo estimates of `Q(s, a)`, indexed by group.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    values: Vec<f64>,
    visits: Vec<u64>,
}

impl QTable {
    /// Table with every pair unestimated.
    pub fn new(groups: usize) -> QTable {
        QTable { values: vec![0.0; groups], visits: vec![0; groups] }
    }

    /// Means of accumulated returns.
    pub fn from_sums(sums: &[f64], visits: Vec<u64>) -> QTable {
        let values = sums.iter().zip(&visits).map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 }).collect();
        QTable { values, visits }
    }

    pub(crate) fn from_parts(values: Vec<f64>, visits: Vec<u64>) -> QTable {
        QTable { values, visits }
    }

    pub fn len(&self) -> usize {
        self.visits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }

    /// Mean sampled return, `None` when the pair was never visited.
    pub fn value(&self, g: GroupId) -> Option<f64> {
        (self.visits[g.0] > 0).then(|| self.values[g.0])
    }

    pub fn visits(&self, g: GroupId) -> u64 {
        self.visits[g.0]
    }

    /// Mean of all estimated values.
    pub fn mean_value(&self) -> Option<f64> {
        let vals: Vec<f64> = (0..self.len()).filter_map(|g| self.value(GroupId(g))).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn estimated(&self) -> usize {
        self.visits.iter().filter(|&&v| v > 0).count()
    }
}

/// Default episode cap: twice the longest replayed trace.
pub fn default_max_len(mdp: &Mdp) -> usize {
    (2 * mdp.longest_trace()).max(1)
}

/// Exploring-starts Monte Carlo evaluation of `policy`. Each episode starts
/// at a uniformly drawn `(state, action)` group.
pub fn mc_policy_evaluation(
    mdp: &Mdp,
    policy: &ResolvedPolicy,
    n_episodes: usize,
    seed: u64,
    mode: VisitMode,
    max_len: usize,
) -> Result<QTable, RlError> {
    let n_groups = mdp.groups().len();
    let partials = batches(n_episodes)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(b, size)| {
            let mut rng = batch_rng(seed, b);
            let mut sums = vec![0.0; n_groups];
            let mut visits = vec![0u64; n_groups];
            let mut seen = vec![false; n_groups];
            let mut returns = Vec::new();
            for _ in 0..size {
                let start = GroupId(rng.random_range(0..n_groups));
                let ep = sample_episode(mdp, policy, &mut rng, Start::StateAction(start), max_len)?;
                returns.clear();
                returns.resize(ep.steps.len(), 0.0);
                let mut g = 0.0;
                for (t, step) in ep.steps.iter().enumerate().rev() {
                    g = step.reward + mdp.gamma() * g;
                    returns[t] = g;
                }
                for (t, step) in ep.steps.iter().enumerate() {
                    if mode == VisitMode::FirstVisit {
                        if seen[step.group.0] {
                            continue;
                        }
                        seen[step.group.0] = true;
                    }
                    sums[step.group.0] += returns[t];
                    visits[step.group.0] += 1;
                }
                for step in &ep.steps {
                    seen[step.group.0] = false;
                }
            }
            Ok((sums, visits))
        })
        .collect::<Result<Vec<_>, RlError>>()?;
    let mut sums = vec![0.0; n_groups];
    let mut visits = vec![0u64; n_groups];
    for (s, v) in &partials {
        for g in 0..n_groups {
            sums[g] += s[g];
            visits[g] += v[g];
        }
    }
    Ok(QTable::from_sums(&sums, visits))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Improvement {
    pub groups: Vec<Option<GroupId>>,
    /// Decision states with no estimated action.
    pub fallbacks: usize,
}

/// Greedy policy w.r.t. `q`. Unestimated actions never win; ties go to the
/// smallest action label. States with nothing estimated keep `previous`, or
/// take the customary action.
pub fn policy_improvement(q: &QTable, mdp: &Mdp, previous: Option<&[Option<GroupId>]>) -> Improvement {
    let mut fallbacks = 0;
    let groups = (0..mdp.states().len())
        .map(|s| {
            let id = StateId(s);
            if !mdp.is_decision_state(id) {
                return None;
            }
            let mut best: Option<(GroupId, f64)> = None;
            for g in mdp.groups_at(id) {
                if let Some(v) = q.value(g) {
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((g, v));
                    }
                }
            }
            match best {
                Some((g, _)) => Some(g),
                None => {
                    fallbacks += 1;
                    previous.and_then(|p| p[s]).or_else(|| customary_group(mdp, id))
                }
            }
        })
        .collect();
    Improvement { groups, fallbacks }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyIterationConfig {
    pub episodes_per_eval: usize,
    pub max_iters: usize,
    pub seed: u64,
    #[serde(default)]
    pub mode: VisitMode,
    /// Episode cap; twice the longest training trace when absent.
    #[serde(default)]
    pub max_len: Option<usize>,
}

impl Default for PolicyIterationConfig {
    fn default() -> Self {
        PolicyIterationConfig {
            episodes_per_eval: 20_000,
            max_iters: 30,
            seed: 0,
            mode: VisitMode::FirstVisit,
            max_len: None,
        }
    }
}

/// Diagnostics of one evaluation/improvement round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub changed: usize,
    pub mean_q: Option<f64>,
    /// Estimated value of the evaluated policy at the initial distribution.
    pub estimated_value: Option<f64>,
    pub fallbacks: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Training {
    pub policy: Policy,
    pub q: QTable,
    pub iterations: Vec<IterationRecord>,
    /// Policy evaluated in each iteration, as group choices per state.
    pub history: Vec<Vec<Option<GroupId>>>,
    pub converged: bool,
}

fn estimated_value(mdp: &Mdp, q: &QTable, groups: &[Option<GroupId>]) -> Option<f64> {
    mdp.initial().iter().map(|i| groups[i.state.0].and_then(|g| q.value(g)).map(|v| i.prob * v)).sum()
}

/// Alternates Monte Carlo evaluation and greedy improvement, starting from
/// the customary policy, until no action changes or `max_iters` rounds ran.
/// Without convergence the evaluated policy with the best estimated value
/// is returned.
pub fn policy_iteration(mdp: &Mdp, config: &PolicyIterationConfig) -> Result<Training, RlError> {
    if config.episodes_per_eval == 0 || config.max_iters == 0 {
        return Err(RlError::Config("episodes_per_eval and max_iters must be positive".into()));
    }
    let max_len = config.max_len.unwrap_or_else(|| default_max_len(mdp));
    let mut current: Vec<Option<GroupId>> = (0..mdp.states().len()).map(|s| customary_group(mdp, StateId(s))).collect();
    let mut iterations = Vec::new();
    let mut history = Vec::new();
    let mut best: Option<(f64, Vec<Option<GroupId>>, QTable)> = None;
    for it in 0..config.max_iters {
        let resolved = ResolvedPolicy::fixed(&current);
        let q = mc_policy_evaluation(
            mdp,
            &resolved,
            config.episodes_per_eval,
            mix(config.seed, it as u64),
            config.mode,
            max_len,
        )?;
        let value = estimated_value(mdp, &q, &current);
        let improved = policy_improvement(&q, mdp, Some(&current));
        let changed = improved.groups.iter().zip(&current).filter(|(a, b)| a != b).count();
        iterations.push(IterationRecord {
            iteration: it,
            changed,
            mean_q: q.mean_value(),
            estimated_value: value,
            fallbacks: improved.fallbacks,
        });
        log::debug!("policy iteration {it}: {changed} changed actions");
        history.push(current.clone());
        if changed == 0 {
            return Ok(Training {
                policy: Policy::from_groups(PolicyKind::Optimal, mdp, &current),
                q,
                iterations,
                history,
                converged: true,
            });
        }
        let v = value.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
            best = Some((v, current.clone(), q));
        }
        current = improved.groups;
    }
    log::warn!("policy iteration did not converge in {} iterations", config.max_iters);
    let (_, groups, q) = best.expect("at least one iteration ran");
    Ok(Training {
        policy: Policy::from_groups(PolicyKind::Optimal, mdp, &groups),
        q,
        iterations,
        history,
        converged: false,
    })
}

/// Writes iteration diagnostics as JSON lines.
pub fn write_diagnostics<W: Write>(records: &[IterationRecord], mut sink: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut sink, r)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()
}
