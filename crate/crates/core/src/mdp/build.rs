use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{reliability_coefficient, replay, ActionId, Edge, InitialState, Mdp, MdpBody, MdpError, State, StateId};
use crate::eventlog::AnnotatedLog;
use crate::scenarios::ScenarioSpec;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    /// Weight attenuated rewards by the reliability coefficient of the edge
    /// count. Without it the full reward is used.
    pub apply_reliability: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { apply_reliability: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildReport {
    pub traces: usize,
    /// Traces without any agent event.
    pub skipped: usize,
    pub decision_steps: usize,
}

/// Aggregated observations of one `(src, action, dst)` edge.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeCount {
    pub src: State,
    pub action: String,
    pub dst: State,
    pub count: u64,
    pub successes: u64,
    pub plain_reward: f64,
    pub attenuated_reward: f64,
}

/// Scenario-level fields of an MDP.
#[derive(Clone, Debug, PartialEq)]
pub struct MdpMeta {
    pub scenario_id: String,
    pub history_names: Vec<String>,
    pub env_names: Vec<String>,
    pub lambda: Option<f64>,
    pub gamma: f64,
    pub longest_trace: usize,
}

impl MdpMeta {
    pub fn of(spec: &ScenarioSpec) -> MdpMeta {
        MdpMeta {
            scenario_id: spec.scenario_id.clone(),
            history_names: spec.history_names(),
            env_names: spec.env_names(),
            lambda: spec.reliability_lambda,
            gamma: spec.gamma,
            longest_trace: 0,
        }
    }
}

pub fn build_mdp(log: &AnnotatedLog, spec: &ScenarioSpec) -> Result<Mdp, MdpError> {
    build_mdp_with(log, spec, BuildOptions::default()).map(|(mdp, _)| mdp)
}

#[derive(Default)]
struct Acc {
    count: u64,
    successes: u64,
    plain: Vec<f64>,
    attenuated: Vec<f64>,
}

fn sorted_sum(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.into_iter().sum()
}

/// Replays every trace of `log` and aggregates the decision steps.
pub fn build_mdp_with(
    log: &AnnotatedLog,
    spec: &ScenarioSpec,
    options: BuildOptions,
) -> Result<(Mdp, BuildReport), MdpError> {
    if log.traces.is_empty() {
        return Err(MdpError::EmptyLog);
    }
    if log.scenario_id != spec.scenario_id {
        return Err(MdpError::ScenarioMismatch { log: log.scenario_id.clone(), spec: spec.scenario_id.clone() });
    }
    let replays = log.traces.par_iter().map(|t| replay(t, spec)).collect::<Result<Vec<_>, _>>()?;

    let mut report = BuildReport { traces: log.traces.len(), ..BuildReport::default() };
    let mut acc: BTreeMap<(State, String, State), Acc> = BTreeMap::new();
    let mut initial: BTreeMap<State, u64> = BTreeMap::new();
    let mut meta = MdpMeta::of(spec);
    for r in replays.into_iter() {
        let Some(r) = r else {
            report.skipped += 1;
            continue;
        };
        report.decision_steps += r.steps.len();
        meta.longest_trace = meta.longest_trace.max(r.steps.len());
        *initial.entry(r.initial).or_default() += 1;
        for s in r.steps {
            let a = acc.entry((s.src, s.action, s.dst)).or_default();
            a.count += 1;
            a.successes += s.success as u64;
            a.plain.push(s.reward.plain);
            a.attenuated.push(s.reward.attenuated);
        }
    }
    if report.skipped > 0 {
        log::warn!("{} of {} traces have no agent events and were skipped", report.skipped, report.traces);
    }
    if acc.is_empty() {
        return Err(MdpError::EmptyLog);
    }
    let edges = acc
        .into_iter()
        .map(|((src, action, dst), a)| {
            let n = a.count as f64;
            EdgeCount {
                src,
                action,
                dst,
                count: a.count,
                successes: a.successes,
                plain_reward: sorted_sum(a.plain) / n,
                attenuated_reward: sorted_sum(a.attenuated) / n,
            }
        })
        .collect();
    let mdp = assemble(meta, edges, initial.into_iter().collect(), options)?;
    Ok((mdp, report))
}

/// Builds an MDP from aggregated edges and initial-state counts. Edges
/// sharing a key are merged with count-weighted rewards.
pub fn assemble(
    meta: MdpMeta,
    edges: Vec<EdgeCount>,
    initial: Vec<(State, u64)>,
    options: BuildOptions,
) -> Result<Mdp, MdpError> {
    let mut merged: BTreeMap<(State, String, State), EdgeCount> = BTreeMap::new();
    for e in edges {
        if e.count == 0 {
            continue;
        }
        match merged.entry((e.src.clone(), e.action.clone(), e.dst.clone())) {
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(e);
            }
            std::collections::btree_map::Entry::Occupied(mut o) => {
                let m = o.get_mut();
                let (n0, n1) = (m.count as f64, e.count as f64);
                m.plain_reward = (m.plain_reward * n0 + e.plain_reward * n1) / (n0 + n1);
                m.attenuated_reward = (m.attenuated_reward * n0 + e.attenuated_reward * n1) / (n0 + n1);
                m.count += e.count;
                m.successes += e.successes;
            }
        }
    }
    let mut initial_counts: BTreeMap<State, u64> = BTreeMap::new();
    for (s, n) in initial {
        if n > 0 {
            *initial_counts.entry(s).or_default() += n;
        }
    }

    let mut states: BTreeSet<State> = initial_counts.keys().cloned().collect();
    let mut actions: BTreeSet<String> = BTreeSet::new();
    for (src, action, dst) in merged.keys() {
        states.insert(src.clone());
        states.insert(dst.clone());
        actions.insert(action.clone());
    }
    let states: Vec<State> = states.into_iter().collect();
    let actions: Vec<String> = actions.into_iter().collect();
    let sid = |s: &State| StateId(states.binary_search(s).expect("state collected"));
    let aid = |a: &str| ActionId(actions.binary_search_by(|x| x.as_str().cmp(a)).expect("action collected"));

    let mut group_totals: BTreeMap<(StateId, ActionId), u64> = BTreeMap::new();
    for e in merged.values() {
        *group_totals.entry((sid(&e.src), aid(&e.action))).or_default() += e.count;
    }
    let mut out = Vec::with_capacity(merged.len());
    for e in merged.into_values() {
        let (src, action, dst) = (sid(&e.src), aid(&e.action), sid(&e.dst));
        let total = group_totals[&(src, action)];
        let c = match (options.apply_reliability, meta.lambda) {
            (true, Some(lambda)) => reliability_coefficient(e.count, lambda)?,
            _ => 1.0,
        };
        out.push(Edge {
            src,
            action,
            dst,
            count: e.count,
            successes: e.successes,
            prob: e.count as f64 / total as f64,
            plain_reward: e.plain_reward,
            attenuated_reward: e.attenuated_reward,
            reward: e.plain_reward + c * e.attenuated_reward,
        });
    }
    out.sort_by_key(|e| (e.src, e.action, e.dst));
    let total_initial: u64 = initial_counts.values().sum();
    let initial = initial_counts
        .iter()
        .map(|(s, &count)| InitialState { state: sid(s), count, prob: count as f64 / total_initial as f64 })
        .collect();
    let body = MdpBody {
        scenario_id: meta.scenario_id,
        history_names: meta.history_names,
        env_names: meta.env_names,
        lambda: meta.lambda,
        gamma: meta.gamma,
        longest_trace: meta.longest_trace,
        states,
        actions,
        edges: out,
        initial,
    };
    Mdp::from_body(body)
}
