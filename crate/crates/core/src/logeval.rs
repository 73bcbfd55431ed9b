//! Evaluation against a held-out log: which test traces already follow the
//! policy (RQ1), and how much better a trace would have done had it followed
//! the policy after each of its prefixes (RQ2).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eventlog::{AnnotatedLog, AnnotatedTrace};
use crate::mdp::{replay, Mdp};
use crate::rl::{Choice, Policy, ResolvedPolicy};
use crate::scenarios::{ScenarioError, ScenarioSpec};

#[derive(Debug, Error)]
pub enum LogEvalError {
    #[error("test log is empty")]
    EmptyLog,
    #[error("scenario mismatch: log `{log}`, policy `{policy}`, MDP `{mdp}`")]
    ScenarioMismatch { log: String, policy: String, mdp: String },
    #[error("max_prefix must be at least 1")]
    MaxPrefix,
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adherence {
    Follows,
    Deviates,
    /// A decision point maps to a state the MDP does not know.
    Unreplayable,
}

/// Position of the last decision point (event index) at which `trace`
/// leaves the policy, together with whether that was an unknown state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LastBreak {
    event_index: usize,
    unknown: bool,
}

fn last_break(trace: &AnnotatedTrace, policy: &ResolvedPolicy, mdp: &Mdp, spec: &ScenarioSpec) -> Option<LastBreak> {
    let replay = match replay(trace, spec) {
        Ok(Some(r)) => r,
        Ok(None) => return None,
        Err(_) => return Some(LastBreak { event_index: trace.events.len(), unknown: true }),
    };
    let mut last = None;
    for step in &replay.steps {
        let Some(s) = mdp.state_id(&step.src) else {
            last = Some(LastBreak { event_index: step.event_index, unknown: true });
            continue;
        };
        let follows = match policy.choice.get(s.0) {
            Some(Choice::Fixed(g)) => mdp.action(mdp.group(*g).action) == step.action,
            Some(Choice::Uniform) => mdp.action_id(&step.action).and_then(|a| mdp.group_for(s, a)).is_some(),
            _ => false,
        };
        if !follows {
            last = Some(LastBreak { event_index: step.event_index, unknown: false });
        }
    }
    last
}

fn adherence_from(last: Option<LastBreak>, from_step: usize) -> Adherence {
    match last {
        Some(b) if b.event_index >= from_step => {
            if b.unknown {
                Adherence::Unreplayable
            } else {
                Adherence::Deviates
            }
        }
        _ => Adherence::Follows,
    }
}

/// Whether every decision of `trace` at event index `from_step` or later
/// matches the policy. Traces without decisions follow vacuously.
pub fn follows_policy(
    trace: &AnnotatedTrace,
    policy: &Policy,
    mdp: &Mdp,
    spec: &ScenarioSpec,
    from_step: usize,
) -> Adherence {
    adherence_from(last_break(trace, &policy.resolve(mdp), mdp, spec), from_step)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Partition {
    All,
    OptimalP,
    NonOptimalP,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rq1Row {
    pub partition: Partition,
    pub trace_count: usize,
    pub fraction: f64,
    /// `None` for an empty partition.
    pub avg_kpi: Option<f64>,
    pub outcome_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rq1Report {
    pub rows: Vec<Rq1Row>,
    /// Traces counted as non-following because they left the MDP.
    pub unreplayable: usize,
}

impl Rq1Report {
    pub fn row(&self, partition: Partition) -> &Rq1Row {
        self.rows.iter().find(|r| r.partition == partition).expect("all partitions present")
    }
}

fn check(log: &AnnotatedLog, policy: &Policy, mdp: &Mdp) -> Result<(), LogEvalError> {
    if log.scenario_id != policy.scenario_id || log.scenario_id != mdp.scenario_id() {
        return Err(LogEvalError::ScenarioMismatch {
            log: log.scenario_id.clone(),
            policy: policy.scenario_id.clone(),
            mdp: mdp.scenario_id().to_string(),
        });
    }
    Ok(())
}

struct TraceEval {
    kpi: f64,
    success: bool,
    last: Option<LastBreak>,
}

fn evaluate_traces(
    log: &AnnotatedLog,
    policy: &Policy,
    mdp: &Mdp,
    spec: &ScenarioSpec,
) -> Result<Vec<TraceEval>, LogEvalError> {
    let resolved = policy.resolve(mdp);
    log.traces
        .par_iter()
        .map(|t| {
            Ok(TraceEval { kpi: spec.kpi(t)?, success: spec.is_success(t), last: last_break(t, &resolved, mdp, spec) })
        })
        .collect()
}

fn row(partition: Partition, members: &[&TraceEval], total: usize) -> Rq1Row {
    let n = members.len();
    let kpi: f64 = members.iter().map(|t| t.kpi).sum();
    let ok = members.iter().filter(|t| t.success).count();
    Rq1Row {
        partition,
        trace_count: n,
        fraction: n as f64 / total as f64,
        avg_kpi: (n > 0).then(|| kpi / n as f64),
        outcome_rate: (n > 0).then(|| ok as f64 / n as f64),
    }
}

/// Splits the test traces by whether they follow the policy from their
/// first event and summarises KPI and outcome per part.
pub fn rq1_report(
    test_log: &AnnotatedLog,
    policy: &Policy,
    mdp: &Mdp,
    spec: &ScenarioSpec,
) -> Result<Rq1Report, LogEvalError> {
    check(test_log, policy, mdp)?;
    if test_log.traces.is_empty() {
        return Err(LogEvalError::EmptyLog);
    }
    let evals = evaluate_traces(test_log, policy, mdp, spec)?;
    let total = evals.len();
    let all: Vec<_> = evals.iter().collect();
    let (follow, other): (Vec<_>, Vec<_>) = evals.iter().partition(|t| adherence_from(t.last, 0) == Adherence::Follows);
    let unreplayable = evals.iter().filter(|t| adherence_from(t.last, 0) == Adherence::Unreplayable).count();
    Ok(Rq1Report {
        rows: vec![
            row(Partition::All, &all, total),
            row(Partition::OptimalP, &follow, total),
            row(Partition::NonOptimalP, &other, total),
        ],
        unreplayable,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rq2Row {
    pub prefix_len: usize,
    /// Mean of `estimate - kpi` over the traces that have an estimate.
    pub avg_delta_kpi: Option<f64>,
    pub trace_count: usize,
    /// Traces of at least this length without a following continuation.
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rq2Report {
    pub max_prefix: usize,
    pub include_self: bool,
    pub rows: Vec<Rq2Row>,
}

#[derive(Default)]
struct Node {
    children: HashMap<String, usize>,
    sum: f64,
    count: usize,
}

/// For every trace `t` and prefix length `L <= min(|t|, max_prefix)`, the
/// estimate is the mean KPI of the test traces that share `t`'s first `L`
/// activities and follow the policy from event `L` on. Prefixes are
/// compared on activity labels.
pub fn rq2_prefix_analysis(
    test_log: &AnnotatedLog,
    policy: &Policy,
    mdp: &Mdp,
    spec: &ScenarioSpec,
    max_prefix: usize,
    include_self: bool,
) -> Result<Rq2Report, LogEvalError> {
    check(test_log, policy, mdp)?;
    if max_prefix == 0 {
        return Err(LogEvalError::MaxPrefix);
    }
    let evals = evaluate_traces(test_log, policy, mdp, spec)?;

    let mut trie = vec![Node::default()];
    let mut paths = Vec::with_capacity(evals.len());
    for (t, ev) in test_log.traces.iter().zip(&evals) {
        let depth = t.events.len().min(max_prefix);
        let mut path = Vec::with_capacity(depth + 1);
        let mut node = 0;
        for l in 0..=depth {
            if l > 0 {
                let label = &t.events[l - 1].event.activity;
                node = match trie[node].children.get(label) {
                    Some(&c) => c,
                    None => {
                        trie.push(Node::default());
                        let c = trie.len() - 1;
                        trie[node].children.insert(label.clone(), c);
                        c
                    }
                };
            }
            path.push(node);
            if adherence_from(ev.last, l) == Adherence::Follows {
                trie[node].sum += ev.kpi;
                trie[node].count += 1;
            }
        }
        paths.push(path);
    }

    let mut acc = vec![(0.0, 0usize, 0usize); max_prefix + 1];
    for (path, ev) in paths.iter().zip(&evals) {
        for (l, &node) in path.iter().enumerate() {
            let Node { mut sum, mut count, .. } = trie[node];
            if !include_self && adherence_from(ev.last, l) == Adherence::Follows {
                sum -= ev.kpi;
                count -= 1;
            }
            if count == 0 {
                acc[l].2 += 1;
            } else {
                acc[l].0 += sum / count as f64 - ev.kpi;
                acc[l].1 += 1;
            }
        }
    }
    let rows = acc
        .into_iter()
        .enumerate()
        .map(|(l, (sum, n, excluded))| Rq2Row {
            prefix_len: l,
            avg_delta_kpi: (n > 0).then(|| sum / n as f64),
            trace_count: n,
            excluded,
        })
        .collect();
    Ok(Rq2Report { max_prefix, include_self, rows })
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(
        || "n/a".to_string(),
        |x| {
            let s = format!("{x:.digits$}");
            match s.strip_prefix('-') {
                Some(abs) if abs.bytes().all(|b| b == b'0' || b == b'.') => abs.to_string(),
                _ => s,
            }
        },
    )
}

pub fn render_rq1(report: &Rq1Report, outcome_label: &str) -> String {
    let mut out =
        format!("{:<14}{:>8}{:>10}{:>12}{:>14}\n", "Partition", "traces", "fraction", "avg. KPI", outcome_label);
    for r in &report.rows {
        let name = match r.partition {
            Partition::All => "All",
            Partition::OptimalP => "Optimal P.",
            Partition::NonOptimalP => "Non-Optimal P.",
        };
        let _ = writeln!(
            out,
            "{:<14}{:>8}{:>10.3}{:>12}{:>14}",
            name,
            r.trace_count,
            r.fraction,
            opt(r.avg_kpi, 3),
            opt(r.outcome_rate.map(|x| 100.0 * x), 2)
        );
    }
    if report.unreplayable > 0 {
        let _ = writeln!(out, "({} traces left the MDP state space)", report.unreplayable);
    }
    out
}

pub fn render_rq2(report: &Rq2Report) -> String {
    let mut out = format!("{:>6}{:>16}{:>10}{:>10}\n", "L", "avg. delta KPI", "traces", "excluded");
    for r in &report.rows {
        let _ =
            writeln!(out, "{:>6}{:>16}{:>10}{:>10}", r.prefix_len, opt(r.avg_delta_kpi, 4), r.trace_count, r.excluded);
    }
    out
}

/// Writes the `(L, avg_delta)` and `(L, count)` series as tab-separated
/// columns. Prefix lengths without an estimate are omitted from the first.
pub fn write_rq2_series<W: Write>(report: &Rq2Report, mut delta: W, mut counts: W) -> std::io::Result<()> {
    writeln!(delta, "L\tavg_delta_kpi")?;
    writeln!(counts, "L\ttrace_count")?;
    for r in &report.rows {
        if let Some(d) = r.avg_delta_kpi {
            writeln!(delta, "{}\t{d}", r.prefix_len)?;
        }
        writeln!(counts, "{}\t{}", r.prefix_len, r.trace_count)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::opt;

    #[test]
    fn rounding_to_zero_drops_the_sign() {
        assert_eq!(opt(Some(-1e-17), 4), "0.0000");
        assert_eq!(opt(Some(-0.25), 2), "-0.25");
        assert_eq!(opt(None, 2), "n/a");
    }
}
