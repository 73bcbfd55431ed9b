//! Simulation evaluation: roll policies out on a (test) MDP and report the
//! average KPI and the share of cases that reach the scenario's outcome.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::Mdp;
use crate::rl::{default_max_len, sample_episode, Policy, PolicyKind, ResolvedPolicy, RlError, Start};
use crate::seeding::{batch_rng, batches, mix};

pub const DEFAULT_CASES: usize = 100_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("policy for `{policy}` cannot be evaluated on the `{mdp}` MDP")]
    Incompatible { policy: String, mdp: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Rl(#[from] RlError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub policy_kind: PolicyKind,
    pub n_cases: usize,
    pub avg_kpi: f64,
    pub outcome_rate: f64,
    pub std_error: f64,
    pub seed: u64,
    /// Test-MDP states the policy did not cover.
    pub fallback_states: usize,
    /// Decisions taken at those states over all episodes.
    pub fallback_visits: u64,
    /// Episodes cut at the length limit.
    pub truncated: u64,
}

/// Summary of a batch of sampled episodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimStats {
    pub n: u64,
    pub mean: f64,
    pub std_error: f64,
    pub outcome_rate: f64,
    pub truncated: u64,
    pub fallback_visits: u64,
}

#[derive(Clone, Copy, Default)]
struct Acc {
    n: u64,
    mean: f64,
    m2: f64,
    successes: u64,
    truncated: u64,
    fallback_visits: u64,
}

impl Acc {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn merge(self, o: Acc) -> Acc {
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        let (mean, m2) = if n == 0 {
            (0.0, 0.0)
        } else {
            (self.mean + d * o.n as f64 / n as f64, self.m2 + o.m2 + d * d * (self.n as f64 * o.n as f64 / n as f64))
        };
        Acc {
            n,
            mean,
            m2,
            successes: self.successes + o.successes,
            truncated: self.truncated + o.truncated,
            fallback_visits: self.fallback_visits + o.fallback_visits,
        }
    }

    fn stats(&self) -> SimStats {
        let var = if self.n > 1 { self.m2 / (self.n - 1) as f64 } else { 0.0 };
        SimStats {
            n: self.n,
            mean: self.mean,
            std_error: if self.n > 0 { (var / self.n as f64).sqrt() } else { 0.0 },
            outcome_rate: if self.n > 0 { self.successes as f64 / self.n as f64 } else { 0.0 },
            truncated: self.truncated,
            fallback_visits: self.fallback_visits,
        }
    }
}

fn success_draw(mdp: &Mdp, edge: usize, rng: &mut ChaCha8Rng) -> bool {
    let e = &mdp.edges()[edge];
    e.successes > 0 && (e.successes == e.count || rng.random_range(0..e.count) < e.successes)
}

/// Samples `n` episodes from `start` under `policy`. An episode reaches the
/// outcome when any traversed edge does; edges that only sometimes carried
/// the outcome in the log are drawn accordingly.
pub fn simulate(mdp: &Mdp, policy: &ResolvedPolicy, start: Start, n: usize, seed: u64) -> Result<SimStats, SimError> {
    let max_len = default_max_len(mdp);
    let parts: Vec<Acc> = batches(n)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(b, size)| {
            let mut rng = batch_rng(seed, b);
            let mut acc = Acc::default();
            for _ in 0..size {
                let ep = sample_episode(mdp, policy, &mut rng, start, max_len)?;
                let mut success = false;
                for step in &ep.steps {
                    success |= success_draw(mdp, step.edge, &mut rng);
                    acc.fallback_visits += policy.fallback[step.state.0] as u64;
                }
                acc.push(ep.total_return);
                acc.successes += success as u64;
                acc.truncated += ep.truncated as u64;
            }
            Ok(acc)
        })
        .collect::<Result<_, RlError>>()?;
    Ok(parts.into_iter().fold(Acc::default(), Acc::merge).stats())
}

/// Simulates `n_cases` cases of `policy` on `test_mdp`.
pub fn simulate_policy(test_mdp: &Mdp, policy: &Policy, n_cases: usize, seed: u64) -> Result<SimReport, SimError> {
    if policy.scenario_id != test_mdp.scenario_id() {
        return Err(SimError::Incompatible {
            policy: policy.scenario_id.clone(),
            mdp: test_mdp.scenario_id().to_string(),
        });
    }
    if n_cases == 0 {
        return Err(SimError::Argument("n_cases must be positive".into()));
    }
    let resolved = policy.resolve(test_mdp);
    let stats = simulate(test_mdp, &resolved, Start::Initial, n_cases, seed)?;
    Ok(SimReport {
        policy_kind: policy.kind,
        n_cases,
        avg_kpi: stats.mean,
        outcome_rate: stats.outcome_rate,
        std_error: stats.std_error,
        seed,
        fallback_states: resolved.fallback_states(),
        fallback_visits: stats.fallback_visits,
        truncated: stats.truncated,
    })
}

/// One report per policy, sorted by average KPI (best first). Policy `i`
/// draws from the stream seeded with `mix(seed, i)`.
pub fn compare_policies(
    test_mdp: &Mdp,
    policies: &[Policy],
    n_cases: usize,
    seed: u64,
) -> Result<Vec<SimReport>, SimError> {
    if policies.is_empty() {
        return Err(SimError::Argument("no policies to compare".into()));
    }
    let mut reports = policies
        .iter()
        .enumerate()
        .map(|(i, p)| simulate_policy(test_mdp, p, n_cases, mix(seed, i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    reports.sort_by(|a, b| b.avg_kpi.total_cmp(&a.avg_kpi));
    Ok(reports)
}

/// Aligned plain-text table, one row per report.
pub fn render_table(reports: &[SimReport], outcome_label: &str) -> String {
    let header = ["Policy", "avg. KPI", "std. err.", outcome_label, "cases"];
    let rows: Vec<[String; 5]> = reports
        .iter()
        .map(|r| {
            [
                r.policy_kind.to_string(),
                format!("{:.3}", r.avg_kpi),
                format!("{:.3}", r.std_error),
                format!("{:.2}%", 100.0 * r.outcome_rate),
                r.n_cases.to_string(),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
            if i == 0 {
                let _ = write!(out, "{cell:<w$}");
            } else {
                let _ = write!(out, "  {cell:>w$}");
            }
        }
        out.push('\n');
    };
    line(&mut out, &header);
    let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for row in &rows {
        line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}
