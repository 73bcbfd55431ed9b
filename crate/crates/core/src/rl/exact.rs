//! Exact policy evaluation and policy iteration by solving the Bellman
//! linear system.

use nalgebra::{DMatrix, DVector};

use super::{customary_group, Choice, ResolvedPolicy, RlError};
use crate::mdp::{GroupId, Mdp, StateId};

/// Expected immediate reward and successor distribution of `group`.
fn group_terms(mdp: &Mdp, g: GroupId) -> impl Iterator<Item = (StateId, f64, f64)> + '_ {
    mdp.group_edges(g).iter().map(|e| (e.dst, e.prob, e.reward))
}

/// `V^π` for every state; terminal states have value 0. Uniform choices
/// average over the available groups.
pub fn evaluate(mdp: &Mdp, policy: &ResolvedPolicy) -> Result<Vec<f64>, RlError> {
    let n = mdp.states().len();
    let gamma = mdp.gamma();
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for s in 0..n {
        let id = StateId(s);
        if mdp.state(id).terminal {
            continue;
        }
        let mix: Vec<(GroupId, f64)> = match policy.choice.get(s).copied().unwrap_or(Choice::Stop) {
            Choice::Fixed(g) => vec![(g, 1.0)],
            Choice::Uniform => {
                let k = mdp.groups_at(id).len() as f64;
                mdp.groups_at(id).map(|g| (g, 1.0 / k)).collect()
            }
            Choice::Stop if mdp.is_decision_state(id) => {
                return Err(RlError::Config(format!("policy has no action at {}", mdp.state(id))))
            }
            Choice::Stop => return Err(RlError::DeadEnd(mdp.state(id).to_string())),
        };
        for (g, w) in mix {
            for (dst, p, r) in group_terms(mdp, g) {
                b[s] += w * p * r;
                if !mdp.state(dst).terminal {
                    a[(s, dst.0)] -= gamma * w * p;
                }
            }
        }
    }
    let solution = a.lu().solve(&b).filter(|v| v.iter().all(|x| x.is_finite()));
    let v = solution.ok_or_else(|| RlError::Improper(reachable_cycle(mdp, policy)))?;
    Ok(v.iter().copied().collect())
}

fn reachable_cycle(mdp: &Mdp, policy: &ResolvedPolicy) -> String {
    policy
        .choice
        .iter()
        .enumerate()
        .find(|(_, c)| matches!(c, Choice::Fixed(_) | Choice::Uniform))
        .map(|(s, _)| mdp.state(StateId(s)).to_string())
        .unwrap_or_default()
}

/// `Q(s, a)` per group from state values `v`.
pub fn q_values(mdp: &Mdp, v: &[f64]) -> Vec<f64> {
    (0..mdp.groups().len())
        .map(|g| group_terms(mdp, GroupId(g)).map(|(dst, p, r)| p * (r + mdp.gamma() * v[dst.0])).sum())
        .collect()
}

/// Expected value of `v` under the initial distribution.
pub fn initial_value(mdp: &Mdp, v: &[f64]) -> f64 {
    mdp.initial().iter().map(|i| i.prob * v[i.state.0]).sum()
}

/// Value of `policy` at the initial distribution.
pub fn policy_value(mdp: &Mdp, policy: &ResolvedPolicy) -> Result<f64, RlError> {
    Ok(initial_value(mdp, &evaluate(mdp, policy)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExactSolution {
    pub groups: Vec<Option<GroupId>>,
    pub values: Vec<f64>,
    pub iterations: usize,
}

impl ExactSolution {
    pub fn value(&self, mdp: &Mdp) -> f64 {
        initial_value(mdp, &self.values)
    }
}

const IMPROVE_EPS: f64 = 1e-10;

/// Policy iteration with exact evaluation, starting from the customary
/// policy. An action replaces the current one only when strictly better,
/// and among equally good replacements the smallest label wins.
pub fn policy_iteration(mdp: &Mdp) -> Result<ExactSolution, RlError> {
    let n = mdp.states().len();
    let mut groups: Vec<Option<GroupId>> = (0..n).map(|s| customary_group(mdp, StateId(s))).collect();
    for iterations in 1.. {
        let values = evaluate(mdp, &ResolvedPolicy::fixed(&groups))?;
        let q = q_values(mdp, &values);
        let mut changed = false;
        for s in 0..n {
            let Some(current) = groups[s] else { continue };
            let mut best = (current, q[current.0]);
            for g in mdp.groups_at(StateId(s)) {
                if q[g.0] > best.1 + IMPROVE_EPS {
                    best = (g, q[g.0]);
                }
            }
            if best.0 != current {
                groups[s] = Some(best.0);
                changed = true;
            }
        }
        if !changed {
            return Ok(ExactSolution { groups, values, iterations });
        }
    }
    unreachable!()
}
