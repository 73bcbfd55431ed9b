use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::mdp::{GroupId, Mdp, State, StateId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Random,
    Customary,
    Optimal,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Random => "Random",
            PolicyKind::Customary => "Customary",
            PolicyKind::Optimal => "Optimal",
        })
    }
}

/// Deterministic state-to-action map, or the uniform rule for
/// [`PolicyKind::Random`] (whose map is empty).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub kind: PolicyKind,
    pub scenario_id: String,
    pub mdp_fingerprint: String,
    #[serde(with = "entries")]
    pub choices: BTreeMap<State, String>,
}

mod entries {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        state: State,
        action: String,
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<State, String>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.iter().map(|(state, action)| Entry { state: state.clone(), action: action.clone() }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<State, String>, D::Error> {
        Ok(Vec::<Entry>::deserialize(d)?.into_iter().map(|e| (e.state, e.action)).collect())
    }
}

impl Policy {
    pub fn choice(&self, state: &State) -> Option<&str> {
        self.choices.get(state).map(String::as_str)
    }

    /// Builds a deterministic policy from per-state group choices.
    pub fn from_groups(kind: PolicyKind, mdp: &Mdp, groups: &[Option<GroupId>]) -> Policy {
        let choices = groups
            .iter()
            .enumerate()
            .filter_map(|(s, g)| {
                g.map(|g| (mdp.state(StateId(s)).clone(), mdp.action(mdp.group(g).action).to_string()))
            })
            .collect();
        Policy {
            kind,
            scenario_id: mdp.scenario_id().to_string(),
            mdp_fingerprint: mdp.fingerprint().to_string(),
            choices,
        }
    }

    /// Resolves the policy on `mdp`. States the policy does not cover, or
    /// whose chosen action `mdp` lacks there, fall back to the customary
    /// action of `mdp` and are marked.
    pub fn resolve(&self, mdp: &Mdp) -> ResolvedPolicy {
        let n = mdp.states().len();
        if self.kind == PolicyKind::Random {
            let choice = (0..n)
                .map(|s| if mdp.is_decision_state(StateId(s)) { Choice::Uniform } else { Choice::Stop })
                .collect();
            return ResolvedPolicy { choice, fallback: vec![false; n] };
        }
        let mut choice = Vec::with_capacity(n);
        let mut fallback = vec![false; n];
        for (s, state) in mdp.states().iter().enumerate() {
            let id = StateId(s);
            if !mdp.is_decision_state(id) {
                choice.push(Choice::Stop);
                continue;
            }
            let chosen = self.choice(state).and_then(|a| mdp.action_id(a)).and_then(|a| mdp.group_for(id, a));
            match chosen {
                Some(g) => choice.push(Choice::Fixed(g)),
                None => {
                    fallback[s] = true;
                    choice.push(Choice::Fixed(customary_group(mdp, id).expect("decision state has a group")));
                }
            }
        }
        ResolvedPolicy { choice, fallback }
    }
}

/// Group of `state` with the largest training count; ties go to the
/// smallest action label.
pub fn customary_group(mdp: &Mdp, state: StateId) -> Option<GroupId> {
    let mut best: Option<(GroupId, u64)> = None;
    for g in mdp.groups_at(state) {
        let count = mdp.group(g).count;
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((g, count));
        }
    }
    best.map(|(g, _)| g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Choice {
    Fixed(GroupId),
    Uniform,
    /// Terminal state.
    Stop,
}

/// A policy bound to the indexes of one MDP.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedPolicy {
    pub choice: Vec<Choice>,
    /// States whose choice came from the customary fallback.
    pub fallback: Vec<bool>,
}

impl ResolvedPolicy {
    pub fn fixed(groups: &[Option<GroupId>]) -> ResolvedPolicy {
        ResolvedPolicy {
            choice: groups.iter().map(|g| g.map_or(Choice::Stop, Choice::Fixed)).collect(),
            fallback: vec![false; groups.len()],
        }
    }

    pub fn uniform(mdp: &Mdp) -> ResolvedPolicy {
        ResolvedPolicy {
            choice: (0..mdp.states().len())
                .map(|s| if mdp.is_decision_state(StateId(s)) { Choice::Uniform } else { Choice::Stop })
                .collect(),
            fallback: vec![false; mdp.states().len()],
        }
    }

    /// Chosen group per state, `None` for uniform or terminal states.
    pub fn groups(&self) -> Vec<Option<GroupId>> {
        self.choice.iter().map(|c| if let Choice::Fixed(g) = c { Some(*g) } else { None }).collect()
    }

    pub fn fallback_states(&self) -> usize {
        self.fallback.iter().filter(|&&b| b).count()
    }
}

pub fn random_policy(mdp: &Mdp) -> Policy {
    Policy {
        kind: PolicyKind::Random,
        scenario_id: mdp.scenario_id().to_string(),
        mdp_fingerprint: mdp.fingerprint().to_string(),
        choices: BTreeMap::new(),
    }
}

/// Most frequent training action at every decision state.
pub fn customary_policy(mdp: &Mdp) -> Policy {
    let groups: Vec<_> = (0..mdp.states().len()).map(|s| customary_group(mdp, StateId(s))).collect();
    Policy::from_groups(PolicyKind::Customary, mdp, &groups)
}
