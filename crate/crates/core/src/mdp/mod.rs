//! Finite MDPs compiled from annotated logs.
//!
//! States are `⟨last activity, history features, environment features⟩`
//! tuples plus a terminal flag; actions are agent activity labels. Edges
//! carry the number of supporting trace steps, the empirical probability
//! within their `(state, action)` group and the mean reward.

mod build;
mod io;
pub mod random;
mod replay;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use build::{assemble, build_mdp, build_mdp_with, BuildOptions, BuildReport, EdgeCount, MdpMeta};
pub use io::{load_mdp, save_mdp, to_dot, MDP_FORMAT_VERSION};
pub use replay::{replay, state_at, DecisionStep, Replay};

use crate::artifact::ArtifactError;
use crate::eventlog::Feature;

/// Last-activity label of the synthetic state preceding every trace.
pub const START_ACTIVITY: &str = "<start>";

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("cannot build an MDP from an empty log")]
    EmptyLog,
    #[error("log annotated for scenario `{log}` but spec is `{spec}`")]
    ScenarioMismatch { log: String, spec: String },
    #[error("event {index} of trace `{case_id}` lacks feature `{feature}`")]
    MissingFeature { case_id: String, index: usize, feature: String },
    #[error("unknown state {0}")]
    UnknownState(String),
    #[error("malformed MDP: {0}")]
    Malformed(String),
    #[error("reliability coefficient needs lambda > 0, got {0}")]
    Lambda(f64),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct State {
    pub last_activity: String,
    pub history: Vec<Feature>,
    pub env: Vec<Feature>,
    pub terminal: bool,
}

impl State {
    pub fn start() -> State {
        State { last_activity: START_ACTIVITY.into(), history: vec![], env: vec![], terminal: false }
    }

    pub fn is_start(&self) -> bool {
        self.last_activity == START_ACTIVITY && self.history.is_empty() && self.env.is_empty()
    }

    pub fn with_terminal(mut self, terminal: bool) -> State {
        self.terminal = terminal;
        self
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "⟨{}", self.last_activity)?;
        for v in self.history.iter().chain(&self.env) {
            write!(f, ", {v}")?;
        }
        write!(f, "⟩{}", if self.terminal { "$" } else { "" })
    }
}

macro_rules! index_type {
    ($name:ident) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub usize);
    };
}
index_type!(StateId);
index_type!(ActionId);
index_type!(GroupId);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: StateId,
    pub action: ActionId,
    pub dst: StateId,
    /// Supporting trace steps.
    pub count: u64,
    /// Supporting steps that contained a success event.
    pub successes: u64,
    pub prob: f64,
    /// Mean reward not subject to the reliability coefficient.
    pub plain_reward: f64,
    /// Mean reward before the reliability coefficient.
    pub attenuated_reward: f64,
    /// `plain_reward + c(count) * attenuated_reward`.
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialState {
    pub state: StateId,
    pub count: u64,
    pub prob: f64,
}

/// All edges leaving one state under one action.
#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub state: StateId,
    pub action: ActionId,
    pub edges: Range<usize>,
    pub count: u64,
}

/// One outcome of a `(state, action)` group.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition<'a> {
    pub dst: &'a State,
    pub prob: f64,
    pub reward: f64,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MdpStats {
    pub states: usize,
    pub actions: usize,
    pub edges: usize,
    pub terminal_states: usize,
}

/// Serialized part of an [`Mdp`]; the lookup indexes are rebuilt on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpBody {
    pub scenario_id: String,
    pub history_names: Vec<String>,
    pub env_names: Vec<String>,
    pub lambda: Option<f64>,
    pub gamma: f64,
    /// Decision steps of the longest trace replayed into the MDP.
    pub longest_trace: usize,
    pub states: Vec<State>,
    pub actions: Vec<String>,
    pub edges: Vec<Edge>,
    pub initial: Vec<InitialState>,
}

#[derive(Clone, Debug)]
pub struct Mdp {
    body: MdpBody,
    groups: Vec<Group>,
    state_groups: Vec<Range<usize>>,
    index: HashMap<State, StateId>,
    fingerprint: String,
}

impl PartialEq for Mdp {
    fn eq(&self, other: &Self) -> bool {
        self.body == other.body
    }
}

/// `(n/λ)² / (1 + (n/λ)²)`: weight given to rewards seen on `n` trace steps.
pub fn reliability_coefficient(n: u64, lambda: f64) -> Result<f64, MdpError> {
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(MdpError::Lambda(lambda));
    }
    let x = (n as f64 / lambda).powi(2);
    Ok(x / (1.0 + x))
}

impl Mdp {
    /// Validates `body` and builds the lookup indexes.
    pub fn from_body(body: MdpBody) -> Result<Mdp, MdpError> {
        let bad = |msg: String| Err(MdpError::Malformed(msg));
        let n_states = body.states.len();
        if body.states.windows(2).any(|w| w[0] >= w[1]) {
            return bad("states must be strictly sorted".into());
        }
        if body.actions.windows(2).any(|w| w[0] >= w[1]) {
            return bad("actions must be strictly sorted".into());
        }
        if !(0.0..=1.0).contains(&body.gamma) {
            return bad(format!("gamma {} outside [0, 1]", body.gamma));
        }
        for e in &body.edges {
            if e.src.0 >= n_states || e.dst.0 >= n_states || e.action.0 >= body.actions.len() {
                return bad("edge index out of range".into());
            }
            if e.count == 0 || e.successes > e.count {
                return bad("edge counts must be positive and bound successes".into());
            }
        }
        if body.edges.windows(2).any(|w| (w[0].src, w[0].action, w[0].dst) >= (w[1].src, w[1].action, w[1].dst)) {
            return bad("edges must be strictly sorted by (src, action, dst)".into());
        }
        if body.initial.is_empty() {
            return bad("empty initial distribution".into());
        }
        if body.initial.iter().any(|i| i.state.0 >= n_states) {
            return bad("initial state out of range".into());
        }

        let mut groups: Vec<Group> = Vec::new();
        for (i, e) in body.edges.iter().enumerate() {
            match groups.last_mut() {
                Some(g) if g.state == e.src && g.action == e.action => {
                    g.edges.end = i + 1;
                    g.count += e.count;
                }
                _ => groups.push(Group { state: e.src, action: e.action, edges: i..i + 1, count: e.count }),
            }
        }
        for g in &groups {
            let edges = &body.edges[g.edges.clone()];
            let sum: f64 = edges.iter().map(|e| e.prob).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return bad(format!("group of state {} sums to {sum}", g.state.0));
            }
            if edges.iter().any(|e| (e.prob * g.count as f64 - e.count as f64).abs() > 1e-6) {
                return bad(format!("probabilities of state {} disagree with counts", g.state.0));
            }
            if body.states[g.state.0].terminal {
                return bad(format!("terminal state {} has outgoing edges", body.states[g.state.0]));
            }
        }
        let mut state_groups = vec![0..0; n_states];
        for (gi, g) in groups.iter().enumerate() {
            let r = &mut state_groups[g.state.0];
            if r.start == r.end {
                *r = gi..gi + 1;
            } else {
                r.end = gi + 1;
            }
        }
        for e in &body.edges {
            if !body.states[e.dst.0].terminal && state_groups[e.dst.0].is_empty() {
                return bad(format!("non-terminal state {} has no outgoing edges", body.states[e.dst.0]));
            }
        }
        let index = body.states.iter().enumerate().map(|(i, s)| (s.clone(), StateId(i))).collect();
        let fingerprint = crate::artifact::digest(&serde_json::to_vec(&body).expect("MDP body serializes"));
        Ok(Mdp { body, groups, state_groups, index, fingerprint })
    }

    pub fn body(&self) -> &MdpBody {
        &self.body
    }

    pub fn scenario_id(&self) -> &str {
        &self.body.scenario_id
    }

    pub fn gamma(&self) -> f64 {
        self.body.gamma
    }

    pub fn lambda(&self) -> Option<f64> {
        self.body.lambda
    }

    pub fn longest_trace(&self) -> usize {
        self.body.longest_trace
    }

    /// SHA-256 of the canonical serialized body.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn states(&self) -> &[State] {
        &self.body.states
    }

    pub fn state(&self, id: StateId) -> &State {
        &self.body.states[id.0]
    }

    pub fn state_id(&self, state: &State) -> Option<StateId> {
        self.index.get(state).copied()
    }

    pub fn actions(&self) -> &[String] {
        &self.body.actions
    }

    pub fn action(&self, id: ActionId) -> &str {
        &self.body.actions[id.0]
    }

    pub fn action_id(&self, label: &str) -> Option<ActionId> {
        self.body.actions.binary_search_by(|a| a.as_str().cmp(label)).ok().map(ActionId)
    }

    pub fn edges(&self) -> &[Edge] {
        &self.body.edges
    }

    pub fn initial(&self) -> &[InitialState] {
        &self.body.initial
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn group(&self, id: GroupId) -> &Group {
        &self.groups[id.0]
    }

    pub fn group_edges(&self, id: GroupId) -> &[Edge] {
        &self.body.edges[self.groups[id.0].edges.clone()]
    }

    /// Groups leaving `state`, ordered by action label.
    pub fn groups_at(&self, state: StateId) -> impl ExactSizeIterator<Item = GroupId> + Clone {
        self.state_groups[state.0].clone().map(GroupId)
    }

    pub fn group_for(&self, state: StateId, action: ActionId) -> Option<GroupId> {
        self.groups_at(state).find(|&g| self.groups[g.0].action == action)
    }

    pub fn is_decision_state(&self, state: StateId) -> bool {
        !self.state_groups[state.0].is_empty()
    }

    /// Outgoing transitions of `state` keyed by action label; empty for
    /// terminal states.
    pub fn transition_groups(&self, state: &State) -> Result<BTreeMap<&str, Vec<Transition<'_>>>, MdpError> {
        let id = self.state_id(state).ok_or_else(|| MdpError::UnknownState(state.to_string()))?;
        Ok(self
            .groups_at(id)
            .map(|g| {
                let transitions = self
                    .group_edges(g)
                    .iter()
                    .map(|e| Transition { dst: self.state(e.dst), prob: e.prob, reward: e.reward, count: e.count })
                    .collect();
                (self.action(self.group(g).action), transitions)
            })
            .collect())
    }

    pub fn stats(&self) -> MdpStats {
        MdpStats {
            states: self.body.states.len(),
            actions: self.body.actions.len(),
            edges: self.body.edges.len(),
            terminal_states: self.body.states.iter().filter(|s| s.terminal).count(),
        }
    }

    /// Total training support of `state`'s outgoing groups.
    pub fn support(&self, state: StateId) -> u64 {
        self.groups_at(state).map(|g| self.groups[g.0].count).sum()
    }

    /// Copy with every edge reward transformed by `f(edge)`.
    pub fn map_rewards(&self, f: impl Fn(&Edge) -> f64) -> Mdp {
        let mut body = self.body.clone();
        for e in &mut body.edges {
            e.reward = f(e);
        }
        Mdp::from_body(body).expect("reward changes keep the MDP valid")
    }
}
