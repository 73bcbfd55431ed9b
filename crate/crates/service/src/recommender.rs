//! Maps ongoing cases to MDP states and ranks the next activities.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use prescribe_core::eventlog::{annotate, Attributes};
use prescribe_core::mdp::{load_mdp, state_at, GroupId, StateId};
use prescribe_core::rl::{load_policy, Choice, PolicyArtifact, ResolvedPolicy, Start};
use prescribe_core::simeval::simulate;
use prescribe_core::{Event, EventLog, Mdp, QTable, ScenarioSpec, State, Trace, Value};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version of every request and response schema.
pub const API_VERSION: u32 = 1;
pub const DEFAULT_WHATIF_CASES: usize = 1000;
pub const MAX_WHATIF_CASES: usize = 100_000;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unsupported api_version {0}, this server speaks {API_VERSION}")]
    Version(u32),
    #[error("request is for scenario `{request}` but `{served}` is loaded")]
    ScenarioMismatch { request: String, served: String },
    #[error("events are not in time order at position {0}")]
    Unordered(usize),
    #[error("unknown activity `{0}`")]
    UnknownActivity(String),
    #[error("cannot map the case to a state: {0}")]
    Resolution(String),
    #[error("state {0} is terminal")]
    Terminal(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("cannot load artifacts: {0}")]
    Load(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Version(_) => "unsupported_version",
            ServiceError::ScenarioMismatch { .. } => "scenario_mismatch",
            ServiceError::Unordered(_) => "unordered_events",
            ServiceError::UnknownActivity(_) => "unknown_activity",
            ServiceError::Resolution(_) => "unresolvable_state",
            ServiceError::Terminal(_) => "terminal_state",
            ServiceError::Invalid(_) => "invalid_request",
            ServiceError::Load(_) => "load_failed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestEvent {
    pub activity: String,
    pub timestamp: DateTime<Utc>,
    #[serde(default)]
    pub payload: Attributes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecommendationRequest {
    #[serde(default)]
    pub api_version: Option<u32>,
    pub scenario_id: String,
    #[serde(default)]
    pub events: Vec<RequestEvent>,
    #[serde(default)]
    pub trace_attrs: Attributes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedAction {
    pub action: String,
    /// `null` when the policy carries no estimate for this action.
    pub q_value: Option<f64>,
    /// Training occurrences of the action at the resolved state.
    pub support: u64,
}

/// How the resolved state was found.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    None,
    /// Matched after ignoring the history features in `dropped_features`.
    HistoryBackoff,
    /// Most supported state with the same last activity.
    LastActivity,
    /// Most supported decision state of the MDP.
    Global,
    /// Empty case whose MDP has no start state: most probable initial state.
    Initial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub api_version: u32,
    pub scenario_id: String,
    pub ranked: Vec<RankedAction>,
    pub resolved_state: State,
    pub resolved_state_label: String,
    pub fallback_used: bool,
    pub fallback: Fallback,
    /// History features ignored during back-off, most recently changed first.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped_features: Vec<String>,
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhatIfRequest {
    #[serde(flatten)]
    pub case: RecommendationRequest,
    /// Project only this action; all actions at the state when absent.
    #[serde(default)]
    pub action: Option<String>,
    #[serde(default)]
    pub n_cases: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub action: String,
    /// Mean return from the resolved state on, taking `action` first and
    /// following the policy afterwards.
    pub mean_kpi: f64,
    pub std_error: f64,
    pub outcome_rate: f64,
    pub n_cases: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhatIfResponse {
    pub api_version: u32,
    pub scenario_id: String,
    pub resolved_state: State,
    pub resolved_state_label: String,
    pub fallback_used: bool,
    pub seed: u64,
    /// Sorted by `mean_kpi`, best first.
    pub projections: Vec<Projection>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArtifactPaths {
    pub mdp: PathBuf,
    pub policy: PathBuf,
    /// MDP used for what-if projections; the served MDP when absent.
    pub sim_mdp: Option<PathBuf>,
    /// Scenario name or TOML path; the MDP's scenario when absent.
    pub scenario: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Resolution {
    pub state: StateId,
    pub fallback: Fallback,
    pub dropped: Vec<String>,
}

/// Immutable view of the loaded artifacts.
#[derive(Debug)]
pub struct Snapshot {
    pub mdp: Mdp,
    pub artifact: PolicyArtifact,
    pub spec: ScenarioSpec,
    pub q: QTable,
    pub resolved: ResolvedPolicy,
    pub sim_mdp: Option<Mdp>,
    sim_resolved: Option<ResolvedPolicy>,
}

fn read(path: &Path) -> Result<Vec<u8>, ServiceError> {
    std::fs::read(path).map_err(|e| ServiceError::Load(format!("{}: {e}", path.display())))
}

impl Snapshot {
    pub fn new(
        mdp: Mdp,
        artifact: PolicyArtifact,
        spec: ScenarioSpec,
        sim_mdp: Option<Mdp>,
    ) -> Result<Snapshot, ServiceError> {
        if artifact.policy.scenario_id != mdp.scenario_id() || spec.scenario_id != mdp.scenario_id() {
            return Err(ServiceError::Load(format!(
                "scenario mismatch: MDP `{}`, policy `{}`, spec `{}`",
                mdp.scenario_id(),
                artifact.policy.scenario_id,
                spec.scenario_id
            )));
        }
        if let Some(sim) = &sim_mdp {
            if sim.scenario_id() != mdp.scenario_id() {
                return Err(ServiceError::Load(format!("simulation MDP is for `{}`", sim.scenario_id())));
            }
        }
        let q = artifact.q_table(&mdp).map_err(|e| ServiceError::Load(e.to_string()))?;
        let resolved = artifact.policy.resolve(&mdp);
        let sim_resolved = sim_mdp.as_ref().map(|m| artifact.policy.resolve(m));
        Ok(Snapshot { mdp, artifact, spec, q, resolved, sim_mdp, sim_resolved })
    }

    pub fn load(paths: &ArtifactPaths) -> Result<Snapshot, ServiceError> {
        let mdp =
            load_mdp(&read(&paths.mdp)?).map_err(|e| ServiceError::Load(format!("{}: {e}", paths.mdp.display())))?;
        let artifact = load_policy(&read(&paths.policy)?)
            .map_err(|e| ServiceError::Load(format!("{}: {e}", paths.policy.display())))?;
        let sim_mdp = match &paths.sim_mdp {
            Some(p) => Some(load_mdp(&read(p)?).map_err(|e| ServiceError::Load(format!("{}: {e}", p.display())))?),
            None => None,
        };
        let name = paths.scenario.clone().unwrap_or_else(|| mdp.scenario_id().to_string());
        let spec = ScenarioSpec::load(&name).map_err(|e| ServiceError::Load(e.to_string()))?;
        Snapshot::new(mdp, artifact, spec, sim_mdp)
    }

    pub fn scenario_id(&self) -> &str {
        self.mdp.scenario_id()
    }

    fn check(&self, req: &RecommendationRequest) -> Result<(), ServiceError> {
        if let Some(v) = req.api_version.filter(|&v| v != API_VERSION) {
            return Err(ServiceError::Version(v));
        }
        if req.scenario_id != self.scenario_id() {
            return Err(ServiceError::ScenarioMismatch {
                request: req.scenario_id.clone(),
                served: self.scenario_id().into(),
            });
        }
        if let Some(i) = req.events.windows(2).position(|w| w[1].timestamp < w[0].timestamp) {
            return Err(ServiceError::Unordered(i + 1));
        }
        if let Some(e) = req.events.iter().find(|e| self.spec.classify(&e.activity).is_none()) {
            return Err(ServiceError::UnknownActivity(e.activity.clone()));
        }
        Ok(())
    }

    /// State of the MDP after the last event of the request.
    pub fn resolve_state(&self, req: &RecommendationRequest) -> Result<Resolution, ServiceError> {
        self.check(req)?;
        let exact = |state: StateId| Resolution { state, fallback: Fallback::None, dropped: vec![] };
        if req.events.is_empty() {
            if let Some(id) = self.mdp.state_id(&State::start()) {
                return Ok(exact(id));
            }
            let best = self.mdp.initial().iter().max_by(|a, b| a.count.cmp(&b.count).then(b.state.cmp(&a.state)));
            return best
                .map(|i| Resolution { state: i.state, fallback: Fallback::Initial, dropped: vec![] })
                .ok_or_else(|| ServiceError::Resolution("the MDP has no initial states".into()));
        }

        let events = req.events.iter().map(|e| Event {
            activity: e.activity.clone(),
            timestamp: e.timestamp,
            payload: e.payload.clone(),
        });
        let trace = Trace::new("request", events.collect(), req.trace_attrs.clone());
        let log =
            annotate(&EventLog::new(vec![trace]), &self.spec).map_err(|e| ServiceError::Resolution(e.to_string()))?;
        let trace = &log.traces[0];
        let last = trace.events.len() - 1;
        let state = state_at(trace, last, &self.spec).map_err(|e| ServiceError::Resolution(e.to_string()))?;

        let open = state.clone().with_terminal(false);
        if let Some(id) = self.mdp.state_id(&open).filter(|&id| self.mdp.is_decision_state(id)) {
            return Ok(exact(id));
        }
        if let Some(id) = self.mdp.state_id(&open.clone().with_terminal(true)) {
            return Ok(exact(id));
        }

        let names = self.spec.history_names();
        let mut changed: Vec<(usize, usize)> = (0..names.len())
            .map(|k| {
                let at = |i: usize| trace.events[i].derived.get(&names[k]);
                let last_change = (1..trace.events.len()).rev().find(|&i| at(i) != at(i - 1)).unwrap_or(0);
                (last_change, k)
            })
            .collect();
        changed.sort_by(|a, b| b.cmp(a));
        let order: Vec<usize> = changed.into_iter().map(|(_, k)| k).collect();

        let decision = |s: &State| !s.terminal;
        for drop in 1..=order.len() {
            let dropped = &order[..drop];
            let best = self.most_supported(|s| {
                decision(s)
                    && s.last_activity == open.last_activity
                    && s.env == open.env
                    && s.history.len() == open.history.len()
                    && (0..open.history.len()).all(|k| dropped.contains(&k) || s.history[k] == open.history[k])
            });
            if let Some(id) = best {
                let dropped = dropped.iter().map(|&k| names[k].clone()).collect();
                return Ok(Resolution { state: id, fallback: Fallback::HistoryBackoff, dropped });
            }
        }
        if let Some(id) =
            self.most_supported(|s| decision(s) && s.last_activity.eq_ignore_ascii_case(&open.last_activity))
        {
            return Ok(Resolution { state: id, fallback: Fallback::LastActivity, dropped: vec![] });
        }
        self.most_supported(decision)
            .map(|id| Resolution { state: id, fallback: Fallback::Global, dropped: vec![] })
            .ok_or_else(|| ServiceError::Resolution("the MDP has no decision states".into()))
    }

    fn most_supported(&self, pred: impl Fn(&State) -> bool) -> Option<StateId> {
        let mut best: Option<(StateId, u64)> = None;
        for (i, s) in self.mdp.states().iter().enumerate() {
            let id = StateId(i);
            if !pred(s) || !self.mdp.is_decision_state(id) {
                continue;
            }
            let support = self.mdp.support(id);
            if best.is_none_or(|(_, b)| support > b) {
                best = Some((id, support));
            }
        }
        best.map(|(id, _)| id)
    }

    /// Policy choice first, then the other actions by Q value.
    pub fn rank(&self, state: StateId, fallback: Fallback) -> Vec<RankedAction> {
        let top = match (fallback, self.resolved.choice.get(state.0)) {
            (Fallback::LastActivity | Fallback::Global, _) => prescribe_core::rl::customary_group(&self.mdp, state),
            (_, Some(Choice::Fixed(g))) => Some(*g),
            _ => None,
        };
        let mut groups: Vec<GroupId> = self.mdp.groups_at(state).collect();
        let q = |g: GroupId| self.q.value(g);
        groups.sort_by(|&a, &b| {
            let pinned = (Some(b) == top).cmp(&(Some(a) == top));
            let by_q = match (q(a), q(b)) {
                (Some(x), Some(y)) => y.total_cmp(&x),
                (Some(_), None) => Ordering::Less,
                (None, Some(_)) => Ordering::Greater,
                (None, None) => Ordering::Equal,
            };
            pinned
                .then(by_q)
                .then(self.mdp.group(b).count.cmp(&self.mdp.group(a).count))
                .then(self.mdp.action(self.mdp.group(a).action).cmp(self.mdp.action(self.mdp.group(b).action)))
        });
        groups
            .into_iter()
            .map(|g| RankedAction {
                action: self.mdp.action(self.mdp.group(g).action).to_string(),
                q_value: q(g),
                support: self.mdp.group(g).count,
            })
            .collect()
    }

    pub fn recommend(&self, req: &RecommendationRequest) -> Result<Recommendation, ServiceError> {
        let r = self.resolve_state(req)?;
        let state = self.mdp.state(r.state);
        let terminal = state.terminal;
        Ok(Recommendation {
            api_version: API_VERSION,
            scenario_id: self.scenario_id().to_string(),
            ranked: if terminal { vec![] } else { self.rank(r.state, r.fallback) },
            resolved_state: state.clone(),
            resolved_state_label: state.to_string(),
            fallback_used: r.fallback != Fallback::None,
            fallback: r.fallback,
            dropped_features: r.dropped,
            terminal,
        })
    }

    /// Projected KPI of each candidate action from the resolved state,
    /// simulated on the simulation MDP.
    pub fn what_if(&self, req: &WhatIfRequest) -> Result<WhatIfResponse, ServiceError> {
        let r = self.resolve_state(&req.case)?;
        let state = self.mdp.state(r.state);
        if state.terminal {
            return Err(ServiceError::Terminal(state.to_string()));
        }
        let n = req.n_cases.unwrap_or(DEFAULT_WHATIF_CASES);
        if n == 0 || n > MAX_WHATIF_CASES {
            return Err(ServiceError::Invalid(format!("n_cases must be in 1..={MAX_WHATIF_CASES}")));
        }
        let seed = req.seed.unwrap_or(0);
        let (mdp, policy) = match (&self.sim_mdp, &self.sim_resolved) {
            (Some(m), Some(p)) => (m, p),
            _ => (&self.mdp, &self.resolved),
        };
        let sid = mdp
            .state_id(state)
            .ok_or_else(|| ServiceError::Resolution(format!("{state} is unknown to the simulation MDP")))?;
        let mut groups: Vec<GroupId> = mdp.groups_at(sid).collect();
        if let Some(a) = &req.action {
            groups.retain(|&g| mdp.action(mdp.group(g).action) == a);
            if groups.is_empty() {
                return Err(ServiceError::Invalid(format!("action `{a}` is not available at {state}")));
            }
        }
        let mut projections = groups
            .into_iter()
            .map(|g| {
                let s = simulate(mdp, policy, Start::StateAction(g), n, seed)
                    .map_err(|e| ServiceError::Resolution(e.to_string()))?;
                Ok(Projection {
                    action: mdp.action(mdp.group(g).action).to_string(),
                    mean_kpi: s.mean,
                    std_error: s.std_error,
                    outcome_rate: s.outcome_rate,
                    n_cases: n,
                })
            })
            .collect::<Result<Vec<_>, ServiceError>>()?;
        projections.sort_by(|a, b| b.mean_kpi.total_cmp(&a.mean_kpi).then(a.action.cmp(&b.action)));
        Ok(WhatIfResponse {
            api_version: API_VERSION,
            scenario_id: self.scenario_id().to_string(),
            resolved_state: state.clone(),
            resolved_state_label: state.to_string(),
            fallback_used: r.fallback != Fallback::None,
            seed,
            projections,
        })
    }
}

/// Convenience constructor for request events.
pub fn event(activity: &str, timestamp: DateTime<Utc>, payload: &[(&str, Value)]) -> RequestEvent {
    RequestEvent {
        activity: activity.to_string(),
        timestamp,
        payload: payload.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
    }
}
