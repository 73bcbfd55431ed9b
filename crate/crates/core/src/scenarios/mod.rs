//! Declarative scenario specifications.
//!
//! A [`ScenarioSpec`] says which activities belong to the actor being
//! advised (the agent) and which to everyone else (the environment), how the
//! history and environment state features are computed, and how the KPI is
//! broken down into per-event rewards. Specs are plain data and load from
//! TOML; the Loans and Fines specs ship with the crate.

mod features;
mod reward;
pub mod synthetic;

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use features::{AppealRule, FeatureRule, PAY_APPEAL, PAY_FULL, PAY_NONE, PAY_PARTIAL, UNKNOWN_CLASS};
pub(crate) use features::{EventCtx, RuleState};
pub use reward::{CreditBand, RewardSpec, RewardTerm};
pub(crate) use reward::{RewardCtx, TermState};

use crate::eventlog::{Actor, AnnotatedEvent, AnnotatedTrace, EventLog, Feature};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario `{id}`: {reason}")]
    Invalid { id: String, reason: String },
    #[error("trace `{0}` is incomplete: it does not end with a terminal activity")]
    Incomplete(String),
    #[error("cannot read scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Set of activity labels matched case-insensitively.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<String>,
    folded: BTreeSet<String>,
}

impl LabelSet {
    pub fn new<I, S>(labels: I) -> LabelSet
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let folded = labels.iter().map(|l| l.to_lowercase()).collect();
        LabelSet { labels, folded }
    }

    pub fn contains(&self, label: &str) -> bool {
        self.folded.contains(&label.to_lowercase())
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(String::as_str)
    }

    fn overlap<'a>(&'a self, other: &'a LabelSet) -> impl Iterator<Item = &'a String> {
        self.folded.intersection(&other.folded)
    }
}

impl Serialize for LabelSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.labels.serialize(s)
    }
}

impl<'de> Deserialize<'de> for LabelSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Vec::<String>::deserialize(d).map(LabelSet::new)
    }
}

/// Appends the value of a derived feature to agent action labels
/// (`Send fine` at bucket 0 becomes `Send fine-0`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionBucketing {
    pub feature: String,
}

/// Marks the events that count as a successful outcome.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuccessMarker {
    #[serde(default)]
    pub activities: LabelSet,
    #[serde(default)]
    pub feature: Option<String>,
    #[serde(default)]
    pub value: Option<Feature>,
}

impl SuccessMarker {
    pub fn matches(&self, event: &AnnotatedEvent) -> bool {
        if self.activities.contains(&event.event.activity) {
            return true;
        }
        match (&self.feature, &self.value) {
            (Some(f), Some(v)) => event.derived.get(f) == Some(v),
            _ => false,
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario_id: String,
    pub agent_activities: LabelSet,
    pub env_activities: LabelSet,
    /// Activities removed during preprocessing.
    #[serde(default)]
    pub excluded_activities: BTreeSet<String>,
    /// Activities that close a case. Empty means every trace is complete.
    #[serde(default)]
    pub terminal_activities: LabelSet,
    #[serde(default)]
    pub action_bucketing: Option<ActionBucketing>,
    pub history_features: Vec<FeatureRule>,
    pub env_features: Vec<FeatureRule>,
    /// Features computed for rewards but not part of the state.
    #[serde(default)]
    pub aux_features: Vec<FeatureRule>,
    pub reward: RewardSpec,
    #[serde(default)]
    pub success: SuccessMarker,
    /// λ of the reliability coefficient applied to attenuated reward terms.
    #[serde(default)]
    pub reliability_lambda: Option<f64>,
    #[serde(default = "one")]
    pub gamma: f64,
}

const LOANS_TOML: &str = include_str!("../../scenarios/loans.toml");
const FINES_TOML: &str = include_str!("../../scenarios/fines.toml");

/// Bundled spec for the loan-application scenario (bank perspective).
pub fn loans_spec() -> ScenarioSpec {
    ScenarioSpec::from_toml(LOANS_TOML).expect("bundled loans spec is valid")
}

/// Bundled spec for the traffic-fine scenario (police perspective).
pub fn fines_spec() -> ScenarioSpec {
    ScenarioSpec::from_toml(FINES_TOML).expect("bundled fines spec is valid")
}

/// Bundled spec by name (`loans` or `fines`).
pub fn builtin(name: &str) -> Option<ScenarioSpec> {
    match name {
        "loans" => Some(loans_spec()),
        "fines" => Some(fines_spec()),
        _ => None,
    }
}

impl ScenarioSpec {
    pub fn from_toml(text: &str) -> Result<ScenarioSpec, ScenarioError> {
        let spec: ScenarioSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario specs serialize to TOML")
    }

    /// Loads a bundled spec by name or a TOML file by path.
    pub fn load(name_or_path: &str) -> Result<ScenarioSpec, ScenarioError> {
        match builtin(name_or_path) {
            Some(spec) => Ok(spec),
            None => ScenarioSpec::from_toml(&std::fs::read_to_string(Path::new(name_or_path))?),
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let fail = |reason: String| Err(ScenarioError::Invalid { id: self.scenario_id.clone(), reason });
        if let Some(shared) = self.agent_activities.overlap(&self.env_activities).next() {
            return fail(format!("`{shared}` is both an agent and an environment activity"));
        }
        let mut names = BTreeSet::new();
        for rule in self.rules() {
            if !names.insert(rule.name()) {
                return fail(format!("feature `{}` defined twice", rule.name()));
            }
            if let Err(reason) = rule.validate() {
                return fail(reason);
            }
        }
        let known = |f: &str| names.contains(f);
        if let Some(b) = &self.action_bucketing {
            if !known(&b.feature) {
                return fail(format!("action bucketing uses unknown feature `{}`", b.feature));
            }
        }
        for term in &self.reward.terms {
            if let Some(f) = term.features().into_iter().find(|f| !known(f)) {
                return fail(format!("reward term uses unknown feature `{f}`"));
            }
        }
        if let Some(f) = &self.success.feature {
            if !known(f) {
                return fail(format!("success marker uses unknown feature `{f}`"));
            }
        }
        if self.reliability_lambda.is_some_and(|l| l.is_nan() || l <= 0.0) {
            return fail("reliability lambda must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail(format!("gamma {} outside [0, 1]", self.gamma));
        }
        Ok(())
    }

    /// All feature rules in evaluation order: history, environment, auxiliary.
    pub fn rules(&self) -> impl Iterator<Item = &FeatureRule> {
        self.history_features.iter().chain(&self.env_features).chain(&self.aux_features)
    }

    pub fn history_names(&self) -> Vec<String> {
        self.history_features.iter().map(|r| r.name().to_string()).collect()
    }

    pub fn env_names(&self) -> Vec<String> {
        self.env_features.iter().map(|r| r.name().to_string()).collect()
    }

    pub fn classify(&self, activity: &str) -> Option<Actor> {
        if self.agent_activities.contains(activity) {
            Some(Actor::Agent)
        } else if self.env_activities.contains(activity) {
            Some(Actor::Environment)
        } else {
            None
        }
    }

    /// Recommendable action label of an agent event.
    pub fn action_label(&self, event: &AnnotatedEvent) -> String {
        match self.action_bucketing.as_ref().and_then(|b| event.derived.get(&b.feature)) {
            Some(bucket) => format!("{}-{bucket}", event.event.activity),
            None => event.event.activity.clone(),
        }
    }

    /// Fills missing activity-duration tables from `log`. Specs without cost
    /// terms, or already calibrated, come back unchanged.
    pub fn calibrated(&self, log: &EventLog) -> Cow<'_, ScenarioSpec> {
        let needs = self.reward.terms.iter().any(|t| matches!(t, RewardTerm::ActivityCost { durations: None, .. }));
        if !needs {
            return Cow::Borrowed(self);
        }
        let mut spec = self.clone();
        for term in &mut spec.reward.terms {
            if let RewardTerm::ActivityCost { max_gap_hours, activities, durations: slot @ None, .. } = term {
                *slot =
                    Some(reward::estimate_durations(log, activities.as_ref(), *max_gap_hours, |a| self.classify(a)));
            }
        }
        Cow::Owned(spec)
    }

    pub fn is_complete(&self, trace: &AnnotatedTrace) -> bool {
        self.terminal_activities.is_empty()
            || trace.events.last().is_some_and(|e| self.terminal_activities.contains(&e.event.activity))
    }

    /// KPI of a complete annotated trace: the sum of its event rewards.
    pub fn kpi(&self, trace: &AnnotatedTrace) -> Result<f64, ScenarioError> {
        if !self.is_complete(trace) {
            return Err(ScenarioError::Incomplete(trace.case_id.clone()));
        }
        Ok(trace.events.iter().map(|e| e.reward.total()).sum())
    }

    pub fn is_success(&self, trace: &AnnotatedTrace) -> bool {
        trace.events.iter().any(|e| self.success.matches(e))
    }

    /// Interest rate for a class label, when the spec has an interest term.
    pub fn interest_rates(&self) -> Option<&BTreeMap<String, f64>> {
        self.reward.terms.iter().find_map(|t| match t {
            RewardTerm::Interest { rates, .. } => Some(rates),
            _ => None,
        })
    }
}
