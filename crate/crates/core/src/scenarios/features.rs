//! Feature rules: per-trace running extractors that turn raw events into the
//! discrete attributes used for states and rewards.

use serde::{Deserialize, Serialize};

use super::LabelSet;
use crate::eventlog::{Attributes, Event, Feature, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureRule {
    /// Running count of events whose activity is in `activities`. When
    /// `after` is non-empty, counting starts once one of those activities
    /// has been seen.
    Count {
        name: String,
        activities: LabelSet,
        #[serde(default)]
        after: LabelSet,
        #[serde(default)]
        cap: Option<i64>,
    },
    /// True from the first event whose activity is in `activities` on.
    Flag { name: String, activities: LabelSet },
    /// Number of whole `days`-long intervals elapsed since the first event.
    ElapsedBuckets { name: String, days: u32 },
    /// Class label of a numeric attribute (the current event's value, else the
    /// last value seen in the trace, else the trace attribute).
    AmountClass {
        name: String,
        attribute: String,
        bounds: Vec<f64>,
        labels: Vec<String>,
        /// `true`: class i holds values `<= bounds[i]`; `false`: `< bounds[i]`.
        upper_inclusive: bool,
    },
    /// Payment state of the event: `full`, `partial`, `appeal` or `none`.
    PaymentStatus {
        name: String,
        payment_activities: LabelSet,
        /// Amount paid by a payment event; a payment without it settles the
        /// outstanding amount.
        #[serde(default)]
        paid_attribute: Option<String>,
        due_attributes: Vec<String>,
        #[serde(default)]
        appeal_won: Option<AppealRule>,
    },
}

/// Recognizes events recording that the other party won an appeal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppealRule {
    pub activities: LabelSet,
    #[serde(default)]
    pub attribute: Option<String>,
    #[serde(default)]
    pub values: Vec<String>,
}

impl AppealRule {
    pub fn matches(&self, event: &Event) -> bool {
        if !self.activities.contains(&event.activity) {
            return false;
        }
        match &self.attribute {
            None => true,
            Some(attr) => event.payload.get(attr).is_some_and(|v| self.values.iter().any(|want| *want == v.to_cell())),
        }
    }
}

pub const PAY_FULL: &str = "full";
pub const PAY_PARTIAL: &str = "partial";
pub const PAY_APPEAL: &str = "appeal";
pub const PAY_NONE: &str = "none";
pub const UNKNOWN_CLASS: &str = "unknown";

/// What a rule has seen so far in the current trace.
#[derive(Clone, Debug, Default)]
pub(crate) struct RuleState {
    count: i64,
    armed: bool,
    flag: bool,
    paid: f64,
}

/// Per-event inputs shared by all rules.
pub(crate) struct EventCtx<'a> {
    pub event: &'a Event,
    pub first: &'a Event,
    /// Payload values carried forward through the trace, seeded with the
    /// trace attributes.
    pub current: &'a Attributes,
}

impl FeatureRule {
    pub fn name(&self) -> &str {
        match self {
            FeatureRule::Count { name, .. }
            | FeatureRule::Flag { name, .. }
            | FeatureRule::ElapsedBuckets { name, .. }
            | FeatureRule::AmountClass { name, .. }
            | FeatureRule::PaymentStatus { name, .. } => name,
        }
    }

    pub(crate) fn validate(&self) -> Result<(), String> {
        match self {
            FeatureRule::ElapsedBuckets { days: 0, .. } => Err(format!("`{}`: days must be positive", self.name())),
            FeatureRule::AmountClass { bounds, labels, .. } if labels.len() != bounds.len() + 1 => {
                Err(format!("`{}`: need one more label than bounds", self.name()))
            }
            FeatureRule::AmountClass { bounds, .. } if bounds.windows(2).any(|w| w[0] >= w[1]) => {
                Err(format!("`{}`: bounds must increase", self.name()))
            }
            _ => Ok(()),
        }
    }

    pub(crate) fn observe(&self, state: &mut RuleState, ctx: &EventCtx<'_>) -> Feature {
        let activity = &ctx.event.activity;
        match self {
            FeatureRule::Count { activities, after, cap, .. } => {
                if (after.is_empty() || state.armed) && activities.contains(activity) {
                    state.count += 1;
                    if let Some(cap) = cap {
                        state.count = state.count.min(*cap);
                    }
                }
                if after.contains(activity) {
                    state.armed = true;
                }
                Feature::Int(state.count)
            }
            FeatureRule::Flag { activities, .. } => {
                state.flag |= activities.contains(activity);
                Feature::Bool(state.flag)
            }
            FeatureRule::ElapsedBuckets { days, .. } => {
                let elapsed = (ctx.event.timestamp - ctx.first.timestamp).num_milliseconds().max(0);
                Feature::Int(elapsed / (*days as i64 * 86_400_000))
            }
            FeatureRule::AmountClass { attribute, bounds, labels, upper_inclusive, .. } => {
                match ctx.current.get(attribute).and_then(Value::as_f64) {
                    None => Feature::text(UNKNOWN_CLASS),
                    Some(v) => {
                        let idx = bounds
                            .iter()
                            .position(|&b| if *upper_inclusive { v <= b } else { v < b })
                            .unwrap_or(bounds.len());
                        Feature::text(labels[idx].clone())
                    }
                }
            }
            FeatureRule::PaymentStatus { payment_activities, paid_attribute, due_attributes, appeal_won, .. } => {
                if appeal_won.as_ref().is_some_and(|r| r.matches(ctx.event)) {
                    return Feature::text(PAY_APPEAL);
                }
                if !payment_activities.contains(activity) {
                    return Feature::text(PAY_NONE);
                }
                let due: f64 = due_attributes.iter().filter_map(|a| ctx.current.get(a).and_then(Value::as_f64)).sum();
                let amount = paid_attribute
                    .as_ref()
                    .and_then(|a| ctx.event.payload.get(a))
                    .and_then(Value::as_f64)
                    .unwrap_or((due - state.paid).max(0.0));
                state.paid += amount;
                if due <= 0.0 || state.paid >= due - 1e-9 {
                    Feature::text(PAY_FULL)
                } else {
                    Feature::text(PAY_PARTIAL)
                }
            }
        }
    }
}
