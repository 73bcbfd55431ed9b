//! Reward terms. Each term turns annotated events into per-event reward
//! contributions; the KPI of a complete trace is the sum of all of them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::features::{PAY_APPEAL, PAY_FULL};
use super::LabelSet;
use crate::eventlog::{Actor, Attributes, Event, EventLog, Feature, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub terms: Vec<RewardTerm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreditBand {
    pub max_bucket: i64,
    pub credits: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardTerm {
    /// Working-time cost: average duration (hours) of the activity times an
    /// hourly rate, charged on agent events (or on `activities` when given).
    ActivityCost {
        hourly_rate: f64,
        #[serde(default = "default_max_gap_hours")]
        max_gap_hours: f64,
        #[serde(default)]
        activities: Option<LabelSet>,
        /// Lower-cased activity label to average hours. Estimated from the
        /// log being annotated when absent.
        #[serde(default)]
        durations: Option<BTreeMap<String, f64>>,
    },
    /// Interest earned once, on the first trigger event:
    /// `rates[class] * base`, where the base is the class amount when
    /// `class_amounts` is set and the trace's `amount_attribute` otherwise.
    /// Attenuated by the reliability coefficient in the MDP.
    Interest {
        trigger_activities: LabelSet,
        class_feature: String,
        rates: BTreeMap<String, f64>,
        amount_attribute: String,
        #[serde(default)]
        class_amounts: Option<BTreeMap<String, f64>>,
    },
    /// Credits for the first full payment by elapsed bucket, or a discredit
    /// when the other party wins an appeal.
    PaymentCredits {
        status_feature: String,
        bucket_feature: String,
        schedule: Vec<CreditBand>,
        late_credits: f64,
        appeal_credits: f64,
    },
}

fn default_max_gap_hours() -> f64 {
    8.0
}

#[derive(Clone, Debug, Default)]
pub(crate) struct TermState {
    done: bool,
    appealed: bool,
}

pub(crate) struct RewardCtx<'a> {
    pub event: &'a Event,
    pub actor: Actor,
    pub derived: &'a BTreeMap<String, Feature>,
    pub current: &'a Attributes,
}

impl RewardTerm {
    pub fn is_attenuated(&self) -> bool {
        matches!(self, RewardTerm::Interest { .. })
    }

    /// Features this term reads from the annotated event.
    pub fn features(&self) -> Vec<&str> {
        match self {
            RewardTerm::ActivityCost { .. } => vec![],
            RewardTerm::Interest { class_feature, .. } => vec![class_feature],
            RewardTerm::PaymentCredits { status_feature, bucket_feature, .. } => vec![status_feature, bucket_feature],
        }
    }

    pub(crate) fn contribution(&self, state: &mut TermState, ctx: &RewardCtx<'_>) -> f64 {
        match self {
            RewardTerm::ActivityCost { hourly_rate, activities, durations, .. } => {
                if !charged(activities.as_ref(), ctx.actor, &ctx.event.activity) {
                    return 0.0;
                }
                let hours =
                    durations.as_ref().and_then(|d| d.get(&ctx.event.activity.to_lowercase())).copied().unwrap_or(0.0);
                -hours * hourly_rate
            }
            RewardTerm::Interest { trigger_activities, class_feature, rates, amount_attribute, class_amounts } => {
                if state.done || !trigger_activities.contains(&ctx.event.activity) {
                    return 0.0;
                }
                state.done = true;
                let class = ctx.derived.get(class_feature).map(|f| f.to_string()).unwrap_or_default();
                let rate = rates.get(&class).copied().unwrap_or(0.0);
                let base = match class_amounts {
                    Some(amounts) => amounts.get(&class).copied().unwrap_or(0.0),
                    None => ctx.current.get(amount_attribute).and_then(Value::as_f64).unwrap_or(0.0),
                };
                rate * base
            }
            RewardTerm::PaymentCredits { status_feature, bucket_feature, schedule, late_credits, appeal_credits } => {
                let status = ctx.derived.get(status_feature).map(|f| f.to_string());
                match status.as_deref() {
                    Some(PAY_FULL) if !state.done => {
                        state.done = true;
                        let bucket = ctx.derived.get(bucket_feature).and_then(Feature::as_int).unwrap_or(i64::MAX);
                        schedule.iter().find(|b| bucket <= b.max_bucket).map_or(*late_credits, |b| b.credits)
                    }
                    Some(PAY_APPEAL) if !state.appealed => {
                        state.appealed = true;
                        *appeal_credits
                    }
                    _ => 0.0,
                }
            }
        }
    }
}

fn charged(activities: Option<&LabelSet>, actor: Actor, activity: &str) -> bool {
    match activities {
        Some(set) => set.contains(activity),
        None => actor == Actor::Agent,
    }
}

/// Average duration in hours of each charged activity, measured as the gap
/// to the next event of the same trace and capped at `max_gap_hours`.
pub(crate) fn estimate_durations(
    log: &EventLog,
    activities: Option<&LabelSet>,
    max_gap_hours: f64,
    classify: impl Fn(&str) -> Option<Actor>,
) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, u64)> = BTreeMap::new();
    for trace in &log.traces {
        for pair in trace.events.windows(2) {
            let Some(actor) = classify(&pair[0].activity) else { continue };
            if !charged(activities, actor, &pair[0].activity) {
                continue;
            }
            let hours = (pair[1].timestamp - pair[0].timestamp).num_milliseconds() as f64 / 3_600_000.0;
            let slot = acc.entry(pair[0].activity.to_lowercase()).or_default();
            slot.0 += hours.clamp(0.0, max_gap_hours);
            slot.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect()
}
