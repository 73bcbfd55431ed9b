//! Event logs: parsing, variant filtering, activity removal, train/test
//! splitting and scenario annotation.

mod annotate;
mod csv_io;
mod value;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use annotate::{
    annotate, read_annotated, write_annotated, Actor, AnnotatedEvent, AnnotatedLog, AnnotatedTrace, EventReward,
};
pub use csv_io::{parse_log, write_log, CsvFormat};
pub use value::{Feature, Value, ValueType};

pub type Attributes = BTreeMap<String, Value>;

#[derive(Debug, Error)]
pub enum EventLogError {
    #[error("missing mandatory column `{0}`")]
    MissingColumn(String),
    #[error("line {line}: malformed timestamp `{value}`")]
    Timestamp { line: u64, value: String },
    #[error("line {line}: empty `{column}`")]
    EmptyField { line: u64, column: String },
    #[error("line {line}: cannot read `{value}` as {expected:?} for `{column}`")]
    Cell { line: u64, column: String, value: String, expected: ValueType },
    #[error("attribute `{0}` is both a trace and an event attribute")]
    AttributeClash(String),
    #[error("activity `{0}` is not classified by the scenario")]
    UnclassifiedActivity(String),
    #[error("annotation: {0}")]
    Annotation(String),
    #[error("split needs at least two traces, got {0}")]
    TooFewTraces(usize),
    #[error("fraction {0} outside the open interval (0, 1)")]
    InvalidFraction(f64),
    #[error("annotated log, line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub activity: String,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub payload: Attributes,
}

impl Event {
    pub fn new(activity: impl Into<String>, timestamp: DateTime<Utc>) -> Event {
        Event { activity: activity.into(), timestamp, payload: Attributes::new() }
    }

    pub fn with(mut self, name: &str, value: Value) -> Event {
        self.payload.insert(name.to_string(), value);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub case_id: String,
    pub events: Vec<Event>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: Attributes,
}

impl Trace {
    /// Builds a trace, ordering events by timestamp. Ties keep input order.
    pub fn new(case_id: impl Into<String>, mut events: Vec<Event>, attrs: Attributes) -> Trace {
        events.sort_by_key(|e| e.timestamp);
        Trace { case_id: case_id.into(), events, attrs }
    }

    pub fn variant(&self) -> Vec<&str> {
        self.events.iter().map(|e| e.activity.as_str()).collect()
    }
}

/// Declared attribute names and types.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub event: BTreeMap<String, ValueType>,
    pub trace: BTreeMap<String, ValueType>,
}

impl Schema {
    /// Schema covering every attribute present in `traces`.
    pub fn of(traces: &[Trace]) -> Schema {
        let mut schema = Schema::default();
        for trace in traces {
            for (k, v) in &trace.attrs {
                widen(&mut schema.trace, k, v.value_type());
            }
            for event in &trace.events {
                for (k, v) in &event.payload {
                    widen(&mut schema.event, k, v.value_type());
                }
            }
        }
        schema
    }
}

fn widen(map: &mut BTreeMap<String, ValueType>, key: &str, ty: ValueType) {
    let merged = match map.get(key) {
        None => ty,
        Some(&old) if old == ty => ty,
        Some(ValueType::Int) if ty == ValueType::Decimal => ValueType::Decimal,
        Some(ValueType::Decimal) if ty == ValueType::Int => ValueType::Decimal,
        Some(_) => ValueType::Text,
    };
    map.insert(key.to_string(), merged);
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub traces: Vec<Trace>,
    pub schema: Schema,
}

impl EventLog {
    pub fn new(traces: Vec<Trace>) -> EventLog {
        let schema = Schema::of(&traces);
        EventLog { traces, schema }
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn event_count(&self) -> usize {
        self.traces.iter().map(|t| t.events.len()).sum()
    }

    fn retain(self, traces: Vec<Trace>) -> EventLog {
        EventLog { traces, schema: self.schema }
    }
}

/// Default threshold below which variants are dropped.
pub const DEFAULT_MIN_VARIANT_FRACTION: f64 = 0.10;

/// Keeps the traces whose variant has relative frequency `>= min_fraction`.
pub fn filter_variants(log: EventLog, min_fraction: f64) -> EventLog {
    let total = log.traces.len();
    if total == 0 || min_fraction <= 0.0 {
        return log;
    }
    let mut counts: HashMap<Vec<String>, usize> = HashMap::new();
    for trace in &log.traces {
        let key = trace.events.iter().map(|e| e.activity.clone()).collect();
        *counts.entry(key).or_default() += 1;
    }
    // count / total >= min_fraction, compared without dividing
    let threshold = min_fraction * total as f64 * (1.0 - 1e-12);
    let mut traces = log.traces.clone();
    traces.retain(|t| {
        let key: Vec<String> = t.events.iter().map(|e| e.activity.clone()).collect();
        counts[&key] as f64 >= threshold
    });
    log.retain(traces)
}

/// Removes events whose activity is in `excluded`; traces left empty are dropped.
pub fn drop_activities(log: EventLog, excluded: &BTreeSet<String>) -> EventLog {
    if excluded.is_empty() {
        return log;
    }
    let traces = log
        .traces
        .iter()
        .filter_map(|t| {
            let events: Vec<Event> = t.events.iter().filter(|e| !excluded.contains(&e.activity)).cloned().collect();
            (!events.is_empty()).then(|| Trace { events, ..t.clone() })
        })
        .collect();
    log.retain(traces)
}

/// Trace-level random partition into `(train, test)`.
///
/// The train part holds `round(train_fraction * n)` traces, clamped so that
/// both parts are non-empty. Relative trace order is preserved in both parts.
pub fn split(log: &EventLog, train_fraction: f64, seed: u64) -> Result<(EventLog, EventLog), EventLogError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(EventLogError::InvalidFraction(train_fraction));
    }
    let n = log.traces.len();
    if n < 2 {
        return Err(EventLogError::TooFewTraces(n));
    }
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut crate::seeding::batch_rng(seed, 0));
    let mut in_train = vec![false; n];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let (mut train, mut test) = (Vec::with_capacity(n_train), Vec::with_capacity(n - n_train));
    for (trace, is_train) in log.traces.iter().zip(in_train) {
        if is_train {
            train.push(trace.clone())
        } else {
            test.push(trace.clone())
        }
    }
    Ok((EventLog { traces: train, schema: log.schema.clone() }, EventLog { traces: test, schema: log.schema.clone() }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn trace(id: &str, acts: &[&str]) -> Trace {
        let t0 = Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap();
        let events =
            acts.iter().enumerate().map(|(i, a)| Event::new(*a, t0 + chrono::Duration::hours(i as i64))).collect();
        Trace::new(id, events, Attributes::new())
    }

    fn log_of(variants: &[(&[&str], usize)]) -> EventLog {
        let mut traces = Vec::new();
        for (v, n) in variants {
            for _ in 0..*n {
                traces.push(trace(&format!("c{}", traces.len()), v));
            }
        }
        EventLog::new(traces)
    }

    #[test]
    fn filter_keeps_boundary_variant() {
        let log = log_of(&[(&["A", "B"], 9), (&["A", "C"], 1)]);
        assert_eq!(filter_variants(log, 0.10).len(), 10);
    }

    #[test]
    fn filter_drops_rare_variant() {
        let log = log_of(&[(&["A", "B"], 19), (&["A", "C"], 1)]);
        let kept = filter_variants(log, 0.10);
        assert_eq!(kept.len(), 19);
        assert!(kept.traces.iter().all(|t| t.variant() == ["A", "B"]));
    }

    #[test]
    fn filter_zero_is_identity() {
        let log = log_of(&[(&["A"], 1), (&["B"], 30)]);
        assert_eq!(filter_variants(log.clone(), 0.0), log);
    }

    #[test]
    fn drop_activities_cases() {
        let log = log_of(&[(&["A", "B", "A"], 1), (&["A"], 1)]);
        assert_eq!(drop_activities(log.clone(), &BTreeSet::new()), log);
        let out = drop_activities(log, &BTreeSet::from(["A".to_string()]));
        assert_eq!(out.len(), 1);
        assert_eq!(out.traces[0].variant(), ["B"]);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let log = log_of(&[(&["A"], 10)]);
        let (train, test) = split(&log, 0.6, 7).unwrap();
        assert_eq!((train.len(), test.len()), (6, 4));
        let mut ids: Vec<_> = train.traces.iter().chain(&test.traces).map(|t| &t.case_id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 10);
        assert_eq!(split(&log, 0.6, 7).unwrap(), (train, test));

        let five = log_of(&[(&["A"], 5)]);
        let (train, test) = split(&five, 0.8, 1).unwrap();
        assert_eq!((train.len(), test.len()), (4, 1));
    }

    #[test]
    fn split_errors() {
        assert!(matches!(split(&log_of(&[(&["A"], 1)]), 0.5, 0), Err(EventLogError::TooFewTraces(1))));
        assert!(matches!(split(&log_of(&[(&["A"], 4)]), 1.0, 0), Err(EventLogError::InvalidFraction(_))));
    }

    #[test]
    fn trace_sort_is_stable() {
        let t0 = Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap();
        let t = Trace::new(
            "x",
            vec![Event::new("late", t0 + chrono::Duration::days(1)), Event::new("a", t0), Event::new("b", t0)],
            Attributes::new(),
        );
        assert_eq!(t.variant(), ["a", "b", "late"]);
    }
}
