use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Attributes, Event, EventLog, EventLogError, Feature, Trace};
use crate::scenarios::{EventCtx, RewardCtx, RuleState, ScenarioSpec, TermState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Actor {
    Agent,
    Environment,
}

/// Reward contributed by one event, split into the part subject to the
/// reliability coefficient and the rest.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EventReward {
    pub plain: f64,
    pub attenuated: f64,
}

impl EventReward {
    pub fn total(&self) -> f64 {
        self.plain + self.attenuated
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedEvent {
    #[serde(flatten)]
    pub event: Event,
    pub actor: Actor,
    pub derived: BTreeMap<String, Feature>,
    pub reward: EventReward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedTrace {
    pub case_id: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: Attributes,
    pub events: Vec<AnnotatedEvent>,
}

impl AnnotatedTrace {
    pub fn activities(&self) -> impl Iterator<Item = &str> {
        self.events.iter().map(|e| e.event.activity.as_str())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedLog {
    pub scenario_id: String,
    pub traces: Vec<AnnotatedTrace>,
}

impl AnnotatedLog {
    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }
}

/// Tags every event with its actor, derived features and reward parts.
///
/// Activity-cost terms without a duration table are calibrated on `log`
/// first; pass a calibrated spec to share one table across logs.
pub fn annotate(log: &EventLog, spec: &ScenarioSpec) -> Result<AnnotatedLog, EventLogError> {
    let spec = spec.calibrated(log);
    let traces = log.traces.par_iter().map(|t| annotate_trace(t, &spec)).collect::<Result<Vec<_>, _>>()?;
    Ok(AnnotatedLog { scenario_id: spec.scenario_id.clone(), traces })
}

pub(crate) fn annotate_trace(trace: &Trace, spec: &ScenarioSpec) -> Result<AnnotatedTrace, EventLogError> {
    let rules: Vec<_> = spec.rules().collect();
    let mut rule_state = vec![RuleState::default(); rules.len()];
    let mut term_state = vec![TermState::default(); spec.reward.terms.len()];
    let mut current = trace.attrs.clone();
    let mut events = Vec::with_capacity(trace.events.len());
    let Some(first) = trace.events.first() else {
        return Ok(AnnotatedTrace { case_id: trace.case_id.clone(), attrs: trace.attrs.clone(), events });
    };
    for event in &trace.events {
        let actor = spec
            .classify(&event.activity)
            .ok_or_else(|| EventLogError::UnclassifiedActivity(event.activity.clone()))?;
        current.extend(event.payload.iter().map(|(k, v)| (k.clone(), v.clone())));
        let ctx = EventCtx { event, first, current: &current };
        let derived: BTreeMap<String, Feature> = rules
            .iter()
            .zip(rule_state.iter_mut())
            .map(|(rule, state)| (rule.name().to_string(), rule.observe(state, &ctx)))
            .collect();
        let rctx = RewardCtx { event, actor, derived: &derived, current: &current };
        let mut reward = EventReward::default();
        for (term, state) in spec.reward.terms.iter().zip(term_state.iter_mut()) {
            let r = term.contribution(state, &rctx);
            if term.is_attenuated() {
                reward.attenuated += r;
            } else {
                reward.plain += r;
            }
        }
        events.push(AnnotatedEvent { event: event.clone(), actor, derived, reward });
    }
    Ok(AnnotatedTrace { case_id: trace.case_id.clone(), attrs: trace.attrs.clone(), events })
}

const ANNOTATED_FORMAT: &str = "prescribe-annotated-log";
const ANNOTATED_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    scenario_id: String,
    traces: usize,
}

/// Writes the log as JSON lines: a header record, then one trace per line.
pub fn write_annotated<W: Write>(log: &AnnotatedLog, mut sink: W) -> Result<(), EventLogError> {
    let header = Header {
        format: ANNOTATED_FORMAT.into(),
        version: ANNOTATED_VERSION,
        scenario_id: log.scenario_id.clone(),
        traces: log.traces.len(),
    };
    serde_json::to_writer(&mut sink, &header).map_err(std::io::Error::from)?;
    sink.write_all(b"\n")?;
    for trace in &log.traces {
        serde_json::to_writer(&mut sink, trace).map_err(std::io::Error::from)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

pub fn read_annotated<R: BufRead>(source: R) -> Result<AnnotatedLog, EventLogError> {
    let mut lines = source.lines().enumerate();
    let bad = |line: usize, reason: String| EventLogError::Format { line: line + 1, reason };
    let (_, first) = lines.next().ok_or_else(|| bad(0, "missing header".into()))?;
    let header: Header = serde_json::from_str(&first?).map_err(|e| bad(0, e.to_string()))?;
    if header.format != ANNOTATED_FORMAT {
        return Err(bad(0, format!("unexpected format `{}`", header.format)));
    }
    if header.version > ANNOTATED_VERSION {
        return Err(bad(0, format!("unsupported version {}", header.version)));
    }
    let mut traces = Vec::with_capacity(header.traces);
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        traces.push(serde_json::from_str(&line).map_err(|e| bad(i, e.to_string()))?);
    }
    if traces.len() != header.traces {
        return Err(bad(traces.len() + 1, format!("expected {} traces, found {}", header.traces, traces.len())));
    }
    Ok(AnnotatedLog { scenario_id: header.scenario_id, traces })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventlog::{parse_log, CsvFormat, Value};
    use crate::scenarios::{fines_spec, loans_spec};
    use chrono::{TimeZone, Utc};

    fn worked_example_log() -> EventLog {
        let csv = "case,activity,time,amount\n\
            F1,Create fine,13/1/21,40\n\
            F1,Send fine,24/1/21,40\n\
            F1,Add penalty,18/3/21,60\n\
            F1,Payment,25/7/21,60\n";
        let fmt = CsvFormat { case_id: "case".into(), timestamp: "time".into(), ..CsvFormat::default() }
            .with_timestamp_format("%d/%m/%y");
        parse_log(csv.as_bytes(), &fmt).unwrap()
    }

    fn column<'a>(t: &'a AnnotatedTrace, name: &str) -> Vec<&'a Feature> {
        t.events.iter().map(|e| &e.derived[name]).collect()
    }

    #[test]
    fn worked_example_enrichment() {
        let log = annotate(&worked_example_log(), &fines_spec()).unwrap();
        let t = &log.traces[0];
        let ints: Vec<_> = column(t, "2months").iter().map(|f| f.as_int().unwrap()).collect();
        assert_eq!(ints, [0, 0, 1, 3]);
        let classes: Vec<_> = column(t, "amClass").iter().map(|f| f.to_string()).collect();
        assert_eq!(classes, ["low", "low", "high", "high"]);
        let actors: Vec<_> = t.events.iter().map(|e| e.actor).collect();
        assert_eq!(actors, [Actor::Agent, Actor::Agent, Actor::Agent, Actor::Environment]);
        let pay: Vec<_> = column(t, "payType").iter().map(|f| f.to_string()).collect();
        assert_eq!(pay, ["none", "none", "none", "full"]);
        let rewards: Vec<_> = t.events.iter().map(|e| e.reward.total()).collect();
        assert_eq!(rewards, [0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn loan_amount_boundary_is_low() {
        let t0 = Utc.with_ymd_and_hms(2012, 1, 1, 9, 0, 0).unwrap();
        let trace = Trace::new(
            "L1",
            vec![Event::new("A_SUBMITTED", t0)],
            Attributes::from([("AMOUNT_REQ".to_string(), Value::Int(6000))]),
        );
        let log = annotate(&EventLog::new(vec![trace]), &loans_spec()).unwrap();
        assert_eq!(log.traces[0].events[0].derived["amClass"], Feature::text("low"));
    }

    #[test]
    fn calls_counted_only_after_offer() {
        let t0 = Utc.with_ymd_and_hms(2012, 1, 1, 9, 0, 0).unwrap();
        let acts = [
            "A_SUBMITTED",
            "W_Nabellen offertes",
            "O_SENT",
            "W_Nabellen offertes",
            "W_Nabellen offertes",
            "W_Nabellen offertes",
        ];
        let events =
            acts.iter().enumerate().map(|(i, a)| Event::new(*a, t0 + chrono::Duration::hours(i as i64))).collect();
        let trace = Trace::new("L1", events, Attributes::from([("AMOUNT_REQ".into(), Value::Int(9000))]));
        let log = annotate(&EventLog::new(vec![trace]), &loans_spec()).unwrap();
        let last = log.traces[0].events.last().unwrap();
        assert_eq!(last.derived["call#"], Feature::Int(3));
        assert_eq!(last.derived["offer#"], Feature::Int(1));
    }

    #[test]
    fn unclassified_activity_is_named() {
        let mut log = worked_example_log();
        log.traces[0].events[1].activity = "Coffee".into();
        match annotate(&log, &fines_spec()) {
            Err(EventLogError::UnclassifiedActivity(a)) => assert_eq!(a, "Coffee"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let log = annotate(&worked_example_log(), &fines_spec()).unwrap();
        let mut buf = Vec::new();
        write_annotated(&log, &mut buf).unwrap();
        assert_eq!(String::from_utf8_lossy(&buf).lines().count(), 2);
        assert_eq!(read_annotated(buf.as_slice()).unwrap(), log);
        let truncated = &buf[..buf.len() / 2];
        assert!(read_annotated(truncated).is_err());
    }
}
