#![allow(dead_code)]

use chrono::{Duration, TimeZone, Utc};
use prescribe_core::eventlog::{annotate, parse_log, Attributes, CsvFormat};
use prescribe_core::{AnnotatedLog, Event, EventLog, ScenarioSpec, Trace, Value};

pub const WORKED_EXAMPLE_CSV: &str = "case,activity,time,amount\n\
    F1,Create fine,13/1/21,40\n\
    F1,Send fine,24/1/21,40\n\
    F1,Add penalty,18/3/21,60\n\
    F1,Payment,25/7/21,60\n";

pub fn worked_example_log() -> EventLog {
    let fmt = CsvFormat { case_id: "case".into(), timestamp: "time".into(), ..CsvFormat::default() }
        .with_timestamp_format("%d/%m/%y");
    parse_log(WORKED_EXAMPLE_CSV.as_bytes(), &fmt).unwrap()
}

/// Fines trace from `(activity, day)` pairs; the amount goes on the first
/// event.
pub fn fines_trace(case: &str, amount: i64, steps: &[(&str, i64)]) -> Trace {
    let t0 = Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap();
    let events = steps
        .iter()
        .enumerate()
        .map(|(i, (a, d))| {
            let e = Event::new(*a, t0 + Duration::days(*d));
            if i == 0 {
                e.with("amount", Value::Int(amount))
            } else {
                e
            }
        })
        .collect();
    Trace::new(case, events, Attributes::new())
}

pub fn annotated(traces: Vec<Trace>, spec: &ScenarioSpec) -> AnnotatedLog {
    annotate(&EventLog::new(traces), spec).unwrap()
}

pub fn named(label: &str, terminal: bool) -> prescribe_core::State {
    prescribe_core::State { last_activity: label.into(), history: vec![], env: vec![], terminal }
}

/// MDP from `(src, action, dst, count, reward)` rows. States whose label
/// starts with `T` are terminal.
pub fn tiny_mdp(rows: &[(&str, &str, &str, u64, f64)], initial: &[(&str, u64)]) -> prescribe_core::Mdp {
    use prescribe_core::mdp::{assemble, BuildOptions, EdgeCount, MdpMeta};
    let st = |l: &str| named(l, l.starts_with('T'));
    let edges = rows
        .iter()
        .map(|&(s, a, d, count, r)| EdgeCount {
            src: st(s),
            action: a.into(),
            dst: st(d),
            count,
            successes: if d.starts_with("TS") { count } else { 0 },
            plain_reward: r,
            attenuated_reward: 0.0,
        })
        .collect();
    let meta = MdpMeta {
        scenario_id: "tiny".into(),
        history_names: vec![],
        env_names: vec![],
        lambda: None,
        gamma: 1.0,
        longest_trace: rows.len(),
    };
    let initial = initial.iter().map(|&(s, n)| (st(s), n)).collect();
    assemble(meta, edges, initial, BuildOptions::default()).unwrap()
}

const CF: &str = "Create fine";
const SF: &str = "Send fine";
const AP: &str = "Add penalty";
const SCC: &str = "Send for Credit Collection";
const PAY: &str = "Payment";

/// Ten low-amount Fines traces. Under [`rq_fixture_policy`] the first four
/// follow the policy throughout; the rest deviate at event 1 or 2.
pub fn rq_fixture() -> Vec<Trace> {
    let rows: [&[(&str, i64)]; 10] = [
        &[(CF, 0), (SF, 10), (PAY, 30)],
        &[(CF, 0), (SF, 10), (AP, 70), (PAY, 100)],
        &[(CF, 0), (SF, 10), (AP, 70), (PAY, 110)],
        &[(CF, 0), (SF, 10), (AP, 70), (SCC, 400)],
        &[(CF, 0), (SCC, 20), (PAY, 40)],
        &[(CF, 0), (SF, 10), (SCC, 30), (PAY, 300)],
        &[(CF, 0), (AP, 5), (PAY, 10)],
        &[(CF, 0), (SF, 10), (SF, 20)],
        &[(CF, 0), (SCC, 10), ("Appeal to Judge", 20)],
        &[(CF, 0), (SF, 10), (SCC, 30), (PAY, 50)],
    ];
    let mut traces: Vec<_> =
        rows.iter().enumerate().map(|(i, steps)| fines_trace(&format!("Q{:02}", i + 1), 30, steps)).collect();
    traces[8].events[2].payload.insert("dismissal".into(), Value::Text("G".into()));
    traces
}

pub const RQ_FIXTURE_KPIS: [f64; 10] = [3.0, 3.0, 3.0, 0.0, 3.0, 2.0, 3.0, 0.0, -1.0, 3.0];

pub fn rq_fixture_policy(mdp: &prescribe_core::Mdp) -> prescribe_core::Policy {
    use prescribe_core::{Feature, Policy, PolicyKind, State};
    let st = |la: &str, bucket: i64| State {
        last_activity: la.into(),
        history: vec![Feature::Int(bucket)],
        env: vec![Feature::text("low")],
        terminal: false,
    };
    let choices = [
        (State::start(), "Create fine-0"),
        (st(CF, 0), "Send fine-0"),
        (st(SF, 0), "Add penalty-1"),
        (st(AP, 1), "Send for Credit Collection-6"),
    ]
    .into_iter()
    .map(|(s, a)| (s, a.to_string()))
    .collect();
    Policy {
        kind: PolicyKind::Optimal,
        scenario_id: mdp.scenario_id().into(),
        mdp_fingerprint: mdp.fingerprint().into(),
        choices,
    }
}
