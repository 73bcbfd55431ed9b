mod common;

use common::{annotated, fines_trace, rq_fixture, rq_fixture_policy, RQ_FIXTURE_KPIS};
use prescribe_core::logeval::{
    follows_policy, render_rq1, render_rq2, rq1_report, rq2_prefix_analysis, write_rq2_series, Adherence, LogEvalError,
    Partition,
};
use prescribe_core::mdp::build_mdp;
use prescribe_core::rl::{customary_policy, random_policy};
use prescribe_core::scenarios::fines_spec;
use prescribe_core::{AnnotatedLog, Mdp, Policy, Trace};
use proptest::prelude::*;

fn setup(traces: Vec<Trace>) -> (AnnotatedLog, Mdp, Policy) {
    let spec = fines_spec();
    let log = annotated(traces, &spec);
    let mdp = build_mdp(&log, &spec).unwrap();
    let policy = rq_fixture_policy(&mdp);
    (log, mdp, policy)
}

#[test]
fn fixture_kpis_are_as_designed() {
    let spec = fines_spec();
    let (log, _, _) = setup(rq_fixture());
    let kpis: Vec<_> = log.traces.iter().map(|t| spec.kpi(t).unwrap()).collect();
    assert_eq!(kpis, RQ_FIXTURE_KPIS);
}

#[test]
fn follows_policy_examples() {
    let spec = fines_spec();
    let (log, mdp, policy) = setup(rq_fixture());
    let at = |i: usize, from: usize| follows_policy(&log.traces[i], &policy, &mdp, &spec, from);
    assert_eq!(at(1, 0), Adherence::Follows);
    assert_eq!(at(4, 0), Adherence::Deviates);
    assert_eq!(at(5, 0), Adherence::Deviates);
    assert_eq!(at(5, 2), Adherence::Deviates);
    assert_eq!(at(5, 3), Adherence::Follows);
    assert_eq!(at(5, 99), Adherence::Follows);
}

#[test]
fn unknown_states_are_unreplayable() {
    let spec = fines_spec();
    let (_, mdp, policy) = setup(rq_fixture());
    let odd =
        annotated(vec![fines_trace("X", 30, &[("Create fine", 0), ("Add penalty", 200), ("Send fine", 300)])], &spec);
    assert_eq!(follows_policy(&odd.traces[0], &policy, &mdp, &spec, 0), Adherence::Unreplayable);
    let mut log = annotated(rq_fixture(), &spec);
    log.traces.push(odd.traces[0].clone());
    let report = rq1_report(&log, &policy, &mdp, &spec).unwrap();
    assert_eq!(report.unreplayable, 1);
    assert_eq!(report.row(Partition::NonOptimalP).trace_count, 7);
}

#[test]
fn rq1_fixture_matches_hand_computation() {
    let spec = fines_spec();
    let (log, mdp, policy) = setup(rq_fixture());
    let r = rq1_report(&log, &policy, &mdp, &spec).unwrap();
    let all = r.row(Partition::All);
    let opt = r.row(Partition::OptimalP);
    let non = r.row(Partition::NonOptimalP);
    assert_eq!((all.trace_count, opt.trace_count, non.trace_count), (10, 4, 6));
    assert_eq!((opt.fraction, non.fraction), (0.4, 0.6));
    assert_eq!(all.avg_kpi, Some(1.9));
    assert_eq!(opt.avg_kpi, Some(2.25));
    assert_eq!(non.avg_kpi, Some(10.0 / 6.0));
    assert_eq!(all.outcome_rate, Some(0.7));
    assert_eq!(opt.outcome_rate, Some(0.75));
    assert_eq!(non.outcome_rate, Some(4.0 / 6.0));
    assert_eq!(r.unreplayable, 0);
    let table = render_rq1(&r, "full payment");
    assert!(table.contains("Optimal P."));
    assert!(table.contains("Non-Optimal P."));
}

#[test]
fn rq2_fixture_matches_hand_computation() {
    let spec = fines_spec();
    let (log, mdp, policy) = setup(rq_fixture());
    let r = rq2_prefix_analysis(&log, &policy, &mdp, &spec, 6, true).unwrap();
    let got: Vec<_> = r.rows.iter().map(|x| (x.prefix_len, x.avg_delta_kpi, x.trace_count, x.excluded)).collect();
    assert_eq!(
        got,
        [
            (0, Some(0.35), 10, 0),
            (1, Some(0.35), 10, 0),
            (2, Some(0.175), 10, 0),
            (3, Some(0.0), 10, 0),
            (4, Some(0.0), 5, 0),
            (5, None, 0, 0),
            (6, None, 0, 0),
        ]
    );
    let excl = rq2_prefix_analysis(&log, &policy, &mdp, &spec, 4, false).unwrap();
    assert_eq!((excl.rows[4].avg_delta_kpi, excl.rows[4].trace_count, excl.rows[4].excluded), (Some(0.0), 4, 1));

    let (mut delta, mut counts) = (Vec::new(), Vec::new());
    write_rq2_series(&r, &mut delta, &mut counts).unwrap();
    let delta = String::from_utf8(delta).unwrap();
    assert_eq!(delta.lines().count(), 6);
    assert!(delta.starts_with("L\tavg_delta_kpi\n0\t0.35\n"));
    assert_eq!(String::from_utf8(counts).unwrap().lines().last(), Some("6\t0"));
    assert!(render_rq2(&r).contains("n/a"));
}

#[test]
fn rq2_shared_prefix_example() {
    let spec = fines_spec();
    let traces = vec![
        fines_trace("A", 30, &[("Create fine", 0), ("Send fine", 10), ("Add penalty", 70), ("Payment", 200)]),
        fines_trace("B", 30, &[("Create fine", 0), ("Send fine", 10), ("Add penalty", 70), ("Payment", 100)]),
        fines_trace(
            "R",
            30,
            &[("Create fine", 0), ("Send fine", 10), ("Send for Credit Collection", 30), ("Payment", 400)],
        ),
    ];
    let (log, mdp, policy) = setup(traces);
    let kpis: Vec<_> = log.traces.iter().map(|t| spec.kpi(t).unwrap()).collect();
    assert_eq!(kpis, [2.0, 3.0, 1.0]);
    let r = rq2_prefix_analysis(&log, &policy, &mdp, &spec, 2, true).unwrap();
    // Estimate 2.5 for every trace: deltas 0.5, -0.5 and 1.5.
    assert_eq!(r.rows[2].avg_delta_kpi, Some(0.5));
}

#[test]
fn self_match_gives_zero_delta() {
    let spec = fines_spec();
    let (log, mdp, policy) = setup(vec![rq_fixture()[1].clone()]);
    let r = rq2_prefix_analysis(&log, &policy, &mdp, &spec, 1, true).unwrap();
    assert_eq!(r.rows[0].avg_delta_kpi, Some(0.0));
    let r = rq2_prefix_analysis(&log, &policy, &mdp, &spec, 1, false).unwrap();
    assert_eq!((r.rows[0].trace_count, r.rows[0].excluded), (0, 1));
}

#[test]
fn all_following_leaves_empty_partition() {
    let spec = fines_spec();
    let (log, mdp, policy) = setup(rq_fixture()[..4].to_vec());
    let r = rq1_report(&log, &policy, &mdp, &spec).unwrap();
    let non = r.row(Partition::NonOptimalP);
    assert_eq!((non.trace_count, non.avg_kpi, non.outcome_rate), (0, None, None));
    assert_eq!(r.row(Partition::OptimalP).fraction, 1.0);
}

#[test]
fn errors() {
    let spec = fines_spec();
    let (log, mdp, policy) = setup(rq_fixture());
    let empty = AnnotatedLog { scenario_id: "fines".into(), traces: vec![] };
    assert!(matches!(rq1_report(&empty, &policy, &mdp, &spec), Err(LogEvalError::EmptyLog)));
    assert!(matches!(rq2_prefix_analysis(&log, &policy, &mdp, &spec, 0, true), Err(LogEvalError::MaxPrefix)));
    let other = Policy { scenario_id: "loans".into(), ..policy };
    assert!(matches!(rq1_report(&log, &other, &mdp, &spec), Err(LogEvalError::ScenarioMismatch { .. })));
}

fn arb_traces() -> impl Strategy<Value = Vec<Trace>> {
    let acts =
        prop::sample::select(vec!["Create fine", "Send fine", "Add penalty", "Payment", "Send for Credit Collection"]);
    let trace = prop::collection::vec((acts, 0i64..150), 1..6);
    prop::collection::vec(trace, 1..25).prop_map(|ts| {
        ts.into_iter()
            .enumerate()
            .map(|(i, steps)| {
                let mut day = 0;
                let steps: Vec<(&str, i64)> = steps
                    .into_iter()
                    .map(|(a, d)| {
                        day += d;
                        (a, day)
                    })
                    .collect();
                fines_trace(&format!("P{i}"), 30, &steps)
            })
            .collect()
    })
}

/// Direct O(n^2) evaluation of the per-prefix definition.
fn rq2_oracle(
    log: &AnnotatedLog,
    policy: &Policy,
    mdp: &Mdp,
    max_prefix: usize,
    include_self: bool,
) -> Vec<(Option<f64>, usize)> {
    let spec = fines_spec();
    let acts = |t: &prescribe_core::AnnotatedTrace| t.activities().map(str::to_string).collect::<Vec<_>>();
    (0..=max_prefix)
        .map(|l| {
            let mut sum = 0.0;
            let mut n = 0;
            for (i, t) in log.traces.iter().enumerate() {
                if t.events.len() < l {
                    continue;
                }
                let prefix = &acts(t)[..l];
                let (mut s, mut c) = (0.0, 0usize);
                for (j, u) in log.traces.iter().enumerate() {
                    if (!include_self && i == j) || u.events.len() < l || &acts(u)[..l] != prefix {
                        continue;
                    }
                    if follows_policy(u, policy, mdp, &spec, l) == Adherence::Follows {
                        s += spec.kpi(u).unwrap();
                        c += 1;
                    }
                }
                if c > 0 {
                    sum += s / c as f64 - spec.kpi(t).unwrap();
                    n += 1;
                }
            }
            ((n > 0).then(|| sum / n as f64), n)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn logeval_properties(traces in arb_traces(), include_self in any::<bool>()) {
        let spec = fines_spec();
        let log = annotated(traces, &spec);
        let Ok(mdp) = build_mdp(&log, &spec) else { return Ok(()) };
        for policy in [customary_policy(&mdp), random_policy(&mdp), rq_fixture_policy(&mdp)] {
            let r = rq1_report(&log, &policy, &mdp, &spec).unwrap();
            let (opt, non) = (r.row(Partition::OptimalP), r.row(Partition::NonOptimalP));
            prop_assert_eq!(opt.trace_count + non.trace_count, log.traces.len());
            prop_assert!((opt.fraction + non.fraction - 1.0).abs() < 1e-12);

            let (mut sum, mut n) = (0.0, 0usize);
            for t in &log.traces {
                let follows = follows_policy(t, &policy, &mdp, &spec, 0) == Adherence::Follows;
                if follows {
                    sum += spec.kpi(t).unwrap();
                    n += 1;
                    for k in 0..8 {
                        prop_assert_eq!(follows_policy(t, &policy, &mdp, &spec, k), Adherence::Follows);
                    }
                }
            }
            prop_assert_eq!(opt.avg_kpi, (n > 0).then(|| sum / n as f64));

            let rest = AnnotatedLog { scenario_id: log.scenario_id.clone(), traces: log.traces[1..].to_vec() };
            for (a, b) in log.traces[1..].iter().zip(&rest.traces) {
                prop_assert_eq!(follows_policy(a, &policy, &mdp, &spec, 0), follows_policy(b, &policy, &mdp, &spec, 0));
            }

            let rq2 = rq2_prefix_analysis(&log, &policy, &mdp, &spec, 5, include_self).unwrap();
            for (row, (avg, count)) in rq2.rows.iter().zip(rq2_oracle(&log, &policy, &mdp, 5, include_self)) {
                prop_assert_eq!(row.trace_count, count);
                match (row.avg_delta_kpi, avg) {
                    (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9),
                    (x, y) => prop_assert_eq!(x, y),
                }
            }
        }
    }
}
