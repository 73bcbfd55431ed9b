//! Synthetic logs drawn from small hidden process models with a known
//! optimal policy.
//!
//! A template is a tree of decision nodes. At each node the logging actor
//! picks one of a few agent activities with fixed behavior weights and the
//! environment answers with one of several outcomes whose integer weights
//! depend on the case class. The hidden MDP is derived by rendering every
//! path of the template, annotating it under the scenario spec and
//! replaying it, so its states, actions and rewards are exactly those the
//! MDP builder sees in generated logs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rayon::prelude::*;

use super::{fines_spec, loans_spec, ScenarioSpec};
use crate::eventlog::{annotate, Attributes, Event, EventLog, EventReward, Trace, Value};
use crate::mdp::{assemble, replay, BuildOptions, EdgeCount, Mdp, MdpMeta, State};
use crate::rl::{exact, Policy, PolicyKind};
use crate::seeding::{batch_rng, mix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Template {
    FinesLike,
    LoansLike,
}

impl FromStr for Template {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fines" | "fines-like" => Ok(Template::FinesLike),
            "loans" | "loans-like" => Ok(Template::LoansLike),
            other => Err(format!("unknown template `{other}` (expected fines or loans)")),
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Template::FinesLike => "fines",
            Template::LoansLike => "loans",
        })
    }
}

/// Hidden model behind a synthetic log.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub mdp: Mdp,
    /// Exact optimum of `mdp`.
    pub optimal: Policy,
    pub optimal_value: f64,
    /// Behavior weights of the logging actor per state and action label.
    pub behavior: BTreeMap<State, BTreeMap<String, u64>>,
}

#[derive(Clone, Copy, Debug)]
enum Timing {
    /// Days after the first event of the case.
    Day(i64),
    /// After the previous event, by the gap table of the previous activity.
    Gap,
}

#[derive(Clone, Debug)]
struct Ev {
    activity: &'static str,
    at: Timing,
    payload: Vec<(&'static str, Value)>,
}

fn ev(activity: &'static str, at: Timing) -> Ev {
    Ev { activity, at, payload: vec![] }
}

#[derive(Clone, Debug)]
struct Outcome {
    weights: Vec<u64>,
    env: Vec<Ev>,
    next: usize,
}

#[derive(Clone, Debug)]
struct Opt {
    agent: Ev,
    behavior: u64,
    outcomes: Vec<Outcome>,
}

#[derive(Clone, Debug)]
struct Class {
    weight: u64,
    trace_attrs: Vec<(&'static str, Value)>,
    first_payload: Vec<(&'static str, Value)>,
}

#[derive(Clone, Debug)]
struct Design {
    spec: ScenarioSpec,
    case_prefix: &'static str,
    base: DateTime<Utc>,
    spacing: Duration,
    classes: Vec<Class>,
    leading: Vec<Ev>,
    /// Node 0 is the root; nodes without options close the case.
    nodes: Vec<Vec<Opt>>,
    gaps: BTreeMap<&'static str, Duration>,
}

fn out(weights: &[u64], env: Vec<Ev>, next: usize) -> Outcome {
    Outcome { weights: weights.to_vec(), env, next }
}

fn fines_design() -> Design {
    use Timing::Day;
    const T: usize = 4;
    let classes = [(3, 20), (2, 80)]
        .into_iter()
        .map(|(weight, amount)| Class {
            weight,
            trace_attrs: vec![],
            first_payload: vec![("amount", Value::Int(amount))],
        })
        .collect();
    let penalty = |day| Ev { activity: "Add penalty", at: Day(day), payload: vec![] };
    let appeal_won =
        Ev { activity: "Appeal to Judge", at: Day(100), payload: vec![("dismissal", Value::Text("G".into()))] };
    let nodes = vec![
        vec![Opt { agent: ev("Create fine", Day(0)), behavior: 1, outcomes: vec![out(&[1, 1], vec![], 1)] }],
        vec![
            Opt {
                agent: ev("Send fine", Day(20)),
                behavior: 9,
                outcomes: vec![out(&[5, 3], vec![ev("Payment", Day(50))], T), out(&[5, 7], vec![], 2)],
            },
            Opt {
                agent: ev("Send for Credit Collection", Day(20)),
                behavior: 1,
                outcomes: vec![out(&[1, 1], vec![ev("Payment", Day(40))], T), out(&[9, 9], vec![], T)],
            },
        ],
        vec![
            Opt {
                agent: penalty(70),
                behavior: 8,
                outcomes: vec![
                    out(&[4, 3], vec![ev("Payment", Day(200))], T),
                    out(&[1, 3], vec![appeal_won], T),
                    out(&[5, 4], vec![], 3),
                ],
            },
            Opt {
                agent: ev("Send for Credit Collection", Day(70)),
                behavior: 2,
                outcomes: vec![out(&[2, 2], vec![ev("Payment", Day(130))], T), out(&[8, 8], vec![], T)],
            },
        ],
        vec![
            Opt {
                agent: ev("Send for Credit Collection", Day(400)),
                behavior: 8,
                outcomes: vec![out(&[3, 3], vec![ev("Payment", Day(420))], T), out(&[7, 7], vec![], T)],
            },
            Opt {
                agent: ev("Send for Credit Collection", Day(130)),
                behavior: 2,
                outcomes: vec![out(&[3, 3], vec![ev("Payment", Day(150))], T), out(&[7, 7], vec![], T)],
            },
        ],
        vec![],
    ];
    Design {
        spec: fines_spec(),
        case_prefix: "F",
        base: Utc.with_ymd_and_hms(2020, 1, 1, 8, 0, 0).unwrap(),
        spacing: Duration::hours(3),
        classes,
        leading: vec![],
        nodes,
        gaps: BTreeMap::new(),
    }
}

fn loans_design() -> Design {
    use Timing::Gap;
    const T: usize = 4;
    let classes = [(4, 5_000), (4, 10_000), (2, 20_000)]
        .into_iter()
        .map(|(weight, amount)| Class {
            weight,
            trace_attrs: vec![("AMOUNT_REQ", Value::Int(amount))],
            first_payload: vec![],
        })
        .collect();
    let e = |a| ev(a, Gap);
    let nodes = vec![
        vec![
            Opt {
                agent: e("A_PREACCEPTED"),
                behavior: 8,
                outcomes: vec![out(&[9, 9, 9], vec![], 1), out(&[1, 1, 1], vec![e("A_CANCELLED")], T)],
            },
            Opt { agent: e("A_DECLINED"), behavior: 2, outcomes: vec![out(&[1, 1, 1], vec![], T)] },
        ],
        vec![
            Opt {
                agent: e("O_SENT"),
                behavior: 9,
                outcomes: vec![
                    out(&[2, 3, 3], vec![e("O_ACCEPTED")], T),
                    out(&[3, 3, 4], vec![e("O_SENT_BACK")], 3),
                    out(&[5, 4, 3], vec![], 2),
                ],
            },
            Opt { agent: e("A_DECLINED"), behavior: 1, outcomes: vec![out(&[1, 1, 1], vec![], T)] },
        ],
        vec![
            Opt {
                agent: e("W_Nabellen offertes"),
                behavior: 6,
                outcomes: vec![out(&[6, 5, 4], vec![e("O_ACCEPTED")], T), out(&[4, 5, 6], vec![e("A_CANCELLED")], T)],
            },
            Opt { agent: e("O_CANCELLED"), behavior: 4, outcomes: vec![out(&[1, 1, 1], vec![], T)] },
        ],
        vec![
            Opt {
                agent: e("W_Valideren aanvraag"),
                behavior: 8,
                outcomes: vec![out(&[6, 6, 5], vec![e("O_ACCEPTED")], T), out(&[4, 4, 5], vec![e("O_DECLINED")], T)],
            },
            Opt {
                agent: e("W_Wijzigen contractgegevens"),
                behavior: 2,
                outcomes: vec![out(&[9, 9, 9], vec![e("O_ACCEPTED")], T), out(&[1, 1, 1], vec![e("O_DECLINED")], T)],
            },
        ],
        vec![],
    ];
    let minutes = |m| Duration::minutes(m);
    let gaps = BTreeMap::from([
        ("A_SUBMITTED", minutes(15)),
        ("A_PARTLYSUBMITTED", minutes(15)),
        ("A_PREACCEPTED", minutes(30)),
        ("A_DECLINED", minutes(15)),
        ("A_CANCELLED", minutes(15)),
        ("O_SENT", minutes(60)),
        ("O_SENT_BACK", minutes(15)),
        ("O_ACCEPTED", minutes(15)),
        ("O_DECLINED", minutes(15)),
        ("O_CANCELLED", minutes(15)),
        ("W_Nabellen offertes", minutes(30)),
        ("W_Valideren aanvraag", minutes(120)),
        ("W_Wijzigen contractgegevens", minutes(90)),
    ]);
    Design {
        spec: loans_spec(),
        case_prefix: "L",
        base: Utc.with_ymd_and_hms(2011, 10, 1, 8, 0, 0).unwrap(),
        spacing: Duration::minutes(7),
        classes,
        leading: vec![e("A_SUBMITTED"), e("A_PARTLYSUBMITTED")],
        nodes,
        gaps,
    }
}

impl Template {
    fn design(self) -> Design {
        match self {
            Template::FinesLike => fines_design(),
            Template::LoansLike => loans_design(),
        }
    }

    /// Scenario spec the generated logs are meant for.
    pub fn spec(self) -> ScenarioSpec {
        self.design().spec
    }
}

/// `(option, outcome)` chosen at each visited node.
type Path = Vec<(usize, usize)>;

impl Design {
    fn render(&self, class: usize, path: &[(usize, usize)], case_id: String, t0: DateTime<Utc>) -> Trace {
        let mut events: Vec<Event> = Vec::new();
        let push = |e: &Ev, events: &mut Vec<Event>| {
            let at = match (e.at, events.last()) {
                (Timing::Day(d), _) => t0 + Duration::days(d),
                (Timing::Gap, None) => t0,
                (Timing::Gap, Some(prev)) => {
                    prev.timestamp + *self.gaps.get(prev.activity.as_str()).expect("gap defined for every activity")
                }
            };
            let mut event = Event::new(e.activity, at);
            if events.is_empty() {
                event.payload.extend(self.classes[class].first_payload.iter().map(|(k, v)| (k.to_string(), v.clone())));
            }
            event.payload.extend(e.payload.iter().map(|(k, v)| (k.to_string(), v.clone())));
            events.push(event);
        };
        for e in &self.leading {
            push(e, &mut events);
        }
        let mut node = 0;
        for &(o, k) in path {
            let opt = &self.nodes[node][o];
            push(&opt.agent, &mut events);
            let outcome = &opt.outcomes[k];
            for e in &outcome.env {
                push(e, &mut events);
            }
            node = outcome.next;
        }
        let attrs: Attributes =
            self.classes[class].trace_attrs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        Trace::new(case_id, events, attrs)
    }

    fn sample_path(&self, class: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Path {
        let mut path = Vec::new();
        let mut node = 0;
        while !self.nodes[node].is_empty() {
            let opts = &self.nodes[node];
            let o = crate::rl::draw_weighted(rng, opts.iter().map(|o| o.behavior));
            let k = crate::rl::draw_weighted(rng, opts[o].outcomes.iter().map(|x| x.weights[class]));
            path.push((o, k));
            node = opts[o].outcomes[k].next;
        }
        path
    }

    fn all_paths(&self, class: usize) -> Vec<Path> {
        fn walk(d: &Design, class: usize, node: usize, prefix: &mut Path, acc: &mut Vec<Path>) {
            if d.nodes[node].is_empty() {
                acc.push(prefix.clone());
                return;
            }
            for (o, opt) in d.nodes[node].iter().enumerate() {
                for (k, outcome) in opt.outcomes.iter().enumerate() {
                    if outcome.weights[class] == 0 {
                        continue;
                    }
                    prefix.push((o, k));
                    walk(d, class, outcome.next, prefix, acc);
                    prefix.pop();
                }
            }
        }
        let mut acc = Vec::new();
        walk(self, class, 0, &mut Vec::new(), &mut acc);
        acc
    }
}

pub fn generate_synthetic_log(template: Template, n_traces: usize, seed: u64) -> (EventLog, GroundTruth) {
    let design = template.design();
    let stream_seed = mix(seed, 0x5717_7e71);
    let traces = (0..n_traces)
        .into_par_iter()
        .map(|i| {
            let mut rng = batch_rng(stream_seed, i);
            let class = crate::rl::draw_weighted(&mut rng, design.classes.iter().map(|c| c.weight));
            let path = design.sample_path(class, &mut rng);
            let t0 = design.base + design.spacing * i as i32;
            design.render(class, &path, format!("{}{:06}", design.case_prefix, i + 1), t0)
        })
        .collect();
    (EventLog::new(traces), ground_truth(&design))
}

/// Hidden MDP and optimum of `template`.
pub fn template_ground_truth(template: Template) -> GroundTruth {
    ground_truth(&template.design())
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Default)]
struct GroupFacts {
    /// Per class: outcome destination weights and their total.
    by_class: BTreeMap<usize, (BTreeMap<State, u64>, u64)>,
    behavior: u64,
}

fn ground_truth(design: &Design) -> GroundTruth {
    let spec = &design.spec;
    let mut rendered = Vec::new();
    for class in 0..design.classes.len() {
        for path in design.all_paths(class) {
            let id = format!("G{}", rendered.len());
            rendered.push((class, path.clone(), design.render(class, &path, id, design.base)));
        }
    }
    let log = annotate(&EventLog::new(rendered.iter().map(|r| r.2.clone()).collect()), spec)
        .expect("templates only use scenario activities");

    let mut groups: BTreeMap<(State, String), GroupFacts> = BTreeMap::new();
    let mut rewards: BTreeMap<(State, String, State), (EventReward, bool)> = BTreeMap::new();
    let mut initial: BTreeMap<State, u64> = BTreeMap::new();
    let mut initial_classes: BTreeMap<State, BTreeSet<usize>> = BTreeMap::new();
    let mut longest = 0;
    for ((class, path, _), trace) in rendered.iter().zip(&log.traces) {
        let r = replay(trace, spec).expect("templates replay").expect("every path has agent events");
        assert_eq!(r.steps.len(), path.len(), "one decision step per template node");
        longest = longest.max(path.len());
        if initial_classes.entry(r.initial.clone()).or_default().insert(*class) {
            *initial.entry(r.initial.clone()).or_default() += design.classes[*class].weight;
        }
        let mut node = 0;
        for (step, &(o, k)) in r.steps.iter().zip(path) {
            let opt = &design.nodes[node][o];
            let facts = groups.entry((step.src.clone(), step.action.clone())).or_default();
            facts.behavior = opt.behavior;
            let total: u64 = opt.outcomes.iter().map(|x| x.weights[*class]).sum();
            let entry = facts.by_class.entry(*class).or_insert_with(|| (BTreeMap::new(), total));
            assert_eq!(entry.1, total, "state {} maps to two template nodes", step.src);
            entry.0.insert(step.dst.clone(), opt.outcomes[k].weights[*class]);
            let key = (step.src.clone(), step.action.clone(), step.dst.clone());
            let seen = rewards.entry(key).or_insert((step.reward, step.success));
            assert!(
                (seen.0.plain - step.reward.plain).abs() < 1e-9
                    && (seen.0.attenuated - step.reward.attenuated).abs() < 1e-9
                    && seen.1 == step.success,
                "edge reward depends on more than its state pair"
            );
            node = opt.outcomes[k].next;
        }
    }

    let mut edges = Vec::new();
    let mut behavior: BTreeMap<State, BTreeMap<String, u64>> = BTreeMap::new();
    for ((src, action), facts) in groups {
        if facts.by_class.len() > 1 {
            let shared = initial_classes.get(&src).is_some_and(|c| c.len() == facts.by_class.len());
            assert!(shared, "only initial states may be shared between case classes");
        }
        let lcm = facts.by_class.values().fold(1, |l, (_, t)| l / gcd(l, *t) * t);
        let mut counts: BTreeMap<State, u64> = BTreeMap::new();
        for (class, (dsts, total)) in &facts.by_class {
            for (dst, w) in dsts {
                *counts.entry(dst.clone()).or_default() += design.classes[*class].weight * w * (lcm / total);
            }
        }
        for (dst, count) in counts {
            let (reward, success) = rewards[&(src.clone(), action.clone(), dst.clone())];
            edges.push(EdgeCount {
                src: src.clone(),
                action: action.clone(),
                dst,
                count,
                successes: if success { count } else { 0 },
                plain_reward: reward.plain,
                attenuated_reward: reward.attenuated,
            });
        }
        behavior.entry(src).or_default().insert(action, facts.behavior);
    }
    let meta = MdpMeta {
        scenario_id: spec.scenario_id.clone(),
        history_names: spec.history_names(),
        env_names: spec.env_names(),
        lambda: None,
        gamma: spec.gamma,
        longest_trace: longest,
    };
    let mdp = assemble(meta, edges, initial.into_iter().collect(), BuildOptions { apply_reliability: false })
        .expect("template MDPs are well formed");
    let solution = exact::policy_iteration(&mdp).expect("template MDPs are acyclic");
    let optimal_value = solution.value(&mdp);
    let optimal = Policy::from_groups(PolicyKind::Optimal, &mdp, &solution.groups);
    GroundTruth { mdp, optimal, optimal_value, behavior }
}
