use crate::eventlog::{Actor, AnnotatedTrace, EventReward, Feature};
use crate::scenarios::ScenarioSpec;

use super::{MdpError, State};

/// One agent decision: the agent event plus the environment events that
/// follow it up to the next agent event.
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionStep {
    /// Index of the agent event in the trace.
    pub event_index: usize,
    pub src: State,
    pub action: String,
    pub dst: State,
    pub reward: EventReward,
    pub success: bool,
}

/// A trace replayed as a path of decision steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Replay {
    pub initial: State,
    pub steps: Vec<DecisionStep>,
    /// Reward of environment events preceding the first agent event.
    pub leading_reward: EventReward,
}

impl Replay {
    /// Sum of all rewards along the path, leading events included, with the
    /// attenuated part weighted by `c`.
    pub fn path_reward(&self, c: impl Fn(&DecisionStep) -> f64) -> f64 {
        let lead = self.leading_reward.plain + self.leading_reward.attenuated;
        lead + self.steps.iter().map(|s| s.reward.plain + c(s) * s.reward.attenuated).sum::<f64>()
    }
}

fn features(trace: &AnnotatedTrace, index: usize, names: &[String]) -> Result<Vec<Feature>, MdpError> {
    let derived = &trace.events[index].derived;
    names
        .iter()
        .map(|n| {
            derived.get(n).cloned().ok_or_else(|| MdpError::MissingFeature {
                case_id: trace.case_id.clone(),
                index,
                feature: n.clone(),
            })
        })
        .collect()
}

/// State reached after event `index` of `trace`. `terminal` is set when the
/// event closes the trace.
pub fn state_at(trace: &AnnotatedTrace, index: usize, spec: &ScenarioSpec) -> Result<State, MdpError> {
    Ok(State {
        last_activity: trace.events[index].event.activity.clone(),
        history: features(trace, index, &spec.history_names())?,
        env: features(trace, index, &spec.env_names())?,
        terminal: index + 1 == trace.events.len(),
    })
}

/// Replays `trace` into decision steps; `None` when it has no agent events.
///
/// Traces starting with an agent event start from [`State::start`];
/// otherwise the state after the last leading environment event is initial.
pub fn replay(trace: &AnnotatedTrace, spec: &ScenarioSpec) -> Result<Option<Replay>, MdpError> {
    let events = &trace.events;
    let agent: Vec<usize> = (0..events.len()).filter(|&i| events[i].actor == Actor::Agent).collect();
    let Some(&first) = agent.first() else {
        return Ok(None);
    };
    let mut leading_reward = EventReward::default();
    for e in &events[..first] {
        leading_reward.plain += e.reward.plain;
        leading_reward.attenuated += e.reward.attenuated;
    }
    let initial = if first == 0 { State::start() } else { state_at(trace, first - 1, spec)? };
    let mut steps = Vec::with_capacity(agent.len());
    let mut src = initial.clone();
    for (k, &i) in agent.iter().enumerate() {
        let end = agent.get(k + 1).copied().unwrap_or(events.len());
        let mut reward = EventReward::default();
        let mut success = false;
        for e in &events[i..end] {
            reward.plain += e.reward.plain;
            reward.attenuated += e.reward.attenuated;
            success |= spec.success.matches(e);
        }
        let dst = state_at(trace, end - 1, spec)?;
        steps.push(DecisionStep {
            event_index: i,
            src: std::mem::replace(&mut src, dst.clone()),
            action: spec.action_label(&events[i]),
            dst,
            reward,
            success,
        });
    }
    Ok(Some(Replay { initial, steps, leading_reward }))
}
