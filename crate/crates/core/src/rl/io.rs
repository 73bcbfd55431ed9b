use serde::{Deserialize, Serialize};

use super::{IterationRecord, Policy, PolicyIterationConfig, QTable, RlError, Training};
use crate::artifact;
use crate::mdp::{GroupId, Mdp, State};

pub const POLICY_FORMAT_VERSION: u32 = 1;
const KIND: &str = "policy";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QEntry {
    pub state: State,
    pub action: String,
    pub value: Option<f64>,
    pub visits: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub config: PolicyIterationConfig,
    pub converged: bool,
    pub iterations: Vec<IterationRecord>,
}

/// Persisted policy with its Q values and training diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyArtifact {
    pub policy: Policy,
    #[serde(default)]
    pub q: Vec<QEntry>,
    #[serde(default)]
    pub training: Option<TrainingSummary>,
}

impl PolicyArtifact {
    pub fn untrained(policy: Policy) -> PolicyArtifact {
        PolicyArtifact { policy, q: vec![], training: None }
    }

    pub fn from_training(mdp: &Mdp, training: &Training, config: &PolicyIterationConfig) -> PolicyArtifact {
        PolicyArtifact {
            policy: training.policy.clone(),
            q: q_entries(mdp, &training.q),
            training: Some(TrainingSummary {
                config: config.clone(),
                converged: training.converged,
                iterations: training.iterations.clone(),
            }),
        }
    }

    /// Rebuilds the Q table against `mdp`, which must be the training MDP.
    pub fn q_table(&self, mdp: &Mdp) -> Result<QTable, RlError> {
        if self.policy.mdp_fingerprint != mdp.fingerprint() {
            return Err(RlError::Incompatible {
                policy: self.policy.scenario_id.clone(),
                mdp: mdp.scenario_id().into(),
            });
        }
        let n = mdp.groups().len();
        let mut values = vec![0.0; n];
        let mut visits = vec![0; n];
        for e in &self.q {
            let g = mdp
                .state_id(&e.state)
                .zip(mdp.action_id(&e.action))
                .and_then(|(s, a)| mdp.group_for(s, a))
                .ok_or_else(|| RlError::QMismatch(format!("no group for {} / {}", e.state, e.action)))?;
            if let Some(v) = e.value {
                values[g.0] = v;
                visits[g.0] = e.visits;
            }
        }
        Ok(QTable::from_parts(values, visits))
    }
}

pub fn q_entries(mdp: &Mdp, q: &QTable) -> Vec<QEntry> {
    mdp.groups()
        .iter()
        .enumerate()
        .map(|(i, g)| QEntry {
            state: mdp.state(g.state).clone(),
            action: mdp.action(g.action).to_string(),
            value: q.value(GroupId(i)),
            visits: q.visits(GroupId(i)),
        })
        .collect()
}

pub fn save_policy(policy: &PolicyArtifact) -> Vec<u8> {
    artifact::encode(KIND, POLICY_FORMAT_VERSION, policy)
}

pub fn load_policy(bytes: &[u8]) -> Result<PolicyArtifact, RlError> {
    Ok(artifact::decode(KIND, POLICY_FORMAT_VERSION, bytes)?)
}
