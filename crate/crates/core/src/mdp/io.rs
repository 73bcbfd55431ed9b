use std::fmt::Write;

use super::{Mdp, MdpBody, MdpError};
use crate::artifact;

pub const MDP_FORMAT_VERSION: u32 = 1;
const KIND: &str = "mdp";

pub fn save_mdp(mdp: &Mdp) -> Vec<u8> {
    artifact::encode(KIND, MDP_FORMAT_VERSION, mdp.body())
}

pub fn load_mdp(bytes: &[u8]) -> Result<Mdp, MdpError> {
    let body: MdpBody = artifact::decode(KIND, MDP_FORMAT_VERSION, bytes)?;
    Mdp::from_body(body)
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// Graphviz rendering: one node per state, one edge per transition labelled
/// with action, probability, reward and count.
pub fn to_dot(mdp: &Mdp) -> String {
    let mut out = String::new();
    writeln!(out, "digraph {} {{", quote(mdp.scenario_id())).unwrap();
    writeln!(out, "  rankdir=LR;").unwrap();
    for (i, s) in mdp.states().iter().enumerate() {
        let shape = if s.terminal {
            "doublecircle"
        } else if s.is_start() {
            "box"
        } else {
            "ellipse"
        };
        writeln!(out, "  s{i} [label={}, shape={shape}];", quote(&s.to_string())).unwrap();
    }
    for e in mdp.edges() {
        let label = format!("{} p={:.3} r={:.3} n={}", mdp.action(e.action), e.prob, e.reward, e.count);
        writeln!(out, "  s{} -> s{} [label={}];", e.src.0, e.dst.0, quote(&label)).unwrap();
    }
    out.push_str("}\n");
    out
}
