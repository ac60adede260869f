//! Append-only session events; a session's state is a fold over them.

use serde::{Deserialize, Serialize};

use crate::protocol::{Group, Order, Phase};

pub const SCHEMA: &str = "v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub session_id: String,
    /// Server time, ISO-8601 UTC.
    pub at: String,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    SessionCreated {
        participant: String,
        group: Group,
        order: Order,
        seed: u64,
    },
    PhaseEntered {
        phase: Phase,
        /// End of the rest window, for rest phases.
        rest_until: Option<String>,
    },
    TrialServed {
        phase: Phase,
        trial_index: usize,
        ab: u8,
        cd: u8,
        e: u8,
        pressure: bool,
    },
    TrialAnswered {
        phase: Phase,
        trial_index: usize,
        answer: bool,
        correct: bool,
        rt_ms: u64,
        valid: bool,
        /// Regulation rewards, logged for RL feedback trials only.
        r_s: Option<f64>,
        r_e: Option<f64>,
    },
    PracticeExtended {
        target: usize,
    },
    Questionnaire {
        phase: Phase,
        attention: u8,
        anxiety: u8,
    },
    /// The service restarted and reloaded this session mid-protocol.
    Resumed,
}

pub fn to_line(e: &Event) -> String {
    serde_json::to_string(e).expect("events serialize")
}

pub fn from_line(line: &str) -> serde_json::Result<Event> {
    serde_json::from_str(line)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_round_trip() {
        let e = Event {
            seq: 3,
            session_id: "s-000001".into(),
            at: "2024-01-01T00:00:00.000Z".into(),
            kind: EventKind::TrialAnswered {
                phase: Phase::Test1,
                trial_index: 4,
                answer: true,
                correct: false,
                rt_ms: 2100,
                valid: true,
                r_s: Some(0.4),
                r_e: None,
            },
        };
        let line = to_line(&e);
        assert!(line.contains("\"type\":\"trial_answered\""));
        assert_eq!(from_line(&line).unwrap(), e);
    }
}
