//! The fixed study protocol: two practice blocks, then two counterbalanced
//! test sessions each followed by a questionnaire, with rests in between.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Practice1,
    Rest1,
    Practice2,
    Rest2,
    Test1,
    Questionnaire1,
    Rest3,
    Test2,
    Questionnaire2,
    Done,
}

impl Phase {
    pub const ALL: [Phase; 10] = [
        Phase::Practice1,
        Phase::Rest1,
        Phase::Practice2,
        Phase::Rest2,
        Phase::Test1,
        Phase::Questionnaire1,
        Phase::Rest3,
        Phase::Test2,
        Phase::Questionnaire2,
        Phase::Done,
    ];

    pub fn next(self) -> Option<Phase> {
        let i = Self::ALL.iter().position(|p| *p == self).expect("listed");
        Self::ALL.get(i + 1).copied()
    }

    pub fn serves_trials(self) -> bool {
        matches!(self, Phase::Practice1 | Phase::Practice2 | Phase::Test1 | Phase::Test2)
    }

    pub fn is_rest(self) -> bool {
        matches!(self, Phase::Rest1 | Phase::Rest2 | Phase::Rest3)
    }

    pub fn is_questionnaire(self) -> bool {
        matches!(self, Phase::Questionnaire1 | Phase::Questionnaire2)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Practice1 => "practice1",
            Phase::Rest1 => "rest1",
            Phase::Practice2 => "practice2",
            Phase::Rest2 => "rest2",
            Phase::Test1 => "test1",
            Phase::Questionnaire1 => "questionnaire1",
            Phase::Rest3 => "rest3",
            Phase::Test2 => "test2",
            Phase::Questionnaire2 => "questionnaire2",
            Phase::Done => "done",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Feedback decided by the frozen regulation policy.
    Rl,
    /// Feedback switched on with probability 0.5.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Order {
    ControlFirst,
    FeedbackFirst,
}

/// What a test phase is for a given order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Control,
    Feedback,
}

impl Order {
    pub fn condition(self, phase: Phase) -> Option<Condition> {
        match (self, phase) {
            (Order::ControlFirst, Phase::Test1) | (Order::FeedbackFirst, Phase::Test2) => Some(Condition::Control),
            (Order::ControlFirst, Phase::Test2) | (Order::FeedbackFirst, Phase::Test1) => Some(Condition::Feedback),
            _ => None,
        }
    }

    pub fn phase_of(self, condition: Condition) -> Phase {
        if self.condition(Phase::Test1) == Some(condition) {
            Phase::Test1
        } else {
            Phase::Test2
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub practice_trials: usize,
    pub test_trials: usize,
    pub extension_trials: usize,
    pub rest1_ms: u64,
    pub rest2_ms: u64,
    pub rest3_ms: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self { practice_trials: 10, test_trials: 100, extension_trials: 10, rest1_ms: 10_000, rest2_ms: 60_000, rest3_ms: 120_000 }
    }
}

impl ProtocolConfig {
    /// The same protocol with every rest shortened to zero.
    pub fn without_rests(self) -> Self {
        Self { rest1_ms: 0, rest2_ms: 0, rest3_ms: 0, ..self }
    }

    pub fn rest_ms(&self, phase: Phase) -> u64 {
        match phase {
            Phase::Rest1 => self.rest1_ms,
            Phase::Rest2 => self.rest2_ms,
            Phase::Rest3 => self.rest3_ms,
            _ => 0,
        }
    }

    pub fn quota(&self, phase: Phase) -> usize {
        match phase {
            Phase::Practice1 | Phase::Practice2 => self.practice_trials,
            Phase::Test1 | Phase::Test2 => self.test_trials,
            _ => 0,
        }
    }
}
