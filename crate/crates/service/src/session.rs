//! One participant's session as an event-sourced state machine.
//!
//! Commands validate against the current state, emit events, and apply them
//! through the same `apply` used for replay, so a session rebuilt from its
//! log is indistinguishable from the live one.

use std::sync::Arc;

use chrono::{DateTime, SecondsFormat, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use dualrl::metrics::{block_stats, rt_is_valid, session_delta, summarize, BlockStats, SessionDelta, SessionSummary, TrialOutcome};
use dualrl::ppo::Policy;
use dualrl::regulation_env::{LiveRelay, RegulationConfig, RegulationEnv, RegulationState, EpisodeRecord};
use dualrl::task::{MathQuestion, QuestionGenerator};

use crate::error::{ServiceError, ServiceResult};
use crate::events::{Event, EventKind, SCHEMA};
use crate::protocol::{Condition, Group, Order, Phase, ProtocolConfig};

/// Reference RT when practice 2 produced no valid trials.
pub const DEFAULT_R_INIT: f64 = 3.0;

pub fn timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn parse_time(s: &str) -> ServiceResult<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| ServiceError::Validation(format!("bad timestamp {s}: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub phase: Phase,
    pub trial_index: usize,
    pub question: MathQuestion,
    pub pressure: bool,
    pub answer: Option<bool>,
    pub correct: Option<bool>,
    pub rt: Option<f64>,
    pub valid: Option<bool>,
}

/// What the participant should do next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextOutcome {
    Trial { phase: Phase, trial_index: usize, question: QuestionView, pressure: bool, show_correctness: bool },
    Questionnaire { phase: Phase },
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionView {
    pub ab: u8,
    pub cd: u8,
    pub e: u8,
    pub text: String,
}

impl From<MathQuestion> for QuestionView {
    fn from(q: MathQuestion) -> Self {
        Self { ab: q.ab, cd: q.cd, e: q.e, text: q.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnswerReceipt {
    pub phase: Phase,
    pub trial_index: usize,
    /// Disclosed in the first practice block only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    pub valid: bool,
    pub phase_complete: bool,
}

pub struct Session {
    pub id: String,
    pub participant: String,
    pub group: Group,
    pub order: Order,
    pub seed: u64,
    pub protocol: ProtocolConfig,
    pub phase: Phase,
    pub rest_until: Option<DateTime<Utc>>,
    pub practice1_target: usize,
    pub trials: Vec<TrialRecord>,
    pub questionnaires: Vec<(Phase, u8, u8)>,
    pub resumed: bool,
    events: Vec<Event>,
    policy: Option<Arc<Policy>>,
    regulation: Option<RegulationEnv<LiveRelay>>,
}

impl Session {
    fn blank(id: &str, protocol: ProtocolConfig, policy: Option<Arc<Policy>>) -> Self {
        Self {
            id: id.to_string(),
            participant: String::new(),
            group: Group::Random,
            order: Order::ControlFirst,
            seed: 0,
            protocol,
            phase: Phase::Practice1,
            rest_until: None,
            practice1_target: protocol.practice_trials,
            trials: Vec::new(),
            questionnaires: Vec::new(),
            resumed: false,
            events: Vec::new(),
            policy,
            regulation: None,
        }
    }

    pub fn create(
        id: &str,
        participant: &str,
        group: Group,
        order: Order,
        seed: u64,
        protocol: ProtocolConfig,
        policy: Option<Arc<Policy>>,
        now: DateTime<Utc>,
    ) -> ServiceResult<(Self, Vec<Event>)> {
        if participant.trim().is_empty() {
            return Err(ServiceError::Validation("participant code must not be empty".into()));
        }
        if group == Group::Rl && policy.is_none() {
            return Err(ServiceError::Validation("the RL group needs a regulation policy checkpoint".into()));
        }
        let mut s = Self::blank(id, protocol, policy);
        let mut out = Vec::new();
        s.emit(now, EventKind::SessionCreated { participant: participant.to_string(), group, order, seed }, &mut out)?;
        s.emit(now, EventKind::PhaseEntered { phase: Phase::Practice1, rest_until: None }, &mut out)?;
        Ok((s, out))
    }

    /// Rebuilds a session from its log.
    pub fn replay(id: &str, events: &[Event], protocol: ProtocolConfig, policy: Option<Arc<Policy>>) -> ServiceResult<Self> {
        let mut s = Self::blank(id, protocol, policy);
        for e in events {
            s.apply(e)?;
            s.events.push(e.clone());
        }
        Ok(s)
    }

    /// Served pressure flags that a fresh replay would decide differently; empty when consistent.
    pub fn replay_mismatches(events: &[Event], protocol: ProtocolConfig, policy: Option<Arc<Policy>>) -> ServiceResult<Vec<usize>> {
        let mut s = Self::blank(events.first().map_or("", |e| e.session_id.as_str()), protocol, policy);
        let mut bad = Vec::new();
        for e in events {
            if let EventKind::TrialServed { phase, trial_index, pressure, .. } = &e.kind {
                if s.group == Group::Rl && s.order.condition(*phase) == Some(Condition::Feedback) && s.decide_rl()? != *pressure {
                    bad.push(*trial_index);
                }
            }
            s.apply(e)?;
        }
        Ok(bad)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn regulation_state(&self) -> Option<&RegulationState> {
        self.regulation.as_ref().map(|r| r.state())
    }

    pub fn regulation_log(&self) -> &[EpisodeRecord] {
        self.regulation.as_ref().map_or(&[], |r| r.log())
    }

    fn emit(&mut self, now: DateTime<Utc>, kind: EventKind, out: &mut Vec<Event>) -> ServiceResult<()> {
        let e = Event { seq: self.events.len() as u64, session_id: self.id.clone(), at: timestamp(now), kind };
        self.apply(&e)?;
        self.events.push(e.clone());
        out.push(e);
        Ok(())
    }

    fn apply(&mut self, e: &Event) -> ServiceResult<()> {
        match &e.kind {
            EventKind::SessionCreated { participant, group, order, seed } => {
                self.participant = participant.clone();
                self.group = *group;
                self.order = *order;
                self.seed = *seed;
            }
            EventKind::PhaseEntered { phase, rest_until } => {
                self.phase = *phase;
                self.rest_until = rest_until.as_deref().map(parse_time).transpose()?;
                if self.group == Group::Rl && self.order.condition(*phase) == Some(Condition::Feedback) {
                    let cfg = RegulationConfig {
                        trials: self.protocol.test_trials,
                        r_init: self.practice_r_init(),
                        exclude_invalid: true,
                        ..Default::default()
                    };
                    let mut env = RegulationEnv::new(cfg, LiveRelay::new())?;
                    env.reset()?;
                    self.regulation = Some(env);
                }
                if *phase == Phase::Done {
                    if let Some(r) = &mut self.regulation {
                        r.user_mut().close();
                    }
                }
            }
            EventKind::TrialServed { phase, trial_index, ab, cd, e, pressure } => {
                self.trials.push(TrialRecord {
                    phase: *phase,
                    trial_index: *trial_index,
                    question: MathQuestion::new(*ab, *cd, *e)?,
                    pressure: *pressure,
                    answer: None,
                    correct: None,
                    rt: None,
                    valid: None,
                });
            }
            EventKind::TrialAnswered { answer, correct, rt_ms, valid, .. } => {
                let rt = *rt_ms as f64 / 1000.0;
                let t = self.trials.last_mut().ok_or_else(|| ServiceError::Protocol("answer without a trial".into()))?;
                t.answer = Some(*answer);
                t.correct = Some(*correct);
                t.rt = Some(rt);
                t.valid = Some(*valid);
                let (phase, pressure) = (t.phase, t.pressure);
                if self.order.condition(phase) == Some(Condition::Feedback) {
                    if let Some(env) = &mut self.regulation {
                        env.user_mut().relay(rt)?;
                        env.step(pressure)?;
                    }
                }
            }
            EventKind::PracticeExtended { target } => self.practice1_target = *target,
            EventKind::Questionnaire { phase, attention, anxiety } => self.questionnaires.push((*phase, *attention, *anxiety)),
            EventKind::Resumed => self.resumed = true,
        }
        Ok(())
    }

    /// Mean valid RT of the second practice block.
    fn practice_r_init(&self) -> f64 {
        let rts: Vec<f64> = self
            .trials
            .iter()
            .filter(|t| t.phase == Phase::Practice2 && t.valid == Some(true))
            .filter_map(|t| t.rt)
            .collect();
        if rts.is_empty() {
            DEFAULT_R_INIT
        } else {
            rts.iter().sum::<f64>() / rts.len() as f64
        }
    }

    fn quota(&self) -> usize {
        if self.phase == Phase::Practice1 {
            self.practice1_target
        } else {
            self.protocol.quota(self.phase)
        }
    }

    fn served_in_phase(&self) -> usize {
        self.trials.iter().filter(|t| t.phase == self.phase).count()
    }

    fn outstanding(&self) -> Option<&TrialRecord> {
        self.trials.last().filter(|t| t.answer.is_none())
    }

    fn decide_rl(&self) -> ServiceResult<bool> {
        let env = self.regulation.as_ref().ok_or_else(|| ServiceError::Protocol("no regulation state".into()))?;
        let policy = self.policy.as_ref().ok_or_else(|| ServiceError::Protocol("no regulation policy".into()))?;
        Ok(policy.act_deterministic(&env.observation()) >= 0.5)
    }

    fn decide_pressure(&self, trial_index: usize) -> ServiceResult<bool> {
        if self.order.condition(self.phase) != Some(Condition::Feedback) {
            return Ok(false);
        }
        match self.group {
            Group::Rl => self.decide_rl(),
            Group::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(1 + trial_index as u64);
                Ok(rng.random_bool(0.5))
            }
        }
    }

    fn question_for(&self, served: usize) -> MathQuestion {
        QuestionGenerator::new(self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(served as u64)).generate()
    }

    /// Serves the next trial, advancing through finished phases and elapsed rests.
    pub fn next_trial(&mut self, now: DateTime<Utc>) -> ServiceResult<(NextOutcome, Vec<Event>)> {
        let mut out = Vec::new();
        loop {
            if let Some(t) = self.outstanding() {
                return Ok((self.stub(t), out));
            }
            match self.phase {
                Phase::Done => return Ok((NextOutcome::Done, out)),
                p if p.is_questionnaire() => return Ok((NextOutcome::Questionnaire { phase: p }, out)),
                p if p.is_rest() => {
                    let until = self.rest_until.unwrap_or(now);
                    if now < until {
                        let ms = (until - now).num_milliseconds().max(1) as u64;
                        return Err(ServiceError::Resting { phase: p, retry_after_ms: ms });
                    }
                    self.enter(p.next().expect("rest is followed by a phase"), now, &mut out)?;
                }
                p => {
                    let served = self.served_in_phase();
                    if served >= self.quota() {
                        self.enter(p.next().expect("trial phase is followed by a phase"), now, &mut out)?;
                        continue;
                    }
                    let q = self.question_for(self.trials.len());
                    let pressure = self.decide_pressure(served)?;
                    let kind = EventKind::TrialServed { phase: p, trial_index: served, ab: q.ab, cd: q.cd, e: q.e, pressure };
                    self.emit(now, kind, &mut out)?;
                }
            }
        }
    }

    fn enter(&mut self, phase: Phase, now: DateTime<Utc>, out: &mut Vec<Event>) -> ServiceResult<()> {
        let rest = self.protocol.rest_ms(phase);
        let rest_until = phase.is_rest().then(|| timestamp(now + chrono::Duration::milliseconds(rest as i64)));
        self.emit(now, EventKind::PhaseEntered { phase, rest_until }, out)
    }

    fn stub(&self, t: &TrialRecord) -> NextOutcome {
        NextOutcome::Trial {
            phase: t.phase,
            trial_index: t.trial_index,
            question: t.question.into(),
            pressure: t.pressure,
            show_correctness: t.phase == Phase::Practice1,
        }
    }

    pub fn submit_answer(&mut self, answer: bool, rt_ms: u64, now: DateTime<Utc>) -> ServiceResult<(AnswerReceipt, Vec<Event>)> {
        let t = *self.outstanding().ok_or_else(|| ServiceError::Protocol("no outstanding trial".into()))?;
        let correct = answer == t.question.truth();
        let rt = rt_ms as f64 / 1000.0;
        let valid = rt_is_valid(rt);
        let feedback = self.order.condition(t.phase) == Some(Condition::Feedback);
        // preview the regulation rewards on a copy of the bookkeeping
        let (r_s, r_e) = match (&self.regulation, feedback) {
            (Some(env), true) => {
                let cfg = *env.config();
                let r_s = dualrl::regulation_env::step_reward(cfg.r_init, rt);
                let last = env.trial() + 1 == cfg.trials;
                let r_e = if last {
                    let st = env.state();
                    let (n, sum) = if valid || !cfg.exclude_invalid {
                        (st.counted + 1, st.r_hat * st.counted as f64 + rt)
                    } else {
                        (st.counted, st.r_hat * st.counted as f64)
                    };
                    let r_hat = if n == 0 { cfg.r_init } else { sum / n as f64 };
                    dualrl::regulation_env::end_reward(dualrl::regulation_env::relative_reduction(cfg.r_init, r_hat), cfg.delta_target)
                } else {
                    0.0
                };
                (Some(r_s), Some(r_e))
            }
            _ => (None, None),
        };
        let mut out = Vec::new();
        let kind = EventKind::TrialAnswered { phase: t.phase, trial_index: t.trial_index, answer, correct, rt_ms, valid, r_s, r_e };
        self.emit(now, kind, &mut out)?;
        let receipt = AnswerReceipt {
            phase: t.phase,
            trial_index: t.trial_index,
            correct: (t.phase == Phase::Practice1).then_some(correct),
            valid,
            phase_complete: self.served_in_phase() >= self.quota(),
        };
        Ok((receipt, out))
    }

    pub fn extend_practice(&mut self, extra: Option<usize>, now: DateTime<Utc>) -> ServiceResult<(usize, Vec<Event>)> {
        if self.phase != Phase::Practice1 {
            return Err(ServiceError::Protocol(format!("practice can only be extended during practice1, not {}", self.phase.as_str())));
        }
        let extra = extra.unwrap_or(self.protocol.extension_trials);
        if extra == 0 {
            return Err(ServiceError::Validation("extension must add at least one trial".into()));
        }
        let target = self.practice1_target + extra;
        let mut out = Vec::new();
        self.emit(now, EventKind::PracticeExtended { target }, &mut out)?;
        Ok((target, out))
    }

    pub fn submit_questionnaire(&mut self, attention: u8, anxiety: u8, now: DateTime<Utc>) -> ServiceResult<(Phase, Vec<Event>)> {
        if !self.phase.is_questionnaire() {
            return Err(ServiceError::Protocol(format!("no questionnaire due in {}", self.phase.as_str())));
        }
        for (name, v) in [("attention", attention), ("anxiety", anxiety)] {
            if !(1..=7).contains(&v) {
                return Err(ServiceError::Validation(format!("{name} score {v} outside 1..=7")));
            }
        }
        let mut out = Vec::new();
        let phase = self.phase;
        self.emit(now, EventKind::Questionnaire { phase, attention, anxiety }, &mut out)?;
        self.enter(phase.next().expect("questionnaire is followed by a phase"), now, &mut out)?;
        Ok((self.phase, out))
    }

    pub fn mark_resumed(&mut self, now: DateTime<Utc>) -> ServiceResult<Vec<Event>> {
        let mut out = Vec::new();
        self.emit(now, EventKind::Resumed, &mut out)?;
        Ok(out)
    }

    fn outcomes(&self, phase: Phase) -> Vec<TrialOutcome> {
        self.trials
            .iter()
            .filter(|t| t.phase == phase)
            .filter_map(|t| Some(TrialOutcome { rt: t.rt?, correct: t.correct?, pressure: t.pressure }))
            .collect()
    }

    fn scores(&self, phase: Phase) -> (Option<f64>, Option<f64>) {
        let q = if phase == Phase::Test1 { Phase::Questionnaire1 } else { Phase::Questionnaire2 };
        self.questionnaires
            .iter()
            .find(|(p, _, _)| *p == q)
            .map_or((None, None), |&(_, at, an)| (Some(at as f64), Some(an as f64)))
    }

    fn summary(&self, condition: Condition) -> Option<SessionSummary> {
        let phase = self.order.phase_of(condition);
        let (at, an) = self.scores(phase);
        summarize(&self.outcomes(phase), at, an).ok()
    }

    pub fn export(&self) -> SessionExport {
        let control = self.summary(Condition::Control);
        let feedback = self.summary(Condition::Feedback);
        let delta = match (&control, &feedback) {
            (Some(c), Some(f)) => Some(session_delta(c, f)),
            _ => None,
        };
        let blocks = |c: Condition| block_stats(&self.outcomes(self.order.phase_of(c))).ok();
        SessionExport {
            schema: SCHEMA.to_string(),
            session_id: self.id.clone(),
            participant: self.participant.clone(),
            group: self.group,
            order: self.order,
            seed: self.seed,
            phase: self.phase,
            complete: self.phase == Phase::Done,
            resumed: self.resumed,
            correct_answers: self.trials.iter().filter(|t| t.correct == Some(true)).count(),
            wrong_answers: self.trials.iter().filter(|t| t.correct == Some(false)).count(),
            control,
            feedback,
            delta,
            feedback_blocks: blocks(Condition::Feedback),
            control_blocks: blocks(Condition::Control),
            events: self.events.clone(),
        }
    }
}

/// Full session report; `feedback_blocks` is the analysis of record,
/// `control_blocks` is provided for comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionExport {
    pub schema: String,
    pub session_id: String,
    pub participant: String,
    pub group: Group,
    pub order: Order,
    pub seed: u64,
    pub phase: Phase,
    pub complete: bool,
    pub resumed: bool,
    pub correct_answers: usize,
    pub wrong_answers: usize,
    pub control: Option<SessionSummary>,
    pub feedback: Option<SessionSummary>,
    pub delta: Option<SessionDelta>,
    pub feedback_blocks: Option<BlockStats>,
    pub control_blocks: Option<BlockStats>,
    pub events: Vec<Event>,
}
