//! One simulated trial as an evidence accumulator that an agent can speed up
//! or slow down frame by frame.
//!
//! Evidence starts at 0.5 and rises toward the baseline confidence `R_p` with
//! a drift chosen so that an agent doing nothing reproduces the baseline
//! response time `R_t`. Action `a ∈ [-1, 1]` scales each increment by
//! `1 + κ·a`. The simulated response time is the step count over the frame
//! rate, and the only reward arrives at the end of the trial.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::baseline::BaselinePrediction;
use crate::stimulus::{render_frame, StimulusConfig, StimulusFrame};
use crate::task::{encode_question, EncodedQuestion, MathQuestion};
use crate::{Error, Result};

pub const EVIDENCE_START: f64 = 0.5;
const MIN_SPAN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimEnvConfig {
    pub rt_max: f64,
    pub max_steps: usize,
    /// Action gain κ.
    pub kappa: f64,
    pub stimulus: StimulusConfig,
}

impl Default for SimEnvConfig {
    fn default() -> Self {
        Self { rt_max: 10.0, max_steps: 50, kappa: 1.0, stimulus: StimulusConfig::default() }
    }
}

impl SimEnvConfig {
    pub fn frame_rate(&self) -> f64 {
        self.stimulus.frame_rate_hz as f64
    }

    pub fn validate(&self) -> Result<()> {
        self.stimulus.validate()?;
        if !(self.kappa > 0.0) {
            return Err(Error::InvalidInput("kappa must be positive".into()));
        }
        if (self.rt_max * self.frame_rate()).round() as usize != self.max_steps {
            return Err(Error::InvalidInput(format!(
                "max_steps {} must equal rt_max * frame rate {}",
                self.max_steps,
                self.rt_max * self.frame_rate()
            )));
        }
        Ok(())
    }
}

/// Everything needed to replay one dataset trial in the simulator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimTrial {
    pub question: MathQuestion,
    pub prediction: BaselinePrediction,
    /// Observed response time `R_u` in seconds.
    pub true_rt: f64,
    pub pressure_on: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimObservation {
    pub tokens: EncodedQuestion,
    pub frame: StimulusFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimRewardInputs {
    pub e_rl: f64,
    pub e_svm: f64,
    /// Terminal penalty, 0 or -1.
    pub penalty: f64,
}

impl SimRewardInputs {
    pub fn from_times(r_rl: f64, r_svm: f64, r_u: f64, timed_out: bool) -> Result<Self> {
        if !(r_u > 0.0) {
            return Err(Error::InvalidInput(format!("true rt must be positive, got {r_u}")));
        }
        Ok(Self {
            e_rl: (r_rl - r_u).abs() / r_u,
            e_svm: (r_svm - r_u).abs() / r_u,
            penalty: if timed_out { -1.0 } else { 0.0 },
        })
    }
}

/// Terminal reward: relative improvement over the baseline error plus the
/// timeout penalty when the agent beats the baseline, else zero. A perfect
/// baseline (`e_svm == 0`) pays 1 only for an equally perfect agent.
pub fn compute_sim_reward(inp: &SimRewardInputs) -> f64 {
    if inp.e_svm == 0.0 {
        return if inp.e_rl == 0.0 { 1.0 } else { 0.0 };
    }
    if inp.e_rl < inp.e_svm {
        (inp.e_rl - inp.e_svm).abs() / inp.e_svm + inp.penalty
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimStep {
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct SimEnv {
    cfg: SimEnvConfig,
    trial: Option<SimTrial>,
    evidence: f64,
    boundary: f64,
    drift: f64,
    steps: usize,
    done: bool,
    timed_out: bool,
    /// Trials that hit the perfect-baseline reward fallback.
    pub perfect_baseline_events: u64,
}

impl SimEnv {
    pub fn new(cfg: SimEnvConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            trial: None,
            evidence: EVIDENCE_START,
            boundary: EVIDENCE_START,
            drift: 0.0,
            steps: 0,
            done: true,
            timed_out: false,
            perfect_baseline_events: 0,
        })
    }

    pub fn config(&self) -> &SimEnvConfig {
        &self.cfg
    }

    pub fn reset(&mut self, trial: SimTrial) -> Result<SimObservation> {
        if !(trial.true_rt > 0.0 && trial.true_rt <= self.cfg.rt_max) {
            return Err(Error::InvalidInput(format!("true rt {} outside (0, {}]", trial.true_rt, self.cfg.rt_max)));
        }
        let p = trial.prediction;
        if !(p.rt > 0.0) || !(0.5..=1.0).contains(&p.confidence) {
            return Err(Error::InvalidInput("baseline prediction out of range".into()));
        }
        self.boundary = p.confidence.max(EVIDENCE_START + MIN_SPAN);
        self.drift = (self.boundary - EVIDENCE_START) / (p.rt * self.cfg.frame_rate());
        self.evidence = EVIDENCE_START;
        self.steps = 0;
        self.done = false;
        self.timed_out = false;
        self.trial = Some(trial);
        Ok(self.observation())
    }

    pub fn observation(&self) -> SimObservation {
        let trial = self.trial.as_ref().expect("observation before reset");
        SimObservation {
            tokens: encode_question(&trial.question),
            frame: render_frame(self.steps, trial.pressure_on, &self.cfg.stimulus),
        }
    }

    pub fn evidence(&self) -> f64 {
        self.evidence
    }

    pub fn boundary(&self) -> f64 {
        self.boundary
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn timed_out(&self) -> bool {
        self.timed_out
    }

    /// Simulated response time `R_rl = S_n / f`.
    pub fn simulated_rt(&self) -> f64 {
        self.steps as f64 / self.cfg.frame_rate()
    }

    pub fn step(&mut self, action: f64) -> Result<SimStep> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let a = if action.is_nan() { 0.0 } else { action.clamp(-1.0, 1.0) };
        self.evidence += (self.drift * (1.0 + self.cfg.kappa * a)).max(0.0);
        self.steps += 1;
        // tolerance absorbs rounding in repeated additions of the drift
        let crossed = self.evidence >= self.boundary - 1e-9 * (self.boundary - EVIDENCE_START);
        if !crossed && self.steps < self.cfg.max_steps {
            return Ok(SimStep { reward: 0.0, done: false });
        }
        self.done = true;
        self.timed_out = !crossed;
        let trial = self.trial.as_ref().expect("step after reset");
        let inputs = SimRewardInputs::from_times(self.simulated_rt(), trial.prediction.rt, trial.true_rt, self.timed_out)?;
        if inputs.e_svm == 0.0 {
            self.perfect_baseline_events += 1;
        }
        Ok(SimStep { reward: compute_sim_reward(&inputs), done: true })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialTrace {
    pub question: MathQuestion,
    pub pressure_on: bool,
    pub r_t: f64,
    pub r_u: f64,
    pub r_rl: f64,
    pub reward: f64,
}

/// Runs one trial to completion with `policy` choosing each action.
pub fn run_trial(
    env: &mut SimEnv,
    trial: SimTrial,
    mut policy: impl FnMut(&SimObservation) -> f64,
) -> Result<TrialTrace> {
    let mut obs = env.reset(trial)?;
    let mut total = 0.0;
    loop {
        let s = env.step(policy(&obs))?;
        total += s.reward;
        if s.done {
            break;
        }
        obs = env.observation();
    }
    Ok(TrialTrace {
        question: trial.question,
        pressure_on: trial.pressure_on,
        r_t: trial.prediction.rt,
        r_u: trial.true_rt,
        r_rl: env.simulated_rt(),
        reward: total,
    })
}

pub const TRACE_HEADER: &str = "question,pressure_on,r_t,r_u,r_rl,reward";

pub fn write_traces<W: Write>(mut w: W, traces: &[TrialTrace]) -> Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for t in traces {
        writeln!(w, "{},{},{},{},{},{}", t.question, t.pressure_on as u8, t.r_t, t.r_u, t.r_rl, t.reward)?;
    }
    Ok(())
}
