//! The regulation agent's world: one step is one trial, the action switches
//! time pressure on or off, and the reward tracks how far response times
//! fall below the user's initial no-pressure level.

use std::collections::VecDeque;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::rt_is_valid;
use crate::ppo::Environment;
use crate::synthetic_user::{Population, SyntheticUser, SyntheticUserConfig};
use crate::task::QuestionGenerator;
use crate::{Error, Result};

pub const BUFFER_LEN: usize = 10;
pub const DELTA_TARGET: f64 = 0.1054;
pub const OBS_DIM: usize = BUFFER_LEN + 1;

/// Anything that answers one trial at a time under a pressure decision.
pub trait UserModel {
    /// Starts a fresh episode (a new or re-initialised user).
    fn reset(&mut self) -> Result<()>;
    /// Response time in seconds for the next trial.
    fn respond(&mut self, pressure_on: bool) -> Result<f64>;
    /// No-pressure reference RT of the current user, when it can be measured
    /// without touching the episode (a practice block on a separate copy).
    fn reference_rt(&self) -> Option<f64> {
        None
    }
}

impl<U: UserModel + ?Sized> UserModel for Box<U> {
    fn reset(&mut self) -> Result<()> {
        (**self).reset()
    }
    fn respond(&mut self, pressure_on: bool) -> Result<f64> {
        (**self).respond(pressure_on)
    }
    fn reference_rt(&self) -> Option<f64> {
        (**self).reference_rt()
    }
}

/// A single synthetic user, restarted with the same seed on every reset.
pub struct SyntheticUserModel {
    cfg: SyntheticUserConfig,
    seed: u64,
    user: SyntheticUser,
    questions: QuestionGenerator,
}

impl SyntheticUserModel {
    pub fn new(cfg: SyntheticUserConfig, seed: u64) -> Self {
        Self { cfg, seed, user: SyntheticUser::new(cfg, seed), questions: QuestionGenerator::new(seed) }
    }

    pub fn config(&self) -> &SyntheticUserConfig {
        &self.cfg
    }
}

impl UserModel for SyntheticUserModel {
    fn reset(&mut self) -> Result<()> {
        self.user = SyntheticUser::new(self.cfg, self.seed);
        self.questions = QuestionGenerator::new(self.seed);
        Ok(())
    }

    fn respond(&mut self, pressure_on: bool) -> Result<f64> {
        let q = self.questions.generate();
        Ok(self.user.respond(&q, pressure_on).rt)
    }

    fn reference_rt(&self) -> Option<f64> {
        Some(measure_r_init(&self.cfg, self.seed ^ PRACTICE_SEED, PRACTICE_TRIALS))
    }
}

/// Draws a new synthetic user from a population on every reset.
pub struct PopulationUserModel {
    population: Population,
    rng: ChaCha8Rng,
    current: SyntheticUserModel,
}

impl PopulationUserModel {
    pub fn new(population: Population, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let current = SyntheticUserModel::new(population.sample(&mut rng), rand::Rng::random(&mut rng));
        Self { population, rng, current }
    }
}

impl UserModel for PopulationUserModel {
    fn reset(&mut self) -> Result<()> {
        let cfg = self.population.sample(&mut self.rng);
        self.current = SyntheticUserModel::new(cfg, rand::Rng::random(&mut self.rng));
        Ok(())
    }

    fn respond(&mut self, pressure_on: bool) -> Result<f64> {
        self.current.respond(pressure_on)
    }

    fn reference_rt(&self) -> Option<f64> {
        self.current.reference_rt()
    }
}

/// Bridge to a human: the session relays each measured RT before the
/// environment steps, so bookkeeping matches the simulated case exactly.
#[derive(Debug, Default)]
pub struct LiveRelay {
    pending: Option<f64>,
    closed: bool,
}

impl LiveRelay {
    pub fn new() -> Self {
        Self::default()
    }

    /// Hands over the response time of the trial about to be stepped.
    pub fn relay(&mut self, rt: f64) -> Result<()> {
        if self.closed {
            return Err(Error::SessionClosed);
        }
        self.pending = Some(rt);
        Ok(())
    }

    pub fn close(&mut self) {
        self.closed = true;
    }
}

impl UserModel for LiveRelay {
    fn reset(&mut self) -> Result<()> {
        self.pending = None;
        Ok(())
    }

    fn respond(&mut self, _pressure_on: bool) -> Result<f64> {
        if self.closed {
            return Err(Error::SessionClosed);
        }
        self.pending.take().ok_or_else(|| Error::InvalidInput("no answer relayed for this trial".into()))
    }
}

/// Length of the no-pressure practice block used to calibrate `r_init`.
pub const PRACTICE_TRIALS: usize = 10;
const PRACTICE_SEED: u64 = 0x5eed_0f_9ac7;

/// Mean RT of a fresh copy of the user over `trials` no-pressure trials.
pub fn measure_r_init(cfg: &SyntheticUserConfig, seed: u64, trials: usize) -> f64 {
    let mut m = SyntheticUserModel::new(*cfg, seed);
    (0..trials).map(|_| m.respond(false).expect("synthetic users never fail")).sum::<f64>() / trials as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegulationConfig {
    /// Trials per episode `N`.
    pub trials: usize,
    /// Reference no-pressure RT in seconds.
    pub r_init: f64,
    pub delta_target: f64,
    /// Leave RTs outside the validity window out of the running mean (live sessions).
    pub exclude_invalid: bool,
    /// Replace `r_init` at every reset with the user's reference RT, if it has one.
    pub calibrate: bool,
}

impl Default for RegulationConfig {
    fn default() -> Self {
        Self { trials: 100, r_init: 3.0, delta_target: DELTA_TARGET, exclude_invalid: false, calibrate: false }
    }
}

impl RegulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidInput("an episode needs at least one trial".into()));
        }
        if !(self.delta_target > 0.0) || !(self.r_init > 0.0) {
            return Err(Error::InvalidInput("r_init and delta_target must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegulationState {
    /// Running mean RT over completed trials (`r_init` before any).
    pub r_hat: f64,
    /// Last ten RTs, oldest first.
    pub buffer: VecDeque<f64>,
    pub counted: usize,
    sum: f64,
}

impl RegulationState {
    pub fn new(r_init: f64) -> Self {
        Self { r_hat: r_init, buffer: std::iter::repeat_n(r_init, BUFFER_LEN).collect(), counted: 0, sum: 0.0 }
    }

    fn push(&mut self, rt: f64, counts: bool) {
        self.buffer.pop_front();
        self.buffer.push_back(rt);
        if counts {
            self.counted += 1;
            self.sum += rt;
            self.r_hat = self.sum / self.counted as f64;
        }
    }

    /// Scale-free policy input: buffer then running mean, each over `r_init`.
    pub fn observation(&self, r_init: f64) -> Vec<f64> {
        self.buffer.iter().chain(std::iter::once(&self.r_hat)).map(|v| v / r_init).collect()
    }
}

/// Step reward `R_init - Ru_i`.
pub fn step_reward(r_init: f64, rt: f64) -> f64 {
    r_init - rt
}

/// Overall relative reduction `(R_init - R̂u) / R_init`.
pub fn relative_reduction(r_init: f64, r_hat: f64) -> f64 {
    (r_init - r_hat) / r_init
}

/// End-of-episode reward `(Δ_Ru - Δ_R*) / Δ_R*`.
pub fn end_reward(delta_ru: f64, delta_target: f64) -> f64 {
    (delta_ru - delta_target) / delta_target
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub trial_index: usize,
    pub action: bool,
    pub rt: f64,
    pub r_s: f64,
    pub r_e: f64,
    pub r_hat: f64,
    pub valid: bool,
}

pub const EPISODE_LOG_HEADER: &str = "trial_index,action,Ru_i,r_s,r_e,r_hat";

pub fn write_episode_log<W: Write>(mut w: W, records: &[EpisodeRecord]) -> Result<()> {
    writeln!(w, "{EPISODE_LOG_HEADER}")?;
    for r in records {
        writeln!(w, "{},{},{},{},{},{}", r.trial_index, r.action as u8, r.rt, r.r_s, r.r_e, r.r_hat)?;
    }
    Ok(())
}

pub struct RegulationEnv<U> {
    cfg: RegulationConfig,
    user: U,
    state: RegulationState,
    trial: usize,
    log: Vec<EpisodeRecord>,
}

impl<U: UserModel> RegulationEnv<U> {
    pub fn new(cfg: RegulationConfig, user: U) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { state: RegulationState::new(cfg.r_init), cfg, user, trial: 0, log: Vec::new() })
    }

    pub fn config(&self) -> &RegulationConfig {
        &self.cfg
    }

    pub fn state(&self) -> &RegulationState {
        &self.state
    }

    pub fn trial(&self) -> usize {
        self.trial
    }

    pub fn is_done(&self) -> bool {
        self.trial >= self.cfg.trials
    }

    /// Records of the current episode.
    pub fn log(&self) -> &[EpisodeRecord] {
        &self.log
    }

    pub fn user_mut(&mut self) -> &mut U {
        &mut self.user
    }

    pub fn observation(&self) -> Vec<f64> {
        self.state.observation(self.cfg.r_init)
    }

    pub fn reset(&mut self) -> Result<&RegulationState> {
        self.user.reset()?;
        if self.cfg.calibrate {
            if let Some(r) = self.user.reference_rt().filter(|r| *r > 0.0 && r.is_finite()) {
                self.cfg.r_init = r;
            }
        }
        self.state = RegulationState::new(self.cfg.r_init);
        self.trial = 0;
        self.log.clear();
        Ok(&self.state)
    }

    /// Runs one trial; the reward is `r_s + r_e`.
    pub fn step(&mut self, pressure_on: bool) -> Result<EpisodeRecord> {
        if self.is_done() {
            return Err(Error::EpisodeDone);
        }
        let rt = self.user.respond(pressure_on)?;
        if !rt.is_finite() || rt <= 0.0 {
            return Err(Error::InvalidInput(format!("user model returned rt {rt}")));
        }
        let valid = rt_is_valid(rt);
        self.state.push(rt, valid || !self.cfg.exclude_invalid);
        self.trial += 1;
        let r_s = step_reward(self.cfg.r_init, rt);
        let r_e = if self.is_done() {
            end_reward(relative_reduction(self.cfg.r_init, self.state.r_hat), self.cfg.delta_target)
        } else {
            0.0
        };
        let rec = EpisodeRecord { trial_index: self.trial - 1, action: pressure_on, rt, r_s, r_e, r_hat: self.state.r_hat, valid };
        self.log.push(rec);
        Ok(rec)
    }

    /// Plays a whole episode with `decide` mapping observations to pressure.
    pub fn run_episode(&mut self, mut decide: impl FnMut(&[f64]) -> bool) -> Result<Vec<EpisodeRecord>> {
        self.reset()?;
        while !self.is_done() {
            let obs = self.observation();
            self.step(decide(&obs))?;
        }
        Ok(self.log.clone())
    }
}

impl<U: UserModel> Environment for RegulationEnv<U> {
    fn observation_dim(&self) -> usize {
        OBS_DIM
    }

    fn reset(&mut self) -> Result<Vec<f64>> {
        RegulationEnv::reset(self)?;
        Ok(self.observation())
    }

    fn step(&mut self, action: f64) -> Result<(Vec<f64>, f64, bool)> {
        let rec = RegulationEnv::step(self, action >= 0.5)?;
        Ok((self.observation(), rec.r_s + rec.r_e, self.is_done()))
    }
}
