//! Training the regulation policy and deploying pressure controllers on
//! synthetic users.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::{block_stats, mean, BlockStats, TrialOutcome};
use crate::ppo::{self, CurvePoint, HeadKind, Policy, PpoConfig, TrainOutcome};
use crate::regulation_env::{EpisodeRecord, RegulationConfig, RegulationEnv, SyntheticUserModel, UserModel, OBS_DIM};
use crate::synthetic_user::Population;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegAgentConfig {
    pub env: RegulationConfig,
    pub ppo: PpoConfig,
    pub hidden: Vec<usize>,
    pub n_envs: usize,
}

impl Default for RegAgentConfig {
    fn default() -> Self {
        Self {
            env: RegulationConfig { calibrate: true, ..Default::default() },
            // the gain from pressure is immediate while its anxiety cost arrives
            // later, so one-step targets drift to always-on
            ppo: PpoConfig { total_steps: 50_000, rollout_len: 1000, lr: 1e-3, gae_lambda: Some(0.95), ..Default::default() },
            hidden: vec![64, 64],
            n_envs: 4,
        }
    }
}

impl RegAgentConfig {
    pub fn initial_policy(&self) -> Result<Policy> {
        Policy::new(HeadKind::Binary, OBS_DIM, None, &self.hidden, 0.0, self.ppo.seed)
    }
}

/// Trains a binary pressure policy with one environment per user model.
pub fn train_regulation_agent<U: UserModel>(
    users: Vec<U>,
    cfg: &RegAgentConfig,
    on_update: impl FnMut(&CurvePoint, &Policy) -> Result<()>,
) -> Result<TrainOutcome> {
    if users.is_empty() {
        return Err(Error::InvalidInput("need at least one user model".into()));
    }
    let mut envs = users.into_iter().map(|u| RegulationEnv::new(cfg.env, u)).collect::<Result<Vec<_>>>()?;
    ppo::train(&mut envs, cfg.initial_policy()?, &cfg.ppo, on_update)
}

/// Who decides the pressure flag of each trial.
#[derive(Debug, Clone, Copy)]
pub enum Controller<'a> {
    Policy(&'a Policy),
    /// Pressure with probability 0.5, independently per trial.
    Random,
    Always(bool),
}

impl Controller<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Controller::Policy(_) => "rl",
            Controller::Random => "random",
            Controller::Always(true) => "always_on",
            Controller::Always(false) => "none",
        }
    }
}

/// One synthetic user's episode under a controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserEpisode {
    pub user: usize,
    /// Mean RT of the same user over the same trials without pressure.
    pub no_pressure_rt: f64,
    pub mean_rt: f64,
    /// `(no_pressure_rt - mean_rt) / no_pressure_rt`.
    pub reduction: f64,
    pub feedback_fraction: f64,
    pub records: Vec<EpisodeRecord>,
}

fn play<U: UserModel>(env: &mut RegulationEnv<U>, controller: Controller, rng: &mut ChaCha8Rng) -> Result<Vec<EpisodeRecord>> {
    env.run_episode(|obs| match controller {
        Controller::Policy(p) => p.act_deterministic(obs) >= 0.5,
        Controller::Random => rng.random_bool(0.5),
        Controller::Always(on) => on,
    })
}

/// Runs `controller` on `n_users` fresh users drawn from `population`.
///
/// Users, their noise and the random controller's coin flips depend only on
/// `seed`, so different controllers face identical users.
pub fn deploy(population: &Population, n_users: usize, env: RegulationConfig, controller: Controller, seed: u64) -> Result<Vec<UserEpisode>> {
    if n_users == 0 {
        return Err(Error::InvalidInput("need at least one user".into()));
    }
    let mut users = ChaCha8Rng::seed_from_u64(seed);
    (0..n_users)
        .map(|user| {
            let ucfg = population.sample(&mut users);
            let useed: u64 = users.random();
            let mut coin = ChaCha8Rng::seed_from_u64(useed ^ 0xc011);
            let mut run = |c: Controller| -> Result<Vec<EpisodeRecord>> {
                let mut e = RegulationEnv::new(env, SyntheticUserModel::new(ucfg, useed))?;
                play(&mut e, c, &mut coin)
            };
            let calm = run(Controller::Always(false))?;
            let records = run(controller)?;
            let no_pressure_rt = mean(&calm.iter().map(|r| r.rt).collect::<Vec<_>>());
            let mean_rt = mean(&records.iter().map(|r| r.rt).collect::<Vec<_>>());
            let feedback_fraction = records.iter().filter(|r| r.action).count() as f64 / records.len() as f64;
            Ok(UserEpisode { user, no_pressure_rt, mean_rt, reduction: (no_pressure_rt - mean_rt) / no_pressure_rt, feedback_fraction, records })
        })
        .collect()
}

/// Aggregate of a deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentSummary {
    pub controller: String,
    pub users: usize,
    pub mean_reduction: f64,
    pub mean_rt: f64,
    pub feedback_fraction: f64,
    /// Blocks over the trials of all users pooled by position.
    pub blocks: BlockStats,
}

pub fn summarize_deployment(controller: &str, episodes: &[UserEpisode]) -> Result<DeploymentSummary> {
    if episodes.is_empty() {
        return Err(Error::InvalidInput("no episodes".into()));
    }
    let trials = episodes[0].records.len();
    // per position, average RT and feedback over users; correctness is not modelled here
    let pooled: Vec<TrialOutcome> = (0..trials)
        .flat_map(|i| {
            episodes.iter().map(move |e| {
                let r = &e.records[i];
                TrialOutcome { rt: r.rt, correct: true, pressure: r.action }
            })
        })
        .collect();
    Ok(DeploymentSummary {
        controller: controller.to_string(),
        users: episodes.len(),
        mean_reduction: mean(&episodes.iter().map(|e| e.reduction).collect::<Vec<_>>()),
        mean_rt: mean(&episodes.iter().map(|e| e.mean_rt).collect::<Vec<_>>()),
        feedback_fraction: mean(&episodes.iter().map(|e| e.feedback_fraction).collect::<Vec<_>>()),
        blocks: block_stats(&pooled)?,
    })
}
