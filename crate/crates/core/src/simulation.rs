//! The simulation agent end to end: baseline fitting from answer-agent
//! features, replaying dataset trials through the accumulator environment,
//! PPO training with an image and token front end, evaluation, and a user
//! model backed by the trained agent.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answer_agent::AnswerAgentModel;
use crate::baseline::{fit_baseline, BaselineConfig, BaselineModel, BaselineReport, BaselineRow};
use crate::metrics::mape;
use crate::ppo::{self, Environment, FrontEndSpec, HeadKind, Policy, PpoConfig, TrainOutcome};
use crate::regulation_env::{UserModel, PRACTICE_TRIALS};
use crate::sim_env::{run_trial, SimEnv, SimEnvConfig, SimObservation, SimTrial, TrialTrace};
use crate::synthetic_user::DatasetRow;
use crate::task::{MathQuestion, QuestionGenerator, ENCODED_LEN, VOCAB_SIZE};
use crate::{Error, Result};

pub const TOKEN_DIM: usize = ENCODED_LEN * VOCAB_SIZE;

/// Answer-agent features for many questions, batched.
pub fn question_features(answer: &AnswerAgentModel, questions: &[MathQuestion]) -> Vec<Vec<f64>> {
    questions
        .chunks(256)
        .flat_map(|c| answer.features_batch(c).outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>())
        .collect()
}

/// Fits the baseline on the no-pressure rows of a dataset.
pub fn fit_dataset_baseline(
    rows: &[DatasetRow],
    answer: &AnswerAgentModel,
    cfg: &BaselineConfig,
) -> Result<(BaselineModel, BaselineReport)> {
    let calm: Vec<&DatasetRow> = rows.iter().filter(|r| !r.pressure).collect();
    let qs: Vec<MathQuestion> = calm.iter().map(|r| r.question).collect();
    let feats = question_features(answer, &qs);
    let brows: Vec<BaselineRow> = calm
        .iter()
        .zip(feats)
        .map(|(r, features)| BaselineRow { features, trial: r.trial, choice: r.choice, rt: r.rt })
        .collect();
    fit_baseline(&brows, cfg)
}

/// Pairs every dataset row with its baseline prediction.
pub fn build_trials(rows: &[DatasetRow], answer: &AnswerAgentModel, baseline: &BaselineModel) -> Result<Vec<SimTrial>> {
    let qs: Vec<MathQuestion> = rows.iter().map(|r| r.question).collect();
    let feats = question_features(answer, &qs);
    rows.iter()
        .zip(feats)
        .map(|(r, f)| {
            Ok(SimTrial { question: r.question, prediction: baseline.predict(&f, r.trial)?, true_rt: r.rt, pressure_on: r.pressure })
        })
        .collect()
}

/// Splits rows by user so held-out trials come from unseen users.
pub fn split_by_user(rows: &[DatasetRow], holdout: f64, seed: u64) -> (Vec<DatasetRow>, Vec<DatasetRow>) {
    let mut users: Vec<usize> = rows.iter().map(|r| r.user_id).collect();
    users.sort_unstable();
    users.dedup();
    users.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_hold = ((users.len() as f64) * holdout).round() as usize;
    let held: std::collections::HashSet<usize> = users[..n_hold].iter().copied().collect();
    rows.iter().cloned().partition(|r| !held.contains(&r.user_id))
}

/// Policy input: the stimulus image followed by the position-aware token one-hot.
pub fn observation_vector(obs: &SimObservation) -> Vec<f64> {
    let mut v = obs.frame.image.clone();
    v.extend(obs.tokens.one_hot());
    v
}

/// Cycles through dataset trials in a seeded shuffled order.
pub struct SimTrainingEnv {
    env: SimEnv,
    trials: Arc<Vec<SimTrial>>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl SimTrainingEnv {
    pub fn new(cfg: SimEnvConfig, trials: Arc<Vec<SimTrial>>, seed: u64) -> Result<Self> {
        if trials.is_empty() {
            return Err(Error::InvalidInput("no trials to simulate".into()));
        }
        let order = (0..trials.len()).collect();
        let mut env = Self { env: SimEnv::new(cfg)?, trials, order, pos: 0, rng: ChaCha8Rng::seed_from_u64(seed) };
        env.order.shuffle(&mut env.rng);
        Ok(env)
    }
}

impl Environment for SimTrainingEnv {
    fn observation_dim(&self) -> usize {
        self.env.config().stimulus.pixels() + TOKEN_DIM
    }

    fn reset(&mut self) -> Result<Vec<f64>> {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let trial = self.trials[self.order[self.pos]];
        self.pos += 1;
        Ok(observation_vector(&self.env.reset(trial)?))
    }

    fn step(&mut self, action: f64) -> Result<(Vec<f64>, f64, bool)> {
        let s = self.env.step(action)?;
        Ok((observation_vector(&self.env.observation()), s.reward, s.done))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimAgentConfig {
    pub env: SimEnvConfig,
    pub ppo: PpoConfig,
    pub image_features: usize,
    pub token_features: usize,
    pub hidden: Vec<usize>,
    pub n_envs: usize,
}

impl Default for SimAgentConfig {
    fn default() -> Self {
        Self {
            env: SimEnvConfig::default(),
            // full-return advantages: the observation repeats within a trial,
            // so one-step targets would credit only the final frame
            ppo: PpoConfig { total_steps: 200_000, init_log_std: -1.0, gae_lambda: Some(1.0), ..Default::default() },
            image_features: 32,
            token_features: 16,
            hidden: vec![64, 64],
            n_envs: 4,
        }
    }
}

impl SimAgentConfig {
    pub fn front_end(&self) -> FrontEndSpec {
        FrontEndSpec {
            image_dim: self.env.stimulus.pixels(),
            image_features: self.image_features,
            token_dim: TOKEN_DIM,
            token_features: self.token_features,
        }
    }

    pub fn initial_policy(&self) -> Result<Policy> {
        let dim = self.env.stimulus.pixels() + TOKEN_DIM;
        Policy::new(HeadKind::Continuous, dim, Some(self.front_end()), &self.hidden, self.ppo.init_log_std, self.ppo.seed)
    }
}

pub fn train_sim_agent(
    trials: Vec<SimTrial>,
    cfg: &SimAgentConfig,
    on_update: impl FnMut(&ppo::CurvePoint, &Policy) -> Result<()>,
) -> Result<TrainOutcome> {
    let trials = Arc::new(trials);
    let mut envs = (0..cfg.n_envs.max(1))
        .map(|k| SimTrainingEnv::new(cfg.env, trials.clone(), cfg.ppo.seed.wrapping_add(100 + k as u64)))
        .collect::<Result<Vec<_>>>()?;
    ppo::train(&mut envs, cfg.initial_policy()?, &cfg.ppo, on_update)
}

#[derive(Debug, Clone)]
pub struct SimEvaluation {
    pub agent_mape: f64,
    pub baseline_mape: f64,
    pub traces: Vec<TrialTrace>,
}

/// Replays `trials` with the policy's mean action and scores RT predictions.
pub fn evaluate_sim_agent(policy: &Policy, env_cfg: &SimEnvConfig, trials: &[SimTrial]) -> Result<SimEvaluation> {
    if trials.is_empty() {
        return Err(Error::InvalidInput("no trials to evaluate".into()));
    }
    let mut env = SimEnv::new(*env_cfg)?;
    let traces = trials
        .iter()
        .map(|t| run_trial(&mut env, *t, |o| policy.act_deterministic(&observation_vector(o))))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<f64> = traces.iter().map(|t| t.r_u).collect();
    let agent: Vec<f64> = traces.iter().map(|t| t.r_rl).collect();
    let base: Vec<f64> = traces.iter().map(|t| t.r_t).collect();
    Ok(SimEvaluation { agent_mape: mape(&agent, &truth)?, baseline_mape: mape(&base, &truth)?, traces })
}

/// A virtual user: the baseline predicts the no-pressure behaviour of a
/// question drawn from a fixed pool and the simulation policy turns it
/// into a response time under the chosen pressure.
pub struct SimAgentUser {
    policy: Policy,
    baseline: BaselineModel,
    env: SimEnv,
    pool: Arc<Vec<(MathQuestion, Vec<f64>)>>,
    rng: ChaCha8Rng,
    seed: u64,
    trial: usize,
    reference: f64,
    /// Sample actions from the policy instead of using its mean.
    pub stochastic: bool,
}

impl SimAgentUser {
    pub fn new(
        policy: Policy,
        baseline: BaselineModel,
        env_cfg: SimEnvConfig,
        answer: &AnswerAgentModel,
        pool_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if pool_size == 0 {
            return Err(Error::InvalidInput("question pool must not be empty".into()));
        }
        let qs = QuestionGenerator::new(seed).take(pool_size);
        let feats = question_features(answer, &qs);
        let pool = Arc::new(qs.into_iter().zip(feats).collect());
        Self::with_pool(policy, baseline, env_cfg, pool, seed)
    }

    pub fn with_pool(
        policy: Policy,
        baseline: BaselineModel,
        env_cfg: SimEnvConfig,
        pool: Arc<Vec<(MathQuestion, Vec<f64>)>>,
        seed: u64,
    ) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::InvalidInput("question pool must not be empty".into()));
        }
        // mean predicted no-pressure RT over a practice-length block
        let mut total = 0.0;
        for trial in 0..PRACTICE_TRIALS {
            total += pool.iter().map(|(_, f)| baseline.predict(f, trial).map(|p| p.rt.min(env_cfg.rt_max))).sum::<Result<f64>>()?;
        }
        let reference = total / (PRACTICE_TRIALS * pool.len()) as f64;
        Ok(Self {
            policy,
            baseline,
            env: SimEnv::new(env_cfg)?,
            pool,
            reference,
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            trial: 0,
            stochastic: false,
        })
    }

    pub fn pool(&self) -> Arc<Vec<(MathQuestion, Vec<f64>)>> {
        self.pool.clone()
    }
}

impl UserModel for SimAgentUser {
    fn reset(&mut self) -> Result<()> {
        self.trial = 0;
        self.seed = self.seed.wrapping_add(1);
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok(())
    }

    fn respond(&mut self, pressure_on: bool) -> Result<f64> {
        let (q, f) = &self.pool[self.rng.random_range(0..self.pool.len())];
        let prediction = self.baseline.predict(f, self.trial)?;
        self.trial += 1;
        // the observed rt only feeds the training reward, which is unused here
        let trial = SimTrial { question: *q, prediction, true_rt: prediction.rt.min(self.env.config().rt_max), pressure_on };
        let (policy, rng, stochastic) = (&self.policy, &mut self.rng, self.stochastic);
        let trace = run_trial(&mut self.env, trial, |o| {
            let obs = observation_vector(o);
            if stochastic {
                policy.sample(&obs, rng).0
            } else {
                policy.act_deterministic(&obs)
            }
        })?;
        Ok(trace.r_rl)
    }

    fn reference_rt(&self) -> Option<f64> {
        Some(self.reference)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answer_agent::{train_answer_agent, AnswerAgentConfig};
    use crate::synthetic_user::{generate_dataset, Population};

    fn tiny_answer() -> AnswerAgentModel {
        let mut bank: Vec<MathQuestion> = (0..17)
            .map(|c| MathQuestion::all().find(|q| q.label() == c).unwrap())
            .collect();
        bank.extend(QuestionGenerator::new(1).take(20));
        train_answer_agent(&bank, &AnswerAgentConfig { hidden: 8, epochs: 1, ..Default::default() }).unwrap()
    }

    #[test]
    fn pipeline_shapes() {
        let rows = generate_dataset(6, 40, &Population::default(), 3).unwrap();
        let (train, held) = split_by_user(&rows, 0.34, 0);
        assert_eq!(held.len(), 80);
        assert!(train.iter().all(|r| !held.iter().any(|h| h.user_id == r.user_id)));
        let answer = tiny_answer();
        let (baseline, _) = fit_dataset_baseline(&train, &answer, &BaselineConfig::default()).unwrap();
        let trials = build_trials(&held, &answer, &baseline).unwrap();
        assert_eq!(trials.len(), held.len());
        let cfg = SimAgentConfig::default();
        let mut env = SimTrainingEnv::new(cfg.env, Arc::new(trials.clone()), 0).unwrap();
        let obs = env.reset().unwrap();
        assert_eq!(obs.len(), env.observation_dim());
        assert_eq!(obs.len(), 512 + 104);

        // an untrained policy acts almost neutrally, so it scores like the baseline
        let policy = cfg.initial_policy().unwrap();
        let eval = evaluate_sim_agent(&policy, &cfg.env, &trials).unwrap();
        assert!((eval.agent_mape - eval.baseline_mape).abs() < 0.1);

        let mut user = SimAgentUser::new(policy, baseline, cfg.env, &answer, 50, 0).unwrap();
        let a: Vec<f64> = (0..5).map(|_| user.respond(true).unwrap()).collect();
        assert!(a.iter().all(|&rt| rt > 0.0 && rt <= 10.0));
    }

    #[test]
    fn short_training_run_is_deterministic() {
        let rows = generate_dataset(3, 30, &Population::default(), 5).unwrap();
        let answer = tiny_answer();
        let (baseline, _) = fit_dataset_baseline(&rows, &answer, &BaselineConfig::default()).unwrap();
        let trials = build_trials(&rows, &answer, &baseline).unwrap();
        let mut cfg = SimAgentConfig::default();
        cfg.ppo.total_steps = 256;
        cfg.ppo.rollout_len = 128;
        let a = train_sim_agent(trials.clone(), &cfg, |_, _| Ok(())).unwrap();
        let b = train_sim_agent(trials, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.curve.len(), 2);
    }
}
