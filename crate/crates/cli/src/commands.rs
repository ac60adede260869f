//! The pipeline stages behind each subcommand.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use dualrl::answer_agent::{train_answer_agent, AnswerAgentConfig, AnswerAgentModel};
use dualrl::baseline::{BaselineConfig, BaselineModel, BaselineReport};
use dualrl::checkpoint::Checkpoint;
use dualrl::metrics::{bootstrap_positive_fraction, mape, session_delta, summarize, SessionDelta, TrialOutcome};
use dualrl::ppo::{write_curve, CurvePoint, HeadKind, Policy};
use dualrl::regulation_agent::{deploy, summarize_deployment, train_regulation_agent, Controller, DeploymentSummary, RegAgentConfig, UserEpisode};
use dualrl::regulation_env::{write_episode_log, PopulationUserModel, RegulationConfig, OBS_DIM};
use dualrl::sim_env::write_traces;
use dualrl::simulation::{build_trials, evaluate_sim_agent, fit_dataset_baseline, split_by_user, train_sim_agent, SimAgentConfig, SimAgentUser};
use dualrl::synthetic_user::{generate_dataset, read_dataset, write_dataset, DatasetRow, Population};
use dualrl::task::QuestionGenerator;
use dualrl_service::protocol::ProtocolConfig;
use dualrl_service::{FileStore, Service, ServiceConfig, SystemClock};

use crate::error::{CliError, CliResult};
use crate::provenance::Artifacts;

fn require(path: &Path, what: &str, flag: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{what} not found at {} (pass {flag} <path>)", path.display())))
    }
}

fn load_checkpoint(path: &Path, what: &str, flag: &str) -> CliResult<Checkpoint> {
    require(path, what, flag)?;
    Ok(Checkpoint::load(path)?)
}

fn load_dataset(path: &Path) -> CliResult<Vec<DatasetRow>> {
    require(path, "dataset", "--dataset")?;
    let rows = read_dataset(BufReader::new(File::open(path)?))?;
    if rows.is_empty() {
        return Err(CliError::Validation(format!("dataset {} has no rows", path.display())));
    }
    Ok(rows)
}

pub fn load_answer(path: &Path) -> CliResult<AnswerAgentModel> {
    Ok(AnswerAgentModel::from_checkpoint(&load_checkpoint(path, "answer agent checkpoint", "--answer")?)?)
}

pub fn load_baseline(path: &Path) -> CliResult<BaselineModel> {
    Ok(BaselineModel::from_checkpoint(&load_checkpoint(path, "baseline checkpoint", "--baseline")?)?)
}

/// Loads a regulation policy, checking it has the binary head and observation size.
pub fn load_regulation_policy(path: &Path) -> CliResult<Policy> {
    let p = Policy::from_checkpoint(&load_checkpoint(path, "regulation policy checkpoint", "--policy")?)?;
    if p.kind != HeadKind::Binary || p.obs_dim != OBS_DIM {
        return Err(CliError::Validation(format!("{} is not a regulation policy (binary head over {OBS_DIM} inputs)", path.display())));
    }
    Ok(p)
}

fn progress(label: &'static str, every: usize) -> impl FnMut(&CurvePoint, &Policy) -> dualrl::Result<()> {
    let mut next = every;
    move |p, _| {
        if p.step >= next {
            eprintln!("{label} step {} mean_return {:.4} clip_fraction {:.3} value_loss {:.4}", p.step, p.mean_return, p.clip_fraction, p.value_loss);
            next = p.step + every;
        }
        Ok(())
    }
}

fn curve_csv(curve: &[CurvePoint]) -> CliResult<String> {
    let mut buf = Vec::new();
    write_curve(&mut buf, curve)?;
    String::from_utf8(buf).map_err(|e| CliError::Runtime(e.to_string()))
}

// ---- gen-data

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub users: usize,
    pub trials: usize,
    pub population: Population,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self { users: 125, trials: 200, population: Population::default() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GenDataReport {
    pub rows: usize,
    pub users: usize,
    pub pressured_fraction: f64,
    pub dataset: PathBuf,
}

pub fn gen_data(cfg: &GenDataConfig, seed: u64, out: &Artifacts) -> CliResult<GenDataReport> {
    let rows = generate_dataset(cfg.users, cfg.trials, &cfg.population, seed)?;
    let path = out.path("dataset.csv");
    write_dataset(std::io::BufWriter::new(File::create(&path)?), &rows, &out.provenance.lines())?;
    let pressured = rows.iter().filter(|r| r.pressure).count();
    let report = GenDataReport {
        rows: rows.len(),
        users: cfg.users,
        pressured_fraction: pressured as f64 / rows.len().max(1) as f64,
        dataset: path,
    };
    out.json("gen_data_report.json", &report)?;
    Ok(report)
}

// ---- train-answer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainAnswerConfig {
    /// Questions drawn for the bank; the last `holdout` share is held out.
    pub bank_size: usize,
    pub holdout: f64,
    pub agent: AnswerAgentConfig,
}

impl Default for TrainAnswerConfig {
    fn default() -> Self {
        Self { bank_size: 5000, holdout: 0.2, agent: AnswerAgentConfig::default() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AnswerReport {
    pub train_questions: usize,
    pub holdout_questions: usize,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    pub final_loss: Option<f64>,
}

pub fn train_answer(cfg: &TrainAnswerConfig, seed: u64, out: &Artifacts) -> CliResult<AnswerReport> {
    if !(0.0..1.0).contains(&cfg.holdout) {
        return Err(CliError::Validation(format!("holdout {} outside [0, 1)", cfg.holdout)));
    }
    let bank = QuestionGenerator::new(seed).take(cfg.bank_size);
    let n_train = ((1.0 - cfg.holdout) * bank.len() as f64).round() as usize;
    let (train, held) = bank.split_at(n_train);
    let model = train_answer_agent(train, &AnswerAgentConfig { seed, ..cfg.agent })?;
    let report = AnswerReport {
        train_questions: train.len(),
        holdout_questions: held.len(),
        train_accuracy: model.accuracy(train),
        holdout_accuracy: model.accuracy(held),
        final_loss: model.epoch_losses.last().copied(),
    };
    out.checkpoint("answer.ck", model.to_checkpoint())?;
    out.json("answer_report.json", &report)?;
    Ok(report)
}

// ---- train-baseline

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainBaselineConfig {
    /// Share of users held out; the same seed gives the same split in train-sim.
    pub user_holdout: f64,
    pub baseline: BaselineConfig,
}

impl Default for TrainBaselineConfig {
    fn default() -> Self {
        Self { user_holdout: 0.2, baseline: BaselineConfig::default() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BaselineRunReport {
    pub fit: BaselineReport,
    /// RT MAPE over every held-out user trial, pressured or not.
    pub heldout_rt_mape: f64,
    pub heldout_rows: usize,
}

pub fn train_baseline(cfg: &TrainBaselineConfig, seed: u64, dataset: &Path, answer: &Path, out: &Artifacts) -> CliResult<BaselineRunReport> {
    let rows = load_dataset(dataset)?;
    let answer = load_answer(answer)?;
    let (train, held) = split_by_user(&rows, cfg.user_holdout, seed);
    let (model, fit) = fit_dataset_baseline(&train, &answer, &BaselineConfig { seed, ..cfg.baseline })?;
    let heldout_rt_mape = if held.is_empty() {
        f64::NAN
    } else {
        let trials = build_trials(&held, &answer, &model)?;
        let pred: Vec<f64> = trials.iter().map(|t| t.prediction.rt).collect();
        let truth: Vec<f64> = trials.iter().map(|t| t.true_rt).collect();
        mape(&pred, &truth)?
    };
    let report = BaselineRunReport { fit, heldout_rt_mape, heldout_rows: held.len() };
    out.checkpoint("baseline.ck", model.to_checkpoint())?;
    out.json("baseline_report.json", &report)?;
    Ok(report)
}

// ---- train-sim

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSimConfig {
    pub user_holdout: f64,
    /// Used when no baseline checkpoint is given.
    pub baseline: BaselineConfig,
    pub agent: SimAgentConfig,
}

impl Default for TrainSimConfig {
    fn default() -> Self {
        Self { user_holdout: 0.2, baseline: BaselineConfig::default(), agent: SimAgentConfig::default() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    pub steps: usize,
    pub stopped_early: Option<String>,
    pub train_trials: usize,
    pub heldout_trials: usize,
    pub agent_mape: f64,
    pub baseline_mape: f64,
}

pub fn train_sim(
    cfg: &TrainSimConfig,
    seed: u64,
    dataset: &Path,
    answer: &Path,
    baseline: Option<&Path>,
    out: &Artifacts,
) -> CliResult<SimReport> {
    let rows = load_dataset(dataset)?;
    let answer = load_answer(answer)?;
    let (train, held) = split_by_user(&rows, cfg.user_holdout, seed);
    if held.is_empty() {
        return Err(CliError::Validation("user_holdout leaves no held-out users to evaluate on".into()));
    }
    let baseline = match baseline {
        Some(p) => load_baseline(p)?,
        None => {
            let (m, _) = fit_dataset_baseline(&train, &answer, &BaselineConfig { seed, ..cfg.baseline })?;
            out.checkpoint("baseline.ck", m.to_checkpoint())?;
            m
        }
    };
    let train_trials = build_trials(&train, &answer, &baseline)?;
    let held_trials = build_trials(&held, &answer, &baseline)?;
    let mut agent = cfg.agent.clone();
    agent.ppo.seed = seed;
    let n_train = train_trials.len();
    let outcome = train_sim_agent(train_trials, &agent, progress("train-sim", 20_000))?;
    let eval = evaluate_sim_agent(&outcome.policy, &agent.env, &held_trials)?;
    let report = SimReport {
        steps: outcome.steps,
        stopped_early: outcome.stopped_early.clone(),
        train_trials: n_train,
        heldout_trials: held_trials.len(),
        agent_mape: eval.agent_mape,
        baseline_mape: eval.baseline_mape,
    };
    let mut traces = Vec::new();
    write_traces(&mut traces, &eval.traces)?;
    out.checkpoint("sim.ck", outcome.policy.to_checkpoint())?;
    out.csv("sim_curve.csv", &curve_csv(&outcome.curve)?)?;
    out.csv("sim_traces.csv", &String::from_utf8_lossy(&traces))?;
    out.json("sim_report.json", &report)?;
    Ok(report)
}

// ---- train-reg

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegTarget {
    /// The trained simulation agent as virtual user.
    Sim,
    /// Synthetic users drawn from the population.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRegConfig {
    pub target: RegTarget,
    pub agent: RegAgentConfig,
    /// Questions the virtual user draws from.
    pub pool_size: usize,
    pub population: Population,
}

impl Default for TrainRegConfig {
    fn default() -> Self {
        Self { target: RegTarget::Sim, agent: RegAgentConfig::default(), pool_size: 500, population: Population::default() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RegReport {
    pub target: RegTarget,
    pub steps: usize,
    pub stopped_early: Option<String>,
    pub final_mean_return: Option<f64>,
    /// One deployment episode on a fresh synthetic user.
    pub sample_reduction: f64,
    pub sample_feedback_fraction: f64,
}

/// Paths to the simulation stage's checkpoints.
#[derive(Debug, Clone, Default)]
pub struct SimInputs {
    pub sim: Option<PathBuf>,
    pub baseline: Option<PathBuf>,
    pub answer: Option<PathBuf>,
}

pub fn train_reg(cfg: &TrainRegConfig, seed: u64, inputs: &SimInputs, out: &Artifacts) -> CliResult<RegReport> {
    let mut agent = cfg.agent.clone();
    agent.ppo.seed = seed;
    let n = agent.n_envs.max(1);
    let outcome = match cfg.target {
        RegTarget::Sim => {
            let need = |p: &Option<PathBuf>, flag: &str| {
                p.clone().ok_or_else(|| CliError::Validation(format!("target = \"sim\" needs {flag} <path>")))
            };
            let sim_path = need(&inputs.sim, "--sim")?;
            let sim = Policy::from_checkpoint(&load_checkpoint(&sim_path, "simulation policy checkpoint", "--sim")?)?;
            let baseline = load_baseline(&need(&inputs.baseline, "--baseline")?)?;
            let answer = load_answer(&need(&inputs.answer, "--answer")?)?;
            let first = SimAgentUser::new(sim.clone(), baseline.clone(), SimAgentConfig::default().env, &answer, cfg.pool_size, seed)?;
            let pool = first.pool();
            let users = (0..n)
                .map(|k| {
                    let mut u = SimAgentUser::with_pool(sim.clone(), baseline.clone(), SimAgentConfig::default().env, pool.clone(), seed.wrapping_add(1_000 * k as u64))?;
                    u.stochastic = true;
                    Ok(u)
                })
                .collect::<dualrl::Result<Vec<_>>>()?;
            train_regulation_agent(users, &agent, progress("train-reg", 10_000))?
        }
        RegTarget::Synthetic => {
            let users = (0..n).map(|k| PopulationUserModel::new(cfg.population, seed.wrapping_add(k as u64))).collect();
            train_regulation_agent(users, &agent, progress("train-reg", 10_000))?
        }
    };
    let sample = deploy(&cfg.population, 1, agent.env, Controller::Policy(&outcome.policy), seed ^ 0x5a5a)?;
    let mut log = Vec::new();
    write_episode_log(&mut log, &sample[0].records)?;
    let report = RegReport {
        target: cfg.target,
        steps: outcome.steps,
        stopped_early: outcome.stopped_early.clone(),
        final_mean_return: outcome.curve.iter().rev().map(|p| p.mean_return).find(|r| r.is_finite()),
        sample_reduction: sample[0].reduction,
        sample_feedback_fraction: sample[0].feedback_fraction,
    };
    out.checkpoint("reg.ck", outcome.policy.to_checkpoint())?;
    out.csv("reg_curve.csv", &curve_csv(&outcome.curve)?)?;
    out.csv("reg_episode.csv", &String::from_utf8_lossy(&log))?;
    out.json("reg_report.json", &report)?;
    Ok(report)
}

// ---- eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub users: usize,
    pub env: RegulationConfig,
    pub population: Population,
    pub bootstrap_resamples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            users: 100,
            env: RegulationConfig { calibrate: true, ..Default::default() },
            population: Population::default(),
            bootstrap_resamples: 2000,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ControllerReport {
    pub summary: DeploymentSummary,
    /// Pooled trials against the no-pressure controller as control.
    pub delta_vs_none: SessionDelta,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub controllers: Vec<ControllerReport>,
    /// Share of bootstrap resamples in which the RL policy's per-user
    /// reduction beats the random policy's.
    pub rl_beats_random_bootstrap: Option<f64>,
}

fn pooled(episodes: &[UserEpisode]) -> Vec<TrialOutcome> {
    episodes.iter().flat_map(|e| e.records.iter().map(|r| TrialOutcome { rt: r.rt, correct: true, pressure: r.action })).collect()
}

pub fn eval(cfg: &EvalConfig, seed: u64, policy: Option<&Path>, out: &Artifacts) -> CliResult<EvalReport> {
    let policy = policy.map(load_regulation_policy).transpose()?;
    let mut controllers = Vec::new();
    if let Some(p) = &policy {
        controllers.push(Controller::Policy(p));
    }
    controllers.extend([Controller::Random, Controller::Always(false), Controller::Always(true)]);
    let runs = controllers
        .iter()
        .map(|c| Ok((c.name(), deploy(&cfg.population, cfg.users, cfg.env, *c, seed)?)))
        .collect::<CliResult<Vec<_>>>()?;
    let none = runs.iter().find(|(n, _)| *n == "none").expect("always evaluated");
    let control = summarize(&pooled(&none.1), None, None)?;
    let mut reports = Vec::new();
    for (name, eps) in &runs {
        let summary = summarize_deployment(name, eps)?;
        let delta = session_delta(&control, &summarize(&pooled(eps), None, None)?);
        out.csv(&format!("eval_blocks_{name}.csv"), &summary.blocks.to_csv())?;
        out.csv(&format!("eval_delta_{name}.csv"), &delta.to_csv())?;
        reports.push(ControllerReport { summary, delta_vs_none: delta });
    }
    let rl_beats_random_bootstrap = policy.as_ref().map(|_| {
        let rl = &runs[0].1;
        let random = &runs[1].1;
        let diffs: Vec<f64> = rl.iter().zip(random).map(|(a, b)| a.reduction - b.reduction).collect();
        bootstrap_positive_fraction(&diffs, cfg.bootstrap_resamples, seed)
    });
    let report = EvalReport { controllers: reports, rl_beats_random_bootstrap };
    out.json("eval_report.json", &report)?;
    Ok(report)
}

// ---- serve

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub addr: String,
    pub protocol: ProtocolConfig,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { addr: "127.0.0.1:8080".into(), protocol: ProtocolConfig::default() }
    }
}

pub fn build_service(cfg: &ServeConfig, seed: u64, policy: Option<&Path>, store: &Path) -> CliResult<Service> {
    let policy = policy.map(load_regulation_policy).transpose()?.map(Arc::new);
    let store = FileStore::open(store)?;
    Ok(Service::open(ServiceConfig { protocol: cfg.protocol, policy, seed }, Arc::new(store), Arc::new(SystemClock))?)
}

pub fn serve(cfg: &ServeConfig, seed: u64, policy: Option<&Path>, store: &Path) -> CliResult<()> {
    let service = Arc::new(build_service(cfg, seed, policy, store)?);
    let addr = cfg.addr.clone();
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Validation(format!("cannot listen on {addr}: {e}")))?;
        let local = listener.local_addr()?;
        eprintln!("serving {} sessions from {} on http://{local}", service.session_ids().len(), store.display());
        dualrl_service::http::serve(service, listener).await.map_err(CliError::from)
    })
}
