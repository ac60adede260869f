//! Proximal policy optimization with separate actor and critic networks.
//!
//! Two action heads are supported: a bounded continuous head (Gaussian with a
//! tanh-squashed mean and a state-independent log standard deviation, samples
//! clipped to `[-1, 1]` by the environment) and a binary Bernoulli head.
//! Advantages default to the one-step temporal difference
//! `r + γ V(s') - V(s)` with `V(s') = 0` after a terminal step.

use std::f64::consts::PI;
use std::io::Write;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::nn::{clip_grad_norm, sigmoid, softplus, Activation, Adam, Dense, Mlp, MlpCache, Params};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    Continuous,
    Binary,
}

impl HeadKind {
    fn as_str(self) -> &'static str {
        match self {
            HeadKind::Continuous => "continuous",
            HeadKind::Binary => "binary",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(HeadKind::Continuous),
            "binary" => Ok(HeadKind::Binary),
            other => Err(Error::Checkpoint(format!("unknown head kind {other}"))),
        }
    }
}

/// Layout of an observation that starts with an image and a token one-hot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrontEndSpec {
    pub image_dim: usize,
    pub image_features: usize,
    pub token_dim: usize,
    pub token_features: usize,
}

/// Shared feature extractor: `tanh` layer over the image, linear embedding
/// of the tokens, any remaining observation entries passed through.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontEnd {
    pub spec: FrontEndSpec,
    pub image: Dense,
    pub tokens: Dense,
}

impl FrontEnd {
    fn new<R: Rng + ?Sized>(spec: FrontEndSpec, rng: &mut R) -> Self {
        Self {
            spec,
            image: Dense::new(spec.image_dim, spec.image_features, Activation::Tanh, rng),
            tokens: Dense::new(spec.token_dim, spec.token_features, Activation::Identity, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Self { spec: self.spec, image: self.image.zeros_like(), tokens: self.tokens.zeros_like() }
    }

    fn split(&self, obs: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let (i, t) = (self.spec.image_dim, self.spec.token_dim);
        (
            obs.slice(s![.., ..i]).to_owned(),
            obs.slice(s![.., i..i + t]).to_owned(),
            obs.slice(s![.., i + t..]).to_owned(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub kind: HeadKind,
    pub obs_dim: usize,
    pub hidden: Vec<usize>,
    pub front: Option<FrontEnd>,
    pub actor: Mlp,
    pub critic: Mlp,
    /// Log standard deviation of the continuous head; unused by the binary head.
    pub log_std: Array1<f64>,
}

impl Params for Policy {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        if let Some(fe) = &self.front {
            fe.image.visit(&mut |n, s, v| f(&format!("front.image.{n}"), s, v));
            fe.tokens.visit(&mut |n, s, v| f(&format!("front.tokens.{n}"), s, v));
        }
        self.actor.visit(&mut |n, s, v| f(&format!("actor.{n}"), s, v));
        self.critic.visit(&mut |n, s, v| f(&format!("critic.{n}"), s, v));
        f("log_std", &[1], self.log_std.as_slice().expect("contiguous"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        if let Some(fe) = &mut self.front {
            fe.image.visit_mut(&mut |n, s, v| f(&format!("front.image.{n}"), s, v));
            fe.tokens.visit_mut(&mut |n, s, v| f(&format!("front.tokens.{n}"), s, v));
        }
        self.actor.visit_mut(&mut |n, s, v| f(&format!("actor.{n}"), s, v));
        self.critic.visit_mut(&mut |n, s, v| f(&format!("critic.{n}"), s, v));
        f("log_std", &[1], self.log_std.as_slice_mut().expect("contiguous"));
    }
}

/// Head outputs for a batch: pre-squash mean or logit, and state values.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    pub head: Array1<f64>,
    pub value: Array1<f64>,
}

struct ForwardCache {
    front_in: Option<(Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>)>,
    actor: MlpCache,
    critic: MlpCache,
}

impl Policy {
    pub fn new(kind: HeadKind, obs_dim: usize, front: Option<FrontEndSpec>, hidden: &[usize], init_log_std: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let front = match front {
            Some(spec) => {
                if spec.image_dim + spec.token_dim > obs_dim {
                    return Err(Error::InvalidInput("front end wider than the observation".into()));
                }
                Some(FrontEnd::new(spec, &mut rng))
            }
            None => None,
        };
        let feat = Self::feature_dim_for(obs_dim, front.as_ref().map(|f| f.spec));
        let sizes = |out: usize| [&[feat][..], hidden, &[out]].concat();
        let mut actor = Mlp::new(&sizes(1), &mut rng);
        let critic = Mlp::new(&sizes(1), &mut rng);
        // small initial head keeps the first policy close to uniform
        actor.layers.last_mut().expect("non-empty").w.mapv_inplace(|w| w * 0.01);
        Ok(Self { kind, obs_dim, hidden: hidden.to_vec(), front, actor, critic, log_std: Array1::from_elem(1, init_log_std) })
    }

    fn feature_dim_for(obs_dim: usize, front: Option<FrontEndSpec>) -> usize {
        match front {
            Some(s) => s.image_features + s.token_features + obs_dim - s.image_dim - s.token_dim,
            None => obs_dim,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            kind: self.kind,
            obs_dim: self.obs_dim,
            hidden: self.hidden.clone(),
            front: self.front.as_ref().map(FrontEnd::zeros_like),
            actor: self.actor.zeros_like(),
            critic: self.critic.zeros_like(),
            log_std: Array1::zeros(1),
        }
    }

    fn forward_cached(&self, obs: &Array2<f64>) -> ForwardCache {
        let (features, front_in) = match &self.front {
            Some(fe) => {
                let (img, tok, rest) = fe.split(obs);
                let fi = fe.image.forward(&img);
                let ft = fe.tokens.forward(&tok);
                let feats = ndarray::concatenate(Axis(1), &[fi.view(), ft.view(), rest.view()]).expect("same rows");
                (feats, Some((img, tok, fi, ft)))
            }
            None => (obs.clone(), None),
        };
        ForwardCache { actor: self.actor.forward_cached(&features), critic: self.critic.forward_cached(&features), front_in }
    }

    pub fn forward(&self, obs: &Array2<f64>) -> PolicyOutput {
        let c = self.forward_cached(obs);
        PolicyOutput { head: c.actor.output().column(0).to_owned(), value: c.critic.output().column(0).to_owned() }
    }

    pub fn value(&self, obs: &[f64]) -> f64 {
        self.forward(&row(obs)).value[0]
    }

    pub fn std(&self) -> f64 {
        self.log_std[0].exp()
    }

    /// Log-probability of `action` given the head output.
    pub fn log_prob(&self, head: f64, action: f64) -> f64 {
        match self.kind {
            HeadKind::Continuous => {
                let mu = head.tanh();
                let ls = self.log_std[0];
                let z = (action - mu) / ls.exp();
                -0.5 * z * z - ls - 0.5 * (2.0 * PI).ln()
            }
            HeadKind::Binary => {
                if action >= 0.5 {
                    -softplus(-head)
                } else {
                    -softplus(head)
                }
            }
        }
    }

    pub fn entropy(&self, head: f64) -> f64 {
        match self.kind {
            HeadKind::Continuous => 0.5 + 0.5 * (2.0 * PI).ln() + self.log_std[0],
            HeadKind::Binary => {
                let p = sigmoid(head);
                -(p * (-softplus(-head)) + (1.0 - p) * (-softplus(head)))
            }
        }
    }

    /// Samples an action; returns `(action, log_prob, value)`.
    pub fn sample<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> (f64, f64, f64) {
        let out = self.forward(&row(obs));
        let head = out.head[0];
        let action = match self.kind {
            HeadKind::Continuous => head.tanh() + self.std() * Normal::new(0.0, 1.0).expect("unit normal").sample(rng),
            HeadKind::Binary => {
                if rng.random::<f64>() < sigmoid(head) {
                    1.0
                } else {
                    0.0
                }
            }
        };
        (action, self.log_prob(head, action), out.value[0])
    }

    /// Mode of the action distribution.
    pub fn act_deterministic(&self, obs: &[f64]) -> f64 {
        let head = self.forward(&row(obs)).head[0];
        match self.kind {
            HeadKind::Continuous => head.tanh(),
            HeadKind::Binary => (head >= 0.0) as u8 as f64,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "ppo_policy").set_meta("head", self.kind.as_str()).set_meta("obs_dim", self.obs_dim).set_meta(
            "hidden",
            self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
        );
        if let Some(fe) = &self.front {
            let s = fe.spec;
            ck.set_meta("front", format!("{},{},{},{}", s.image_dim, s.image_features, s.token_dim, s.token_features));
        }
        ck.add_params("policy.", self);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind") != Some("ppo_policy") {
            return Err(Error::Checkpoint("not a policy checkpoint".into()));
        }
        let kind = HeadKind::parse(ck.meta("head").unwrap_or(""))?;
        let parse_list = |s: &str| -> Result<Vec<usize>> {
            s.split(',')
                .filter(|p| !p.is_empty())
                .map(|p| p.parse().map_err(|_| Error::Checkpoint(format!("bad size list {s}"))))
                .collect()
        };
        let hidden = parse_list(ck.meta("hidden").unwrap_or(""))?;
        let front = match ck.meta("front") {
            Some(f) => {
                let v = parse_list(f)?;
                if v.len() != 4 {
                    return Err(Error::Checkpoint("front end spec needs four sizes".into()));
                }
                Some(FrontEndSpec { image_dim: v[0], image_features: v[1], token_dim: v[2], token_features: v[3] })
            }
            None => None,
        };
        let mut p = Policy::new(kind, ck.meta_parse("obs_dim")?, front, &hidden, 0.0, 0)?;
        ck.load_params("policy.", &mut p)?;
        Ok(p)
    }
}

fn row(obs: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, obs.len()), obs.to_vec()).expect("row shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub clip: f64,
    pub lr: f64,
    pub rollout_len: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub vf_coef: f64,
    pub ent_coef: f64,
    pub max_grad_norm: f64,
    pub total_steps: usize,
    /// Generalized advantage estimation; `None` keeps the one-step TD advantage.
    pub gae_lambda: Option<f64>,
    pub normalize_advantages: bool,
    pub init_log_std: f64,
    /// Updates in a row with collapsed returns before training stops early; 0 disables.
    pub collapse_patience: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            clip: 0.2,
            lr: 3e-4,
            rollout_len: 2048,
            epochs: 10,
            minibatch: 64,
            vf_coef: 0.5,
            ent_coef: 0.0,
            max_grad_norm: 0.5,
            total_steps: 50_000,
            gae_lambda: None,
            normalize_advantages: true,
            init_log_std: 0.0,
            collapse_patience: 10,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidInput(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::InvalidInput(format!("clip {} outside (0, 1)", self.clip)));
        }
        if self.rollout_len == 0 || self.minibatch == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidInput("rollout length, minibatch and lr must be positive".into()));
        }
        if let Some(l) = self.gae_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::InvalidInput(format!("gae lambda {l} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// An episodic environment with a flat observation and a scalar action.
pub trait Environment {
    fn observation_dim(&self) -> usize;
    fn reset(&mut self) -> Result<Vec<f64>>;
    /// Returns `(next observation, reward, done)`.
    fn step(&mut self, action: f64) -> Result<(Vec<f64>, f64, bool)>;
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// `V(s_{t+1})` under the collecting policy; zero after a terminal step.
    pub next_values: Vec<f64>,
    pub env_index: Vec<usize>,
    /// Returns of episodes that finished during collection.
    pub episode_returns: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Per-environment bookkeeping carried across rollouts.
pub struct RolloutState {
    obs: Vec<Vec<f64>>,
    returns: Vec<f64>,
}

impl RolloutState {
    pub fn new<E: Environment>(envs: &mut [E]) -> Result<Self> {
        let obs = envs.iter_mut().map(|e| e.reset()).collect::<Result<Vec<_>>>()?;
        Ok(Self { returns: vec![0.0; obs.len()], obs })
    }
}

/// Collects exactly `n_steps` transitions, stepping the environments round-robin
/// and resetting each one when its episode ends.
pub fn collect_rollout<E: Environment, R: Rng + ?Sized>(
    envs: &mut [E],
    state: &mut RolloutState,
    policy: &Policy,
    n_steps: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    if envs.is_empty() || n_steps == 0 {
        return Err(Error::InvalidInput("need at least one environment and one step".into()));
    }
    let mut traj = Trajectory::default();
    for t in 0..n_steps {
        let k = t % envs.len();
        let obs = std::mem::take(&mut state.obs[k]);
        let (action, logp, value) = policy.sample(&obs, rng);
        let (next, reward, done) = envs[k].step(action)?;
        state.returns[k] += reward;
        let next_value = if done { 0.0 } else { policy.value(&next) };
        traj.obs.push(obs);
        traj.actions.push(action);
        traj.log_probs.push(logp);
        traj.values.push(value);
        traj.rewards.push(reward);
        traj.dones.push(done);
        traj.next_values.push(next_value);
        traj.env_index.push(k);
        state.obs[k] = if done {
            traj.episode_returns.push(std::mem::take(&mut state.returns[k]));
            envs[k].reset()?
        } else {
            next
        };
    }
    Ok(traj)
}

/// Advantages from stored old-policy values.
pub fn advantages(traj: &Trajectory, gamma: f64, gae_lambda: Option<f64>) -> Vec<f64> {
    let td: Vec<f64> = (0..traj.len())
        .map(|t| {
            let next = if traj.dones[t] { 0.0 } else { traj.next_values[t] };
            traj.rewards[t] + gamma * next - traj.values[t]
        })
        .collect();
    let Some(lambda) = gae_lambda else { return td };
    let mut adv = vec![0.0; traj.len()];
    let n_envs = traj.env_index.iter().max().map_or(0, |m| m + 1);
    let mut carry = vec![0.0; n_envs];
    for t in (0..traj.len()).rev() {
        let k = traj.env_index[t];
        if traj.dones[t] {
            carry[k] = 0.0;
        }
        carry[k] = td[t] + gamma * lambda * carry[k];
        adv[t] = carry[k];
    }
    adv
}

/// A batch ready for one gradient step; `advantages` are used as given.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub obs: Array2<f64>,
    pub actions: Vec<f64>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Minibatch {
    pub fn from_indices(traj: &Trajectory, adv: &[f64], idx: &[usize]) -> Self {
        let dim = traj.obs[idx[0]].len();
        let mut obs = Array2::zeros((idx.len(), dim));
        for (r, &i) in idx.iter().enumerate() {
            obs.row_mut(r).assign(&ndarray::ArrayView1::from(&traj.obs[i]));
        }
        Self {
            obs,
            actions: idx.iter().map(|&i| traj.actions[i]).collect(),
            old_log_probs: idx.iter().map(|&i| traj.log_probs[i]).collect(),
            advantages: idx.iter().map(|&i| adv[i]).collect(),
            returns: idx.iter().map(|&i| adv[i] + traj.values[i]).collect(),
        }
    }
}

/// Zero mean, unit variance; a single element or constant batch is only centred.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    values.iter().map(|v| if sd > 1e-8 { (v - mean) / (sd + 1e-8) } else { v - mean }).collect()
}

/// Clipped per-sample objective `min(ρA, clip(ρ, 1-ε, 1+ε)A)`.
pub fn clipped_objective(ratio: f64, adv: f64, clip: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - clip, 1.0 + clip) * adv)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    /// Mean clipped surrogate (to be maximized).
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Loss `-surrogate + c_v·value_loss - c_e·entropy` and its parameter gradient.
pub fn loss_and_grad(policy: &Policy, mb: &Minibatch, cfg: &PpoConfig) -> (LossStats, Policy) {
    let n = mb.actions.len() as f64;
    let cache = policy.forward_cached(&mb.obs);
    let heads = cache.actor.output().column(0).to_owned();
    let values = cache.critic.output().column(0).to_owned();
    let mut st = LossStats::default();
    let mut d_head = Array2::zeros((mb.actions.len(), 1));
    let mut d_value = Array2::zeros((mb.actions.len(), 1));
    let mut d_log_std = 0.0;
    let ls = policy.log_std[0];
    for i in 0..mb.actions.len() {
        let (h, a, adv) = (heads[i], mb.actions[i], mb.advantages[i]);
        let logp = policy.log_prob(h, a);
        let ratio = (logp - mb.old_log_probs[i]).exp();
        let obj = clipped_objective(ratio, adv, cfg.clip);
        st.surrogate += obj / n;
        st.mean_ratio += ratio / n;
        st.approx_kl += (mb.old_log_probs[i] - logp) / n;
        if (ratio - 1.0).abs() > cfg.clip {
            st.clip_fraction += 1.0 / n;
        }
        // gradient of -obj w.r.t. logp is -ρA when the unclipped branch is active
        let unclipped = ratio * adv <= ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * adv;
        let d_logp = if unclipped { -ratio * adv / n } else { 0.0 };
        let ent = policy.entropy(h);
        st.entropy += ent / n;
        match policy.kind {
            HeadKind::Continuous => {
                let mu = h.tanh();
                let var = (2.0 * ls).exp();
                d_head[[i, 0]] = d_logp * (a - mu) / var * (1.0 - mu * mu);
                d_log_std += d_logp * ((a - mu).powi(2) / var - 1.0) - cfg.ent_coef / n;
            }
            HeadKind::Binary => {
                let p = sigmoid(h);
                let d_ent = -h * p * (1.0 - p);
                d_head[[i, 0]] = d_logp * (a - p) - cfg.ent_coef * d_ent / n;
            }
        }
        let err = values[i] - mb.returns[i];
        st.value_loss += err * err / n;
        d_value[[i, 0]] = cfg.vf_coef * 2.0 * err / n;
    }
    st.total = -st.surrogate + cfg.vf_coef * st.value_loss - cfg.ent_coef * st.entropy;

    let mut grad = policy.zeros_like();
    let d_feat_a = policy.actor.backward(&cache.actor, &d_head, &mut grad.actor);
    let d_feat_c = policy.critic.backward(&cache.critic, &d_value, &mut grad.critic);
    if let (Some(fe), Some((img, tok, fi, ft))) = (&policy.front, &cache.front_in) {
        let d_feat = d_feat_a + d_feat_c;
        let (wi, wt) = (fe.spec.image_features, fe.spec.token_features);
        let gfe = grad.front.as_mut().expect("front end gradient");
        fe.image.backward(img, fi, &d_feat.slice(s![.., ..wi]).to_owned(), &mut gfe.image);
        fe.tokens.backward(tok, ft, &d_feat.slice(s![.., wi..wi + wt]).to_owned(), &mut gfe.tokens);
    }
    if policy.kind == HeadKind::Continuous {
        grad.log_std[0] = d_log_std;
    }
    (st, grad)
}

/// Averaged diagnostics from one update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub minibatches: usize,
}

/// Several epochs of minibatch steps on one trajectory.
pub fn ppo_update<R: Rng + ?Sized>(
    policy: &mut Policy,
    opt: &mut Adam,
    traj: &Trajectory,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats> {
    let adv = advantages(traj, cfg.gamma, cfg.gae_lambda);
    let mut idx: Vec<usize> = (0..traj.len()).collect();
    let mut out = UpdateStats::default();
    for _ in 0..cfg.epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(cfg.minibatch) {
            let mut mb = Minibatch::from_indices(traj, &adv, chunk);
            if cfg.normalize_advantages {
                mb.advantages = normalize(&mb.advantages);
            }
            let (st, mut grad) = loss_and_grad(policy, &mb, cfg);
            if !st.total.is_finite() || !grad.all_finite() {
                return Err(Error::TrainingFailed(format!("non-finite loss {} in update", st.total)));
            }
            clip_grad_norm(&mut grad, cfg.max_grad_norm);
            opt.step(policy, &grad);
            out.surrogate += st.surrogate;
            out.value_loss += st.value_loss;
            out.entropy += st.entropy;
            out.mean_ratio += st.mean_ratio;
            out.clip_fraction += st.clip_fraction;
            out.approx_kl += st.approx_kl;
            out.minibatches += 1;
        }
    }
    let k = out.minibatches.max(1) as f64;
    out.surrogate /= k;
    out.value_loss /= k;
    out.entropy /= k;
    out.mean_ratio /= k;
    out.clip_fraction /= k;
    out.approx_kl /= k;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean return of the episodes completed in the rollout; NaN if none finished.
    pub mean_return: f64,
    pub clip_fraction: f64,
    pub value_loss: f64,
}

pub const CURVE_HEADER: &str = "step,mean_return,clip_fraction,value_loss";

pub fn write_curve<W: Write>(mut w: W, curve: &[CurvePoint]) -> Result<()> {
    writeln!(w, "{CURVE_HEADER}")?;
    for p in curve {
        writeln!(w, "{},{},{},{}", p.step, p.mean_return, p.clip_fraction, p.value_loss)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub curve: Vec<CurvePoint>,
    pub steps: usize,
    /// Set when the collapse detector ended training early.
    pub stopped_early: Option<String>,
}

/// Trains `policy` in place on `envs` for `cfg.total_steps` transitions.
/// `on_update` sees each curve point and the current policy, e.g. to checkpoint.
pub fn train<E: Environment>(
    envs: &mut [E],
    mut policy: Policy,
    cfg: &PpoConfig,
    mut on_update: impl FnMut(&CurvePoint, &Policy) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut curve = Vec::new();
    if cfg.total_steps == 0 {
        return Ok(TrainOutcome { policy, curve, steps: 0, stopped_early: None });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut state = RolloutState::new(envs)?;
    let mut steps = 0;
    let mut best = f64::NEG_INFINITY;
    let mut collapsed = 0;
    let mut stopped_early = None;
    while steps < cfg.total_steps {
        let n = cfg.rollout_len.min(cfg.total_steps - steps);
        let traj = collect_rollout(envs, &mut state, &policy, n, &mut rng)?;
        steps += n;
        let stats = ppo_update(&mut policy, &mut opt, &traj, cfg, &mut rng)?;
        let mean_return = if traj.episode_returns.is_empty() {
            f64::NAN
        } else {
            traj.episode_returns.iter().sum::<f64>() / traj.episode_returns.len() as f64
        };
        let point = CurvePoint { step: steps, mean_return, clip_fraction: stats.clip_fraction, value_loss: stats.value_loss };
        on_update(&point, &policy)?;
        curve.push(point);
        if mean_return.is_finite() {
            best = best.max(mean_return);
            let floor = best - best.abs().max(1.0);
            collapsed = if mean_return < floor { collapsed + 1 } else { 0 };
            if cfg.collapse_patience > 0 && collapsed >= cfg.collapse_patience {
                stopped_early = Some(format!(
                    "mean return {mean_return:.4} stayed below {floor:.4} for {collapsed} updates (best {best:.4})"
                ));
                break;
            }
        }
    }
    Ok(TrainOutcome { policy, curve, steps, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::max_rel_error;

    /// One-step bandit paying a fixed reward.
    struct Bandit(f64);

    impl Environment for Bandit {
        fn observation_dim(&self) -> usize {
            2
        }
        fn reset(&mut self) -> Result<Vec<f64>> {
            Ok(vec![1.0, 0.0])
        }
        fn step(&mut self, _: f64) -> Result<(Vec<f64>, f64, bool)> {
            Ok((vec![1.0, 0.0], self.0, true))
        }
    }

    /// One-step task rewarding actions close to 0.5, or action 1 when binary.
    struct Target(HeadKind);

    impl Environment for Target {
        fn observation_dim(&self) -> usize {
            2
        }
        fn reset(&mut self) -> Result<Vec<f64>> {
            Ok(vec![0.3, -0.2])
        }
        fn step(&mut self, a: f64) -> Result<(Vec<f64>, f64, bool)> {
            let r = match self.0 {
                HeadKind::Continuous => -(a.clamp(-1.0, 1.0) - 0.5).abs(),
                HeadKind::Binary => a,
            };
            Ok((vec![0.3, -0.2], r, true))
        }
    }

    fn toy_batch(policy: &Policy, seed: u64) -> Minibatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs = Array2::from_shape_fn((4, policy.obs_dim), |_| rng.random_range(-1.0..1.0));
        let out = policy.forward(&obs);
        let actions: Vec<f64> = (0..4)
            .map(|i| match policy.kind {
                HeadKind::Continuous => out.head[i].tanh() + 0.4 * (i as f64 - 1.5),
                HeadKind::Binary => (i % 2) as f64,
            })
            .collect();
        // old log-probs shifted so that ratios straddle the clip band
        let shifts = [0.0, 0.3, -0.35, 0.1];
        let old_log_probs = (0..4).map(|i| policy.log_prob(out.head[i], actions[i]) + shifts[i]).collect();
        Minibatch { obs, actions, old_log_probs, advantages: vec![1.0, -0.7, 0.4, -1.2], returns: vec![0.5, -0.2, 1.0, 0.0] }
    }

    fn check_gradient(kind: HeadKind, front: Option<FrontEndSpec>, obs_dim: usize) {
        let policy = Policy::new(kind, obs_dim, front, &[5, 4], -0.3, 11).unwrap();
        let mb = toy_batch(&policy, 3);
        let cfg = PpoConfig { ent_coef: 0.01, ..Default::default() };
        let (_, grad) = loss_and_grad(&policy, &mb, &cfg);
        let err = max_rel_error(&policy, &grad.flat(), 1e-5, |p| loss_and_grad(p, &mb, &cfg).0.total);
        assert!(err <= 1e-4, "{kind:?}: relative error {err}");
    }

    #[test]
    fn gradient_oracle_continuous() {
        check_gradient(HeadKind::Continuous, None, 3);
    }

    #[test]
    fn gradient_oracle_binary() {
        check_gradient(HeadKind::Binary, None, 3);
    }

    #[test]
    fn gradient_oracle_with_front_end() {
        let spec = FrontEndSpec { image_dim: 6, image_features: 3, token_dim: 4, token_features: 2 };
        check_gradient(HeadKind::Continuous, Some(spec), 11);
    }

    #[test]
    fn advantage_hand_values() {
        let traj = Trajectory {
            rewards: vec![1.0, 0.0, 2.0],
            values: vec![0.0, 0.5, 0.7],
            next_values: vec![0.0, 0.5, 9.0],
            dones: vec![false, false, true],
            env_index: vec![0, 0, 0],
            ..Default::default()
        };
        let a = advantages(&traj, 0.99, None);
        assert_eq!(a[0], 1.0);
        assert!((advantages(&traj, 1.0, None)[1]).abs() < 1e-15);
        assert!((a[2] - (2.0 - 0.7)).abs() < 1e-15);
        let g = advantages(&traj, 1.0, Some(1.0));
        assert!((g[0] - (1.0 + 0.0 + 1.3)).abs() < 1e-12);
    }

    #[test]
    fn clip_hand_values() {
        assert!((clipped_objective(1.5, 2.0, 0.2) - 2.4).abs() < 1e-12);
        assert_eq!(clipped_objective(1.5, -2.0, 0.2), -3.0);
        assert_eq!(clipped_objective(0.5, -1.0, 0.2), -0.8);
        assert_eq!(clipped_objective(1.0, 0.7, 0.2), 0.7);
    }

    #[test]
    fn first_minibatch_ratio_is_one() {
        let policy = Policy::new(HeadKind::Continuous, 3, None, &[8], 0.0, 1).unwrap();
        let mut mb = toy_batch(&policy, 2);
        let out = policy.forward(&mb.obs);
        mb.old_log_probs = (0..4).map(|i| policy.log_prob(out.head[i], mb.actions[i])).collect();
        let (st, _) = loss_and_grad(&policy, &mb, &PpoConfig::default());
        assert!((st.mean_ratio - 1.0).abs() < 1e-12);
        assert!((st.surrogate - mb.advantages.iter().sum::<f64>() / 4.0).abs() < 1e-12);
        assert_eq!(st.clip_fraction, 0.0);
    }

    #[test]
    fn probability_heads() {
        let p = Policy::new(HeadKind::Continuous, 2, None, &[4], -0.5, 0).unwrap();
        let h = 0.3;
        let dx = 1e-3;
        let mass: f64 = (-8000..8000).map(|k| p.log_prob(h, k as f64 * dx).exp() * dx).sum();
        assert!((mass - 1.0).abs() < 1e-2);
        let b = Policy::new(HeadKind::Binary, 2, None, &[4], 0.0, 0).unwrap();
        for &h in &[-3.0, -0.2, 0.0, 1.7] {
            let q = sigmoid(h);
            assert!((b.log_prob(h, 1.0) - q.ln()).abs() < 1e-12);
            assert!((b.log_prob(h, 0.0) - (1.0 - q).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn rollout_has_requested_length_and_is_deterministic() {
        let policy = Policy::new(HeadKind::Continuous, 2, None, &[4], 0.0, 0).unwrap();
        let run = || {
            let mut envs = vec![Target(HeadKind::Continuous), Target(HeadKind::Continuous)];
            let mut st = RolloutState::new(&mut envs).unwrap();
            collect_rollout(&mut envs, &mut st, &policy, 50, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
        };
        let a = run();
        assert_eq!(a.len(), 50);
        assert_eq!(a.episode_returns.len(), 50);
        assert_eq!(a, run());
    }

    #[test]
    fn critic_learns_bandit_mean() {
        let cfg = PpoConfig { rollout_len: 64, total_steps: 2_000, lr: 3e-3, max_grad_norm: 10.0, ..Default::default() };
        let policy = Policy::new(HeadKind::Binary, 2, None, &[16], 0.0, 0).unwrap();
        let out = train(&mut [Bandit(2.0)], policy, &cfg, |_, _| Ok(())).unwrap();
        let v = out.policy.value(&[1.0, 0.0]);
        assert!((v - 2.0).abs() <= 0.1, "value {v}");
    }

    #[test]
    fn learns_simple_targets() {
        let cfg = PpoConfig { rollout_len: 256, total_steps: 20_000, lr: 3e-3, ..Default::default() };
        let p = Policy::new(HeadKind::Continuous, 2, None, &[16], 0.0, 0).unwrap();
        let out = train(&mut [Target(HeadKind::Continuous)], p, &cfg, |_, _| Ok(())).unwrap();
        let a = out.policy.act_deterministic(&[0.3, -0.2]);
        assert!((a - 0.5).abs() < 0.1, "mean action {a}");
        let p = Policy::new(HeadKind::Binary, 2, None, &[16], 0.0, 0).unwrap();
        let out = train(&mut [Target(HeadKind::Binary)], p, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(out.policy.act_deterministic(&[0.3, -0.2]), 1.0);
        assert!(out.curve.last().unwrap().mean_return > 0.9);
    }

    #[test]
    fn zero_budget_and_determinism() {
        let p = Policy::new(HeadKind::Binary, 2, None, &[4], 0.0, 0).unwrap();
        let cfg = PpoConfig { total_steps: 0, ..Default::default() };
        let out = train(&mut [Bandit(1.0)], p.clone(), &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(out.policy, p);
        assert!(out.curve.is_empty());
        let cfg = PpoConfig { rollout_len: 32, total_steps: 128, ..Default::default() };
        let a = train(&mut [Target(HeadKind::Binary)], p.clone(), &cfg, |_, _| Ok(())).unwrap();
        let b = train(&mut [Target(HeadKind::Binary)], p, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(format!("{:?}", a.curve), format!("{:?}", b.curve));
        assert_eq!(a.policy, b.policy);
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = FrontEndSpec { image_dim: 6, image_features: 3, token_dim: 4, token_features: 2 };
        let p = Policy::new(HeadKind::Continuous, 11, Some(spec), &[5, 4], -0.7, 9).unwrap();
        let back = Policy::from_checkpoint(&Checkpoint::from_text(&p.to_checkpoint().to_text()).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn bad_config_rejected() {
        assert!(PpoConfig { gamma: 0.0, ..Default::default() }.validate().is_err());
        assert!(PpoConfig { clip: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn curve_csv() {
        let mut buf = Vec::new();
        write_curve(&mut buf, &[CurvePoint { step: 10, mean_return: 1.5, clip_fraction: 0.1, value_loss: 0.2 }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,mean_return,clip_fraction,value_loss\n10,1.5,0.1,0.2\n");
    }
}
