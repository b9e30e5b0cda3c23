//! Proximal policy optimisation for the actor-critic network.
//!
//! The objective maximised is `J = mean clip_loss - lambda * value_loss`
//! (plus an optional entropy bonus), with one-step TD advantages by default.

use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Env, EnvConfig, EnvError};
use crate::neural::{clip_global_norm, Adam, AdamConfig, ActorCritic, Graph, NeuralError, Tensor, Var};
use crate::policies::draw_proportional;
use crate::world::GroundNetwork;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("rollout length must be positive")]
    EmptyRollout,
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite training quantity: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PpoError>;

/// Episodic environment seen by the trainer.
pub trait RlEnv {
    fn n_actions(&self) -> usize;
    /// Width of the flattened state.
    fn state_width(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Result<Vec<f64>>;
    /// Returns `(reward, next_state, done)`.
    fn step(&mut self, action: usize) -> Result<(f64, Vec<f64>, bool)>;

    /// Position of the current state within its episode, in `[0, 1]`.
    fn progress(&self) -> f64 {
        0.0
    }
}

/// The mobility simulator behind [`RlEnv`]; actions index the departure
/// vertiports in id order.
pub struct UamEnv {
    cfg: Arc<EnvConfig>,
    net: Arc<GroundNetwork>,
    env: Option<Env>,
}

impl UamEnv {
    pub fn new(cfg: Arc<EnvConfig>, net: Arc<GroundNetwork>) -> Self {
        Self { cfg, net, env: None }
    }

    pub fn env(&self) -> Option<&Env> {
        self.env.as_ref()
    }
}

impl RlEnv for UamEnv {
    fn n_actions(&self) -> usize {
        self.cfg.departure_ids().len()
    }

    fn state_width(&self) -> usize {
        self.cfg.frame_width() * self.cfg.stack_len
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<f64>> {
        let env = Env::with_network(self.cfg.clone(), self.net.clone(), seed)?;
        let s = env.stack().flatten();
        self.env = Some(env);
        Ok(s)
    }

    fn step(&mut self, action: usize) -> Result<(f64, Vec<f64>, bool)> {
        let env = self.env.as_mut().ok_or(EnvError::Finished)?;
        let id = *env
            .departure_ids()
            .get(action)
            .ok_or_else(|| EnvError::InvalidAction { action, allowed: env.departure_ids().to_vec() })?;
        let (r, done, _) = env.step(id)?;
        Ok((r, env.stack().flatten(), done))
    }

    /// Fraction of the episode's decisions already taken.
    fn progress(&self) -> f64 {
        match &self.env {
            Some(env) => 1.0 - env.decisions_left() as f64 / self.cfg.total_passengers as f64,
            None => 0.0,
        }
    }
}

/// One-step contextual bandit: the state is a one-hot of a fair coin and
/// the matching action pays +1, the other -1.
#[derive(Debug, Clone, Default)]
pub struct BanditEnv {
    state: usize,
}

impl RlEnv for BanditEnv {
    fn n_actions(&self) -> usize {
        2
    }

    fn state_width(&self) -> usize {
        2
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<f64>> {
        self.state = (ChaCha8Rng::seed_from_u64(seed).gen::<u32>() & 1) as usize;
        Ok(Self::encode(self.state))
    }

    fn step(&mut self, action: usize) -> Result<(f64, Vec<f64>, bool)> {
        let r = if action == self.state { 1.0 } else { -1.0 };
        Ok((r, Self::encode(self.state), true))
    }
}

impl BanditEnv {
    pub fn encode(state: usize) -> Vec<f64> {
        let mut v = vec![0.0; 2];
        v[state] = 1.0;
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    /// Weight of the value loss in the objective.
    pub lambda: f64,
    pub clip_eps: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    /// Transitions per update, summed over workers.
    pub rollout_len: usize,
    pub minibatch: usize,
    pub max_grad_norm: f64,
    /// Generalised advantage estimation; `None` keeps one-step TD.
    pub gae_lambda: Option<f64>,
    pub entropy_coef: f64,
    pub normalize_advantages: bool,
    /// Advantages are standardised separately within this many equal-width
    /// bins of episode progress; 1 standardises the whole buffer at once.
    pub advantage_groups: usize,
    /// Constant multiplier applied to rewards before learning.
    pub reward_scale: f64,
    pub workers: usize,
    pub seed: u64,
    /// When positive, the learning rate decays linearly to zero over this
    /// many updates.
    pub anneal_updates: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 1.0,
            clip_eps: 0.2,
            adam: AdamConfig::default(),
            epochs: 4,
            rollout_len: 2048,
            minibatch: 256,
            max_grad_norm: 0.5,
            gae_lambda: None,
            entropy_coef: 0.0,
            normalize_advantages: true,
            advantage_groups: 1,
            reward_scale: 1.0,
            workers: 1,
            seed: 0,
            anneal_updates: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(PpoError::Config(m));
        if !(0.0..=1.0).contains(&self.gamma) {
            return err(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(self.clip_eps > 0.0) {
            return err(format!("clip_eps {} must be positive", self.clip_eps));
        }
        if !(self.lambda >= 0.0) {
            return err(format!("lambda {} must be non-negative", self.lambda));
        }
        if let Some(l) = self.gae_lambda {
            if !(0.0..=1.0).contains(&l) {
                return err(format!("gae_lambda {l} outside [0, 1]"));
            }
        }
        if self.epochs == 0 || self.minibatch == 0 || self.workers == 0 || self.advantage_groups == 0 {
            return err("epochs, minibatch, workers and advantage_groups must be positive".into());
        }
        if self.rollout_len < self.workers {
            return err("rollout_len must cover every worker".into());
        }
        if !(self.adam.lr > 0.0) || !(self.max_grad_norm > 0.0) || !(self.reward_scale > 0.0) {
            return err("lr, max_grad_norm and reward_scale must be positive".into());
        }
        Ok(())
    }
}

/// `r + gamma * v_next - v`, with `v_next` ignored on terminal steps.
pub fn advantage(r: f64, gamma: f64, v_next: f64, v: f64, done: bool) -> f64 {
    if done {
        r - v
    } else {
        r + gamma * v_next - v
    }
}

pub fn ratio(logp_new: f64, logp_old: f64) -> f64 {
    (logp_new - logp_old).exp()
}

/// Per-sample clipped surrogate.
pub fn clip_loss(rho: f64, adv: f64, eps: f64) -> f64 {
    (rho * adv).min(rho.clamp(1.0 - eps, 1.0 + eps) * adv)
}

pub fn value_loss(pred: &[f64], returns: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != returns.len() {
        return Err(PpoError::EmptyBatch);
    }
    Ok(pred.iter().zip(returns).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / pred.len() as f64)
}

/// Transitions from one or more workers, concatenated by worker id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub logp: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub next_values: Vec<f64>,
    pub dones: Vec<bool>,
    /// Episode progress of each state, see [`RlEnv::progress`].
    pub progress: Vec<f64>,
    /// Undiscounted, unscaled returns of episodes finished during collection.
    pub episode_returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn extend(&mut self, other: RolloutBuffer) {
        self.states.extend(other.states);
        self.actions.extend(other.actions);
        self.logp.extend(other.logp);
        self.rewards.extend(other.rewards);
        self.values.extend(other.values);
        self.next_values.extend(other.next_values);
        self.dones.extend(other.dones);
        self.progress.extend(other.progress);
        self.episode_returns.extend(other.episode_returns);
    }

    /// Discounted return to episode end, bootstrapped at the buffer's tail
    /// when the last episode is unfinished. Segments are split where a
    /// worker's trajectory ends.
    pub fn returns(&self, gamma: f64, segment_ends: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        let mut start = 0;
        for &end in segment_ends {
            let mut g = if end > start && !self.dones[end - 1] { self.next_values[end - 1] } else { 0.0 };
            for t in (start..end).rev() {
                if self.dones[t] {
                    g = 0.0;
                }
                g = self.rewards[t] + gamma * g;
                out[t] = g;
            }
            start = end;
        }
        out
    }

    pub fn td_advantages(&self, gamma: f64) -> Vec<f64> {
        (0..self.len())
            .map(|t| advantage(self.rewards[t], gamma, self.next_values[t], self.values[t], self.dones[t]))
            .collect()
    }

    pub fn gae_advantages(&self, gamma: f64, lam: f64, segment_ends: &[usize]) -> Vec<f64> {
        let deltas = self.td_advantages(gamma);
        let mut out = vec![0.0; self.len()];
        let mut start = 0;
        for &end in segment_ends {
            let mut acc = 0.0;
            for t in (start..end).rev() {
                if self.dones[t] {
                    acc = 0.0;
                }
                acc = deltas[t] + gamma * lam * acc;
                out[t] = acc;
            }
            start = end;
        }
        out
    }
}

struct Worker<E> {
    env: E,
    rng: ChaCha8Rng,
    state: Option<Vec<f64>>,
    episode_return: f64,
}

/// Lockstep environment workers sharing one batched forward pass per step.
/// Episodes continue across calls to [`Collector::collect`].
pub struct Collector<E: RlEnv> {
    workers: Vec<Worker<E>>,
}

fn worker_seed(seed: u64, worker: usize) -> u64 {
    seed ^ (worker as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl<E: RlEnv> Collector<E> {
    pub fn new(factory: impl Fn(usize) -> Result<E>, workers: usize, seed: u64) -> Result<Self> {
        let workers = (0..workers.max(1))
            .map(|w| {
                Ok(Worker {
                    env: factory(w)?,
                    rng: ChaCha8Rng::seed_from_u64(worker_seed(seed, w)),
                    state: None,
                    episode_return: 0.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { workers })
    }

    pub fn n_workers(&self) -> usize {
        self.workers.len()
    }

    /// Samples `n_steps` transitions (split evenly across workers) from the
    /// stochastic policy. Returns the buffer and the end index of each
    /// worker's segment.
    pub fn collect(&mut self, model: &ActorCritic, n_steps: usize) -> Result<(RolloutBuffer, Vec<usize>)> {
        if n_steps == 0 {
            return Err(PpoError::EmptyRollout);
        }
        let nw = self.workers.len();
        let per = n_steps.div_ceil(nw);
        let width = model.config().input_width();
        let mut parts: Vec<RolloutBuffer> = vec![RolloutBuffer::default(); nw];
        for _ in 0..per {
            for w in &mut self.workers {
                if w.state.is_none() {
                    let seed = w.rng.gen();
                    w.state = Some(w.env.reset(seed)?);
                    w.episode_return = 0.0;
                }
            }
            let batch: Vec<f64> = self.workers.iter().flat_map(|w| w.state.clone().expect("reset")).collect();
            let (probs, values) = model.evaluate(&Tensor::from_vec(nw, width, batch)?)?;
            for (i, w) in self.workers.iter_mut().enumerate() {
                let p = &probs[i];
                let a = draw_proportional(p, &mut w.rng).map_err(|e| PpoError::NonFinite(e.to_string()))?;
                let state = w.state.take().expect("reset");
                let progress = w.env.progress();
                let (r, next, done) = w.env.step(a)?;
                w.episode_return += r;
                let part = &mut parts[i];
                part.states.push(state);
                part.actions.push(a);
                part.logp.push(p[a].ln());
                part.rewards.push(r);
                part.values.push(values[i]);
                part.dones.push(done);
                part.progress.push(progress);
                if done {
                    part.episode_returns.push(w.episode_return);
                } else {
                    w.state = Some(next);
                }
            }
        }
        // Next-state values: the following step's value, or a fresh
        // evaluation for each worker's final pending state.
        let pending: Vec<f64> = self.workers.iter().filter_map(|w| w.state.clone()).flatten().collect();
        let tail_values = if pending.is_empty() {
            Vec::new()
        } else {
            model.evaluate(&Tensor::from_vec(pending.len() / width, width, pending)?)?.1
        };
        let mut tail = tail_values.into_iter();
        let mut buffer = RolloutBuffer::default();
        let mut ends = Vec::with_capacity(nw);
        for (w, mut part) in self.workers.iter().zip(parts) {
            let n = part.len();
            part.next_values = vec![0.0; n];
            for t in 0..n {
                part.next_values[t] = if part.dones[t] {
                    0.0
                } else if t + 1 < n {
                    part.values[t + 1]
                } else {
                    debug_assert!(w.state.is_some());
                    tail.next().unwrap_or(0.0)
                };
            }
            buffer.extend(part);
            ends.push(buffer.len());
        }
        Ok((buffer, ends))
    }
}

/// Standardises `adv` to zero mean and unit variance within each of
/// `groups` equal-width bins of `progress`. Bins with a single entry are
/// zeroed.
pub fn standardize_grouped(adv: &mut [f64], progress: &[f64], groups: usize) {
    let groups = groups.max(1);
    let bin = |i: usize| match progress.get(i) {
        Some(&p) if groups > 1 => ((p * groups as f64) as usize).min(groups - 1),
        _ => 0,
    };
    let mut sum = vec![0.0; groups];
    let mut sq = vec![0.0; groups];
    let mut n = vec![0usize; groups];
    for (i, a) in adv.iter().enumerate() {
        let b = bin(i);
        sum[b] += a;
        sq[b] += a * a;
        n[b] += 1;
    }
    for (i, a) in adv.iter_mut().enumerate() {
        let b = bin(i);
        if n[b] < 2 {
            *a = 0.0;
            continue;
        }
        let mean = sum[b] / n[b] as f64;
        let var = (sq[b] / n[b] as f64 - mean * mean).max(0.0);
        *a = (*a - mean) / (var.sqrt() + 1e-8);
    }
}

/// Fresh-collector convenience: `n_steps` transitions from new workers.
pub fn collect_rollout<E: RlEnv>(
    factory: impl Fn(usize) -> Result<E>,
    model: &ActorCritic,
    n_steps: usize,
    workers: usize,
    seed: u64,
) -> Result<RolloutBuffer> {
    if n_steps == 0 {
        return Err(PpoError::EmptyRollout);
    }
    let mut c = Collector::new(factory, workers, seed)?;
    Ok(c.collect(model, n_steps)?.0)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_objective: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    /// Diagnostics of the very first minibatch, taken before any step.
    pub first_mean_ratio: f64,
    pub first_clip_fraction: f64,
}

/// Runs `epochs` passes of shuffled minibatch ascent on the objective.
/// One minibatch of training targets.
#[derive(Debug, Clone, Copy)]
pub struct Minibatch<'a> {
    pub states: &'a Tensor,
    pub actions: &'a [usize],
    pub old_logp: &'a [f64],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
}

/// Graph nodes of the PPO objective `J = clip - lambda * VF + c_ent * H`.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub j: Var,
    pub clip: Var,
    pub value_loss: Var,
    pub entropy: Var,
    pub logp: Var,
}

pub fn build_objective(model: &ActorCritic, g: &mut Graph, mb: &Minibatch, cfg: &TrainConfig) -> Result<Objective> {
    let out = model.forward(g, mb.states)?;
    let clip = g.ppo_clip(out.logp, mb.actions, mb.old_logp, mb.advantages, cfg.clip_eps)?;
    let value_loss = g.mse(out.value, mb.returns)?;
    let entropy = g.entropy(out.logp);
    let j = g.lincomb(&[(clip, 1.0), (value_loss, -cfg.lambda), (entropy, cfg.entropy_coef)])?;
    Ok(Objective { j, clip, value_loss, entropy, logp: out.logp })
}

/// Value of `J` and its gradient with respect to every model parameter.
pub fn objective_gradient(model: &ActorCritic, mb: &Minibatch, cfg: &TrainConfig) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let o = build_objective(model, &mut g, mb, cfg)?;
    let grads = g.backward(o.j)?;
    let mut out = model.params().zeros_like();
    g.accumulate_param_grads(&grads, &mut out);
    Ok((g.value(o.j).scalar(), out))
}

pub fn ppo_update(
    model: &mut ActorCritic,
    opt: &mut Adam,
    buffer: &RolloutBuffer,
    segment_ends: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    if buffer.is_empty() {
        return Err(PpoError::EmptyBatch);
    }
    let scaled = RolloutBuffer {
        rewards: buffer.rewards.iter().map(|r| r * cfg.reward_scale).collect(),
        ..buffer.clone()
    };
    let mut adv = match cfg.gae_lambda {
        Some(l) => scaled.gae_advantages(cfg.gamma, l, segment_ends),
        None => scaled.td_advantages(cfg.gamma),
    };
    if cfg.normalize_advantages {
        standardize_grouped(&mut adv, &buffer.progress, cfg.advantage_groups);
    }
    let returns = scaled.returns(cfg.gamma, segment_ends);
    let width = model.config().input_width();
    let mut idx: Vec<usize> = (0..buffer.len()).collect();
    let mut stats = UpdateStats::default();
    let mut batches = 0usize;
    let mut first = true;
    for _ in 0..cfg.epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(cfg.minibatch) {
            let data: Vec<f64> = chunk.iter().flat_map(|&i| buffer.states[i].iter().cloned()).collect();
            let states = Tensor::from_vec(chunk.len(), width, data)?;
            let actions: Vec<usize> = chunk.iter().map(|&i| buffer.actions[i]).collect();
            let old: Vec<f64> = chunk.iter().map(|&i| buffer.logp[i]).collect();
            let a: Vec<f64> = chunk.iter().map(|&i| adv[i]).collect();
            let g_t: Vec<f64> = chunk.iter().map(|&i| returns[i]).collect();

            let mb = Minibatch { states: &states, actions: &actions, old_logp: &old, advantages: &a, returns: &g_t };
            let mut g = Graph::new();
            let Objective { j, clip, value_loss: vf, entropy: ent, logp } = build_objective(model, &mut g, &mb, cfg)?;
            let loss = g.lincomb(&[(j, -1.0)])?;

            let lp = g.value(logp);
            let mut ratio_sum = 0.0;
            let mut clipped = 0usize;
            for (r, (&act, &o)) in actions.iter().zip(&old).enumerate() {
                let rho = ratio(lp.get(r, act), o);
                ratio_sum += rho;
                if (rho - 1.0).abs() > cfg.clip_eps {
                    clipped += 1;
                }
            }
            let n = chunk.len() as f64;
            let (jv, cv, vv, ev) = (g.value(j).scalar(), g.value(clip).scalar(), g.value(vf).scalar(), g.value(ent).scalar());
            if !jv.is_finite() {
                return Err(PpoError::NonFinite(format!(
                    "objective {jv} (clip {cv}, value loss {vv}, entropy {ev}) at minibatch {batches}; \
                     advantages finite: {}, returns finite: {}",
                    a.iter().all(|x| x.is_finite()),
                    g_t.iter().all(|x| x.is_finite())
                )));
            }
            if first {
                stats.first_mean_ratio = ratio_sum / n;
                stats.first_clip_fraction = clipped as f64 / n;
                first = false;
            }

            let grads = g.backward(loss)?;
            let mut pg = model.params().zeros_like();
            g.accumulate_param_grads(&grads, &mut pg);
            let norm = clip_global_norm(&mut pg, cfg.max_grad_norm);
            if !norm.is_finite() {
                return Err(PpoError::NonFinite(format!("gradient norm {norm} at minibatch {batches}")));
            }
            opt.step(model.params_mut(), &pg);

            stats.policy_objective += cv;
            stats.value_loss += vv;
            stats.entropy += ev;
            stats.mean_ratio += ratio_sum / n;
            stats.clip_fraction += clipped as f64 / n;
            stats.grad_norm += norm;
            batches += 1;
        }
    }
    let b = batches as f64;
    stats.policy_objective /= b;
    stats.value_loss /= b;
    stats.entropy /= b;
    stats.mean_ratio /= b;
    stats.clip_fraction /= b;
    stats.grad_norm /= b;
    Ok(stats)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateLog {
    pub update: usize,
    pub steps: usize,
    pub mean_reward: f64,
    pub episodes: usize,
    /// Mean of `-return` over episodes finished in this rollout; for the
    /// mobility env this is the episode ATT.
    pub att_estimate: Option<f64>,
    #[serde(flatten)]
    pub stats: UpdateStats,
}

/// Collector, optimiser and model bundled for repeated updates.
pub struct Trainer<E: RlEnv> {
    pub model: ActorCritic,
    pub cfg: TrainConfig,
    opt: Adam,
    collector: Collector<E>,
    rng: ChaCha8Rng,
    updates: usize,
}

impl<E: RlEnv> Trainer<E> {
    pub fn new(model: ActorCritic, cfg: TrainConfig, factory: impl Fn(usize) -> Result<E>) -> Result<Self> {
        cfg.validate()?;
        let probe = factory(0)?;
        if probe.state_width() != model.config().input_width() || probe.n_actions() != model.config().n_actions {
            return Err(PpoError::Config(format!(
                "env has width {} and {} actions, model expects {} and {}",
                probe.state_width(),
                probe.n_actions(),
                model.config().input_width(),
                model.config().n_actions
            )));
        }
        let opt = Adam::new(cfg.adam, model.params());
        let collector = Collector::new(factory, cfg.workers, cfg.seed)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
        Ok(Self { model, cfg, opt, collector, rng, updates: 0 })
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn step(&mut self) -> Result<UpdateLog> {
        if self.cfg.anneal_updates > 0 {
            let left = 1.0 - self.updates as f64 / self.cfg.anneal_updates as f64;
            self.opt.cfg.lr = self.cfg.adam.lr * left.max(0.0);
        }
        let (buffer, ends) = self.collector.collect(&self.model, self.cfg.rollout_len)?;
        let stats = ppo_update(&mut self.model, &mut self.opt, &buffer, &ends, &self.cfg, &mut self.rng)?;
        let log = UpdateLog {
            update: self.updates,
            steps: buffer.len(),
            mean_reward: buffer.rewards.iter().sum::<f64>() / buffer.len() as f64,
            episodes: buffer.episode_returns.len(),
            att_estimate: (!buffer.episode_returns.is_empty())
                .then(|| -buffer.episode_returns.iter().sum::<f64>() / buffer.episode_returns.len() as f64),
            stats,
        };
        self.updates += 1;
        Ok(log)
    }

    /// Runs `n` updates, appending one JSON line per update to `log`.
    pub fn train(&mut self, n: usize, mut log: Option<&mut dyn Write>) -> Result<Vec<UpdateLog>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let entry = self.step()?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &entry).map_err(std::io::Error::from)?;
                w.write_all(b"\n")?;
            }
            out.push(entry);
        }
        Ok(out)
    }
}

/// Index of the most probable action; ties go to the lower index.
pub fn greedy_action(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}
