//! Config loading, episode and training orchestration, metrics and export.

mod config;
mod export;
mod metrics;

pub use config::{load_config, parse_config, ModelSpec, RunConfig, SweepGrid};
pub use export::{export, read_trace, validate_trace, write_cdf, write_metrics, write_summary, write_trace, TraceRecord};
pub use metrics::{aggregate, EpisodeMetrics, Stat, SummaryRow, IDENTITY_TOL, METRIC_NAMES};

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::env::{Assignment, Env, EnvConfig, EnvError, TraceEvent};
use crate::neural::{load_checkpoint, save_checkpoint, ActorCritic, Checkpoint, NeuralError, Tensor};
use crate::policies::{draw_proportional, policy_qtti, policy_rule_based, policy_spf, policy_sttf, PolicyError, PolicyKind};
use crate::ppo::{greedy_action, PpoError, Trainer, UamEnv, UpdateLog};
use crate::world::GroundNetwork;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("nothing to aggregate")]
    Empty,
    #[error("metric identity violated: {0}")]
    Identity(String),
    #[error("trace replay: {0}")]
    Trace(String),
    #[error("seed {seed}, step {step}: {source}")]
    Step { seed: u64, step: usize, source: EnvError },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

/// Anything that picks the focal passenger's travel mode.
pub trait Policy {
    fn name(&self) -> String;

    /// Called before every episode.
    fn reset(&mut self, _seed: u64) {}

    fn choose(&mut self, env: &Env) -> Result<Assignment>;
}

/// One of the fixed baselines.
#[derive(Debug, Clone)]
pub struct Heuristic {
    kind: PolicyKind,
    rng: ChaCha8Rng,
}

impl Heuristic {
    pub fn new(kind: PolicyKind) -> Result<Self> {
        if kind == PolicyKind::Learned {
            return Err(HarnessError::Config("the learned policy needs a checkpoint".into()));
        }
        Ok(Self { kind, rng: ChaCha8Rng::seed_from_u64(0) })
    }
}

impl Policy for Heuristic {
    fn name(&self) -> String {
        self.kind.name().to_string()
    }

    fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5255_4C45);
    }

    fn choose(&mut self, env: &Env) -> Result<Assignment> {
        let view = env.decision_view().ok_or(EnvError::Finished)?;
        Ok(match self.kind {
            PolicyKind::Ground => Assignment::GroundOnly,
            PolicyKind::Spf => Assignment::Vertiport(policy_spf(&view)),
            PolicyKind::Sttf => Assignment::Vertiport(policy_sttf(&view)),
            PolicyKind::Qtti => Assignment::Vertiport(policy_qtti(&view, true)),
            PolicyKind::RuleBased => Assignment::Vertiport(policy_rule_based(&view, &mut self.rng)?),
            PolicyKind::Learned => unreachable!("rejected in Heuristic::new"),
        })
    }
}

/// A trained actor-critic acting on the state stack.
#[derive(Debug, Clone)]
pub struct Learned {
    pub model: ActorCritic,
    /// Argmax instead of sampling.
    pub greedy: bool,
    label: String,
    rng: ChaCha8Rng,
}

impl Learned {
    pub fn new(model: ActorCritic, greedy: bool) -> Self {
        Self::labelled(model, greedy, "learned")
    }

    pub fn labelled(model: ActorCritic, greedy: bool, label: impl Into<String>) -> Self {
        Self { model, greedy, label: label.into(), rng: ChaCha8Rng::seed_from_u64(0) }
    }
}

impl Policy for Learned {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0050_504F);
    }

    fn choose(&mut self, env: &Env) -> Result<Assignment> {
        let s = env.stack().flatten();
        let (probs, _) = self.model.evaluate(&Tensor::row_vector(s))?;
        let a = if self.greedy { greedy_action(&probs[0]) } else { draw_proportional(&probs[0], &mut self.rng)? };
        Ok(Assignment::Vertiport(env.departure_ids()[a]))
    }
}

/// Builds the policy named in `cfg`, loading `checkpoint` for the learned one.
pub fn make_policy(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Box<dyn Policy>> {
    match cfg.policy {
        PolicyKind::Learned => {
            let path = checkpoint.ok_or_else(|| HarnessError::Config("policy learned needs --checkpoint".into()))?;
            let (model, _) = load_trained(path)?;
            Ok(Box::new(Learned::new(model, cfg.greedy)))
        }
        kind => Ok(Box::new(Heuristic::new(kind)?)),
    }
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub metrics: EpisodeMetrics,
    pub trace: Vec<TraceEvent>,
    /// Door-to-door time of every passenger, in id order.
    pub totals: Vec<f64>,
}

/// Shared immutable episode setup.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub env: Arc<EnvConfig>,
    pub net: Arc<GroundNetwork>,
}

impl Scenario {
    pub fn new(env: EnvConfig) -> Result<Self> {
        env.validate()?;
        let net = Arc::new(env.build_network()?);
        Ok(Self { env: Arc::new(env), net })
    }

    /// Same network, different demand or capacity.
    pub fn with_env(&self, env: EnvConfig) -> Result<Self> {
        env.validate()?;
        Ok(Self { env: Arc::new(env), net: self.net.clone() })
    }
}

pub fn run_episode(sc: &Scenario, policy: &mut dyn Policy, seed: u64, trace: bool) -> Result<Episode> {
    let mut env = Env::with_network(sc.env.clone(), sc.net.clone(), seed)?;
    if trace {
        env.enable_trace();
    }
    policy.reset(seed);
    let mut total_reward = 0.0;
    while !env.is_done() {
        let step = env.step_index();
        let a = policy.choose(&env)?;
        let (r, _, _) = env.step_assignment(a).map_err(|source| HarnessError::Step { seed, step, source })?;
        total_reward += r;
    }
    let metrics = EpisodeMetrics::from_env(&env, &policy.name(), seed, total_reward)?;
    let totals = env
        .passengers()
        .iter()
        .map(|p| crate::env::total_travel_time(p, sc.env.tt_eps_min))
        .collect::<Result<_, _>>()?;
    Ok(Episode { metrics, trace: env.take_trace(), totals })
}

pub fn run_seeds(sc: &Scenario, policy: &mut dyn Policy, seeds: &[u64], trace: bool) -> Result<Vec<Episode>> {
    seeds.iter().map(|&s| run_episode(sc, policy, s, trace)).collect()
}

/// Runs the configured seeds in every (demand, capacity) cell of the grid;
/// one summary row per cell, demand-major.
pub fn sweep(cfg: &RunConfig, policy: &mut dyn Policy) -> Result<Vec<SummaryRow>> {
    let base = Scenario::new(cfg.env.clone())?;
    let mut rows = Vec::new();
    for &n in &cfg.sweep.passengers {
        for &c in &cfg.sweep.seats {
            let sc = base.with_env(EnvConfig { total_passengers: n, seats: c, ..cfg.env.clone() })?;
            let eps = run_seeds(&sc, policy, &cfg.seeds, false)?;
            let metrics: Vec<_> = eps.into_iter().map(|e| e.metrics).collect();
            rows.push(aggregate(&metrics)?);
        }
    }
    Ok(rows)
}

pub fn new_model(cfg: &RunConfig) -> Result<ActorCritic> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    Ok(ActorCritic::new(cfg.model_config(), &mut rng)?)
}

/// Mean ATT of the greedy policy over `seeds`.
pub fn greedy_att(sc: &Scenario, model: &ActorCritic, seeds: &[u64]) -> Result<f64> {
    let mut p = Learned::new(model.clone(), true);
    let eps = run_seeds(sc, &mut p, seeds, false)?;
    Ok(eps.iter().map(|e| e.metrics.att.mean).sum::<f64>() / eps.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ActorCritic,
    pub logs: Vec<UpdateLog>,
    /// `(updates done, validation ATT)` at every check.
    pub validation: Vec<(usize, f64)>,
    /// Updates behind the returned weights.
    pub selected_after: usize,
}

/// Trains for `cfg.updates` PPO updates, writing one JSON line per update to
/// `log` if given. With validation on, returns the best-scoring weights.
pub fn train(cfg: &RunConfig, mut log: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let sc = Scenario::new(cfg.env.clone())?;
    let model = new_model(cfg)?;
    let (env, net) = (sc.env.clone(), sc.net.clone());
    let mut trainer = Trainer::new(model, cfg.train.clone(), move |_| Ok(UamEnv::new(env.clone(), net.clone())))?;
    let mut logs = Vec::with_capacity(cfg.updates);
    let mut validation = Vec::new();
    let mut best: Option<(f64, usize, ActorCritic)> = None;
    for u in 1..=cfg.updates {
        let sink: Option<&mut dyn Write> = match log {
            Some(ref mut w) => Some(&mut **w),
            None => None,
        };
        logs.extend(trainer.train(1, sink)?);
        if cfg.validate_every > 0 && (u % cfg.validate_every == 0 || u == cfg.updates) {
            let att = greedy_att(&sc, &trainer.model, &cfg.validation_seeds)?;
            validation.push((u, att));
            if best.as_ref().is_none_or(|b| att < b.0) {
                best = Some((att, u, trainer.model.clone()));
            }
        }
    }
    let (model, selected_after) = match best {
        Some((_, u, m)) => (m, u),
        None => (trainer.model, cfg.updates),
    };
    Ok(TrainOutcome { model, logs, validation, selected_after })
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Writes the weights with the full run config as metadata.
pub fn save_trained(dir: &Path, model: &ActorCritic, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = toml::to_string(cfg).map_err(|e| HarnessError::Config(e.to_string()))?;
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &Checkpoint::from_model(model, meta))?;
    Ok(())
}

/// Loads a checkpoint file, or `model.ckpt` inside a directory.
pub fn load_trained(path: &Path) -> Result<(ActorCritic, RunConfig)> {
    let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    let ck = load_checkpoint(&file)?;
    let cfg = parse_config(&ck.metadata)?;
    if cfg.model_config() != ck.model {
        return Err(HarnessError::Config("checkpoint metadata does not match its model".into()));
    }
    Ok((ck.into_model()?, cfg))
}
