use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use airground::env::{brute_force_best_assignment, replay_cost, Env, EnvConfig};
use airground::harness::{
    aggregate, export, load_config, load_trained, make_policy, run_seeds, save_trained, sweep, train, write_summary,
    Heuristic, Learned, Policy, RunConfig, Scenario,
};
use airground::policies::PolicyKind;

/// Vertiport-selection simulator, baselines and PPO agent.
///
/// Config files are TOML. Top-level keys: policy, seeds, out, updates,
/// greedy; tables: [env], [model], [train], [sweep]. Every key is optional
/// and unknown keys are rejected. See configs/default.toml for the full list
/// with defaults.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a policy over seeds and export metrics, summary, trace and CDF.
    Simulate {
        #[arg(long)]
        policy: Option<PolicyKind>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma list or range, e.g. `0,1,5` or `0..10`.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Required when the policy is `learned`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the actor-critic with PPO.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        updates: Option<usize>,
        /// Output directory for model.ckpt and train_log.jsonl.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a trained checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Sample actions instead of taking the most probable one.
        #[arg(long)]
        sample: bool,
    },
    /// Demand x capacity grid; writes summary.csv.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        policy: Option<PolicyKind>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare every baseline against exhaustive search on tiny instances.
    Oracle {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of instances (seeds 0..n).
        #[arg(long)]
        n: u64,
        /// Passengers per instance; overrides the config.
        #[arg(long, default_value_t = 5)]
        passengers: usize,
    },
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if a >= b {
            bail!("empty seed range {s}");
        }
        return Ok((a..b).collect());
    }
    s.split(',').map(|x| x.trim().parse().with_context(|| format!("bad seed {x:?}"))).collect()
}

fn config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => load_config(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn simulate(cfg: &RunConfig, policy: &mut dyn Policy, out: &Path) -> Result<()> {
    let sc = Scenario::new(cfg.env.clone())?;
    let episodes = run_seeds(&sc, policy, &cfg.seeds, true)?;
    let metrics: Vec<_> = episodes.iter().map(|e| e.metrics.clone()).collect();
    let summary = aggregate(&metrics)?;
    export(out, &episodes, std::slice::from_ref(&summary))?;
    let att = summary.metric("att").expect("att");
    let awt = summary.metric("awt").expect("awt");
    println!(
        "{}: {} episodes, ATT {:.2} (var {:.2}), AWT {:.2}; wrote {}",
        summary.policy,
        summary.episodes,
        att.mean,
        att.var,
        awt.mean,
        out.display()
    );
    Ok(())
}

fn oracle(cfg: &RunConfig, n: u64, passengers: usize) -> Result<()> {
    let env_cfg = EnvConfig { total_passengers: passengers, ..cfg.env.clone() };
    let sc = Scenario::new(env_cfg)?;
    let kinds = [PolicyKind::Spf, PolicyKind::RuleBased, PolicyKind::Sttf, PolicyKind::Qtti];
    let mut worst_gap = vec![0.0f64; kinds.len()];
    let mut violations = 0;
    for seed in 0..n {
        let env = Env::with_network(sc.env.clone(), sc.net.clone(), seed)?;
        let best = brute_force_best_assignment(&env)?;
        for (i, &k) in kinds.iter().enumerate() {
            let mut p = Heuristic::new(k)?;
            p.reset(seed);
            let mut sim = env.clone();
            let mut actions = Vec::new();
            while !sim.is_done() {
                let a = match p.choose(&sim)? {
                    airground::env::Assignment::Vertiport(v) => v,
                    airground::env::Assignment::GroundOnly => unreachable!("air baselines only"),
                };
                actions.push(a);
                sim.step(a)?;
            }
            let cost = replay_cost(&env, &actions)?;
            if best.cost > cost + 1e-9 {
                violations += 1;
                eprintln!("seed {seed}: {k} cost {cost} beats exhaustive {}", best.cost);
            }
            worst_gap[i] = worst_gap[i].max(cost - best.cost);
        }
    }
    for (k, g) in kinds.iter().zip(&worst_gap) {
        println!("{k:>5}: worst excess over optimum {g:.3} passenger-min");
    }
    if violations > 0 {
        bail!("{violations} instances where a baseline beat exhaustive search");
    }
    println!("oracle cost <= every baseline on {n} instances");
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Simulate { policy, config: path, seeds, out, checkpoint } => {
            let mut cfg = config(path.as_deref())?;
            if let Some(p) = policy {
                cfg.policy = p;
            }
            if let Some(s) = seeds {
                cfg.seeds = parse_seeds(&s)?;
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            if let Some(ck) = &checkpoint {
                // Model shape and features come from the training run.
                let (_, trained) = load_trained(ck)?;
                cfg.env = trained.env;
                cfg.model = trained.model;
            }
            let mut policy = make_policy(&cfg, checkpoint.as_deref())?;
            simulate(&cfg, policy.as_mut(), &cfg.out)
        }
        Cmd::Train { config: path, updates, checkpoint } => {
            let mut cfg = config(path.as_deref())?;
            if let Some(u) = updates {
                cfg.updates = u;
                if cfg.train.anneal_updates > 0 {
                    cfg.train.anneal_updates = u;
                }
            }
            std::fs::create_dir_all(&checkpoint)?;
            let mut log = std::fs::File::create(checkpoint.join("train_log.jsonl"))?;
            let start = std::time::Instant::now();
            let out = train(&cfg, Some(&mut log))?;
            save_trained(&checkpoint, &out.model, &cfg)?;
            match out.validation.iter().find(|v| v.0 == out.selected_after) {
                Some((u, att)) => println!("kept weights after update {u} (validation ATT {att:.2})"),
                None => println!("kept final weights"),
            }
            println!("{} updates in {:.1}s; wrote {}", out.logs.len(), start.elapsed().as_secs_f64(), checkpoint.display());
            Ok(())
        }
        Cmd::Eval { checkpoint, seeds, out, sample } => {
            let (model, mut cfg) = load_trained(&checkpoint)?;
            if let Some(s) = seeds {
                cfg.seeds = parse_seeds(&s)?;
            }
            let out = out.unwrap_or_else(|| cfg.out.clone());
            let mut policy = Learned::new(model, !sample);
            simulate(&cfg, &mut policy, &out)
        }
        Cmd::Sweep { config: path, out, policy, checkpoint } => {
            let mut cfg = config(path.as_deref())?;
            if let Some(p) = policy {
                cfg.policy = p;
            }
            if let Some(ck) = &checkpoint {
                let (_, trained) = load_trained(ck)?;
                cfg.env = EnvConfig { total_passengers: cfg.env.total_passengers, seats: cfg.env.seats, ..trained.env };
                cfg.model = trained.model;
            }
            let out = out.unwrap_or_else(|| cfg.out.clone());
            let mut policy = make_policy(&cfg, checkpoint.as_deref())?;
            let rows = sweep(&cfg, policy.as_mut())?;
            std::fs::create_dir_all(&out)?;
            write_summary(std::fs::File::create(out.join("summary.csv"))?, &rows)?;
            for r in &rows {
                let awt = r.metric("awt").expect("awt");
                let rpv: Vec<String> = r.rpv.iter().map(|s| format!("{:.0}%", s.mean)).collect();
                println!(
                    "{:>4} pax C={}: ATT {:.2}  AWT {:.2} +- {:.2}  RPV {}",
                    r.passengers,
                    r.seats,
                    r.metric("att").expect("att").mean,
                    awt.mean,
                    awt.var.sqrt(),
                    rpv.join("/")
                );
            }
            Ok(())
        }
        Cmd::Oracle { config: path, n, passengers } => oracle(&config(path.as_deref())?, n, passengers),
    }
}
