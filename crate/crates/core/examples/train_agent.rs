//! Short PPO run on a small scenario, then a greedy evaluation against QTTI.
//! Pass the update count as the first argument (default 30).

use airground::env::EnvConfig;
use airground::harness::{greedy_att, run_seeds, train, Heuristic, RunConfig, Scenario};
use airground::policies::PolicyKind;

fn main() -> anyhow::Result<()> {
    let updates: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(30);
    let mut cfg = RunConfig::default();
    cfg.env = EnvConfig { total_passengers: 100, ..cfg.env };
    cfg.updates = updates;
    cfg.validate_every = 5;

    let out = train(&cfg, Some(&mut std::io::stdout()))?;
    println!("kept weights after update {}", out.selected_after);

    let sc = Scenario::new(cfg.env.clone())?;
    let learned = greedy_att(&sc, &out.model, &cfg.seeds)?;
    let qtti = run_seeds(&sc, &mut Heuristic::new(PolicyKind::Qtti)?, &cfg.seeds, false)?;
    let qtti = qtti.iter().map(|e| e.metrics.att.mean).sum::<f64>() / qtti.len() as f64;
    println!("ATT learned {learned:.2}, QTTI {qtti:.2}");
    Ok(())
}
