//! Writes metrics.csv, summary.csv, trace.jsonl and cdf.csv for two policies.

use airground::env::EnvConfig;
use airground::harness::{aggregate, export, run_seeds, Heuristic, Scenario};
use airground::policies::PolicyKind;

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "out/example".into());
    let sc = Scenario::new(EnvConfig { total_passengers: 100, ..EnvConfig::default() })?;
    let (mut episodes, mut summary) = (Vec::new(), Vec::new());
    for kind in [PolicyKind::RuleBased, PolicyKind::Qtti] {
        let eps = run_seeds(&sc, &mut Heuristic::new(kind)?, &[0, 1, 2], true)?;
        let metrics: Vec<_> = eps.iter().map(|e| e.metrics.clone()).collect();
        summary.push(aggregate(&metrics)?);
        episodes.extend(eps);
    }
    export(std::path::Path::new(&out), &episodes, &summary)?;
    println!("wrote {out}");
    Ok(())
}
