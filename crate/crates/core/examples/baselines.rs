//! Runs every fixed vertiport-selection rule on the same seeds.

use airground::harness::{aggregate, run_seeds, Heuristic, Scenario};
use airground::policies::PolicyKind;
use airground::env::EnvConfig;

fn main() -> anyhow::Result<()> {
    let sc = Scenario::new(EnvConfig::default())?;
    let seeds: Vec<u64> = (0..5).collect();
    println!("{:>6} {:>8} {:>8} {:>8}", "policy", "ATT", "AWT", "AET");
    for kind in PolicyKind::HEURISTICS {
        let eps = run_seeds(&sc, &mut Heuristic::new(kind)?, &seeds, false)?;
        let metrics: Vec<_> = eps.into_iter().map(|e| e.metrics).collect();
        let row = aggregate(&metrics)?;
        let m = |n| row.metric(n).expect("metric").mean;
        println!("{:>6} {:>8.2} {:>8.2} {:>8.2}", kind, m("att"), m("awt"), m("aet"));
    }
    Ok(())
}
