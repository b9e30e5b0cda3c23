//! Demand and cabin-capacity grid for one baseline.

use airground::harness::{sweep, Heuristic, RunConfig};
use airground::policies::PolicyKind;

fn main() -> anyhow::Result<()> {
    let cfg = RunConfig { seeds: (0..3).collect(), ..RunConfig::default() };
    for row in sweep(&cfg, &mut Heuristic::new(PolicyKind::Qtti)?)? {
        let awt = row.metric("awt").expect("awt");
        println!("{:>4} passengers, C={}: AWT {:6.2} (var {:.2}), ATT {:6.2}", row.passengers, row.seats, awt.mean, awt.var, row.metric("att").expect("att").mean);
    }
    Ok(())
}
