//! Drives the environment by hand and prints what a policy sees.

use airground::env::{Env, EnvConfig};

fn main() -> anyhow::Result<()> {
    let cfg = EnvConfig { total_passengers: 12, progress_feature: true, ..EnvConfig::default() };
    let mut env = Env::new(cfg, 3)?;
    let mut total = 0.0;
    while !env.is_done() {
        let view = env.decision_view().expect("a focal passenger");
        // Send each passenger to the vertiport with the shortest drive.
        let pick = view.options.iter().min_by(|a, b| a.ground_min.total_cmp(&b.ground_min)).expect("an option");
        let queues: Vec<usize> = view.options.iter().map(|v| v.queue).collect();
        let (id, drive) = (pick.id, pick.ground_min);
        let (r, _, info) = env.step(id)?;
        total += r;
        println!("t={:6.1}  passenger {:>2} -> {id} ({drive:4.1} min drive)  queues {queues:?}  reward {r:+.3}  ticks {}", env.now(), view.passenger, info.ticks);
    }
    println!("sum of rewards {total:.4} = -ATT, {} passengers delivered", env.arrived());
    Ok(())
}
