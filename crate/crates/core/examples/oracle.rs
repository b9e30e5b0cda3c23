//! Exhaustive search over every assignment of a tiny instance.

use airground::env::{brute_force_best_assignment, replay_cost, Assignment, Env, EnvConfig};
use airground::harness::{Heuristic, Policy};
use airground::policies::PolicyKind;

fn main() -> anyhow::Result<()> {
    let env = Env::new(EnvConfig { total_passengers: 5, ..EnvConfig::default() }, 42)?;
    let best = brute_force_best_assignment(&env)?;
    println!("optimum {:.2} passenger-min via {:?} ({} replays)", best.cost, best.actions, best.replays);
    for kind in [PolicyKind::Spf, PolicyKind::RuleBased, PolicyKind::Sttf, PolicyKind::Qtti] {
        let mut p = Heuristic::new(kind)?;
        p.reset(42);
        let mut sim = env.clone();
        let mut actions = Vec::new();
        while !sim.is_done() {
            let Assignment::Vertiport(k) = p.choose(&sim)? else { unreachable!() };
            actions.push(k);
            sim.step(k)?;
        }
        println!("{kind:>5}: {:.2} via {actions:?}", replay_cost(&env, &actions)?);
    }
    Ok(())
}
