//! Lattice shortest paths and congestion-dependent ground travel times.

use airground::env::EnvConfig;
use airground::world::{corridor_density, greenberg_speed, ground_travel_time, Point};

fn main() -> anyhow::Result<()> {
    let cfg = EnvConfig::default();
    let net = cfg.build_network()?;
    println!("{} x {} lattice, {} open nodes, {} edges", net.side(), net.side(), net.open_node_count(), net.edge_count());

    let (from, to) = (Point::new(2.5, 3.0), Point::new(24.0, 28.5));
    let (path, km) = net.shortest_path(from, to)?;
    println!("path of {} nodes, {km:.1} km", path.len());

    for en_route in [0, 10, 50, 100] {
        let k = corridor_density(&cfg.traffic, en_route);
        let v = greenberg_speed(&cfg.traffic, k)?.max(cfg.ground_speed_floor_kmh);
        println!("{en_route:>4} on corridor: density {k:6.1}/km, speed {v:5.1} km/h, {:.1} min", ground_travel_time(km, v)?);
    }
    Ok(())
}
