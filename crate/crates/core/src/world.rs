//! Map geometry, the ground road lattice, and ground-leg travel times.
//!
//! Ground legs are routed with A* over a 4-neighbour lattice; the average
//! speed of a leg comes from the Greenberg speed-density law evaluated at
//! the corridor density when the leg starts.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("disconnected: {0}")]
    Disconnected(String),
    #[error("no path between {0:?} and {1:?}")]
    NoPath(Point, Point),
    #[error("density must be positive, got {0}")]
    NonPositiveDensity(f64),
    #[error("gridlock: ground speed is zero")]
    Gridlock,
    #[error("invalid distance {0}")]
    InvalidDistance(f64),
}

/// A location on the map, in kilometres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Straight-line distance in km.
pub fn euclidean_km(a: Point, b: Point) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Index of a lattice node, row-major: `row * side + col` with `col` along x.
pub type NodeId = usize;

/// Square 4-neighbour road lattice with optional impassable nodes.
#[derive(Debug, Clone)]
pub struct GroundNetwork {
    extent_km: f64,
    cell_km: f64,
    side: usize,
    blocked: Vec<bool>,
}

impl GroundNetwork {
    /// Builds the lattice and checks that every unblocked node lies in a
    /// single connected component.
    pub fn new(
        extent_km: f64,
        cell_km: f64,
        blocked: &BTreeSet<(usize, usize)>,
    ) -> Result<Self, WorldError> {
        if !(extent_km > 0.0 && extent_km.is_finite()) || !(cell_km > 0.0 && cell_km.is_finite()) {
            return Err(WorldError::InvalidDimensions(format!(
                "extent {extent_km} km and cell {cell_km} km must be positive"
            )));
        }
        let cells = extent_km / cell_km;
        if (cells - cells.round()).abs() > 1e-9 || cells.round() < 1.0 {
            return Err(WorldError::InvalidDimensions(format!(
                "extent {extent_km} km is not a multiple of cell {cell_km} km"
            )));
        }
        let side = cells.round() as usize + 1;
        let mut mask = vec![false; side * side];
        for &(col, row) in blocked {
            if col >= side || row >= side {
                return Err(WorldError::InvalidDimensions(format!(
                    "blocked cell ({col}, {row}) outside the {side}x{side} lattice"
                )));
            }
            mask[row * side + col] = true;
        }
        let net = Self {
            extent_km,
            cell_km,
            side,
            blocked: mask,
        };
        net.check_connected()?;
        Ok(net)
    }

    fn check_connected(&self) -> Result<(), WorldError> {
        let Some(start) = (0..self.node_count()).find(|&n| !self.blocked[n]) else {
            return Err(WorldError::Disconnected("every cell is blocked".into()));
        };
        let mut seen = vec![false; self.node_count()];
        let mut stack = vec![start];
        seen[start] = true;
        let mut reached = 1;
        while let Some(n) = stack.pop() {
            for m in self.neighbours(n) {
                if !seen[m] {
                    seen[m] = true;
                    reached += 1;
                    stack.push(m);
                }
            }
        }
        let open = self.blocked.iter().filter(|b| !**b).count();
        if reached != open {
            return Err(WorldError::Disconnected(format!(
                "{} of {open} open nodes unreachable",
                open - reached
            )));
        }
        Ok(())
    }

    pub fn extent_km(&self) -> f64 {
        self.extent_km
    }

    pub fn cell_km(&self) -> f64 {
        self.cell_km
    }

    /// Nodes per side.
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn node_count(&self) -> usize {
        self.side * self.side
    }

    pub fn is_open(&self, n: NodeId) -> bool {
        !self.blocked[n]
    }

    pub fn open_node_count(&self) -> usize {
        self.blocked.iter().filter(|b| !**b).count()
    }

    /// Number of undirected edges between open nodes.
    pub fn edge_count(&self) -> usize {
        (0..self.node_count())
            .filter(|&n| self.is_open(n))
            .map(|n| self.neighbours(n).filter(|&m| m > n).count())
            .sum()
    }

    pub fn node_point(&self, n: NodeId) -> Point {
        let (col, row) = (n % self.side, n / self.side);
        Point::new(col as f64 * self.cell_km, row as f64 * self.cell_km)
    }

    /// Open neighbours in ascending id order.
    pub fn neighbours(&self, n: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        let side = self.side;
        let (col, row) = (n % side, n / side);
        let down = (row > 0).then(|| n - side);
        let left = (col > 0).then(|| n - 1);
        let right = (col + 1 < side).then(|| n + 1);
        let up = (row + 1 < side).then(|| n + side);
        [down, left, right, up]
            .into_iter()
            .flatten()
            .filter(move |&m| !self.blocked[m])
    }

    /// Nearest open node to `p`; ties go to the lower node id.
    pub fn snap(&self, p: Point) -> NodeId {
        let col = (p.x / self.cell_km).round().clamp(0.0, (self.side - 1) as f64) as usize;
        let row = (p.y / self.cell_km).round().clamp(0.0, (self.side - 1) as f64) as usize;
        let direct = row * self.side + col;
        if self.is_open(direct) {
            return direct;
        }
        (0..self.node_count())
            .filter(|&n| self.is_open(n))
            .map(|n| (euclidean_km(p, self.node_point(n)), n))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, n)| n)
            .expect("network has at least one open node")
    }

    /// A* between the nodes nearest to `from` and `to`. Returns the node path
    /// and its length in km.
    pub fn shortest_path(&self, from: Point, to: Point) -> Result<(Vec<NodeId>, f64), WorldError> {
        let (src, dst) = (self.snap(from), self.snap(to));
        let hops = self
            .astar(src, dst)
            .ok_or(WorldError::NoPath(from, to))?;
        let len = (hops.len() - 1) as f64 * self.cell_km;
        Ok((hops, len))
    }

    /// Shortest lattice distance in km between the nodes nearest to `a` and `b`.
    pub fn distance_km(&self, a: Point, b: Point) -> Result<f64, WorldError> {
        self.shortest_path(a, b).map(|(_, l)| l)
    }

    fn astar(&self, src: NodeId, dst: NodeId) -> Option<Vec<NodeId>> {
        let n = self.node_count();
        let target = self.node_point(dst);
        // Costs in hop counts; the heuristic is the straight-line distance in
        // cell units, which never overestimates the lattice distance.
        let h = |m: NodeId| euclidean_km(self.node_point(m), target) / self.cell_km;
        let mut g = vec![u32::MAX; n];
        let mut parent = vec![usize::MAX; n];
        let mut closed = vec![false; n];
        let mut open = BinaryHeap::new();
        g[src] = 0;
        open.push(Reverse((Key(h(src)), src)));
        while let Some(Reverse((_, cur))) = open.pop() {
            if closed[cur] {
                continue;
            }
            if cur == dst {
                let mut path = vec![dst];
                let mut at = dst;
                while at != src {
                    at = parent[at];
                    path.push(at);
                }
                path.reverse();
                return Some(path);
            }
            closed[cur] = true;
            for next in self.neighbours(cur) {
                let cand = g[cur] + 1;
                if cand < g[next] || (cand == g[next] && cur < parent[next]) {
                    g[next] = cand;
                    parent[next] = cur;
                    open.push(Reverse((Key(cand as f64 + h(next)), next)));
                }
            }
        }
        None
    }
}

/// Total-ordered f64 wrapper for the A* frontier.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Key(f64);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Parameters of the ground speed-density model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficField {
    /// Speed at maximum flow, km/h.
    pub v_m: f64,
    /// Jam density, vehicles/km.
    pub k_j: f64,
    /// Background density, vehicles/km.
    pub k_base: f64,
    /// Density added per passenger sharing the corridor.
    pub alpha_load: f64,
}

impl Default for TrafficField {
    fn default() -> Self {
        let k_j = 100.0;
        Self {
            v_m: 60.0,
            k_j,
            k_base: k_j / std::f64::consts::E,
            alpha_load: 0.8,
        }
    }
}

impl TrafficField {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.v_m > 0.0) {
            return Err(format!("v_m must be positive, got {}", self.v_m));
        }
        if !(self.k_base > 0.0 && self.k_base <= self.k_j) {
            return Err(format!(
                "k_base must lie in (0, k_j], got {} with k_j {}",
                self.k_base, self.k_j
            ));
        }
        if !(self.alpha_load >= 0.0) {
            return Err(format!("alpha_load must be non-negative, got {}", self.alpha_load));
        }
        Ok(())
    }
}

/// Greenberg speed `v_m ln(k_j / k_c)`, clamped to `[0, v_m]`.
pub fn greenberg_speed(tf: &TrafficField, k_c: f64) -> Result<f64, WorldError> {
    if !(k_c > 0.0) {
        return Err(WorldError::NonPositiveDensity(k_c));
    }
    Ok((tf.v_m * (tf.k_j / k_c).ln()).clamp(0.0, tf.v_m))
}

/// Density on a corridor shared by `en_route` passengers, saturating at jam density.
pub fn corridor_density(tf: &TrafficField, en_route: usize) -> f64 {
    (tf.k_base + tf.alpha_load * en_route as f64).min(tf.k_j)
}

/// Minutes to cover `length_km` at `speed_kmh`.
pub fn ground_travel_time(length_km: f64, speed_kmh: f64) -> Result<f64, WorldError> {
    if !(length_km >= 0.0) {
        return Err(WorldError::InvalidDistance(length_km));
    }
    if !(speed_kmh > 0.0) {
        return Err(WorldError::Gridlock);
    }
    Ok(60.0 * length_km / speed_kmh)
}
