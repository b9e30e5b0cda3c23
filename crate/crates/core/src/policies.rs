//! Heuristic departure-vertiport policies.
//!
//! Every policy is a pure function of the [`DecisionView`] (plus an RNG for
//! the randomised rule). Ties always go to the lower vertiport id.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::airside::{estimated_wait, VertiportId};
use crate::env::{DecisionView, VertiportView};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("all service-rate weights are zero")]
    ZeroRates,
    #[error("unknown policy {0:?}")]
    Unknown(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Ground,
    Spf,
    #[serde(rename = "rule")]
    RuleBased,
    Sttf,
    Qtti,
    Learned,
}

impl PolicyKind {
    pub const HEURISTICS: [PolicyKind; 5] = [
        PolicyKind::Ground,
        PolicyKind::Spf,
        PolicyKind::RuleBased,
        PolicyKind::Sttf,
        PolicyKind::Qtti,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Ground => "ground",
            PolicyKind::Spf => "spf",
            PolicyKind::RuleBased => "rule",
            PolicyKind::Sttf => "sttf",
            PolicyKind::Qtti => "qtti",
            PolicyKind::Learned => "learned",
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.name())
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "ground" => PolicyKind::Ground,
            "spf" => PolicyKind::Spf,
            "rule" | "rule_based" => PolicyKind::RuleBased,
            "sttf" => PolicyKind::Sttf,
            "qtti" => PolicyKind::Qtti,
            "learned" => PolicyKind::Learned,
            other => return Err(PolicyError::Unknown(other.to_string())),
        })
    }
}

/// Index of the minimum cost; the first (lowest id) wins ties.
fn argmin_by(options: &[VertiportView], cost: impl Fn(&VertiportView) -> f64) -> VertiportId {
    let mut best = &options[0];
    let mut best_cost = cost(best);
    for o in &options[1..] {
        let c = cost(o);
        if c < best_cost {
            best = o;
            best_cost = c;
        }
    }
    best.id
}

/// Shortest physical route: access distance plus air distance.
pub fn policy_spf(view: &DecisionView) -> VertiportId {
    argmin_by(&view.options, |o| o.ground_km + o.air_km)
}

/// Shortest travel time at current ground speeds; queues are ignored.
pub fn policy_sttf(view: &DecisionView) -> VertiportId {
    argmin_by(&view.options, |o| o.ground_min + o.air_min)
}

/// Cost of one option under the queue-aware rule.
pub fn qtti_cost(o: &VertiportView, include_en_route: bool) -> f64 {
    let projected = o.queue + if include_en_route { o.en_route } else { 0 };
    o.ground_min + estimated_wait(projected as f64, o.service_rate) + o.air_min
}

/// Travel time plus the queueing delay projected from the current queue.
pub fn policy_qtti(view: &DecisionView, include_en_route: bool) -> VertiportId {
    argmin_by(&view.options, |o| qtti_cost(o, include_en_route))
}

/// Random draw proportional to `weights`.
pub fn draw_proportional<R: Rng>(weights: &[f64], rng: &mut R) -> Result<usize, PolicyError> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(PolicyError::ZeroRates);
    }
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return Ok(i);
        }
        u -= w;
    }
    Ok(weights.iter().rposition(|w| *w > 0.0).expect("positive total"))
}

/// Splits demand in proportion to nominal service rates.
pub fn policy_rule_based<R: Rng>(view: &DecisionView, rng: &mut R) -> Result<VertiportId, PolicyError> {
    let weights: Vec<f64> = view.options.iter().map(|o| o.nominal_rate).collect();
    draw_proportional(&weights, rng).map(|i| view.options[i].id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Point;
    use rand::SeedableRng;

    fn opt(id: usize, ground_km: f64, air_km: f64) -> VertiportView {
        VertiportView {
            id,
            ground_km,
            ground_speed_kmh: 60.0,
            ground_min: ground_km,
            air_km,
            air_min: air_km / 2.0,
            queue: 0,
            en_route: 0,
            service_rate: 1.0,
            nominal_rate: 1.0,
        }
    }

    fn view(options: Vec<VertiportView>) -> DecisionView {
        DecisionView {
            passenger: 0,
            origin: Point::new(0.0, 0.0),
            destination: Point::new(0.0, 0.0),
            od_km: 45.0,
            ground_only_min: 45.0,
            options,
        }
    }

    #[test]
    fn spf_prefers_shorter_route() {
        // 9 + 38.18 = 47.2 against 2 + 24.04 = 26.0.
        let v = view(vec![opt(0, 9.0, 38.184), opt(1, 2.0, 24.042)]);
        assert_eq!(policy_spf(&v), 1);
    }

    #[test]
    fn ties_go_to_lower_id() {
        let v = view(vec![opt(0, 5.0, 20.0), opt(1, 5.0, 20.0)]);
        assert_eq!(policy_spf(&v), 0);
        assert_eq!(policy_sttf(&v), 0);
        assert_eq!(policy_qtti(&v, true), 0);
    }

    #[test]
    fn spf_ignores_queues() {
        let mut v = view(vec![opt(0, 9.0, 38.184), opt(1, 2.0, 24.042)]);
        v.options[1].queue = 1_000_000;
        v.options[1].ground_min = 500.0;
        assert_eq!(policy_spf(&v), 1);
    }

    #[test]
    fn sttf_ignores_queues_but_sees_congestion() {
        let mut v = view(vec![opt(0, 9.0, 38.184), opt(1, 2.0, 24.042)]);
        v.options[0].queue = 500;
        v.options[1].queue = 500;
        assert_eq!(policy_sttf(&v), 1);
        // Costs at free flow: 9 + 19.09 = 28.09 and 2 + 12.02 = 14.02; a slow
        // corridor to vertiport 1 (2 km at 5 km/h = 24 min) flips the choice.
        v.options[1].ground_speed_kmh = 5.0;
        v.options[1].ground_min = 24.0;
        assert_eq!(policy_sttf(&v), 0);
    }

    #[test]
    fn qtti_examples() {
        let mut v = view(vec![opt(0, 5.0, 20.0), opt(1, 5.0, 20.0)]);
        v.options[0].queue = 9;
        assert_eq!(policy_qtti(&v, true), 1);

        let mut v = view(vec![opt(0, 5.0, 20.0), opt(1, 5.0, 20.0)]);
        v.options[0].service_rate = 0.0;
        v.options[0].queue = 1;
        v.options[1].queue = 50;
        assert_eq!(policy_qtti(&v, true), 1);

        // q = (6, 0), rates (1, 0.5): waits 6 and 0 minutes.
        let mut v = view(vec![opt(0, 5.0, 20.0), opt(1, 5.0, 20.0)]);
        v.options[0].queue = 6;
        v.options[1].service_rate = 0.5;
        assert_eq!(qtti_cost(&v.options[0], true) - qtti_cost(&v.options[1], true), 6.0);
        assert_eq!(policy_qtti(&v, true), 1);
    }

    #[test]
    fn qtti_counts_en_route() {
        let mut v = view(vec![opt(0, 5.0, 20.0), opt(1, 5.0, 20.0)]);
        v.options[0].en_route = 4;
        v.options[1].queue = 2;
        assert_eq!(policy_qtti(&v, true), 1);
        assert_eq!(policy_qtti(&v, false), 0);
    }

    #[test]
    fn rule_based_shares() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut v = view(vec![opt(0, 5.0, 20.0), opt(1, 5.0, 20.0)]);
        v.options[0].nominal_rate = 3.0;
        let n = 10_000;
        let zeros = (0..n).filter(|_| policy_rule_based(&v, &mut rng).unwrap() == 0).count();
        let share = zeros as f64 / n as f64;
        assert!((share - 0.75).abs() < 0.02, "{share}");

        v.options[1].nominal_rate = 0.0;
        assert!((0..100).all(|_| policy_rule_based(&v, &mut rng).unwrap() == 0));
        v.options[0].nominal_rate = 0.0;
        assert_eq!(policy_rule_based(&v, &mut rng), Err(PolicyError::ZeroRates));
    }

    #[test]
    fn parse_names() {
        for k in PolicyKind::HEURISTICS {
            assert_eq!(k.name().parse::<PolicyKind>().unwrap(), k);
        }
        assert!("foo".parse::<PolicyKind>().is_err());
    }
}
