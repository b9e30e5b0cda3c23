use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::airside::VertiportId;
use crate::env::{trip_breakdown, Env};

pub const IDENTITY_TOL: f64 = 1e-9;

/// Mean and population variance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub var: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        if xs.is_empty() {
            return Stat::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Stat { mean, var }
    }
}

/// Per-episode travel-time metrics. Each `Stat` is across passengers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub policy: String,
    pub seed: u64,
    pub passengers: usize,
    pub seats: usize,
    pub att: Stat,
    pub aet: Stat,
    pub awt: Stat,
    pub agt: Stat,
    pub aat: Stat,
    /// Take-off and landing overhead.
    pub tt_eps: Stat,
    pub departure_ids: Vec<VertiportId>,
    /// Share of air passengers per departure vertiport, in percent.
    pub rpv: Vec<f64>,
    pub total_reward: f64,
}

impl EpisodeMetrics {
    /// Reads every delivered passenger of a finished episode.
    pub fn from_env(env: &Env, policy: &str, seed: u64, total_reward: f64) -> Result<Self> {
        let eps = env.config().tt_eps_min;
        let mut cols: [Vec<f64>; 6] = Default::default();
        let ids = env.departure_ids().to_vec();
        let mut counts = vec![0usize; ids.len()];
        for p in env.passengers() {
            let b = trip_breakdown(p, eps)?;
            for (c, v) in cols.iter_mut().zip([b.total(), b.effective(), b.wait, b.ground(), b.air, b.overhead]) {
                c.push(v);
            }
            if let Some(k) = p.departure_vp.filter(|_| !p.ground_only) {
                let idx = ids.iter().position(|&d| d == k).expect("departure vertiport");
                counts[idx] += 1;
            }
        }
        let air: usize = counts.iter().sum();
        let rpv = counts
            .iter()
            .map(|&c| if air == 0 { 0.0 } else { 100.0 * c as f64 / air as f64 })
            .collect();
        let [att, aet, awt, agt, aat, tt_eps] = cols.map(|c| Stat::of(&c));
        Ok(Self {
            policy: policy.to_string(),
            seed,
            passengers: env.passengers().len(),
            seats: env.config().seats,
            att,
            aet,
            awt,
            agt,
            aat,
            tt_eps,
            departure_ids: ids,
            rpv,
            total_reward,
        })
    }

    /// ATT = AWT + AET, AET = AGT + AAT + TT^eps, and RPV sums to 100 when
    /// anyone flew.
    pub fn check_identities(&self) -> Result<()> {
        let fail = |what: &str, l: f64, r: f64| {
            Err(HarnessError::Identity(format!(
                "{} seed {}: {what}: {l} vs {r}",
                self.policy, self.seed
            )))
        };
        let r = self.awt.mean + self.aet.mean;
        if (self.att.mean - r).abs() > IDENTITY_TOL {
            return fail("ATT != AWT + AET", self.att.mean, r);
        }
        let r = self.agt.mean + self.aat.mean + self.tt_eps.mean;
        if (self.aet.mean - r).abs() > IDENTITY_TOL {
            return fail("AET != AGT + AAT + TT_eps", self.aet.mean, r);
        }
        let s: f64 = self.rpv.iter().sum();
        if s != 0.0 && (s - 100.0).abs() > IDENTITY_TOL {
            return fail("RPV total", s, 100.0);
        }
        Ok(())
    }

    fn stats(&self) -> [Stat; 6] {
        [self.att, self.aet, self.awt, self.agt, self.aat, self.tt_eps]
    }
}

pub const METRIC_NAMES: [&str; 6] = ["att", "aet", "awt", "agt", "aat", "tt_eps"];

/// One across-episode row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    pub passengers: usize,
    pub seats: usize,
    pub episodes: usize,
    /// Per metric, in [`METRIC_NAMES`] order: episode means averaged, with
    /// their variance across episodes.
    pub across_seeds: Vec<Stat>,
    /// Per metric: within-episode (across-passenger) variance, averaged.
    pub mean_passenger_var: Vec<f64>,
    pub departure_ids: Vec<VertiportId>,
    pub rpv: Vec<Stat>,
}

impl SummaryRow {
    pub fn metric(&self, name: &str) -> Option<Stat> {
        METRIC_NAMES.iter().position(|m| *m == name).map(|i| self.across_seeds[i])
    }
}

pub fn aggregate(episodes: &[EpisodeMetrics]) -> Result<SummaryRow> {
    let first = episodes.first().ok_or(HarnessError::Empty)?;
    if let Some(e) = episodes.iter().find(|e| {
        (&e.policy, e.passengers, e.seats, &e.departure_ids) != (&first.policy, first.passengers, first.seats, &first.departure_ids)
    }) {
        return Err(HarnessError::Config(format!(
            "cannot aggregate {} / {} passengers / C={} with {} / {} passengers / C={}",
            first.policy, first.passengers, first.seats, e.policy, e.passengers, e.seats
        )));
    }
    let across_seeds = (0..METRIC_NAMES.len())
        .map(|i| Stat::of(&episodes.iter().map(|e| e.stats()[i].mean).collect::<Vec<_>>()))
        .collect();
    let mean_passenger_var = (0..METRIC_NAMES.len())
        .map(|i| Stat::of(&episodes.iter().map(|e| e.stats()[i].var).collect::<Vec<_>>()).mean)
        .collect();
    let rpv = (0..first.rpv.len())
        .map(|k| Stat::of(&episodes.iter().map(|e| e.rpv[k]).collect::<Vec<_>>()))
        .collect();
    Ok(SummaryRow {
        policy: first.policy.clone(),
        passengers: first.passengers,
        seats: first.seats,
        episodes: episodes.len(),
        across_seeds,
        mean_passenger_var,
        departure_ids: first.departure_ids.clone(),
        rpv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(seed: u64, att: f64) -> EpisodeMetrics {
        let s = |m: f64| Stat { mean: m, var: 1.0 };
        EpisodeMetrics {
            policy: "qtti".into(),
            seed,
            passengers: 10,
            seats: 3,
            att: s(att),
            aet: s(att - 5.0),
            awt: s(5.0),
            agt: s(att - 25.0),
            aat: s(20.0),
            tt_eps: s(0.0),
            departure_ids: vec![0, 1],
            rpv: vec![40.0, 60.0],
            total_reward: -att,
        }
    }

    #[test]
    fn stat_matches_direct_formula() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 6.0]);
        assert_eq!(s.mean, 3.0);
        assert_eq!(s.var, 3.5);
        assert_eq!(Stat::of(&[]), Stat::default());
    }

    #[test]
    fn single_episode_summary_equals_episode() {
        let e = sample(0, 50.0);
        let s = aggregate(std::slice::from_ref(&e)).unwrap();
        assert_eq!(s.episodes, 1);
        assert_eq!(s.metric("att").unwrap(), Stat { mean: 50.0, var: 0.0 });
        assert_eq!(s.mean_passenger_var[0], 1.0);
        assert_eq!(s.rpv[1].mean, 60.0);
    }

    #[test]
    fn duplicated_episode_has_zero_seed_variance() {
        let e = sample(0, 50.0);
        let s = aggregate(&[e.clone(), e]).unwrap();
        assert!(s.across_seeds.iter().all(|m| m.var == 0.0));
    }

    #[test]
    fn aggregate_rejects_empty_and_mixed() {
        assert!(matches!(aggregate(&[]), Err(HarnessError::Empty)));
        let mut b = sample(1, 40.0);
        b.seats = 4;
        assert!(aggregate(&[sample(0, 50.0), b]).is_err());
    }

    #[test]
    fn identity_check() {
        assert!(sample(0, 50.0).check_identities().is_ok());
        let mut bad = sample(0, 50.0);
        bad.awt.mean += 1e-6;
        assert!(bad.check_identities().is_err());
        let mut rpv = sample(0, 50.0);
        rpv.rpv = vec![50.0, 49.0];
        assert!(rpv.check_identities().is_err());
    }

    #[test]
    fn reported_spf_row_adds_up() {
        // AWT 27.12 + AET 106.53 = ATT 133.65
        let total = 27.12 + 106.53;
        assert!((total - 133.65f64).abs() <= 0.01);
    }
}
