//! The four output files: `metrics.csv`, `summary.csv`, `trace.jsonl` and
//! `cdf.csv`. Floats use Rust's shortest round-trip formatting, so the same
//! inputs give the same bytes everywhere.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{EpisodeMetrics, SummaryRow, METRIC_NAMES};
use super::{Episode, HarnessError, Result};
use crate::env::{EventKind, TraceEvent};

/// One line of `trace.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub policy: String,
    pub seed: u64,
    #[serde(flatten)]
    pub event: TraceEvent,
}

fn check_layout(rows: &[&[usize]]) -> Result<()> {
    if rows.windows(2).any(|w| w[0] != w[1]) {
        return Err(HarnessError::Config("episodes with different vertiport layouts in one export".into()));
    }
    Ok(())
}

pub fn write_metrics<W: Write>(out: W, episodes: &[EpisodeMetrics]) -> Result<()> {
    check_layout(&episodes.iter().map(|e| e.departure_ids.as_slice()).collect::<Vec<_>>())?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["policy".to_string(), "seed".into(), "passengers".into(), "seats".into()];
    for m in METRIC_NAMES {
        header.push(m.to_string());
        header.push(format!("{m}_var"));
    }
    if let Some(e) = episodes.first() {
        header.extend(e.departure_ids.iter().map(|k| format!("rpv_{k}")));
    }
    header.push("total_reward".into());
    w.write_record(&header)?;
    for e in episodes {
        e.check_identities()?;
        let mut row = vec![e.policy.clone(), e.seed.to_string(), e.passengers.to_string(), e.seats.to_string()];
        for s in [e.att, e.aet, e.awt, e.agt, e.aat, e.tt_eps] {
            row.push(s.mean.to_string());
            row.push(s.var.to_string());
        }
        row.extend(e.rpv.iter().map(|r| r.to_string()));
        row.push(e.total_reward.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Both variance conventions are written: across episodes (`_var_seeds`) and
/// the mean within-episode across-passenger variance (`_var_pax`).
pub fn write_summary<W: Write>(out: W, rows: &[SummaryRow]) -> Result<()> {
    check_layout(&rows.iter().map(|r| r.departure_ids.as_slice()).collect::<Vec<_>>())?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["policy".to_string(), "passengers".into(), "seats".into(), "episodes".into()];
    for m in METRIC_NAMES {
        header.push(m.to_string());
        header.push(format!("{m}_var_seeds"));
        header.push(format!("{m}_var_pax"));
    }
    if let Some(r) = rows.first() {
        for k in &r.departure_ids {
            header.push(format!("rpv_{k}"));
            header.push(format!("rpv_{k}_var_seeds"));
        }
    }
    w.write_record(&header)?;
    for r in rows {
        let mut row = vec![r.policy.clone(), r.passengers.to_string(), r.seats.to_string(), r.episodes.to_string()];
        for (s, v) in r.across_seeds.iter().zip(&r.mean_passenger_var) {
            row.push(s.mean.to_string());
            row.push(s.var.to_string());
            row.push(v.to_string());
        }
        for s in &r.rpv {
            row.push(s.mean.to_string());
            row.push(s.var.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace<W: Write>(out: W, episodes: &[Episode]) -> Result<()> {
    let mut w = BufWriter::new(out);
    for e in episodes {
        for ev in &e.trace {
            let rec = TraceRecord { policy: e.metrics.policy.clone(), seed: e.metrics.seed, event: ev.clone() };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Per policy, every passenger's door-to-door time in ascending order with its
/// empirical cumulative fraction.
pub fn write_cdf<W: Write>(out: W, episodes: &[Episode]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["policy", "total_min", "cum_frac"])?;
    let mut policies: Vec<&str> = Vec::new();
    for e in episodes {
        if !policies.contains(&e.metrics.policy.as_str()) {
            policies.push(&e.metrics.policy);
        }
    }
    for p in policies {
        let mut t: Vec<f64> = episodes.iter().filter(|e| e.metrics.policy == p).flat_map(|e| e.totals.iter().copied()).collect();
        t.sort_by(f64::total_cmp);
        let n = t.len() as f64;
        for (i, v) in t.iter().enumerate() {
            w.write_record([p.to_string(), v.to_string(), ((i + 1) as f64 / n).to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rebuilds the queue vector from enqueue and depart events and checks it
/// against the vector recorded on every event. Records of different episodes
/// may be interleaved only at episode boundaries.
pub fn validate_trace(records: &[TraceRecord]) -> Result<()> {
    let mut current: Option<(&str, u64)> = None;
    let mut queues: Vec<usize> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let key = (r.policy.as_str(), r.seed);
        if current != Some(key) {
            current = Some(key);
            queues = vec![0; r.event.queues.len()];
        }
        let ev = &r.event;
        match ev.kind {
            EventKind::Enqueue | EventKind::Depart => {
                let v = ev.vertiport.ok_or_else(|| HarnessError::Trace(format!("record {i}: no vertiport")))?;
                let q = queues.get_mut(v).ok_or_else(|| HarnessError::Trace(format!("record {i}: vertiport {v} out of range")))?;
                if ev.kind == EventKind::Enqueue {
                    *q += 1;
                } else {
                    *q = q.checked_sub(ev.passengers.len()).ok_or_else(|| {
                        HarnessError::Trace(format!("record {i}: {} boarded from a queue of {q}", ev.passengers.len()))
                    })?;
                }
            }
            _ => {}
        }
        if ev.queues != queues {
            return Err(HarnessError::Trace(format!(
                "record {i} ({:?} at step {}): recorded queues {:?}, replay gives {:?}",
                ev.kind, ev.step, ev.queues, queues
            )));
        }
    }
    Ok(())
}

/// Writes all four files into `dir`, checking metric identities and trace
/// consistency on the way.
pub fn export(dir: &Path, episodes: &[Episode], summary: &[SummaryRow]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let metrics: Vec<EpisodeMetrics> = episodes.iter().map(|e| e.metrics.clone()).collect();
    write_metrics(std::fs::File::create(dir.join("metrics.csv"))?, &metrics)?;
    write_summary(std::fs::File::create(dir.join("summary.csv"))?, summary)?;
    let mut trace = Vec::new();
    write_trace(&mut trace, episodes)?;
    validate_trace(&read_trace(trace.as_slice())?)?;
    std::fs::write(dir.join("trace.jsonl"), &trace)?;
    write_cdf(std::fs::File::create(dir.join("cdf.csv"))?, episodes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvConfig;
    use crate::harness::{aggregate, run_episode, Heuristic, Scenario};
    use crate::policies::PolicyKind;

    fn episodes() -> Vec<Episode> {
        let sc = Scenario::new(EnvConfig { total_passengers: 25, ..EnvConfig::default() }).unwrap();
        let mut p = Heuristic::new(PolicyKind::RuleBased).unwrap();
        (0..3).map(|s| run_episode(&sc, &mut p, s, true).unwrap()).collect()
    }

    #[test]
    fn trace_round_trip() {
        let eps = episodes();
        let mut buf = Vec::new();
        write_trace(&mut buf, &eps).unwrap();
        let back = read_trace(buf.as_slice()).unwrap();
        let flat: Vec<_> = eps.iter().flat_map(|e| e.trace.iter()).collect();
        assert_eq!(back.len(), flat.len());
        for (r, e) in back.iter().zip(flat) {
            assert_eq!(&r.event, e);
        }
        validate_trace(&back).unwrap();
        assert!(buf.ends_with(b"\n"));
    }

    #[test]
    fn tampered_trace_is_caught() {
        let eps = episodes();
        let mut buf = Vec::new();
        write_trace(&mut buf, &eps[..1]).unwrap();
        let mut recs = read_trace(buf.as_slice()).unwrap();
        let i = recs.iter().position(|r| r.event.kind == EventKind::Enqueue).unwrap();
        recs.remove(i);
        assert!(validate_trace(&recs).is_err());
    }

    #[test]
    fn files_have_expected_shape() {
        let eps = episodes();
        let summary = vec![aggregate(&eps.iter().map(|e| e.metrics.clone()).collect::<Vec<_>>()).unwrap()];
        let dir = tempfile::tempdir().unwrap();
        export(dir.path(), &eps, &summary).unwrap();
        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 1 + eps.len());
        assert!(metrics.starts_with("policy,seed,passengers,seats,att,att_var,aet,"));
        assert!(metrics.ends_with('\n'));
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 2);
        let cdf = std::fs::read_to_string(dir.path().join("cdf.csv")).unwrap();
        let vals: Vec<f64> = cdf.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
        assert_eq!(vals.len(), 75);
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
    }
}
