//! Vertiport queues and the eVTOL lifecycle.
//!
//! An aircraft cycles `Idle -> Boarding -> Flying -> Returning -> Charging
//! -> Idle`. It only leaves with a full cabin, flies straight to the landing
//! vertiport, returns empty to its home vertiport and recharges to full before
//! it can board again.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{euclidean_km, Point};

/// Wait reported when a vertiport has no service capacity.
pub const INFINITE_WAIT_MIN: f64 = 1e6;

pub type PassengerId = usize;
pub type EvtolId = usize;
pub type VertiportId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AirsideError {
    #[error("range violation: eVTOL {evtol} would need {needed:.3} energy with {available:.3} left")]
    RangeViolation {
        evtol: EvtolId,
        needed: f64,
        available: f64,
    },
    #[error("eVTOL {evtol} cannot go from {from:?} to {to:?}")]
    BadTransition { evtol: EvtolId, from: Phase, to: Phase },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Charging,
    Idle,
    Boarding,
    Flying,
    Returning,
}

impl Phase {
    pub fn next(self) -> Phase {
        match self {
            Phase::Charging => Phase::Idle,
            Phase::Idle => Phase::Boarding,
            Phase::Boarding => Phase::Flying,
            Phase::Flying => Phase::Returning,
            Phase::Returning => Phase::Charging,
        }
    }

    pub fn code(self) -> char {
        match self {
            Phase::Charging => 'C',
            Phase::Idle => 'I',
            Phase::Boarding => 'B',
            Phase::Flying => 'F',
            Phase::Returning => 'R',
        }
    }

    pub fn airborne(self) -> bool {
        matches!(self, Phase::Flying | Phase::Returning)
    }
}

/// Shared aircraft parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FleetParams {
    /// Seats per aircraft.
    pub seats: usize,
    pub cruise_kmh: f64,
    pub battery_max: f64,
    pub energy_per_km: f64,
}

impl FleetParams {
    pub fn flight_minutes(&self, km: f64) -> f64 {
        60.0 * km / self.cruise_kmh
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vertiport {
    pub id: VertiportId,
    pub position: Point,
    pub landing_only: bool,
    /// FCFS queue of `(passenger, enqueue time)`.
    pub queue: VecDeque<(PassengerId, f64)>,
    /// Aircraft physically on the pads (charging or idle).
    pub stationed: Vec<EvtolId>,
    /// Energy units per minute.
    pub charge_rate: f64,
    pub capacity_slots: usize,
}

impl Vertiport {
    pub fn new(id: VertiportId, position: Point, landing_only: bool, charge_rate: f64, capacity_slots: usize) -> Self {
        Self {
            id,
            position,
            landing_only,
            queue: VecDeque::new(),
            stationed: Vec::new(),
            charge_rate,
            capacity_slots,
        }
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }
}

/// A straight leg between two points flown at constant speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leg {
    pub from: Point,
    pub to: Point,
    pub start: f64,
    pub duration: f64,
    /// Battery level at take-off.
    pub battery_at_start: f64,
    pub energy: f64,
}

impl Leg {
    pub fn arrival(&self) -> f64 {
        self.start + self.duration
    }

    fn position_at(&self, t: f64) -> Point {
        if self.duration <= 0.0 {
            return self.to;
        }
        let f = ((t - self.start) / self.duration).clamp(0.0, 1.0);
        Point::new(
            self.from.x + f * (self.to.x - self.from.x),
            self.from.y + f * (self.to.y - self.from.y),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evtol {
    pub id: EvtolId,
    pub home: VertiportId,
    pub phase: Phase,
    pub battery: f64,
    pub onboard: Vec<PassengerId>,
    pub position: Point,
    /// Current ground speed, zero on the pad.
    pub speed: f64,
    pub leg: Option<Leg>,
    /// Landing vertiport of the current passenger flight.
    pub destination: Option<VertiportId>,
}

/// Things that happen to an aircraft while time advances.
#[derive(Debug, Clone, PartialEq)]
pub enum FlightEvent {
    Alighted {
        evtol: EvtolId,
        vertiport: VertiportId,
        passengers: Vec<PassengerId>,
        at: f64,
    },
    ArrivedHome { evtol: EvtolId, at: f64 },
    Charged { evtol: EvtolId, at: f64 },
}

impl Evtol {
    pub fn new(id: EvtolId, home: VertiportId, position: Point, battery_max: f64) -> Self {
        Self {
            id,
            home,
            phase: Phase::Idle,
            battery: battery_max,
            onboard: Vec::new(),
            position,
            speed: 0.0,
            leg: None,
            destination: None,
        }
    }

    fn transition(&mut self, to: Phase) -> Result<(), AirsideError> {
        if self.phase.next() != to {
            return Err(AirsideError::BadTransition {
                evtol: self.id,
                from: self.phase,
                to,
            });
        }
        self.phase = to;
        Ok(())
    }

    fn start_leg(&mut self, to: Point, now: f64, params: &FleetParams) -> Result<(), AirsideError> {
        let km = euclidean_km(self.position, to);
        let energy = km * params.energy_per_km;
        if energy > self.battery + 1e-9 {
            return Err(AirsideError::RangeViolation {
                evtol: self.id,
                needed: energy,
                available: self.battery,
            });
        }
        self.leg = Some(Leg {
            from: self.position,
            to,
            start: now,
            duration: params.flight_minutes(km),
            battery_at_start: self.battery,
            energy,
        });
        self.speed = params.cruise_kmh;
        Ok(())
    }

    /// Boards `passengers` and takes off towards `destination` at `now`.
    pub fn depart(
        &mut self,
        passengers: Vec<PassengerId>,
        destination: (VertiportId, Point),
        now: f64,
        params: &FleetParams,
    ) -> Result<(), AirsideError> {
        self.transition(Phase::Boarding)?;
        self.onboard = passengers;
        self.transition(Phase::Flying)?;
        self.destination = Some(destination.0);
        self.start_leg(destination.1, now, params)
    }

    /// Advances the aircraft from `now` to `now + dt`, carrying leftover time
    /// across phase changes (landing, return, charge completion).
    pub fn advance(
        &mut self,
        now: f64,
        dt: f64,
        params: &FleetParams,
        home_position: Point,
        charge_rate: f64,
    ) -> Result<Vec<FlightEvent>, AirsideError> {
        let end = now + dt;
        let mut t = now;
        let mut events = Vec::new();
        loop {
            match self.phase {
                Phase::Flying | Phase::Returning => {
                    let leg = self.leg.expect("airborne aircraft has a leg");
                    if leg.arrival() <= end {
                        t = leg.arrival();
                        self.position = leg.to;
                        self.battery = leg.battery_at_start - leg.energy;
                        if self.battery < 0.0 {
                            if self.battery < -1e-9 {
                                return Err(AirsideError::RangeViolation {
                                    evtol: self.id,
                                    needed: leg.energy,
                                    available: leg.battery_at_start,
                                });
                            }
                            self.battery = 0.0;
                        }
                        self.leg = None;
                        self.speed = 0.0;
                        if self.phase == Phase::Flying {
                            events.push(FlightEvent::Alighted {
                                evtol: self.id,
                                vertiport: self.destination.take().expect("flight has a destination"),
                                passengers: std::mem::take(&mut self.onboard),
                                at: t,
                            });
                            self.transition(Phase::Returning)?;
                            self.start_leg(home_position, t, params)?;
                        } else {
                            events.push(FlightEvent::ArrivedHome { evtol: self.id, at: t });
                            self.transition(Phase::Charging)?;
                        }
                    } else {
                        self.position = leg.position_at(end);
                        let flown = euclidean_km(leg.from, self.position);
                        self.battery = (leg.battery_at_start - flown * params.energy_per_km).max(0.0);
                        break;
                    }
                }
                Phase::Charging => {
                    t = charge_step(self, charge_rate, t, end - t, params.battery_max, &mut events);
                    if self.phase == Phase::Charging {
                        break;
                    }
                }
                Phase::Idle | Phase::Boarding => break,
            }
        }
        debug_assert!(t <= end + 1e-9);
        Ok(events)
    }
}

/// Charges for up to `dt` minutes starting at `now`; returns the time at which
/// charging stopped (full) or `now + dt`.
pub fn charge_step(
    e: &mut Evtol,
    rate: f64,
    now: f64,
    dt: f64,
    battery_max: f64,
    events: &mut Vec<FlightEvent>,
) -> f64 {
    debug_assert_eq!(e.phase, Phase::Charging);
    let deficit = battery_max - e.battery;
    if rate <= 0.0 {
        return now + dt;
    }
    let needed = deficit / rate;
    if needed <= dt {
        e.battery = battery_max;
        e.phase = Phase::Idle;
        let at = now + needed;
        events.push(FlightEvent::Charged { evtol: e.id, at });
        at
    } else {
        e.battery += rate * dt;
        now + dt
    }
}

/// Queue length after one step: `max(q + arrivals - departures * seats, 0)`.
pub fn queue_update(q: usize, n_arr: usize, n_dep: usize, seats: usize) -> usize {
    (q + n_arr).saturating_sub(n_dep * seats)
}

/// Expected wait in minutes for `q` passengers served at `serv_rate` per minute.
pub fn estimated_wait(q: f64, serv_rate: f64) -> f64 {
    if serv_rate > 0.0 {
        (q / serv_rate).min(INFINITE_WAIT_MIN)
    } else if q <= 0.0 {
        0.0
    } else {
        INFINITE_WAIT_MIN
    }
}

/// Passengers per minute from the mean number of departures per minute.
pub fn service_rate(mean_departures_per_min: f64, seats: usize) -> f64 {
    mean_departures_per_min * seats as f64
}

/// Trailing window of per-step departure counts.
#[derive(Debug, Clone, PartialEq)]
pub struct DepartureWindow {
    counts: VecDeque<usize>,
    len: usize,
}

impl DepartureWindow {
    pub fn new(len: usize) -> Self {
        Self {
            counts: VecDeque::with_capacity(len),
            len: len.max(1),
        }
    }

    pub fn push(&mut self, departures: usize) {
        if self.counts.len() == self.len {
            self.counts.pop_front();
        }
        self.counts.push_back(departures);
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Mean departures per minute over the recorded steps.
    pub fn mean_per_min(&self, dt_min: f64) -> f64 {
        if self.counts.is_empty() {
            return 0.0;
        }
        self.total() as f64 / (self.counts.len() as f64 * dt_min)
    }
}

/// One aircraft leaving a vertiport.
#[derive(Debug, Clone, PartialEq)]
pub struct Departure {
    pub vertiport: VertiportId,
    pub evtol: EvtolId,
    pub passengers: Vec<PassengerId>,
    pub at: f64,
}

/// Dispatch rule applied at `now`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispatchRule {
    /// Leave with fewer than a full cabin once the head of the queue has
    /// waited this long.
    pub timeout_min: Option<f64>,
    /// Leave with whatever is queued (end of demand).
    pub flush: bool,
}

/// Boards waiting passengers FCFS onto idle, fully charged aircraft stationed
/// at `vp`. Only full cabins leave unless `rule` allows otherwise.
pub fn try_dispatch(
    vp: &mut Vertiport,
    fleet: &mut [Evtol],
    destination: (VertiportId, Point),
    now: f64,
    params: &FleetParams,
    rule: DispatchRule,
) -> Result<Vec<Departure>, AirsideError> {
    let mut out = Vec::new();
    if vp.landing_only {
        return Ok(out);
    }
    loop {
        let ready = vp
            .stationed
            .iter()
            .copied()
            .filter(|&e| fleet[e].phase == Phase::Idle && fleet[e].battery >= params.battery_max)
            .min();
        let Some(evtol) = ready else { break };
        let full = vp.queue.len() >= params.seats;
        let partial_ok = !vp.queue.is_empty()
            && (rule.flush
                || rule
                    .timeout_min
                    .is_some_and(|limit| now - vp.queue[0].1 >= limit));
        if !full && !partial_ok {
            break;
        }
        let take = vp.queue.len().min(params.seats);
        let passengers: Vec<PassengerId> = vp.queue.drain(..take).map(|(p, _)| p).collect();
        fleet[evtol].depart(passengers.clone(), destination, now, params)?;
        vp.stationed.retain(|&e| e != evtol);
        out.push(Departure {
            vertiport: vp.id,
            evtol,
            passengers,
            at: now,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> FleetParams {
        FleetParams {
            seats: 3,
            cruise_kmh: 120.0,
            battery_max: 100.0,
            energy_per_km: 1.0,
        }
    }

    const V2: (VertiportId, Point) = (2, Point::new(27.0, 27.0));

    fn port_with(n_queue: usize, n_evtols: usize) -> (Vertiport, Vec<Evtol>) {
        let mut vp = Vertiport::new(1, Point::new(10.0, 10.0), false, 3.0, 4);
        for p in 0..n_queue {
            vp.queue.push_back((p, p as f64));
        }
        let fleet: Vec<Evtol> = (0..n_evtols)
            .map(|i| Evtol::new(i, 1, vp.position, 100.0))
            .collect();
        vp.stationed = (0..n_evtols).collect();
        (vp, fleet)
    }

    const FULL_ONLY: DispatchRule = DispatchRule { timeout_min: None, flush: false };

    #[test]
    fn queue_update_examples() {
        assert_eq!(queue_update(5, 2, 1, 3), 4);
        assert_eq!(queue_update(0, 0, 1, 3), 0);
        assert_eq!(queue_update(7, 0, 0, 3), 7);
    }

    #[test]
    fn wait_examples() {
        assert_eq!(estimated_wait(6.0, 2.0), 3.0);
        assert_eq!(estimated_wait(0.0, 0.7), 0.0);
        assert_eq!(estimated_wait(106.0, 1.0), 106.0);
        assert_eq!(estimated_wait(4.0, 0.0), INFINITE_WAIT_MIN);
    }

    #[test]
    fn service_rate_examples() {
        assert!((service_rate(1.0 / 3.0, 3) - 1.0).abs() < 1e-12);
        assert_eq!(service_rate(0.0, 3), 0.0);
        let mut w = DepartureWindow::new(6);
        for d in [0, 1, 0, 1, 0, 1] {
            w.push(d);
        }
        assert_eq!(service_rate(w.mean_per_min(1.0), 3), 1.5);
        w.push(1);
        assert_eq!(w.total(), 4);
    }

    #[test]
    fn dispatch_full_cabin_fcfs() {
        let (mut vp, mut fleet) = port_with(5, 1);
        let deps = try_dispatch(&mut vp, &mut fleet, V2, 10.0, &params(), FULL_ONLY).unwrap();
        assert_eq!(deps.len(), 1);
        assert_eq!(deps[0].passengers, vec![0, 1, 2]);
        assert_eq!(vp.queue_len(), 2);
        assert_eq!(fleet[0].phase, Phase::Flying);
        assert!(vp.stationed.is_empty());
    }

    #[test]
    fn no_partial_departure() {
        let (mut vp, mut fleet) = port_with(2, 1);
        let deps = try_dispatch(&mut vp, &mut fleet, V2, 10.0, &params(), FULL_ONLY).unwrap();
        assert!(deps.is_empty());
        assert_eq!(fleet[0].phase, Phase::Idle);
    }

    #[test]
    fn two_aircraft_two_departures() {
        let (mut vp, mut fleet) = port_with(6, 2);
        let deps = try_dispatch(&mut vp, &mut fleet, V2, 0.0, &params(), FULL_ONLY).unwrap();
        assert_eq!(deps.len(), 2);
        assert_eq!(deps[0].evtol, 0);
        assert_eq!(deps[1].passengers, vec![3, 4, 5]);
        assert_eq!(vp.queue_len(), 0);
    }

    #[test]
    fn timeout_and_flush_allow_partial() {
        let (mut vp, mut fleet) = port_with(2, 1);
        let rule = DispatchRule { timeout_min: Some(5.0), flush: false };
        assert!(try_dispatch(&mut vp, &mut fleet, V2, 4.0, &params(), rule).unwrap().is_empty());
        assert_eq!(try_dispatch(&mut vp, &mut fleet, V2, 5.0, &params(), rule).unwrap().len(), 1);
        let (mut vp, mut fleet) = port_with(1, 1);
        let rule = DispatchRule { timeout_min: None, flush: true };
        assert_eq!(try_dispatch(&mut vp, &mut fleet, V2, 0.0, &params(), rule).unwrap()[0].passengers, vec![0]);
    }

    #[test]
    fn uncharged_aircraft_does_not_board() {
        let (mut vp, mut fleet) = port_with(3, 1);
        fleet[0].battery = 99.0;
        assert!(try_dispatch(&mut vp, &mut fleet, V2, 0.0, &params(), FULL_ONLY).unwrap().is_empty());
    }

    fn fly(from: Point) -> (Evtol, f64) {
        let mut e = Evtol::new(0, 1, from, 100.0);
        e.depart(vec![7, 8, 9], V2, 0.0, &params()).unwrap();
        let t = e.leg.unwrap().arrival();
        (e, t)
    }

    #[test]
    fn flight_times_from_table_geometry() {
        let (_, t1) = fly(Point::new(10.0, 10.0));
        assert!((t1 - 12.021).abs() < 1e-3, "{t1}");
        let (_, t0) = fly(Point::new(0.0, 0.0));
        assert!((t0 - 19.092).abs() < 1e-3, "{t0}");
    }

    #[test]
    fn arrival_inside_a_step_does_not_overshoot() {
        let home = Point::new(10.0, 10.0);
        let (mut e, arrival) = fly(home);
        let mut events = Vec::new();
        let mut now = 0.0;
        while now < 12.0 {
            events.extend(e.advance(now, 1.0, &params(), home, 3.0).unwrap());
            now += 1.0;
        }
        assert!(events.is_empty());
        assert_eq!(e.phase, Phase::Flying);
        let ev = e.advance(now, 1.0, &params(), home, 3.0).unwrap();
        match &ev[0] {
            FlightEvent::Alighted { passengers, at, .. } => {
                assert_eq!(passengers, &vec![7, 8, 9]);
                assert!((at - arrival).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(e.phase, Phase::Returning);
        // The leftover of the step is already spent on the way back.
        let leg = e.leg.unwrap();
        assert_eq!(leg.start, arrival);
        assert!(e.position.x < 27.0);
    }

    #[test]
    fn full_cycle_returns_and_recharges() {
        let home = Point::new(10.0, 10.0);
        let (mut e, _) = fly(home);
        let mut events = Vec::new();
        let mut now = 0.0;
        while e.phase != Phase::Idle {
            events.extend(e.advance(now, 1.0, &params(), home, 3.0).unwrap());
            now += 1.0;
            assert!(e.battery >= 0.0 && e.battery <= 100.0);
        }
        assert_eq!(events.len(), 3);
        assert_eq!(e.battery, 100.0);
        assert_eq!(e.position, home);
        let used = 2.0 * 17.0 * 2f64.sqrt();
        let charged_at = match events[2] {
            FlightEvent::Charged { at, .. } => at,
            _ => unreachable!(),
        };
        let expect = 2.0 * 60.0 * 17.0 * 2f64.sqrt() / 120.0 + used / 3.0;
        assert!((charged_at - expect).abs() < 1e-9);
    }

    #[test]
    fn range_violation() {
        let p = FleetParams { energy_per_km: 10.0, ..params() };
        let mut e = Evtol::new(0, 1, Point::new(0.0, 0.0), 100.0);
        let err = e.depart(vec![1], V2, 0.0, &p).unwrap_err();
        assert!(err.to_string().contains("range violation"));
    }

    #[test]
    fn charge_examples() {
        let mut e = Evtol::new(0, 0, Point::new(0.0, 0.0), 100.0);
        e.phase = Phase::Charging;
        e.battery = 80.0;
        let mut ev = Vec::new();
        charge_step(&mut e, 10.0, 0.0, 1.0, 100.0, &mut ev);
        assert_eq!(e.battery, 90.0);
        e.battery = 99.0;
        let at = charge_step(&mut e, 10.0, 0.0, 1.0, 100.0, &mut ev);
        assert_eq!(e.battery, 100.0);
        assert_eq!(e.phase, Phase::Idle);
        assert!((at - 0.1).abs() < 1e-12);
    }

    #[test]
    fn faster_charger_refills_sooner() {
        let refill = |rate: f64| {
            let mut e = Evtol::new(0, 0, Point::new(0.0, 0.0), 100.0);
            e.phase = Phase::Charging;
            e.battery = 20.0;
            charge_step(&mut e, rate, 0.0, 1e9, 100.0, &mut Vec::new())
        };
        assert!(refill(8.0) < refill(3.0));
    }

    #[test]
    fn illegal_transition_rejected() {
        let mut e = Evtol::new(0, 0, Point::new(0.0, 0.0), 100.0);
        e.phase = Phase::Flying;
        assert!(e.depart(vec![], V2, 0.0, &params()).is_err());
    }
}
