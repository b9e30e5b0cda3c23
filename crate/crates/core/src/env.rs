//! The vertiport-selection decision process.
//!
//! Each call to [`Env::step`] assigns the passenger that is currently
//! requesting a trip to a departure vertiport, then advances the simulation
//! one tick at a time until the next request appears (or every passenger has
//! been delivered). The reward of a call is the negated change in the running
//! mean time-in-system, so the rewards of an episode sum to minus the average
//! total travel time.

use std::collections::{BTreeSet, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::airside::{
    self, AirsideError, DepartureWindow, DispatchRule, Evtol, FleetParams, FlightEvent,
    PassengerId, Vertiport, VertiportId,
};
use crate::world::{self, euclidean_km, GroundNetwork, Point, TrafficField, WorldError};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid action {action}: departure vertiports are {allowed:?}")]
    InvalidAction { action: usize, allowed: Vec<usize> },
    #[error("episode already finished")]
    Finished,
    #[error("passenger {0} has not been delivered")]
    NotDelivered(PassengerId),
    #[error("instance too large for exhaustive search: {0} decisions left (max {1})")]
    TooLarge(usize, usize),
    #[error("simulation did not drain within {0} ticks")]
    Runaway(usize),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Airside(#[from] AirsideError),
}

pub type Result<T, E = EnvError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VertiportConfig {
    pub x: f64,
    pub y: f64,
    /// Aircraft based here.
    #[serde(default)]
    pub fleet: usize,
    /// Energy units per minute.
    #[serde(default)]
    pub charge_rate: f64,
    #[serde(default)]
    pub landing_only: bool,
}

/// Scales that map raw state quantities into `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureScales {
    pub distance_km: f64,
    pub queue: f64,
    pub en_route: f64,
}

impl Default for FeatureScales {
    fn default() -> Self {
        Self {
            distance_km: 60.0,
            queue: 60.0,
            en_route: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Steps during which new requests may appear.
    pub horizon_steps: usize,
    pub dt_min: f64,
    pub total_passengers: usize,
    /// Steps between consecutive requests.
    pub request_interval_steps: usize,
    pub map_km: f64,
    pub cell_km: f64,
    /// Impassable lattice nodes as `[col, row]`.
    pub blocked: Vec<[usize; 2]>,
    pub vertiports: Vec<VertiportConfig>,
    pub traffic: TrafficField,
    /// Lower bound on ground speed so a saturated corridor still drains.
    pub ground_speed_floor_kmh: f64,
    pub seats: usize,
    pub cruise_kmh: f64,
    pub battery_max: f64,
    pub energy_per_km: f64,
    pub od_min_km: f64,
    pub od_max_km: f64,
    /// Vertiport whose surroundings host the dense-urban origins.
    pub urban_vertiport: usize,
    pub urban_radius_km: [f64; 2],
    /// Vertiport whose surroundings host the suburban origins.
    pub suburban_vertiport: usize,
    pub suburban_radius_km: [f64; 2],
    /// Destinations are drawn within this radius of the landing vertiport.
    pub destination_radius_km: f64,
    /// Fixed take-off and landing overhead added to every delivered trip.
    pub tt_eps_min: f64,
    /// Steps in the trailing departure window used for service rates.
    pub service_window_steps: usize,
    /// Frames in a state stack.
    pub stack_len: usize,
    /// Allow partially filled departures after this wait, if set.
    pub dispatch_timeout_min: Option<f64>,
    pub scales: FeatureScales,
    /// Append the fraction of requests issued so far to every frame.
    pub progress_feature: bool,
    /// Safety bound on ticks per episode.
    pub max_ticks: usize,
}

/// Energy per km such that the longest home round trip uses 80 units of a
/// 100-unit battery.
fn default_energy_per_km(vps: &[VertiportConfig]) -> f64 {
    let landing = vps.iter().find(|v| v.landing_only).expect("a landing vertiport");
    let longest = vps
        .iter()
        .filter(|v| !v.landing_only)
        .map(|v| euclidean_km(Point::new(v.x, v.y), Point::new(landing.x, landing.y)))
        .fold(0.0, f64::max);
    80.0 / (2.0 * longest)
}

impl Default for EnvConfig {
    fn default() -> Self {
        let vertiports = vec![
            VertiportConfig { x: 0.0, y: 0.0, fleet: 3, charge_rate: 8.0, landing_only: false },
            VertiportConfig { x: 10.0, y: 10.0, fleet: 1, charge_rate: 3.0, landing_only: false },
            VertiportConfig { x: 27.0, y: 27.0, fleet: 0, charge_rate: 0.0, landing_only: true },
        ];
        Self {
            horizon_steps: 600,
            dt_min: 2.0,
            total_passengers: 300,
            request_interval_steps: 2,
            map_km: 30.0,
            cell_km: 1.0,
            blocked: Vec::new(),
            energy_per_km: default_energy_per_km(&vertiports),
            vertiports,
            traffic: TrafficField::default(),
            ground_speed_floor_kmh: 5.0,
            seats: 3,
            cruise_kmh: 120.0,
            battery_max: 100.0,
            od_min_km: 42.0,
            od_max_km: 48.0,
            urban_vertiport: 1,
            urban_radius_km: [0.0, 6.0],
            suburban_vertiport: 0,
            suburban_radius_km: [6.0, 12.0],
            destination_radius_km: 6.0,
            tt_eps_min: 0.0,
            service_window_steps: 30,
            stack_len: 6,
            dispatch_timeout_min: None,
            scales: FeatureScales::default(),
            progress_feature: false,
            max_ticks: 200_000,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(EnvError::Config(m));
        if self.horizon_steps == 0 {
            return err("horizon_steps must be positive".into());
        }
        if !(self.dt_min > 0.0) {
            return err("dt_min must be positive".into());
        }
        if self.request_interval_steps == 0 {
            return err("request_interval_steps must be positive".into());
        }
        if self.total_passengers == 0 {
            return err("total_passengers must be positive".into());
        }
        let last_request = (self.total_passengers - 1) * self.request_interval_steps;
        if last_request >= self.horizon_steps {
            return err(format!(
                "total_passengers {} at one request every {} steps does not fit the {}-step horizon",
                self.total_passengers, self.request_interval_steps, self.horizon_steps
            ));
        }
        if self.seats == 0 {
            return err("seats must be positive".into());
        }
        if self.stack_len == 0 {
            return err("stack_len must be positive".into());
        }
        if !(self.cruise_kmh > 0.0 && self.battery_max > 0.0 && self.energy_per_km >= 0.0) {
            return err("cruise_kmh, battery_max must be positive and energy_per_km non-negative".into());
        }
        if !(self.od_min_km >= 0.0 && self.od_min_km <= self.od_max_km) {
            return err(format!("od range [{}, {}] is empty", self.od_min_km, self.od_max_km));
        }
        self.traffic.validate().map_err(EnvError::Config)?;
        if !(self.ground_speed_floor_kmh > 0.0) {
            return err("ground_speed_floor_kmh must be positive".into());
        }
        let landing: Vec<_> = self.vertiports.iter().filter(|v| v.landing_only).collect();
        if landing.len() != 1 {
            return err(format!("exactly one landing-only vertiport required, found {}", landing.len()));
        }
        let landing = Point::new(landing[0].x, landing[0].y);
        if self.departure_ids().is_empty() {
            return err("no departure vertiport".into());
        }
        for (i, v) in self.vertiports.iter().enumerate() {
            if !(0.0..=self.map_km).contains(&v.x) || !(0.0..=self.map_km).contains(&v.y) {
                return err(format!("vertiport {i} lies outside the map"));
            }
            if v.landing_only {
                continue;
            }
            let round_trip = 2.0 * euclidean_km(Point::new(v.x, v.y), landing) * self.energy_per_km;
            if round_trip > self.battery_max + 1e-9 {
                return err(format!(
                    "vertiport {i}: round trip needs {round_trip:.2} energy, battery holds {}",
                    self.battery_max
                ));
            }
            if v.fleet > 0 && !(v.charge_rate > 0.0) {
                return err(format!("vertiport {i}: charge_rate must be positive"));
            }
        }
        for idx in [self.urban_vertiport, self.suburban_vertiport] {
            if self.vertiports.get(idx).is_none_or(|v| v.landing_only) {
                return err(format!("origin anchor {idx} is not a departure vertiport"));
            }
        }
        Ok(())
    }

    pub fn departure_ids(&self) -> Vec<VertiportId> {
        (0..self.vertiports.len())
            .filter(|&i| !self.vertiports[i].landing_only)
            .collect()
    }

    pub fn landing_id(&self) -> VertiportId {
        self.vertiports.iter().position(|v| v.landing_only).expect("validated")
    }

    pub fn fleet_size(&self) -> usize {
        self.vertiports.iter().map(|v| v.fleet).sum()
    }

    pub fn position(&self, v: VertiportId) -> Point {
        Point::new(self.vertiports[v].x, self.vertiports[v].y)
    }

    /// Width of one state frame.
    pub fn frame_width(&self) -> usize {
        4 + 7 * self.departure_ids().len() + 3 * self.fleet_size() + usize::from(self.progress_feature)
    }

    pub fn build_network(&self) -> Result<GroundNetwork> {
        let blocked: BTreeSet<(usize, usize)> = self.blocked.iter().map(|b| (b[0], b[1])).collect();
        let net = GroundNetwork::new(self.map_km, self.cell_km, &blocked)?;
        for (i, v) in self.vertiports.iter().enumerate() {
            if !net.is_open(nearest_lattice(&net, Point::new(v.x, v.y))) {
                return Err(EnvError::Config(format!("vertiport {i} sits on a blocked cell")));
            }
        }
        Ok(net)
    }

    pub fn fleet_params(&self) -> FleetParams {
        FleetParams {
            seats: self.seats,
            cruise_kmh: self.cruise_kmh,
            battery_max: self.battery_max,
            energy_per_km: self.energy_per_km,
        }
    }

    /// Nominal passengers per minute of each departure vertiport: full cabins
    /// over one fly-out, return and recharge cycle.
    pub fn nominal_service_rates(&self) -> Vec<f64> {
        let landing = self.position(self.landing_id());
        self.departure_ids()
            .into_iter()
            .map(|k| {
                let v = &self.vertiports[k];
                if v.fleet == 0 {
                    return 0.0;
                }
                let km = euclidean_km(self.position(k), landing);
                let cycle = 2.0 * 60.0 * km / self.cruise_kmh + 2.0 * km * self.energy_per_km / v.charge_rate;
                v.fleet as f64 * self.seats as f64 / cycle
            })
            .collect()
    }
}

fn nearest_lattice(net: &GroundNetwork, p: Point) -> usize {
    let side = net.side();
    let col = (p.x / net.cell_km()).round().clamp(0.0, (side - 1) as f64) as usize;
    let row = (p.y / net.cell_km()).round().clamp(0.0, (side - 1) as f64) as usize;
    row * side + col
}

/// Where a passenger currently is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Not yet requested.
    Pending,
    /// Requested, waiting for its assignment.
    Requesting,
    ToVertiport,
    Queued,
    Onboard,
    FinalLeg,
    Delivered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passenger {
    pub id: PassengerId,
    pub origin: Point,
    pub destination: Point,
    /// Step at which the request appears.
    pub request_step: usize,
    pub t_request: f64,
    pub departure_vp: Option<VertiportId>,
    pub landing_vp: VertiportId,
    /// Ground-only trip (no air legs).
    pub ground_only: bool,
    pub t_enqueue: Option<f64>,
    pub t_board: Option<f64>,
    pub t_alight: Option<f64>,
    pub t_delivered: Option<f64>,
    pub stage: Stage,
    /// Lattice distance to each departure vertiport, in departure-id order.
    pub access_km: Vec<f64>,
    /// Lattice distance from the landing vertiport to the destination.
    pub egress_km: f64,
    /// Lattice distance from origin to destination.
    pub od_km: f64,
}

/// Stage durations of a delivered trip, in minutes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripBreakdown {
    pub ground_access: f64,
    pub wait: f64,
    pub air: f64,
    pub ground_egress: f64,
    pub overhead: f64,
}

impl TripBreakdown {
    pub fn total(&self) -> f64 {
        self.ground_access + self.wait + self.air + self.ground_egress + self.overhead
    }

    pub fn effective(&self) -> f64 {
        self.total() - self.wait
    }

    pub fn ground(&self) -> f64 {
        self.ground_access + self.ground_egress
    }
}

/// Door-to-door time of a delivered passenger, rebuilt from its timestamps.
pub fn total_travel_time(p: &Passenger, tt_eps_min: f64) -> Result<f64> {
    trip_breakdown(p, tt_eps_min).map(|b| b.total())
}

pub fn trip_breakdown(p: &Passenger, tt_eps_min: f64) -> Result<TripBreakdown> {
    match (p.t_enqueue, p.t_board, p.t_alight, p.t_delivered) {
        (Some(enq), Some(board), Some(alight), Some(done)) if p.stage == Stage::Delivered => {
            Ok(TripBreakdown {
                ground_access: enq - p.t_request,
                wait: board - enq,
                air: alight - board,
                ground_egress: done - alight,
                overhead: if p.ground_only { 0.0 } else { tt_eps_min },
            })
        }
        _ => Err(EnvError::NotDelivered(p.id)),
    }
}

/// What the heuristic policies see about one departure vertiport.
#[derive(Debug, Clone, PartialEq)]
pub struct VertiportView {
    pub id: VertiportId,
    pub ground_km: f64,
    pub ground_speed_kmh: f64,
    pub ground_min: f64,
    pub air_km: f64,
    pub air_min: f64,
    pub queue: usize,
    pub en_route: usize,
    /// Realised service rate (passengers/min) over the trailing window.
    pub service_rate: f64,
    pub nominal_rate: f64,
}

/// Decision context for the focal passenger.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionView {
    pub passenger: PassengerId,
    pub origin: Point,
    pub destination: Point,
    pub od_km: f64,
    pub ground_only_min: f64,
    pub options: Vec<VertiportView>,
}

/// Raw state features of one decision time; see [`EnvConfig::frame_width`].
///
/// Layout: `[o.x, o.y, d.x, d.y]`, then per departure vertiport
/// `[access distance, ground speed, en-route count, queue, pos.x, pos.y,
/// charge rate]`, then per aircraft `[speed, onboard, battery]`.
pub type StateFrame = Vec<f64>;

/// The last `K` frames, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct StateStack {
    frames: VecDeque<StateFrame>,
    len: usize,
}

impl StateStack {
    pub fn new(first: StateFrame, len: usize) -> Self {
        Self {
            frames: std::iter::repeat_n(first, len).collect(),
            len,
        }
    }

    pub fn push(&mut self, frame: StateFrame) {
        self.frames.pop_front();
        self.frames.push_back(frame);
        debug_assert_eq!(self.frames.len(), self.len);
    }

    pub fn frames(&self) -> impl Iterator<Item = &StateFrame> {
        self.frames.iter()
    }

    pub fn latest(&self) -> &StateFrame {
        self.frames.back().expect("non-empty stack")
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Frames concatenated row-major (`K x width`).
    pub fn flatten(&self) -> Vec<f64> {
        self.frames.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Request,
    Assign,
    Enqueue,
    Depart,
    Alight,
    ArriveHome,
    Charged,
    Deliver,
    Tick,
}

/// One line of the episode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub step: usize,
    pub time: f64,
    pub kind: EventKind,
    pub passenger: Option<PassengerId>,
    pub passengers: Vec<PassengerId>,
    pub vertiport: Option<VertiportId>,
    pub evtol: Option<usize>,
    /// Queue lengths of all vertiports after the event.
    pub queues: Vec<usize>,
    /// Phase codes of all aircraft after the event.
    pub phases: String,
    pub reward: Option<f64>,
}

/// How the focal passenger travels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    Vertiport(VertiportId),
    GroundOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub ticks: usize,
    pub delivered: usize,
    pub now: f64,
}

#[derive(Debug, Clone)]
pub struct Env {
    cfg: Arc<EnvConfig>,
    net: Arc<GroundNetwork>,
    departure_ids: Vec<VertiportId>,
    landing: VertiportId,
    params: FleetParams,
    nominal_rates: Vec<f64>,
    passengers: Vec<Passenger>,
    vertiports: Vec<Vertiport>,
    fleet: Vec<Evtol>,
    windows: Vec<DepartureWindow>,
    /// Passengers on the access leg, by departure-id index.
    to_vertiport: Vec<Vec<PassengerId>>,
    /// Passengers on the egress leg (or a ground-only trip).
    final_leg: Vec<PassengerId>,
    step: usize,
    now: f64,
    issued: usize,
    focal: Option<PassengerId>,
    delivered: usize,
    stack: StateStack,
    mean_time: f64,
    peak_queue: Vec<usize>,
    trace: Option<Vec<TraceEvent>>,
}

impl Env {
    /// Builds the network and starts an episode.
    pub fn new(cfg: EnvConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let net = Arc::new(cfg.build_network()?);
        Self::with_network(Arc::new(cfg), net, seed)
    }

    /// Starts an episode on a prebuilt network.
    pub fn with_network(cfg: Arc<EnvConfig>, net: Arc<GroundNetwork>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let departure_ids = cfg.departure_ids();
        let landing = cfg.landing_id();
        let passengers = sample_passengers(&cfg, &net, &departure_ids, landing, seed)?;
        let vertiports: Vec<Vertiport> = cfg
            .vertiports
            .iter()
            .enumerate()
            .map(|(i, v)| Vertiport::new(i, cfg.position(i), v.landing_only, v.charge_rate, v.fleet))
            .collect();
        let mut env = Self {
            params: cfg.fleet_params(),
            nominal_rates: cfg.nominal_service_rates(),
            windows: vec![DepartureWindow::new(cfg.service_window_steps); departure_ids.len()],
            to_vertiport: vec![Vec::new(); departure_ids.len()],
            final_leg: Vec::new(),
            passengers,
            vertiports,
            fleet: Vec::new(),
            departure_ids,
            landing,
            step: 0,
            now: 0.0,
            issued: 0,
            focal: None,
            delivered: 0,
            stack: StateStack::new(Vec::new(), cfg.stack_len),
            mean_time: 0.0,
            peak_queue: vec![0; cfg.vertiports.len()],
            trace: None,
            cfg,
            net,
        };
        for v in 0..env.vertiports.len() {
            for _ in 0..env.cfg.vertiports[v].fleet {
                let id = env.fleet.len();
                env.fleet.push(Evtol::new(id, v, env.vertiports[v].position, env.params.battery_max));
                env.vertiports[v].stationed.push(id);
            }
        }
        env.issue_requests();
        let frame = env.assemble_state();
        env.stack = StateStack::new(frame, env.cfg.stack_len);
        Ok(env)
    }

    /// Starts recording a trace from the current state.
    pub fn enable_trace(&mut self) {
        let mut trace = Vec::new();
        if let Some(p) = self.focal {
            trace.push(self.event(EventKind::Request, Some(p), None, None));
        }
        self.trace = Some(trace);
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        self.trace.take().unwrap_or_default()
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn network(&self) -> &GroundNetwork {
        &self.net
    }

    pub fn passengers(&self) -> &[Passenger] {
        &self.passengers
    }

    pub fn vertiports(&self) -> &[Vertiport] {
        &self.vertiports
    }

    pub fn fleet(&self) -> &[Evtol] {
        &self.fleet
    }

    pub fn departure_ids(&self) -> &[VertiportId] {
        &self.departure_ids
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn focal(&self) -> Option<PassengerId> {
        self.focal
    }

    pub fn is_done(&self) -> bool {
        self.delivered == self.cfg.total_passengers
    }

    pub fn stack(&self) -> &StateStack {
        &self.stack
    }

    pub fn peak_queues(&self) -> &[usize] {
        &self.peak_queue
    }

    /// Decisions still to be made in this episode, including the current one.
    pub fn decisions_left(&self) -> usize {
        self.cfg.total_passengers - self.issued + usize::from(self.focal.is_some())
    }

    /// Number of passengers whose request has appeared.
    pub fn arrived(&self) -> usize {
        self.issued
    }

    /// Counts of `(to vertiport, queued, onboard, final leg, delivered)`.
    pub fn stage_counts(&self) -> [usize; 5] {
        let mut c = [0; 5];
        for p in &self.passengers {
            match p.stage {
                Stage::ToVertiport | Stage::Requesting => c[0] += 1,
                Stage::Queued => c[1] += 1,
                Stage::Onboard => c[2] += 1,
                Stage::FinalLeg => c[3] += 1,
                Stage::Delivered => c[4] += 1,
                Stage::Pending => {}
            }
        }
        c
    }

    fn index_of(&self, v: VertiportId) -> Option<usize> {
        self.departure_ids.iter().position(|&d| d == v)
    }

    fn ground_speed(&self, en_route: usize) -> Result<f64> {
        let k = world::corridor_density(&self.cfg.traffic, en_route);
        Ok(world::greenberg_speed(&self.cfg.traffic, k)?.max(self.cfg.ground_speed_floor_kmh))
    }

    fn air_km(&self, k: VertiportId) -> f64 {
        euclidean_km(self.vertiports[k].position, self.vertiports[self.landing].position)
    }

    fn realised_rate(&self, idx: usize) -> f64 {
        let w = &self.windows[idx];
        if w.total() == 0 {
            self.nominal_rates[idx]
        } else {
            airside::service_rate(w.mean_per_min(self.cfg.dt_min), self.cfg.seats)
        }
    }

    /// Decision context for heuristic policies.
    pub fn decision_view(&self) -> Option<DecisionView> {
        let pid = self.focal?;
        let p = &self.passengers[pid];
        let ground_only_speed = self.ground_speed(self.final_leg.len()).ok()?;
        let options = self
            .departure_ids
            .iter()
            .enumerate()
            .map(|(idx, &k)| {
                let speed = self.ground_speed(self.to_vertiport[idx].len()).unwrap_or(self.cfg.ground_speed_floor_kmh);
                let air_km = self.air_km(k);
                VertiportView {
                    id: k,
                    ground_km: p.access_km[idx],
                    ground_speed_kmh: speed,
                    ground_min: 60.0 * p.access_km[idx] / speed,
                    air_km,
                    air_min: self.params.flight_minutes(air_km),
                    queue: self.vertiports[k].queue_len(),
                    en_route: self.to_vertiport[idx].len(),
                    service_rate: self.realised_rate(idx),
                    nominal_rate: self.nominal_rates[idx],
                }
            })
            .collect();
        Some(DecisionView {
            passenger: pid,
            origin: p.origin,
            destination: p.destination,
            od_km: p.od_km,
            ground_only_min: 60.0 * p.od_km / ground_only_speed,
            options,
        })
    }

    /// Builds the raw feature frame for the current focal passenger.
    pub fn assemble_state(&self) -> StateFrame {
        let s = &self.cfg.scales;
        let ext = self.cfg.map_km;
        let unit = |v: f64| v.clamp(0.0, 1.0);
        let mut f = Vec::with_capacity(self.cfg.frame_width());
        match self.focal.map(|p| &self.passengers[p]) {
            Some(p) => f.extend([p.origin.x / ext, p.origin.y / ext, p.destination.x / ext, p.destination.y / ext]),
            None => f.extend([0.0; 4]),
        }
        let max_rate = self
            .vertiports
            .iter()
            .map(|v| v.charge_rate)
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        for (idx, &k) in self.departure_ids.iter().enumerate() {
            let vp = &self.vertiports[k];
            let dist = self.focal.map_or(0.0, |p| self.passengers[p].access_km[idx]);
            let speed = self
                .ground_speed(self.to_vertiport[idx].len())
                .unwrap_or(self.cfg.ground_speed_floor_kmh);
            f.extend([
                unit(dist / s.distance_km),
                unit(speed / self.cfg.traffic.v_m),
                unit(self.to_vertiport[idx].len() as f64 / s.en_route),
                unit(vp.queue_len() as f64 / s.queue),
                vp.position.x / ext,
                vp.position.y / ext,
                unit(vp.charge_rate / max_rate),
            ]);
        }
        for e in &self.fleet {
            f.extend([
                unit(e.speed / self.params.cruise_kmh),
                unit(e.onboard.len() as f64 / self.params.seats as f64),
                unit(e.battery / self.params.battery_max),
            ]);
        }
        if self.cfg.progress_feature {
            f.push(self.issued as f64 / self.cfg.total_passengers as f64);
        }
        debug_assert_eq!(f.len(), self.cfg.frame_width());
        f
    }

    /// Running mean over arrived passengers of final (delivered) or accrued
    /// time in system.
    pub fn mean_time_in_system(&self) -> f64 {
        if self.issued == 0 {
            return 0.0;
        }
        let sum: f64 = self.passengers[..self.issued]
            .iter()
            .map(|p| match p.stage {
                Stage::Delivered => trip_breakdown(p, self.cfg.tt_eps_min).map(|b| b.total()).unwrap_or(0.0),
                _ => self.now - p.t_request,
            })
            .sum();
        sum / self.issued as f64
    }

    /// Applies `action` (a departure vertiport id) to the focal passenger.
    pub fn step(&mut self, action: VertiportId) -> Result<(f64, bool, StepInfo)> {
        self.step_assignment(Assignment::Vertiport(action))
    }

    pub fn step_assignment(&mut self, assignment: Assignment) -> Result<(f64, bool, StepInfo)> {
        let pid = self.focal.ok_or(EnvError::Finished)?;
        self.assign(pid, assignment)?;
        self.focal = None;
        let before = self.mean_time;
        let mut ticks = 0;
        loop {
            self.tick()?;
            ticks += 1;
            if ticks > self.cfg.max_ticks {
                return Err(EnvError::Runaway(self.cfg.max_ticks));
            }
            self.issue_requests();
            if self.focal.is_some() || self.is_done() {
                break;
            }
        }
        self.mean_time = self.mean_time_in_system();
        let reward = -(self.mean_time - before);
        if self.trace.is_some() {
            let mut ev = self.event(EventKind::Tick, None, None, None);
            ev.reward = Some(reward);
            self.push_event(ev);
        }
        let frame = self.assemble_state();
        self.stack.push(frame);
        Ok((
            reward,
            self.is_done(),
            StepInfo {
                ticks,
                delivered: self.delivered,
                now: self.now,
            },
        ))
    }

    fn assign(&mut self, pid: PassengerId, assignment: Assignment) -> Result<()> {
        match assignment {
            Assignment::GroundOnly => {
                let speed = self.ground_speed(self.final_leg.len())?;
                let p = &mut self.passengers[pid];
                let done = self.now + world::ground_travel_time(p.od_km, speed)?;
                p.ground_only = true;
                p.stage = Stage::FinalLeg;
                p.t_enqueue = Some(done);
                p.t_board = Some(done);
                p.t_alight = Some(done);
                p.t_delivered = Some(done);
                self.final_leg.push(pid);
            }
            Assignment::Vertiport(k) => {
                let idx = self.index_of(k).ok_or_else(|| EnvError::InvalidAction {
                    action: k,
                    allowed: self.departure_ids.clone(),
                })?;
                let speed = self.ground_speed(self.to_vertiport[idx].len())?;
                let p = &mut self.passengers[pid];
                p.departure_vp = Some(k);
                p.stage = Stage::ToVertiport;
                p.t_enqueue = Some(self.now + world::ground_travel_time(p.access_km[idx], speed)?);
                self.to_vertiport[idx].push(pid);
            }
        }
        if self.trace.is_some() {
            let v = match assignment {
                Assignment::Vertiport(k) => Some(k),
                Assignment::GroundOnly => None,
            };
            let ev = self.event(EventKind::Assign, Some(pid), v, None);
            self.push_event(ev);
        }
        Ok(())
    }

    /// Issues the request scheduled for the current step, if any.
    fn issue_requests(&mut self) {
        if self.issued >= self.cfg.total_passengers {
            return;
        }
        let next = &mut self.passengers[self.issued];
        if next.request_step == self.step {
            next.stage = Stage::Requesting;
            next.t_request = self.now;
            self.focal = Some(self.issued);
            self.issued += 1;
            if self.trace.is_some() {
                let ev = self.event(EventKind::Request, self.focal, None, None);
                self.push_event(ev);
            }
        }
    }

    /// Advances the world by one `dt`: aircraft, vertiport arrivals,
    /// dispatch, then deliveries.
    fn tick(&mut self) -> Result<()> {
        let start = self.now;
        let end = start + self.cfg.dt_min;

        let mut events = Vec::new();
        for e in 0..self.fleet.len() {
            let home = self.fleet[e].home;
            let (pos, rate) = (self.vertiports[home].position, self.vertiports[home].charge_rate);
            events.extend(self.fleet[e].advance(start, self.cfg.dt_min, &self.params, pos, rate)?);
        }
        events.sort_by(|a, b| event_time(a).total_cmp(&event_time(b)));
        for ev in events {
            match ev {
                FlightEvent::Alighted { evtol, vertiport, passengers, at } => {
                    let speed = self.ground_speed(self.final_leg.len())?;
                    for &pid in &passengers {
                        let p = &mut self.passengers[pid];
                        p.t_alight = Some(at);
                        p.stage = Stage::FinalLeg;
                        p.t_delivered = Some(at + world::ground_travel_time(p.egress_km, speed)?);
                        self.final_leg.push(pid);
                    }
                    if self.trace.is_some() {
                        let mut te = self.event(EventKind::Alight, None, Some(vertiport), Some(evtol));
                        te.time = at;
                        te.passengers = passengers;
                        self.push_event(te);
                    }
                }
                FlightEvent::ArrivedHome { evtol, at } => {
                    let home = self.fleet[evtol].home;
                    self.vertiports[home].stationed.push(evtol);
                    self.vertiports[home].stationed.sort_unstable();
                    if self.trace.is_some() {
                        let mut te = self.event(EventKind::ArriveHome, None, Some(home), Some(evtol));
                        te.time = at;
                        self.push_event(te);
                    }
                }
                FlightEvent::Charged { evtol, at } => {
                    if self.trace.is_some() {
                        let home = self.fleet[evtol].home;
                        let mut te = self.event(EventKind::Charged, None, Some(home), Some(evtol));
                        te.time = at;
                        self.push_event(te);
                    }
                }
            }
        }

        self.now = end;
        self.step += 1;

        // Ground arrivals at vertiports, FCFS by arrival time.
        let mut arrivals: Vec<(f64, PassengerId, usize)> = Vec::new();
        for (idx, list) in self.to_vertiport.iter_mut().enumerate() {
            list.retain(|&pid| {
                let t = self.passengers[pid].t_enqueue.expect("assigned");
                if t <= end {
                    arrivals.push((t, pid, idx));
                    false
                } else {
                    true
                }
            });
        }
        arrivals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (t, pid, idx) in arrivals {
            let k = self.departure_ids[idx];
            self.passengers[pid].stage = Stage::Queued;
            self.vertiports[k].queue.push_back((pid, t));
            if self.trace.is_some() {
                let mut te = self.event(EventKind::Enqueue, Some(pid), Some(k), None);
                te.time = t;
                self.push_event(te);
            }
        }

        let all_issued = self.issued == self.cfg.total_passengers && self.focal.is_none();
        let destination = (self.landing, self.vertiports[self.landing].position);
        for idx in 0..self.departure_ids.len() {
            let k = self.departure_ids[idx];
            let rule = DispatchRule {
                timeout_min: self.cfg.dispatch_timeout_min,
                flush: all_issued && self.to_vertiport[idx].is_empty(),
            };
            let deps = airside::try_dispatch(&mut self.vertiports[k], &mut self.fleet, destination, end, &self.params, rule)?;
            self.windows[idx].push(deps.len());
            // Later departures of the same tick are still queued when an
            // earlier one is recorded.
            let mut still_queued: usize = deps.iter().map(|d| d.passengers.len()).sum();
            for d in deps {
                for &pid in &d.passengers {
                    let p = &mut self.passengers[pid];
                    p.t_board = Some(end);
                    p.stage = Stage::Onboard;
                }
                still_queued -= d.passengers.len();
                if self.trace.is_some() {
                    let mut te = self.event(EventKind::Depart, None, Some(k), Some(d.evtol));
                    te.queues[k] += still_queued;
                    te.passengers = d.passengers;
                    self.push_event(te);
                }
            }
            self.peak_queue[k] = self.peak_queue[k].max(self.vertiports[k].queue_len());
        }

        let mut delivered = Vec::new();
        self.final_leg.retain(|&pid| {
            if self.passengers[pid].t_delivered.expect("egress scheduled") <= end {
                delivered.push(pid);
                false
            } else {
                true
            }
        });
        for pid in delivered {
            self.passengers[pid].stage = Stage::Delivered;
            self.delivered += 1;
            if self.trace.is_some() {
                let mut te = self.event(EventKind::Deliver, Some(pid), None, None);
                te.time = self.passengers[pid].t_delivered.unwrap_or(end);
                self.push_event(te);
            }
        }
        Ok(())
    }

    fn event(
        &self,
        kind: EventKind,
        passenger: Option<PassengerId>,
        vertiport: Option<VertiportId>,
        evtol: Option<usize>,
    ) -> TraceEvent {
        TraceEvent {
            step: self.step,
            time: self.now,
            kind,
            passenger,
            passengers: Vec::new(),
            vertiport,
            evtol,
            queues: self.vertiports.iter().map(|v| v.queue_len()).collect(),
            phases: self.fleet.iter().map(|e| e.phase.code()).collect(),
            reward: None,
        }
    }

    fn push_event(&mut self, ev: TraceEvent) {
        if let Some(t) = self.trace.as_mut() {
            t.push(ev);
        }
    }

    /// Sum of door-to-door times over all passengers; the episode must be over.
    pub fn total_cost(&self) -> Result<f64> {
        self.passengers
            .iter()
            .map(|p| total_travel_time(p, self.cfg.tt_eps_min))
            .sum()
    }
}

fn event_time(e: &FlightEvent) -> f64 {
    match e {
        FlightEvent::Alighted { at, .. } | FlightEvent::ArrivedHome { at, .. } | FlightEvent::Charged { at, .. } => *at,
    }
}

const MAX_REJECTIONS: usize = 100_000;

fn uniform_in_annulus(rng: &mut ChaCha8Rng, map_km: f64, centre: Point, radius: [f64; 2]) -> Option<Point> {
    for _ in 0..MAX_REJECTIONS {
        let p = Point::new(rng.gen_range(0.0..=map_km), rng.gen_range(0.0..=map_km));
        let d = euclidean_km(p, centre);
        if d >= radius[0] && d <= radius[1] {
            return Some(p);
        }
    }
    None
}

/// Draws one request: an urban or suburban origin (fair coin) and a
/// destination near the landing vertiport such that the lattice O-D distance
/// falls in the configured range.
pub fn sample_passenger(
    rng: &mut ChaCha8Rng,
    cfg: &EnvConfig,
    net: &GroundNetwork,
    departure_ids: &[VertiportId],
    landing: VertiportId,
    id: PassengerId,
) -> Result<Passenger> {
    let landing_pos = cfg.position(landing);
    let mut tries = 0;
    while tries < MAX_REJECTIONS {
        let urban = rng.gen_bool(0.5);
        let (anchor, radius) = if urban {
            (cfg.urban_vertiport, cfg.urban_radius_km)
        } else {
            (cfg.suburban_vertiport, cfg.suburban_radius_km)
        };
        let origin = uniform_in_annulus(rng, cfg.map_km, cfg.position(anchor), radius)
            .ok_or_else(|| EnvError::Config(format!("no origin in {radius:?} km of vertiport {anchor}")))?;
        // A handful of destination draws per origin; origins that cannot
        // reach the O-D band are redrawn.
        for _ in 0..16 {
            tries += 1;
            let dest = uniform_in_annulus(rng, cfg.map_km, landing_pos, [0.0, cfg.destination_radius_km])
                .ok_or_else(|| EnvError::Config("no destination near the landing vertiport".into()))?;
            let od_km = net.distance_km(origin, dest)?;
            if od_km < cfg.od_min_km || od_km > cfg.od_max_km {
                continue;
            }
            let access_km = departure_ids
                .iter()
                .map(|&k| net.distance_km(origin, cfg.position(k)))
                .collect::<Result<Vec<_>, _>>()?;
            let egress_km = net.distance_km(landing_pos, dest)?;
            return Ok(Passenger {
                id,
                origin,
                destination: dest,
                request_step: id * cfg.request_interval_steps,
                t_request: 0.0,
                departure_vp: None,
                landing_vp: landing,
                ground_only: false,
                t_enqueue: None,
                t_board: None,
                t_alight: None,
                t_delivered: None,
                stage: Stage::Pending,
                access_km,
                egress_km,
                od_km,
            });
        }
    }
    Err(EnvError::Config(format!(
        "could not sample an O-D pair in [{}, {}] km after {MAX_REJECTIONS} tries",
        cfg.od_min_km, cfg.od_max_km
    )))
}

fn sample_passengers(
    cfg: &EnvConfig,
    net: &GroundNetwork,
    departure_ids: &[VertiportId],
    landing: VertiportId,
    seed: u64,
) -> Result<Vec<Passenger>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.total_passengers)
        .map(|i| sample_passenger(&mut rng, cfg, net, departure_ids, landing, i))
        .collect()
}

/// Best joint assignment of the remaining decisions of `env`, found by
/// replaying every combination to the end of the episode.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub actions: Vec<VertiportId>,
    pub cost: f64,
    pub replays: usize,
}

pub const ORACLE_MAX_DECISIONS: usize = 6;

pub fn brute_force_best_assignment(env: &Env) -> Result<OracleResult> {
    let n = env.decisions_left();
    if n > ORACLE_MAX_DECISIONS {
        return Err(EnvError::TooLarge(n, ORACLE_MAX_DECISIONS));
    }
    let options = env.departure_ids().to_vec();
    let combos = options.len().pow(n as u32);
    let mut best: Option<OracleResult> = None;
    for code in 0..combos {
        let mut c = code;
        let actions: Vec<VertiportId> = (0..n)
            .map(|_| {
                let a = options[c % options.len()];
                c /= options.len();
                a
            })
            .collect();
        let cost = replay_cost(env, &actions)?;
        if best.as_ref().is_none_or(|b| cost < b.cost) {
            best = Some(OracleResult { actions, cost, replays: 0 });
        }
    }
    let mut best = best.expect("at least one assignment");
    best.replays = combos;
    Ok(best)
}

/// Plays `actions` from a copy of `env` and returns the summed door-to-door time.
pub fn replay_cost(env: &Env, actions: &[VertiportId]) -> Result<f64> {
    let mut sim = env.clone();
    sim.trace = None;
    for &a in actions {
        sim.step(a)?;
    }
    if !sim.is_done() {
        return Err(EnvError::Config("replay ended before every passenger was delivered".into()));
    }
    sim.total_cost()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(total: usize) -> EnvConfig {
        EnvConfig {
            total_passengers: total,
            dt_min: 1.0,
            request_interval_steps: 1,
            ..EnvConfig::default()
        }
    }

    fn run_all(env: &mut Env, action: VertiportId) -> Vec<f64> {
        let mut rewards = Vec::new();
        while !env.is_done() {
            let (r, _, _) = env.step(action).unwrap();
            rewards.push(r);
        }
        rewards
    }

    #[test]
    fn reset_is_deterministic() {
        let a = Env::new(small(20), 7).unwrap();
        let b = Env::new(small(20), 7).unwrap();
        assert_eq!(a.passengers(), b.passengers());
        assert_eq!(a.stack(), b.stack());
    }

    #[test]
    fn default_layout() {
        let env = Env::new(EnvConfig::default(), 1).unwrap();
        assert_eq!(env.departure_ids(), &[0, 1]);
        assert_eq!(env.fleet().len(), 4);
        assert!(env.fleet().iter().all(|e| e.phase == crate::airside::Phase::Idle && e.battery == 100.0));
        assert_eq!(env.stack().len(), 6);
    }

    #[test]
    fn zero_horizon_rejected() {
        let cfg = EnvConfig { horizon_steps: 0, ..EnvConfig::default() };
        assert!(matches!(Env::new(cfg, 0), Err(EnvError::Config(_))));
    }

    #[test]
    fn infeasible_od_range_rejected() {
        let cfg = EnvConfig { od_min_km: 200.0, od_max_km: 210.0, total_passengers: 2, ..EnvConfig::default() };
        assert!(matches!(Env::new(cfg, 0), Err(EnvError::Config(_))));
    }

    #[test]
    fn sampled_requests_respect_bands() {
        let cfg = EnvConfig::default();
        let env = Env::new(cfg.clone(), 3).unwrap();
        for p in env.passengers() {
            assert!((42.0..=48.0).contains(&p.od_km), "{}", p.od_km);
            let du = euclidean_km(p.origin, cfg.position(1));
            let ds = euclidean_km(p.origin, cfg.position(0));
            assert!(du <= 6.0 || (6.0..=12.0).contains(&ds));
            assert_eq!(p.landing_vp, 2);
            assert!(euclidean_km(p.destination, cfg.position(2)) <= 6.0);
        }
    }

    #[test]
    fn frame_basics() {
        let env = Env::new(small(5), 0).unwrap();
        let f = env.assemble_state();
        assert_eq!(f.len(), env.config().frame_width());
        // Empty system: queues and en-route counts are zero, batteries full.
        for idx in 0..2 {
            assert_eq!(f[4 + 7 * idx + 2], 0.0);
            assert_eq!(f[4 + 7 * idx + 3], 0.0);
        }
        for e in 0..4 {
            assert_eq!(f[18 + 3 * e + 2], 1.0);
        }
        assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn enqueue_after_ground_leg() {
        let mut env = Env::new(small(3), 5).unwrap();
        let p0 = env.passengers()[0].clone();
        env.step(1).unwrap();
        let p = &env.passengers()[0];
        let expect = 60.0 * p0.access_km[1] / 60.0;
        assert!((p.t_enqueue.unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn invalid_action() {
        let mut env = Env::new(small(3), 5).unwrap();
        assert!(matches!(env.step(2), Err(EnvError::InvalidAction { .. })));
        assert!(matches!(env.step(9), Err(EnvError::InvalidAction { .. })));
    }

    #[test]
    fn single_passenger_reward_is_minus_dt() {
        let mut env = Env::new(small(1), 2).unwrap();
        env.step_assignment(Assignment::Vertiport(0)).unwrap();
        // A lone passenger: every tick adds dt to the only summand, so the
        // episode reward sums to minus its trip time.
        let p = &env.passengers()[0];
        assert_eq!(p.stage, Stage::Delivered);
        let mut env = Env::new(small(2), 2).unwrap();
        let (r, _, info) = env.step(0).unwrap();
        assert_eq!(info.ticks, 1);
        // One passenger accrued dt, the new one zero: mean = dt / 2.
        assert!((r + 0.5).abs() < 1e-12);
    }

    #[test]
    fn telescoping_and_conservation() {
        let mut env = Env::new(small(60), 9).unwrap();
        let mut rewards = Vec::new();
        let mut turn = 0;
        while !env.is_done() {
            let a = [0, 1, 0][turn % 3];
            turn += 1;
            let (r, _, _) = env.step(a).unwrap();
            rewards.push(r);
            let c = env.stage_counts();
            assert_eq!(c.iter().sum::<usize>(), env.arrived());
        }
        let att = env.total_cost().unwrap() / env.passengers().len() as f64;
        let sum: f64 = rewards.iter().sum();
        assert!((sum + att).abs() < 1e-6, "{sum} vs {att}");
    }

    #[test]
    fn full_seat_and_fcfs() {
        let mut env = Env::new(small(40), 4).unwrap();
        env.enable_trace();
        run_all(&mut env, 1);
        let trace = env.take_trace();
        let mut enq_order = Vec::new();
        let mut board_order = Vec::new();
        for ev in &trace {
            match ev.kind {
                EventKind::Enqueue => enq_order.push(ev.passenger.unwrap()),
                EventKind::Depart => {
                    board_order.extend(ev.passengers.iter().copied());
                }
                _ => {}
            }
        }
        assert_eq!(enq_order, board_order);
        // Only the final flush may leave with a partial cabin.
        let departs: Vec<_> = trace.iter().filter(|e| e.kind == EventKind::Depart).collect();
        for d in &departs[..departs.len() - 1] {
            assert_eq!(d.passengers.len(), 3);
        }
    }

    #[test]
    fn ground_only_trip() {
        let mut env = Env::new(small(1), 0).unwrap();
        env.step_assignment(Assignment::GroundOnly).unwrap();
        let p = &env.passengers()[0];
        let b = trip_breakdown(p, 0.0).unwrap();
        assert_eq!(b.wait, 0.0);
        assert_eq!(b.air, 0.0);
        assert!((b.ground() - p.od_km).abs() < 1e-9, "free flow at 60 km/h");
    }

    #[test]
    fn total_time_requires_delivery() {
        let env = Env::new(small(2), 0).unwrap();
        assert!(matches!(total_travel_time(&env.passengers()[0], 0.0), Err(EnvError::NotDelivered(0))));
    }

    #[test]
    fn breakdown_sums() {
        let p = Passenger {
            id: 0,
            origin: Point::new(0.0, 0.0),
            destination: Point::new(0.0, 0.0),
            request_step: 0,
            t_request: 0.0,
            departure_vp: Some(1),
            landing_vp: 2,
            ground_only: false,
            t_enqueue: Some(8.0),
            t_board: Some(8.0),
            t_alight: Some(20.02),
            t_delivered: Some(24.02),
            stage: Stage::Delivered,
            access_km: vec![],
            egress_km: 0.0,
            od_km: 0.0,
        };
        let b = trip_breakdown(&p, 0.0).unwrap();
        assert!((b.total() - 24.02).abs() < 1e-12);
        assert_eq!(b.wait, 0.0);
    }

    #[test]
    fn oracle_counts_and_bounds() {
        let env = Env::new(small(6), 1).unwrap();
        let best = brute_force_best_assignment(&env).unwrap();
        assert_eq!(best.replays, 64);
        for a in [0, 1] {
            assert!(best.cost <= replay_cost(&env, &[a; 6]).unwrap());
        }
        let env = Env::new(small(7), 1).unwrap();
        assert!(matches!(brute_force_best_assignment(&env), Err(EnvError::TooLarge(7, 6))));
    }
}
