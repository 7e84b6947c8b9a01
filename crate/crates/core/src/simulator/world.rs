use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{Proposal, SchedulingTable, ValidationOutcome};
use crate::layout::{build_layout, IntersectionLayout, PathId, Road, TurnKind};
use crate::metrics::VehicleRecord;
use crate::planner::{self, MobilityProfile, ReplanOutcome, VehicleParams, ZoneTime, ZoneWindow};
use crate::protocol::fsm::{fits_windows, FailureReason, NegotiationState, PlannerResult};
use crate::protocol::{DelayModel, Link, ServingQueue, VehicleEvent, VehicleNegotiation, VehicleOutput};

use super::config::{Method, ScenarioConfig};
use super::policy::{krauss_safe_speed, light_for, next_speed, Light};
use super::safety::{occupies, SafetyChecker, SafetyReport};
use super::SimError;

const OCCUPANCY_TOL: f64 = 1e-3;
/// Extra room over the controller safety gap kept while approaching.
const CAV_GAP_MARGIN: f64 = 0.5;
/// Upper bound on the entry pad a vehicle adds when replanning, s.
const MAX_PAD: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LogKind {
    Spawn,
    EnterNegotiationZone,
    ProposalSent,
    Response { accepted: bool },
    Agreed,
    NegotiationFailed { reason: String },
    Granted,
    Exit,
    BackupOn,
    BackupOff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub t: f64,
    pub vehicle: Option<u64>,
    pub kind: LogKind,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureCounts {
    pub deadline: usize,
    pub infeasible: usize,
    pub exchange_cap: usize,
    /// The leader came too close during the constant-speed hold.
    pub gap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub records: Vec<VehicleRecord>,
    pub backup_activations: usize,
    pub backup_times: Vec<f64>,
    pub failures: FailureCounts,
    pub safety: SafetyReport,
    pub events: Vec<LogEvent>,
    pub end_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    /// Car-following, no reservation yet.
    Approach,
    /// Holding speed while the negotiation runs.
    Negotiating,
    /// Driving a committed profile.
    Tracking,
    /// Past the profile, car-following on the exit lane.
    Leaving,
}

#[derive(Debug, Clone)]
struct Negotiation {
    fsm: VehicleNegotiation,
    t0: f64,
    s0: f64,
    v0: f64,
    hold_end: f64,
    current: Option<MobilityProfile>,
    /// Shift asked for in the previous Revise.
    last_delay: Option<f64>,
    revisions: u32,
    /// Consecutive Revise rounds whose shift did not at least halve.
    stalls: u32,
    up: Link,
    down: Link,
}

#[derive(Debug, Clone)]
struct Vehicle {
    path: PathId,
    entry_lane: usize,
    exit_lane: usize,
    entry_road: Road,
    exit_road: Road,
    s: f64,
    v: f64,
    a: f64,
    mode: Mode,
    profile: Option<MobilityProfile>,
    /// Uses the priority rule instead of negotiating.
    legacy: bool,
    neg: Option<Negotiation>,
    arrival_seq: Option<u64>,
    depart: f64,
    co2_g: f64,
    stops: u32,
    stopped: bool,
    min_v: f64,
    backup: bool,
}

#[derive(Debug, Clone)]
enum Ev {
    ToController { cav: usize, profile: MobilityProfile },
    ToVehicle { cav: usize, outcome: ValidationOutcome },
    Deadline { cav: usize },
}

#[derive(Debug, Clone)]
struct Queued {
    t: f64,
    rank: u8,
    seq: u64,
    ev: Ev,
}

impl Queued {
    fn key(&self, other: &Self) -> Ordering {
        self.t
            .total_cmp(&other.t)
            .then(self.rank.cmp(&other.rank))
            .then(self.seq.cmp(&other.seq))
    }
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.key(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // Reversed: the heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other.key(self)
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn exp_sample(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    if rate <= 0.0 {
        return f64::INFINITY;
    }
    let u: f64 = rng.gen();
    -(1.0 - u).ln() / rate
}

/// Aims a replan slightly past the earliest allowed entry so that rounding
/// and the follow-on gap checks do not bounce it back for another round.
/// The pad grows with the shift the controller asked for and doubles on
/// every round that made no progress. After a repeated Revise the whole
/// shift is added again, since slow convergence means the controller keeps
/// underestimating what the replan needs.
fn padded_windows(windows: &[ZoneWindow], times: &[ZoneTime], stalls: u32, repeated: bool) -> Vec<ZoneWindow> {
    let shift = windows
        .iter()
        .zip(times)
        .map(|(w, t)| w.t_enter_min - t.t_enter)
        .fold(0.0_f64, f64::max);
    let base = (0.02 + 0.5 * shift).min(0.25) * 2f64.powi(stalls.min(6) as i32);
    let pad = if repeated { base.max(shift) } else { base }.min(MAX_PAD);
    let room = windows
        .iter()
        .zip(times)
        .all(|(w, t)| w.t_exit_max - w.t_enter_min >= (t.t_exit - t.t_enter) + pad);
    if !room {
        return windows.to_vec();
    }
    windows
        .iter()
        .map(|w| ZoneWindow {
            t_enter_min: w.t_enter_min + pad,
            ..*w
        })
        .collect()
}

pub struct World {
    cfg: ScenarioConfig,
    layout: Rc<IntersectionLayout>,
    params: VehicleParams,
    dt: f64,
    t: f64,
    step: u64,
    origin: f64,
    entrance: f64,
    stop_line: f64,
    vehicles: Vec<Vehicle>,
    active: Vec<usize>,
    pending: Vec<VecDeque<(f64, PathId)>>,
    next_arrival: Vec<(Road, f64)>,
    rng_arrival: ChaCha8Rng,
    rng_route: ChaCha8Rng,
    rng_delay: ChaCha8Rng,
    delay: DelayModel,
    table: SchedulingTable,
    queue: ServingQueue<MobilityProfile>,
    events: BinaryHeap<Queued>,
    event_seq: u64,
    backup: bool,
    backup_times: Vec<f64>,
    failures: FailureCounts,
    safety: SafetyChecker,
    log: Vec<LogEvent>,
    fifo: VecDeque<usize>,
    fifo_seq: u64,
    records: Vec<VehicleRecord>,
    by_entry: Vec<Vec<(f64, usize)>>,
    by_exit: Vec<Vec<(f64, usize)>>,
}

impl World {
    pub fn new(cfg: &ScenarioConfig) -> Result<World, SimError> {
        cfg.validate()?;
        let mut layout = build_layout(cfg.layout, &cfg.geometry)?;
        let params = cfg.vehicle_params_for(&layout.params)?;
        layout.configure_negotiation(cfg.negotiation_length(), params.v_max, cfg.car_following.decel)?;

        let lanes = layout.lanes.len();
        let roads = cfg.layout.roads();
        let mut rng_arrival = stream(cfg.seed, 1);
        let next_arrival = roads
            .iter()
            .map(|&r| (r, exp_sample(&mut rng_arrival, cfg.arrival_rate)))
            .collect();
        let origin = -(layout.params.road_length - layout.params.approach_length);
        let entrance = layout.params.approach_length;
        Ok(World {
            dt: cfg.timestep,
            t: 0.0,
            step: 0,
            origin,
            entrance,
            stop_line: entrance - cfg.car_following.stop_line_gap,
            vehicles: Vec::new(),
            active: Vec::new(),
            pending: vec![VecDeque::new(); lanes],
            next_arrival,
            rng_arrival,
            rng_route: stream(cfg.seed, 2),
            rng_delay: stream(cfg.seed, 3),
            delay: cfg.network.delay_model(),
            table: SchedulingTable::new(),
            queue: ServingQueue::new(),
            events: BinaryHeap::new(),
            event_seq: 0,
            backup: false,
            backup_times: Vec::new(),
            failures: FailureCounts::default(),
            safety: SafetyChecker::new(),
            log: Vec::new(),
            fifo: VecDeque::new(),
            fifo_seq: 0,
            records: Vec::new(),
            by_entry: vec![Vec::new(); lanes],
            by_exit: vec![Vec::new(); lanes],
            cfg: cfg.clone(),
            layout: Rc::new(layout),
            params,
        })
    }

    pub fn run(mut self) -> Result<SimResult, SimError> {
        let steps = (self.cfg.duration / self.dt).round() as u64;
        while self.step < steps {
            self.advance()?;
        }
        Ok(self.finish())
    }

    fn log(&mut self, t: f64, vehicle: Option<usize>, kind: LogKind) {
        if self.cfg.record_events {
            self.log.push(LogEvent {
                t,
                vehicle: vehicle.map(|v| v as u64),
                kind,
            });
        }
    }

    fn push_event(&mut self, t: f64, ev: Ev) {
        let rank = u8::from(matches!(ev, Ev::Deadline { .. }));
        self.event_seq += 1;
        self.events.push(Queued {
            t,
            rank,
            seq: self.event_seq,
            ev,
        });
    }

    fn advance(&mut self) -> Result<(), SimError> {
        let t_new = (self.step + 1) as f64 * self.dt;
        self.arrivals(t_new);
        self.spawn();
        self.rebuild_lanes();
        self.admission()?;
        let crossed = self.move_vehicles(t_new);
        self.t = t_new;
        self.step += 1;
        for id in crossed {
            self.on_cross(id, t_new)?;
        }
        self.process_events(t_new)?;
        self.after_move(t_new);
        Ok(())
    }

    fn arrivals(&mut self, t_new: f64) {
        let layout = Rc::clone(&self.layout);
        for i in 0..self.next_arrival.len() {
            loop {
                let (road, at) = self.next_arrival[i];
                if at > t_new || at >= self.cfg.duration {
                    break;
                }
                let options: Vec<PathId> = layout.paths_from(road).map(|p| p.id).collect();
                let pick = options[self.rng_route.gen_range(0..options.len())];
                let lane = layout.path(pick).entry_lane.0 as usize;
                self.pending[lane].push_back((at, pick));
                self.next_arrival[i].1 = at + exp_sample(&mut self.rng_arrival, self.cfg.arrival_rate);
            }
        }
    }

    fn spawn(&mut self) {
        let layout = Rc::clone(&self.layout);
        let cf = self.cfg.car_following;
        let len = self.params.length;
        for lane in 0..self.pending.len() {
            let Some(&(depart, path_id)) = self.pending[lane].front() else {
                continue;
            };
            if depart > self.t + 1e-9 {
                continue;
            }
            // Rearmost vehicle still on this approach.
            let last = self
                .active
                .iter()
                .map(|&i| &self.vehicles[i])
                .filter(|v| v.entry_lane == lane && v.s - len < self.entrance)
                .min_by(|a, b| a.s.total_cmp(&b.s));
            let v_spawn = match last {
                None => self.params.v_max,
                Some(l) => {
                    let gap = l.s - len - self.origin;
                    if gap < cf.min_gap {
                        continue;
                    }
                    krauss_safe_speed(&cf, self.params.v_max, gap - cf.min_gap, l.v).min(self.params.v_max)
                }
            };
            self.pending[lane].pop_front();
            let path = layout.path(path_id);
            let id = self.vehicles.len();
            let idle = self.cfg.emissions.rate(0.0, 0.0) * (self.t - depart).max(0.0);
            let legacy = self.cfg.method != Method::Moveover || self.backup;
            self.vehicles.push(Vehicle {
                path: path_id,
                entry_lane: lane,
                exit_lane: path.exit_lane.0 as usize,
                entry_road: path.entry_road,
                exit_road: path.exit_road,
                s: self.origin,
                v: v_spawn,
                a: 0.0,
                mode: Mode::Approach,
                profile: None,
                legacy,
                neg: None,
                arrival_seq: None,
                depart,
                co2_g: idle,
                stops: 0,
                stopped: false,
                min_v: v_spawn,
                backup: self.backup,
            });
            self.active.push(id);
            self.log(self.t, Some(id), LogKind::Spawn);
        }
    }

    fn rebuild_lanes(&mut self) {
        for l in self.by_entry.iter_mut().chain(self.by_exit.iter_mut()) {
            l.clear();
        }
        let layout = &self.layout;
        for &i in &self.active {
            let v = &self.vehicles[i];
            self.by_entry[v.entry_lane].push((v.s, i));
            let x = v.s - layout.path(v.path).exit_start;
            self.by_exit[v.exit_lane].push((x, i));
        }
        let desc = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        for l in self.by_entry.iter_mut().chain(self.by_exit.iter_mut()) {
            l.sort_by(desc);
        }
    }

    /// Closest relevant vehicle ahead on the same approach: `(gap, speed)`.
    fn entry_leader(&self, f: usize) -> Option<(f64, f64)> {
        let me = &self.vehicles[f];
        let len = self.params.length;
        let mut best = None;
        for &(s, j) in &self.by_entry[me.entry_lane] {
            if j == f {
                break;
            }
            if s < me.s {
                break;
            }
            let other = &self.vehicles[j];
            if other.path == me.path || s - len < self.entrance {
                best = Some((s - len - me.s, other.v));
            }
        }
        best
    }

    fn exit_leader(&self, f: usize) -> Option<(f64, f64)> {
        let me = &self.vehicles[f];
        let len = self.params.length;
        let my_x = me.s - self.layout.path(me.path).exit_start;
        let mut best = None;
        for &(x, j) in &self.by_exit[me.exit_lane] {
            if j == f || x < my_x {
                break;
            }
            best = Some((x - len - my_x, self.vehicles[j].v));
        }
        best
    }

    /// Standstill gap a vehicle keeps to its leader. Vehicles that will
    /// negotiate keep the controller's safety gap so their proposals can be
    /// accepted from the moment they start.
    fn follow_gap(&self, v: &Vehicle) -> f64 {
        let cf = &self.cfg.car_following;
        if v.legacy || v.mode == Mode::Leaving {
            cf.min_gap
        } else {
            cf.min_gap.max(self.cfg.controller.safety_gap + CAV_GAP_MARGIN)
        }
    }

    fn needs_admission(&self, v: &Vehicle) -> bool {
        v.legacy && v.mode == Mode::Approach
    }

    /// Grants reservations to the lead waiting vehicle of each approach
    /// once it has to start braking for the stop line.
    fn admission(&mut self) -> Result<(), SimError> {
        let layout = Rc::clone(&self.layout);
        let cf = self.cfg.car_following;
        for lane in 0..self.by_entry.len() {
            let Some(&(_, id)) = self.by_entry[lane]
                .iter()
                .find(|&&(_, i)| self.vehicles[i].mode == Mode::Approach)
            else {
                continue;
            };
            let veh = &self.vehicles[id];
            if !self.needs_admission(veh) {
                continue;
            }
            let desired = (veh.v + self.params.a_max * self.dt).min(self.params.v_max);
            let stop_safe = krauss_safe_speed(&cf, veh.v, self.stop_line - veh.s, 0.0);
            if stop_safe >= desired - 1e-9 {
                continue;
            }
            if !self.rule_allows(id) {
                continue;
            }
            let path = layout.path(veh.path);
            let Ok(profile) = planner::plan_from_state(&self.params, path, self.t, veh.s, veh.v) else {
                continue;
            };
            let proposal = Proposal::new(id as u64, path, self.params.length, &profile)?;
            if self.uses_priority_rule(id) && !self.priority_clear(id, &proposal) {
                continue;
            }
            if let ValidationOutcome::Accept { windows } = self.table.validate(&self.cfg.controller, &proposal) {
                self.commit(&proposal, &windows)?;
                let veh = &mut self.vehicles[id];
                veh.mode = Mode::Tracking;
                veh.profile = Some(profile);
                if self.fifo.front() == Some(&id) {
                    self.fifo.pop_front();
                } else {
                    self.fifo.retain(|&i| i != id);
                }
                self.log(self.t, Some(id), LogKind::Granted);
            }
        }
        Ok(())
    }

    fn commit(&mut self, proposal: &Proposal<'_>, windows: &[ZoneWindow]) -> Result<(), SimError> {
        self.table.commit(proposal, windows)?;
        if !self.table.is_disjoint() {
            self.safety.record_table_overlap();
        }
        Ok(())
    }

    fn uses_priority_rule(&self, id: usize) -> bool {
        let v = &self.vehicles[id];
        matches!(self.cfg.method, Method::Priority | Method::Moveover)
            && self.cfg.layout != crate::layout::LayoutKind::Roundabout
            && !v.entry_road.is_horizontal()
    }

    fn rule_allows(&self, id: usize) -> bool {
        let v = &self.vehicles[id];
        match self.cfg.method {
            Method::Priority | Method::Moveover => true,
            Method::TrafficLight => {
                let turn = self.layout.path(v.path).turn_kind;
                match light_for(&self.cfg.signals, self.cfg.layout, self.t, v.entry_road, turn) {
                    Light::Green => true,
                    Light::Yellow => v.v * v.v / (2.0 * self.cfg.car_following.decel) > self.stop_line - v.s,
                    Light::Red => false,
                }
            }
            Method::Fifo => self.fifo_allows(id),
        }
    }

    /// Strict arrival order; earlier conflicting vehicles must have left the
    /// shared zones.
    fn fifo_allows(&self, id: usize) -> bool {
        if self.fifo.front() != Some(&id) {
            return false;
        }
        let me = &self.vehicles[id];
        let my_seq = me.arrival_seq.unwrap_or(u64::MAX);
        let my_path = self.layout.path(me.path);
        self.active.iter().all(|&j| {
            let other = &self.vehicles[j];
            if j == id || other.arrival_seq.is_none_or(|s| s > my_seq) {
                return true;
            }
            let path = self.layout.path(other.path);
            let clear_at = path
                .zone_intervals
                .iter()
                .filter(|z| my_path.crosses(z.zone))
                .map(|z| z.exit)
                .fold(f64::NEG_INFINITY, f64::max);
            other.s - self.params.length >= clear_at + OCCUPANCY_TOL
        })
    }

    /// Minor-road check: no approaching priority vehicle reaches a shared
    /// zone before this vehicle has left it plus the margin.
    fn priority_clear(&self, id: usize, proposal: &Proposal<'_>) -> bool {
        let me = &self.vehicles[id];
        let my_path = self.layout.path(me.path);
        self.active.iter().all(|&j| {
            let other = &self.vehicles[j];
            if j == id || other.mode != Mode::Approach || !other.entry_road.is_horizontal() {
                return true;
            }
            let path = self.layout.path(other.path);
            if !path.shares_zone_with(my_path) {
                return true;
            }
            path.zone_intervals.iter().all(|z| {
                let Some(mine) = proposal.zone_times.iter().find(|zt| zt.zone == z.zone) else {
                    return true;
                };
                let eta = self.t + (z.entry - other.s).max(0.0) / self.params.v_max;
                eta >= mine.t_exit + self.cfg.priority_margin
            })
        })
    }

    /// Moves every vehicle to `t_new`; returns vehicles that crossed arc 0.
    fn move_vehicles(&mut self, t_new: f64) -> Vec<usize> {
        let cf = self.cfg.car_following;
        let dt = self.dt;
        let mut updates = Vec::with_capacity(self.active.len());
        let mut gap_failures = Vec::new();
        for &id in &self.active {
            let v = &self.vehicles[id];
            let upd = match v.mode {
                Mode::Tracking => {
                    let p = v.profile.as_ref().expect("tracking vehicle has a profile");
                    p.state_at(t_new)
                }
                Mode::Negotiating => {
                    let neg = v.neg.as_ref().expect("negotiating vehicle");
                    if let Some((gap, vl)) = self.entry_leader(id) {
                        let room = gap - self.follow_gap(v);
                        if room < 0.0 || neg.v0 * neg.v0 > vl * vl + 2.0 * cf.decel * room {
                            gap_failures.push(id);
                        }
                    }
                    (v.s + neg.v0 * dt, neg.v0, 0.0)
                }
                Mode::Approach | Mode::Leaving => {
                    let leader = if v.mode == Mode::Approach {
                        self.entry_leader(id)
                    } else {
                        self.exit_leader(id)
                    };
                    let mut limits = Vec::with_capacity(2);
                    if let Some((gap, vl)) = leader {
                        limits.push(krauss_safe_speed(&cf, v.v, gap - self.follow_gap(v), vl));
                    }
                    if self.needs_admission(v) {
                        limits.push(krauss_safe_speed(&cf, v.v, self.stop_line - v.s, 0.0));
                    }
                    let path = self.layout.path(v.path);
                    let cap =
                        if v.mode == Mode::Leaving && v.s < path.exit_start && path.turn_kind != TurnKind::Straight {
                            self.params.v_max_turn.max(v.v)
                        } else {
                            self.params.v_max
                        };
                    let nv = next_speed(&cf, v.v, self.params.a_max, dt, cap, limits);
                    (v.s + nv * dt, nv, (nv - v.v) / dt)
                }
            };
            updates.push((id, upd));
        }
        let mut crossed = Vec::new();
        for (id, (s, v, a)) in updates {
            let veh = &mut self.vehicles[id];
            if veh.s < 0.0 && s >= 0.0 {
                crossed.push(id);
            }
            veh.s = s;
            veh.v = v;
            veh.a = a;
        }
        for id in gap_failures {
            self.fail_negotiation(id, t_new, None);
        }
        crossed
    }

    fn on_cross(&mut self, id: usize, t: f64) -> Result<(), SimError> {
        self.fifo_seq += 1;
        let veh = &mut self.vehicles[id];
        veh.arrival_seq = Some(self.fifo_seq);
        if veh.mode != Mode::Approach {
            return Ok(());
        }
        if veh.legacy {
            self.fifo.push_back(id);
            return Ok(());
        }
        self.start_negotiation(id, t)
    }

    fn start_negotiation(&mut self, id: usize, t0: f64) -> Result<(), SimError> {
        let layout = Rc::clone(&self.layout);
        let hold_end = self.cfg.negotiation_length();
        let veh = &mut self.vehicles[id];
        let (s0, v0) = (veh.s, veh.v);
        let deadline = if s0 < hold_end && v0 > 1e-3 {
            t0 + (hold_end - s0) / v0
        } else {
            t0
        };
        let mut fsm = VehicleNegotiation::new(self.cfg.controller.max_exchanges);
        fsm.step(VehicleEvent::EnterNegotiationZone { deadline })?;
        veh.mode = Mode::Negotiating;
        veh.neg = Some(Negotiation {
            fsm,
            t0,
            s0,
            v0,
            hold_end,
            current: None,
            last_delay: None,
            revisions: 0,
            stalls: 0,
            up: Link::default(),
            down: Link::default(),
        });
        self.log(t0, Some(id), LogKind::EnterNegotiationZone);
        self.push_event(deadline, Ev::Deadline { cav: id });
        let path = layout.path(self.vehicles[id].path);
        let planned = planner::propose_from_state(&self.params, path, t0, s0, v0, hold_end).ok();
        self.after_plan(id, t0, planned.map(|p| (p, PlannerResult::Profile)))
    }

    fn neg_mut(&mut self, id: usize) -> &mut Negotiation {
        self.vehicles[id].neg.as_mut().expect("vehicle is negotiating")
    }

    fn after_plan(
        &mut self,
        id: usize,
        now: f64,
        planned: Option<(MobilityProfile, PlannerResult)>,
    ) -> Result<(), SimError> {
        let result = planned.as_ref().map_or(PlannerResult::Infeasible, |(_, r)| *r);
        let outputs = self.neg_mut(id).fsm.step(VehicleEvent::Planned(result))?;
        for out in outputs {
            match out {
                VehicleOutput::SendProposal => {
                    let (profile, _) = planned.clone().expect("proposal has a profile");
                    let delay = self.delay.sample_secs(&mut self.rng_delay);
                    let neg = self.neg_mut(id);
                    neg.current = Some(profile.clone());
                    let at = neg.up.delivery_time(now, delay);
                    self.push_event(at, Ev::ToController { cav: id, profile });
                    self.log(now, Some(id), LogKind::ProposalSent);
                }
                VehicleOutput::SendCancel(reason) => self.fail_negotiation(id, now, Some(reason)),
                VehicleOutput::Plan | VehicleOutput::Agreed => {}
            }
        }
        Ok(())
    }

    fn fail_negotiation(&mut self, id: usize, now: f64, reason: Option<FailureReason>) {
        let veh = &mut self.vehicles[id];
        let Some(neg) = veh.neg.as_mut() else { return };
        if reason.is_none() {
            // Hold broken by the leader: abandon from whatever state.
            if neg.fsm.is_finished() {
                return;
            }
            neg.fsm.state = NegotiationState::BackupTriggered;
            neg.fsm.exchanges += 1;
        }
        match reason {
            Some(FailureReason::Deadline) => self.failures.deadline += 1,
            Some(FailureReason::Infeasible) => self.failures.infeasible += 1,
            Some(FailureReason::ExchangeCap) => self.failures.exchange_cap += 1,
            None => self.failures.gap += 1,
        }
        let label = reason.map_or_else(|| "gap".to_string(), |r| format!("{r:?}"));
        self.log(now, Some(id), LogKind::NegotiationFailed { reason: label });
        self.enter_backup(now);
    }

    /// Stops the controller. Negotiating vehicles and tracking vehicles that
    /// can still stop before the entrance fall back to the priority rule.
    fn enter_backup(&mut self, now: f64) {
        if self.backup {
            return;
        }
        self.backup = true;
        self.backup_times.push(now);
        self.log(now, None, LogKind::BackupOn);
        self.queue.flush();
        self.events.clear();
        let layout = Rc::clone(&self.layout);
        let decel = self.cfg.car_following.decel;
        self.rebuild_lanes();
        for lane in 0..self.by_entry.len() {
            let mut dropped_ahead = false;
            for k in 0..self.by_entry[lane].len() {
                let id = self.by_entry[lane][k].1;
                let veh = &mut self.vehicles[id];
                veh.legacy = true;
                match veh.mode {
                    Mode::Negotiating => {
                        if let Some(neg) = veh.neg.as_mut() {
                            if !neg.fsm.is_finished() {
                                neg.fsm.state = NegotiationState::BackupTriggered;
                            }
                            neg.current = None;
                        }
                        veh.mode = Mode::Approach;
                        veh.backup = true;
                        dropped_ahead = true;
                        let _ = self.table.remove(id as u64);
                    }
                    Mode::Tracking => {
                        let path = layout.path(veh.path);
                        let before_zones = veh.s < path.first_zone_entry() - OCCUPANCY_TOL;
                        let can_stop = veh.v * veh.v / (2.0 * decel) <= self.stop_line - veh.s;
                        if before_zones && (can_stop || dropped_ahead) {
                            veh.mode = Mode::Approach;
                            veh.profile = None;
                            veh.backup = true;
                            dropped_ahead = true;
                            let _ = self.table.remove(id as u64);
                        }
                    }
                    Mode::Approach => {
                        veh.backup = true;
                        dropped_ahead = true;
                    }
                    Mode::Leaving => {}
                }
            }
        }
    }

    fn process_events(&mut self, until: f64) -> Result<(), SimError> {
        while self.events.peek().is_some_and(|e| e.t <= until + 1e-12) {
            let Some(q) = self.events.pop() else { break };
            match q.ev {
                Ev::ToController { cav, profile } => self.controller_receive(cav, profile, q.t)?,
                Ev::ToVehicle { cav, outcome } => self.vehicle_receive(cav, outcome, q.t)?,
                Ev::Deadline { cav } => {
                    let veh = &mut self.vehicles[cav];
                    if veh.mode != Mode::Negotiating {
                        continue;
                    }
                    let Some(neg) = veh.neg.as_mut() else { continue };
                    let outputs = neg.fsm.step(VehicleEvent::Deadline)?;
                    for out in outputs {
                        if let VehicleOutput::SendCancel(r) = out {
                            self.fail_negotiation(cav, q.t, Some(r));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn controller_receive(&mut self, cav: usize, profile: MobilityProfile, now: f64) -> Result<(), SimError> {
        if self.backup {
            return Ok(());
        }
        let serve = if self.queue.in_service() == Some(cav as u64) {
            Some((cav, profile))
        } else {
            self.queue
                .arrive(cav as u64, profile.t_start, profile)
                .map_err(|e| SimError::Protocol(e.to_string()))?
                .map(|(c, p)| (c as usize, p))
        };
        let mut next = serve;
        while let Some((id, profile)) = next.take() {
            let layout = Rc::clone(&self.layout);
            let path = layout.path(self.vehicles[id].path);
            let proposal = Proposal::new(id as u64, path, self.params.length, &profile)?;
            let outcome = self.table.validate(&self.cfg.controller, &proposal);
            let accepted = matches!(outcome, ValidationOutcome::Accept { .. });
            if let ValidationOutcome::Accept { windows } = &outcome {
                self.commit(&proposal, windows)?;
            }
            let delay = self.delay.sample_secs(&mut self.rng_delay);
            let at = self.neg_mut(id).down.delivery_time(now, delay);
            self.push_event(at, Ev::ToVehicle { cav: id, outcome });
            if accepted {
                next = self
                    .queue
                    .finish(id as u64)
                    .map_err(|e| SimError::Protocol(e.to_string()))?
                    .map(|(c, p)| (c as usize, p));
            }
        }
        Ok(())
    }

    fn vehicle_receive(&mut self, cav: usize, outcome: ValidationOutcome, now: f64) -> Result<(), SimError> {
        let layout = Rc::clone(&self.layout);
        let veh = &self.vehicles[cav];
        if self.backup || veh.mode != Mode::Negotiating {
            return Ok(());
        }
        let path = layout.path(veh.path);
        let (windows, is_accept) = match &outcome {
            ValidationOutcome::Accept { windows } => (windows.clone(), true),
            ValidationOutcome::Revise { windows, delay } => {
                let neg = self.neg_mut(cav);
                if neg.last_delay.is_some_and(|p| *delay > 0.5 * p) {
                    neg.stalls += 1;
                }
                neg.last_delay = Some(*delay);
                neg.revisions += 1;
                (windows.clone(), false)
            }
        };
        let veh = &self.vehicles[cav];
        let neg = veh.neg.as_ref().expect("negotiating vehicle");
        let current = neg.current.as_ref().expect("proposal in flight");
        let times = planner::profile_zone_times(current, path, self.params.length)?;
        let accepted = is_accept && fits_windows(&times, &windows, 1e-8);
        self.log(now, Some(cav), LogKind::Response { accepted });
        let outputs = self.neg_mut(cav).fsm.step(VehicleEvent::Response { accepted })?;
        for out in outputs {
            match out {
                VehicleOutput::Agreed => {
                    let veh = &mut self.vehicles[cav];
                    let neg = veh.neg.as_mut().expect("negotiating vehicle");
                    veh.profile = neg.current.take();
                    veh.mode = Mode::Tracking;
                    self.log(now, Some(cav), LogKind::Agreed);
                }
                VehicleOutput::Plan => {
                    let neg = self.vehicles[cav].neg.as_ref().expect("negotiating vehicle");
                    let target = padded_windows(&windows, &times, neg.stalls, neg.revisions > 1);
                    let replan = if neg.stalls > 0 {
                        planner::replan_gentle_from_state
                    } else {
                        planner::replan_from_state
                    };
                    let replanned = replan(&self.params, path, neg.t0, neg.s0, neg.v0, neg.hold_end, &target);
                    let planned = match replanned {
                        Ok(ReplanOutcome::Profile(p)) => Some((p, PlannerResult::Profile)),
                        Ok(ReplanOutcome::Fallback(p)) => Some((p, PlannerResult::Fallback)),
                        Ok(ReplanOutcome::Infeasible) | Err(_) => None,
                    };
                    self.after_plan(cav, now, planned)?;
                }
                VehicleOutput::SendCancel(r) => self.fail_negotiation(cav, now, Some(r)),
                VehicleOutput::SendProposal => {}
            }
        }
        Ok(())
    }

    fn after_move(&mut self, now: f64) {
        let layout = Rc::clone(&self.layout);
        let len = self.params.length;
        let mut occupants = Vec::new();
        let mut exited = Vec::new();
        for &id in &self.active {
            let veh = &mut self.vehicles[id];
            if veh.mode == Mode::Tracking {
                let p = veh.profile.as_ref().expect("tracking vehicle has a profile");
                // Agreement may land mid-step: snap to the profile.
                let (s, v, a) = p.state_at(now);
                veh.s = s;
                veh.v = v;
                veh.a = a;
                if now >= p.t_end {
                    veh.mode = Mode::Leaving;
                    veh.profile = None;
                }
            }
            veh.co2_g += self.cfg.emissions.rate(veh.v, veh.a) * self.dt;
            veh.min_v = veh.min_v.min(veh.v);
            if veh.v < 0.1 {
                if !veh.stopped {
                    veh.stops += 1;
                    veh.stopped = true;
                }
            } else if veh.v > 0.5 {
                veh.stopped = false;
            }
            let path = layout.path(veh.path);
            for z in &path.zone_intervals {
                if occupies(veh.s, len, z.entry, z.exit, OCCUPANCY_TOL) {
                    occupants.push((z.zone, id as u64));
                }
            }
            if veh.s >= path.total_length {
                exited.push(id);
            }
        }
        self.safety.observe(occupants);
        self.table.expire_rows(now, self.cfg.controller.epsilon);
        if !exited.is_empty() {
            self.active.retain(|i| !exited.contains(i));
            for id in exited {
                self.log(now, Some(id), LogKind::Exit);
                let rec = self.record(id, Some(now));
                self.records.push(rec);
            }
        }
        if self.backup && self.active.is_empty() {
            self.backup = false;
            self.log(now, None, LogKind::BackupOff);
        }
    }

    fn record(&self, id: usize, arrive: Option<f64>) -> VehicleRecord {
        let v = &self.vehicles[id];
        let end = arrive.unwrap_or(self.t);
        VehicleRecord {
            id: id as u64,
            entry_road: v.entry_road,
            exit_road: v.exit_road,
            depart: v.depart,
            arrive,
            travel_time: end - v.depart,
            co2_kg: v.co2_g / 1000.0,
            stops: v.stops,
            min_speed: v.min_v,
            messages: v.neg.as_ref().map_or(0, |n| n.fsm.exchanges),
            negotiated: v.neg.is_some(),
            agreed: v.neg.as_ref().is_some_and(|n| n.fsm.state == NegotiationState::Agreed),
            backup: v.backup,
        }
    }

    fn finish(mut self) -> SimResult {
        let mut records = std::mem::take(&mut self.records);
        for &id in &self.active {
            records.push(self.record(id, None));
        }
        let idle = self.cfg.emissions.rate(0.0, 0.0);
        let mut next_id = self.vehicles.len() as u64;
        for q in &self.pending {
            for &(depart, path_id) in q {
                let path = self.layout.path(path_id);
                records.push(VehicleRecord {
                    id: next_id,
                    entry_road: path.entry_road,
                    exit_road: path.exit_road,
                    depart,
                    arrive: None,
                    travel_time: self.t - depart,
                    co2_kg: idle * (self.t - depart) / 1000.0,
                    stops: 1,
                    min_speed: 0.0,
                    messages: 0,
                    negotiated: false,
                    agreed: false,
                    backup: false,
                });
                next_id += 1;
            }
        }
        SimResult {
            records,
            backup_activations: self.backup_times.len(),
            backup_times: self.backup_times,
            failures: self.failures,
            safety: self.safety.report,
            events: self.log,
            end_time: self.t,
        }
    }
}
