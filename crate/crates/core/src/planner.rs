//! Vehicle-side mobility-profile planning.
//!
//! Profiles are piecewise-constant-acceleration trajectories along a path,
//! stored as timestamped waypoints. Every segment boundary is a waypoint, so
//! the acceleration between two consecutive waypoints is exactly
//! `(v1 - v0) / (t1 - t0)` and positions can be reconstructed without error.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{LayoutParams, NegotiationZone, Path, TurnKind, ZoneId};

/// Upper bound on the waypoint count of an emitted profile.
pub const MAX_WAYPOINTS: usize = 40;

const EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("invalid vehicle parameters: {0}")]
    InvalidParams(String),
    #[error("speed {0} m/s cannot hold through a zone of positive length")]
    NonPositiveSpeed(f64),
    #[error("initial speed {v0} m/s exceeds the speed limit {limit} m/s")]
    SpeedAboveLimit { v0: f64, limit: f64 },
    #[error("cannot slow from {v0} m/s to the turning speed before the intersection")]
    TurnDecelerationInfeasible { v0: f64 },
    #[error("profile does not span arc position {0} m")]
    NotSpanned(f64),
    #[error("too many segment breakpoints ({0}) for the waypoint budget")]
    TooManyBreakpoints(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub v_max: f64,
    pub v_max_turn: f64,
    pub a_max: f64,
    /// Comfort deceleration, negative.
    pub b_max: f64,
    pub v_min: f64,
    pub length: f64,
    pub width: f64,
}

impl VehicleParams {
    pub fn for_layout(p: &LayoutParams) -> Self {
        VehicleParams {
            v_max: p.v_max,
            v_max_turn: p.v_max_turn,
            a_max: 2.6,
            b_max: -4.5,
            v_min: 1.0,
            length: 5.0,
            width: 1.8,
        }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        let ok = 0.0 < self.v_min
            && self.v_min < self.v_max_turn
            && self.v_max_turn <= self.v_max
            && self.b_max < 0.0
            && self.a_max > 0.0
            && self.length > 0.0
            && self.width > 0.0;
        if ok
            && [self.v_max, self.a_max, self.b_max, self.length]
                .iter()
                .all(|x| x.is_finite())
        {
            Ok(())
        } else {
            Err(PlanError::InvalidParams(format!("{self:?}")))
        }
    }

    fn turn_cap(&self, path: &Path) -> f64 {
        match path.turn_kind {
            TurnKind::Straight => self.v_max,
            _ => self.v_max_turn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub s: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobilityProfile {
    pub waypoints: Vec<Waypoint>,
    pub t_start: f64,
    /// Time the front bumper reaches the intersection entrance.
    pub t_int: f64,
    pub t_end: f64,
}

impl MobilityProfile {
    /// Builds a profile from raw waypoints, deriving `t_int` from `entrance`.
    pub fn from_waypoints(waypoints: Vec<Waypoint>, entrance: f64) -> Result<Self, PlanError> {
        let (first, last) = match (waypoints.first(), waypoints.last()) {
            (Some(f), Some(l)) => (*f, *l),
            _ => return Err(PlanError::NotSpanned(entrance)),
        };
        let mut p = MobilityProfile {
            waypoints,
            t_start: first.t,
            t_int: f64::NAN,
            t_end: last.t,
        };
        p.t_int = p.time_at(entrance).ok_or(PlanError::NotSpanned(entrance))?;
        Ok(p)
    }

    pub fn start(&self) -> Waypoint {
        self.waypoints[0]
    }

    pub fn end(&self) -> Waypoint {
        *self.waypoints.last().expect("non-empty profile")
    }

    /// Acceleration between waypoint `i` and `i + 1`.
    pub fn accel(&self, i: usize) -> f64 {
        let (a, b) = (self.waypoints[i], self.waypoints[i + 1]);
        (b.v - a.v) / (b.t - a.t)
    }

    /// Position, speed and acceleration at `t`. Outside the profile span the
    /// vehicle is assumed to move at the boundary speed.
    pub fn state_at(&self, t: f64) -> (f64, f64, f64) {
        let first = self.start();
        let last = self.end();
        if t <= first.t {
            return (first.s - first.v * (first.t - t), first.v, 0.0);
        }
        if t >= last.t {
            return (last.s + last.v * (t - last.t), last.v, 0.0);
        }
        let i = self.waypoints.partition_point(|w| w.t <= t) - 1;
        let w = self.waypoints[i];
        let a = self.accel(i);
        let tau = t - w.t;
        (w.s + w.v * tau + 0.5 * a * tau * tau, w.v + a * tau, a)
    }

    pub fn position_at(&self, t: f64) -> f64 {
        self.state_at(t).0
    }

    pub fn speed_at(&self, t: f64) -> f64 {
        self.state_at(t).1
    }

    /// Earliest time the profile reaches arc position `s`, extrapolating at
    /// constant boundary speed outside the span.
    pub fn time_at(&self, s: f64) -> Option<f64> {
        let first = self.start();
        let last = self.end();
        if s <= first.s {
            if s == first.s {
                return Some(first.t);
            }
            return (first.v > EPS).then(|| first.t - (first.s - s) / first.v);
        }
        if s > last.s {
            return (last.v > EPS).then(|| last.t + (s - last.s) / last.v);
        }
        let i = self.waypoints.partition_point(|w| w.s < s).saturating_sub(1);
        let i = i.min(self.waypoints.len() - 2);
        let w = self.waypoints[i];
        let a = self.accel(i);
        let d = s - w.s;
        let tau = if a.abs() < 1e-12 {
            if w.v <= EPS {
                return None;
            }
            d / w.v
        } else {
            let disc = (w.v * w.v + 2.0 * a * d).max(0.0);
            (disc.sqrt() - w.v) / a
        };
        let span = self.waypoints[i + 1].t - w.t;
        Some(w.t + tau.clamp(0.0, span))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneWindow {
    pub zone: ZoneId,
    pub t_enter_min: f64,
    /// `f64::INFINITY` when no later reservation bounds the window.
    pub t_exit_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneTime {
    pub zone: ZoneId,
    pub t_enter: f64,
    pub t_exit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReplanOutcome {
    Profile(MobilityProfile),
    /// Meets only the first window's earliest entry.
    Fallback(MobilityProfile),
    Infeasible,
}

/// Front-bumper entry and rear-bumper exit time for every zone on `path`.
pub fn profile_zone_times(profile: &MobilityProfile, path: &Path, length: f64) -> Result<Vec<ZoneTime>, PlanError> {
    path.zone_intervals
        .iter()
        .map(|z| {
            let t_enter = profile.time_at(z.entry).ok_or(PlanError::NotSpanned(z.entry))?;
            let t_exit = profile
                .time_at(z.exit + length)
                .ok_or(PlanError::NotSpanned(z.exit + length))?;
            Ok(ZoneTime {
                zone: z.zone,
                t_enter,
                t_exit,
            })
        })
        .collect()
}

/// Unconstrained proposal: hold `v0` through the negotiation zone, then drive
/// as fast as the speed limits and comfort bounds allow.
pub fn propose_profile(
    params: &VehicleParams,
    path: &Path,
    t0: f64,
    v0: f64,
    neg_zone: &NegotiationZone,
) -> Result<MobilityProfile, PlanError> {
    Planner::new(params, path, t0, 0.0, v0, neg_zone.length)?.build(None)
}

/// Fastest profile from an arbitrary state, with no constant-speed hold.
/// Used by admission schemes that plan from the vehicle's current position.
pub fn plan_from_state(
    params: &VehicleParams,
    path: &Path,
    t: f64,
    s: f64,
    v: f64,
) -> Result<MobilityProfile, PlanError> {
    Planner::new(params, path, t, s, v, s)?.build(None)
}

/// Unconstrained proposal from an arbitrary state, holding the current
/// speed up to `hold_end`.
pub fn propose_from_state(
    params: &VehicleParams,
    path: &Path,
    t: f64,
    s: f64,
    v: f64,
    hold_end: f64,
) -> Result<MobilityProfile, PlanError> {
    Planner::new(params, path, t, s, v, hold_end.max(s))?.build(None)
}

/// Window-constrained replanning. Families are tried in order: postpone the
/// acceleration, lower the cruise speed up to the first zone, then
/// decelerate-cruise-accelerate.
pub fn replan_profile(
    params: &VehicleParams,
    path: &Path,
    t0: f64,
    v0: f64,
    neg_zone: &NegotiationZone,
    windows: &[ZoneWindow],
) -> Result<ReplanOutcome, PlanError> {
    let planner = Planner::new(params, path, t0, 0.0, v0, neg_zone.length)?;
    planner.replan(windows, false)
}

/// Same as [`replan_profile`] but starting from an arbitrary state.
pub fn replan_from_state(
    params: &VehicleParams,
    path: &Path,
    t: f64,
    s: f64,
    v: f64,
    hold_end: f64,
    windows: &[ZoneWindow],
) -> Result<ReplanOutcome, PlanError> {
    Planner::new(params, path, t, s, v, hold_end.max(s))?.replan(windows, false)
}

/// Like [`replan_from_state`] but tries the lowest cruise speeds first, so
/// the vehicle falls back early instead of closing in on traffic ahead.
pub fn replan_gentle_from_state(
    params: &VehicleParams,
    path: &Path,
    t: f64,
    s: f64,
    v: f64,
    hold_end: f64,
    windows: &[ZoneWindow],
) -> Result<ReplanOutcome, PlanError> {
    Planner::new(params, path, t, s, v, hold_end.max(s))?.replan(windows, true)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileViolation {
    #[error("fewer than two waypoints")]
    TooShort,
    #[error("{0} waypoints exceed the budget")]
    TooManyWaypoints(usize),
    #[error("time not strictly increasing at waypoint {0}")]
    TimeOrder(usize),
    #[error("position decreasing at waypoint {0}")]
    PositionOrder(usize),
    #[error("negative speed at waypoint {0}")]
    NegativeSpeed(usize),
    #[error("acceleration {accel} outside comfort bounds after waypoint {index}")]
    Acceleration { index: usize, accel: f64 },
    #[error("position at waypoint {index} off by {error} m from integrated motion")]
    Reconstruction { index: usize, error: f64 },
    #[error("speed {v} above limit {limit} at waypoint {index}")]
    SpeedLimit { index: usize, v: f64, limit: f64 },
    #[error("speed changes inside the negotiation zone at waypoint {0}")]
    HoldBroken(usize),
}

/// Checks every profile invariant; `hold_end` is the arc position of the
/// negotiation-zone exit.
pub fn check_profile(
    profile: &MobilityProfile,
    params: &VehicleParams,
    path: &Path,
    hold_end: f64,
) -> Result<(), ProfileViolation> {
    const TOL: f64 = 1e-6;
    let w = &profile.waypoints;
    if w.len() < 2 {
        return Err(ProfileViolation::TooShort);
    }
    if w.len() > MAX_WAYPOINTS {
        return Err(ProfileViolation::TooManyWaypoints(w.len()));
    }
    let v_hold = w[0].v;
    let turn_cap = params.turn_cap(path);
    for (i, p) in w.iter().enumerate() {
        if p.v < -TOL {
            return Err(ProfileViolation::NegativeSpeed(i));
        }
        let limit = if p.t >= profile.t_int - TOL {
            turn_cap
        } else {
            params.v_max
        };
        if p.v > limit + TOL {
            return Err(ProfileViolation::SpeedLimit {
                index: i,
                v: p.v,
                limit,
            });
        }
        if i == 0 {
            continue;
        }
        let q = w[i - 1];
        if p.t <= q.t {
            return Err(ProfileViolation::TimeOrder(i));
        }
        if p.s < q.s - TOL {
            return Err(ProfileViolation::PositionOrder(i));
        }
        let accel = (p.v - q.v) / (p.t - q.t);
        if accel > params.a_max + TOL || accel < params.b_max - TOL {
            return Err(ProfileViolation::Acceleration { index: i - 1, accel });
        }
        let error = (q.s + 0.5 * (q.v + p.v) * (p.t - q.t) - p.s).abs();
        if error > 0.01 {
            return Err(ProfileViolation::Reconstruction { index: i, error });
        }
        if q.s < hold_end - TOL && (p.v - v_hold).abs() > TOL {
            return Err(ProfileViolation::HoldBroken(i));
        }
    }
    Ok(())
}

/// Extra speed cap on `[from, to)`.
#[derive(Debug, Clone, Copy)]
struct Cap {
    from: f64,
    to: f64,
    v: f64,
}

struct Planner<'a> {
    params: &'a VehicleParams,
    path: &'a Path,
    t0: f64,
    s0: f64,
    v0: f64,
    hold_end: f64,
    s_end: f64,
    first_entry: f64,
}

enum WindowCheck {
    Ok,
    /// Some zone is entered too early by this many seconds.
    Early(f64),
    /// Some zone is left too late; delaying further cannot help.
    Late,
}

impl<'a> Planner<'a> {
    fn new(
        params: &'a VehicleParams,
        path: &'a Path,
        t0: f64,
        s0: f64,
        v0: f64,
        hold_end: f64,
    ) -> Result<Self, PlanError> {
        params.validate()?;
        if !(v0 >= 0.0) {
            return Err(PlanError::NonPositiveSpeed(v0));
        }
        if hold_end > s0 + EPS && v0 <= EPS {
            return Err(PlanError::NonPositiveSpeed(v0));
        }
        if v0 > params.v_max + 1e-6 {
            return Err(PlanError::SpeedAboveLimit {
                v0,
                limit: params.v_max,
            });
        }
        Ok(Planner {
            params,
            path,
            t0,
            s0,
            v0: v0.min(params.v_max),
            hold_end,
            s_end: path.last_zone_exit() + params.length,
            first_entry: path.first_zone_entry(),
        })
    }

    fn build(&self, extra: Option<Cap>) -> Result<MobilityProfile, PlanError> {
        let p = self.params;
        let a = p.a_max;
        let b = -p.b_max;
        let entrance = self.path.approach_length;
        let turn_cap = p.turn_cap(self.path);

        let mut cuts = vec![self.s0, self.hold_end, entrance, self.s_end];
        if let Some(c) = extra {
            cuts.push(c.from);
            cuts.push(c.to);
        }
        cuts.retain(|&x| x >= self.s0 && x <= self.s_end);
        cuts.sort_by(f64::total_cmp);
        cuts.dedup_by(|x, y| (*x - *y).abs() < 1e-9);

        let n = cuts.len() - 1;
        let mut caps = Vec::with_capacity(n);
        for k in 0..n {
            let mid = 0.5 * (cuts[k] + cuts[k + 1]);
            let mut cap = if mid >= entrance { turn_cap } else { p.v_max };
            if let Some(c) = extra {
                if mid >= c.from && mid < c.to {
                    cap = cap.min(c.v);
                }
            }
            if mid < self.hold_end {
                cap = self.v0;
            }
            caps.push(cap.max(if k == 0 { self.v0 } else { 0.0 }));
        }

        // Boundary speeds: forward (acceleration) and backward (braking) passes.
        let mut x = vec![0.0; n + 1];
        x[0] = self.v0;
        for k in 1..=n {
            let cap = if k < n { caps[k - 1].min(caps[k]) } else { caps[n - 1] };
            let d = cuts[k] - cuts[k - 1];
            x[k] = cap.min((x[k - 1] * x[k - 1] + 2.0 * a * d).sqrt());
        }
        for k in (0..n).rev() {
            let d = cuts[k + 1] - cuts[k];
            let reach = (x[k + 1] * x[k + 1] + 2.0 * b * d).sqrt();
            if reach < x[k] {
                if (k == 0 || cuts[k] <= self.hold_end + 1e-9 && self.hold_end > self.s0) && reach < x[k] - 1e-7 {
                    return Err(PlanError::TurnDecelerationInfeasible { v0: self.v0 });
                }
                x[k] = reach;
            }
        }

        let mut segs: Vec<(f64, f64)> = Vec::new(); // (duration, accel)
        let mut push = |dur: f64, acc: f64| {
            if dur <= 1e-12 {
                return;
            }
            match segs.last_mut() {
                Some(last) if (last.1 - acc).abs() < 1e-12 => last.0 += dur,
                _ => segs.push((dur, acc)),
            }
        };
        for k in 0..n {
            let (u, w, c) = (x[k], x[k + 1], caps[k]);
            let len = cuts[k + 1] - cuts[k];
            let peak2 = (2.0 * a * b * len + b * u * u + a * w * w) / (a + b);
            let peak = peak2.sqrt().min(c).max(u.max(w));
            let d1 = (peak * peak - u * u) / (2.0 * a);
            let d3 = (peak * peak - w * w) / (2.0 * b);
            let d2 = (len - d1 - d3).max(0.0);
            push((peak - u) / a, a);
            if d2 > 1e-12 {
                if peak <= EPS {
                    return Err(PlanError::NonPositiveSpeed(peak));
                }
                push(d2 / peak, 0.0);
            }
            push((peak - w) / b, -b);
        }

        let mut pts = Vec::with_capacity(segs.len() + 1);
        let (mut t, mut s, mut v) = (self.t0, self.s0, self.v0);
        pts.push(Waypoint { t, s, v });
        for &(dur, acc) in &segs {
            s += v * dur + 0.5 * acc * dur * dur;
            v = (v + acc * dur).max(0.0);
            t += dur;
            pts.push(Waypoint { t, s, v });
        }
        if let Some(last) = pts.last_mut() {
            last.s = self.s_end;
        }
        if pts.len() < 2 {
            return Err(PlanError::NotSpanned(self.s_end));
        }
        let waypoints = fill_waypoints(&pts)?;
        MobilityProfile::from_waypoints(waypoints, entrance)
    }

    fn entry_time(&self, profile: &MobilityProfile) -> f64 {
        profile.time_at(self.first_entry).unwrap_or(f64::INFINITY)
    }

    fn check(&self, profile: &MobilityProfile, windows: &[ZoneWindow]) -> Result<WindowCheck, PlanError> {
        let times = profile_zone_times(profile, self.path, self.params.length)?;
        let mut early: f64 = 0.0;
        let mut late = false;
        for w in windows {
            let Some(zt) = times.iter().find(|z| z.zone == w.zone) else {
                continue;
            };
            early = early.max(w.t_enter_min - zt.t_enter);
            if zt.t_exit > w.t_exit_max + 1e-3 {
                late = true;
            }
        }
        Ok(if early > 1e-9 {
            WindowCheck::Early(early)
        } else if late {
            WindowCheck::Late
        } else {
            WindowCheck::Ok
        })
    }

    /// Finds the parameter in `[lo, hi]` whose profile enters the first zone
    /// no earlier than `target`, as early as possible. `entry` must be
    /// monotone in the parameter; `increasing` gives its direction.
    fn solve<F>(&self, lo: f64, hi: f64, increasing: bool, target: f64, make: F) -> Option<MobilityProfile>
    where
        F: Fn(f64) -> Option<MobilityProfile>,
    {
        let (mut fast, mut slow) = if increasing { (lo, hi) } else { (hi, lo) };
        let slow_profile = make(slow)?;
        if self.entry_time(&slow_profile) < target {
            return None;
        }
        let fast_profile = make(fast)?;
        if self.entry_time(&fast_profile) >= target {
            return Some(fast_profile);
        }
        let mut best = slow_profile;
        for _ in 0..60 {
            let mid = 0.5 * (fast + slow);
            if mid == fast || mid == slow {
                break;
            }
            match make(mid) {
                Some(p) if self.entry_time(&p) >= target => {
                    best = p;
                    slow = mid;
                }
                _ => fast = mid,
            }
        }
        Some(best)
    }

    /// Cap at `v` starting where braking from the hold speed right after
    /// the hold reaches `v`.
    fn slow_cap(&self, to: f64, v: f64) -> Option<Cap> {
        let b = -self.params.b_max;
        let from = self.hold_end + (self.v0 * self.v0 - v * v).max(0.0) / (2.0 * b);
        (from < to).then_some(Cap { from, to, v })
    }

    fn postpone(&self, target: f64) -> Option<MobilityProfile> {
        let v0 = self.v0;
        if v0 <= EPS {
            return None;
        }
        self.solve(self.hold_end, self.s_end, true, target, |s_a| {
            self.build(Some(Cap {
                from: self.hold_end,
                to: s_a,
                v: v0,
            }))
            .ok()
        })
    }

    fn slow_cruise(&self, target: f64) -> Option<MobilityProfile> {
        let v_min = self.params.v_min;
        let v_hi = self.v0.max(v_min);
        self.solve(v_min, v_hi, false, target, |v_c| {
            self.build(Some(self.slow_cap(self.first_entry, v_c)?)).ok()
        })
    }

    fn dip(&self, target: f64, v_c: f64) -> Option<MobilityProfile> {
        let from = self.slow_cap(self.first_entry, v_c)?.from;
        self.solve(from, self.first_entry, true, target, |s_x| {
            self.build(Some(Cap { from, to: s_x, v: v_c })).ok()
        })
    }

    fn replan(&self, windows: &[ZoneWindow], gentle: bool) -> Result<ReplanOutcome, PlanError> {
        let base = self.build(None)?;
        if matches!(self.check(&base, windows)?, WindowCheck::Ok) {
            return Ok(ReplanOutcome::Profile(base));
        }
        let first_min = windows.first().map_or(f64::NEG_INFINITY, |w| w.t_enter_min);
        let unconstrained = self.entry_time(&base);
        let mut target = first_min.max(unconstrained);

        let v_min = self.params.v_min;
        let v_top = self.v0.max(v_min);
        const DIP_STEPS: usize = 12;
        for _ in 0..50 {
            let mut early: Option<f64> = None;
            let mut note = |c: WindowCheck| -> Option<()> {
                match c {
                    WindowCheck::Ok => return Some(()),
                    WindowCheck::Early(d) => early = Some(early.map_or(d, |e: f64| e.min(d))),
                    WindowCheck::Late => {}
                }
                None
            };
            let shaped = || [self.postpone(target), self.slow_cruise(target)].into_iter().flatten();
            let dips = (0..=DIP_STEPS).filter_map(|i| {
                let i = if gentle { DIP_STEPS - i } else { i };
                self.dip(target, v_top - (v_top - v_min) * i as f64 / DIP_STEPS as f64)
            });
            let candidates: Box<dyn Iterator<Item = MobilityProfile>> = if gentle {
                Box::new(dips.chain(shaped()))
            } else {
                Box::new(shaped().chain(dips))
            };
            for p in candidates {
                if note(self.check(&p, windows)?).is_some() {
                    return Ok(ReplanOutcome::Profile(p));
                }
            }
            match early {
                Some(d) => target += d.max(1e-6),
                None => break,
            }
        }

        let fallback_target = first_min.max(unconstrained);
        match self
            .postpone(fallback_target)
            .or_else(|| self.slow_cruise(fallback_target))
        {
            Some(p) => Ok(ReplanOutcome::Fallback(p)),
            None => Ok(ReplanOutcome::Infeasible),
        }
    }
}

/// Pads segment breakpoints with time-uniform samples up to the waypoint
/// budget. Samples landing on a breakpoint are dropped.
fn fill_waypoints(breaks: &[Waypoint]) -> Result<Vec<Waypoint>, PlanError> {
    if breaks.len() > MAX_WAYPOINTS {
        return Err(PlanError::TooManyBreakpoints(breaks.len()));
    }
    let t0 = breaks[0].t;
    let t1 = breaks[breaks.len() - 1].t;
    let extra = MAX_WAYPOINTS - breaks.len();
    let mut out = Vec::with_capacity(MAX_WAYPOINTS);
    let mut j = 0;
    for k in 1..=extra {
        let t = t0 + (t1 - t0) * k as f64 / (extra + 1) as f64;
        while j < breaks.len() && breaks[j].t <= t {
            out.push(breaks[j]);
            j += 1;
        }
        let prev = *out.last().expect("first breakpoint precedes samples");
        if j >= breaks.len() || t - prev.t < 1e-6 || breaks[j].t - t < 1e-6 {
            continue;
        }
        let next = breaks[j];
        let a = (next.v - prev.v) / (next.t - prev.t);
        let tau = t - prev.t;
        out.push(Waypoint {
            t,
            s: prev.s + prev.v * tau + 0.5 * a * tau * tau,
            v: prev.v + a * tau,
        });
    }
    out.extend_from_slice(&breaks[j..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kmh;
    use crate::layout::{build_layout, IntersectionLayout, LayoutKind, LayoutOverrides, Road};

    fn setup(kind: LayoutKind, l_neg: f64) -> (IntersectionLayout, VehicleParams, NegotiationZone) {
        let mut layout = build_layout(kind, &LayoutOverrides::default()).unwrap();
        let v = layout.params.v_max;
        layout.configure_negotiation(l_neg, v, 4.5).unwrap();
        let params = VehicleParams::for_layout(&layout.params);
        let nz = layout.negotiation_zones[0];
        (layout, params, nz)
    }

    /// Dense forward-Euler integration of the profile's implied acceleration.
    fn integrate(profile: &MobilityProfile, dt: f64) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        let w0 = profile.start();
        let (mut t, mut s, mut v) = (w0.t, w0.s, w0.v);
        while t < profile.t_end + 2.0 * dt {
            out.push((t, s));
            let (_, _, a) = profile.state_at(t + 0.5 * dt);
            s += v * dt + 0.5 * a * dt * dt;
            v += a * dt;
            t += dt;
        }
        out
    }

    #[test]
    fn straight_constant_speed() {
        let (layout, params, nz) = setup(LayoutKind::FourWay1L, 2.0);
        let path = layout.path_between(Road::West, Road::East).unwrap();
        let v = kmh(50.0);
        let p = propose_profile(&params, path, 0.0, v, &nz).unwrap();
        assert!((p.t_int - 100.0 / v).abs() < 1e-9);
        assert!((p.t_int - 7.2).abs() < 1e-3);
        assert!(p.waypoints.iter().all(|w| (w.v - v).abs() < 1e-12));
        assert!(p.waypoints.len() <= MAX_WAYPOINTS);
        check_profile(&p, &params, path, nz.length).unwrap();
    }

    #[test]
    fn right_turn_decelerates_before_entrance() {
        let (layout, params, nz) = setup(LayoutKind::FourWay1L, 2.0);
        let path = layout.path_between(Road::West, Road::South).unwrap();
        let v0 = kmh(50.0);
        let p = propose_profile(&params, path, 0.0, v0, &nz).unwrap();
        check_profile(&p, &params, path, nz.length).unwrap();
        // The braking phase is the only stretch at b_max.
        let braking: f64 = (0..p.waypoints.len() - 1)
            .filter(|&i| (p.accel(i) - params.b_max).abs() < 1e-9)
            .map(|i| p.waypoints[i + 1].t - p.waypoints[i].t)
            .sum();
        let expected = (kmh(50.0) - kmh(20.0)) / 4.5;
        assert!((braking - expected).abs() < 1e-9, "{braking} vs {expected}");
        assert!((expected - 1.852).abs() < 1e-3);
        assert!((p.speed_at(p.t_int) - kmh(20.0)).abs() < 1e-9);
    }

    #[test]
    fn zero_speed_is_rejected() {
        let (layout, params, nz) = setup(LayoutKind::FourWay1L, 2.0);
        let path = layout.path_between(Road::West, Road::East).unwrap();
        assert!(matches!(
            propose_profile(&params, path, 0.0, 0.0, &nz),
            Err(PlanError::NonPositiveSpeed(_))
        ));
    }

    #[test]
    fn zone_times_constant_speed() {
        let (layout, params, nz) = setup(LayoutKind::FourWay1L, 2.0);
        let path = layout.path_between(Road::West, Road::East).unwrap();
        let v = kmh(50.0);
        let p = propose_profile(&params, path, 0.0, v, &nz).unwrap();
        let times = profile_zone_times(&p, path, params.length).unwrap();
        assert!((times[0].t_enter - 100.0 / v).abs() < 1e-6);
        assert!((times[0].t_exit - 112.2 / v).abs() < 1e-6);
        assert!((times[0].t_exit - 8.078).abs() < 1e-3);
    }

    #[test]
    fn zone_times_match_dense_integration() {
        let (layout, params, nz) = setup(LayoutKind::FourWay1L, 2.0);
        let path = layout.path_between(Road::West, Road::South).unwrap();
        let p = propose_profile(&params, path, 3.0, kmh(50.0), &nz).unwrap();
        let samples = integrate(&p, 1e-3);
        let crossing = |pos: f64| samples.iter().find(|&&(_, s)| s >= pos).map(|&(t, _)| t).unwrap();
        for zt in profile_zone_times(&p, path, params.length).unwrap() {
            let z = path.zone_intervals.iter().find(|z| z.zone == zt.zone).unwrap();
            assert!((crossing(z.entry) - zt.t_enter).abs() < 2e-3);
            assert!((crossing(z.exit + params.length) - zt.t_exit).abs() < 2e-3);
        }
    }

    #[test]
    fn trivial_windows_reproduce_proposal() {
        let (layout, params, nz) = setup(LayoutKind::FourWay1L, 2.0);
        let path = layout.path_between(Road::West, Road::North).unwrap();
        let v = kmh(50.0);
        let p = propose_profile(&params, path, 0.0, v, &nz).unwrap();
        let windows: Vec<_> = path
            .zones()
            .map(|zone| ZoneWindow {
                zone,
                t_enter_min: 0.0,
                t_exit_max: f64::INFINITY,
            })
            .collect();
        assert_eq!(
            replan_profile(&params, path, 0.0, v, &nz, &windows).unwrap(),
            ReplanOutcome::Profile(p)
        );
    }

    #[test]
    fn delayed_entry_hits_target_exactly() {
        let (layout, params, nz) = setup(LayoutKind::FourWay1L, 2.0);
        let path = layout.path_between(Road::West, Road::East).unwrap();
        let v = kmh(50.0);
        let windows = [ZoneWindow {
            zone: path.zone_intervals[0].zone,
            t_enter_min: 9.0,
            t_exit_max: f64::INFINITY,
        }];
        let ReplanOutcome::Profile(p) = replan_profile(&params, path, 0.0, v, &nz, &windows).unwrap() else {
            panic!("expected a profile");
        };
        check_profile(&p, &params, path, nz.length).unwrap();
        let entry = profile_zone_times(&p, path, params.length).unwrap()[0].t_enter;
        assert!(entry >= 9.0 - 1e-9 && entry - 9.0 < 1e-3, "{entry}");

        // Grid oracle: the slowest cruise speed reaching the zone by 9.0 s
        // under the decelerate-then-cruise shape.
        let b = 4.5;
        let arrival = |vc: f64| {
            let d_dec = (v * v - vc * vc) / (2.0 * b);
            2.0 / v + (v - vc) / b + (100.0 - 2.0 - d_dec) / vc
        };
        let mut best = 0.0;
        let mut vc = v;
        while vc > 1.0 {
            if arrival(vc) >= 9.0 {
                best = vc;
                break;
            }
            vc -= 1e-4;
        }
        let cruise = p.speed_at(8.5);
        assert!((cruise - best).abs() < 2e-3, "{cruise} vs {best}");
    }

    #[test]
    fn huge_delay_is_fallback_or_infeasible() {
        let (layout, params, nz) = setup(LayoutKind::FourWay1L, 2.0);
        let path = layout.path_between(Road::West, Road::East).unwrap();
        let v = kmh(50.0);
        let window = |t| {
            [ZoneWindow {
                zone: path.zone_intervals[0].zone,
                t_enter_min: t,
                t_exit_max: f64::INFINITY,
            }]
        };
        // Longest reachable delay: slow to v_min right after the hold.
        let b = 4.5;
        let d_dec = (v * v - 1.0) / (2.0 * b);
        let t_max = 2.0 / v + (v - 1.0) / b + (98.0 - d_dec) / 1.0;
        let out = replan_profile(&params, path, 0.0, v, &nz, &window(t_max + 1.0)).unwrap();
        assert_eq!(out, ReplanOutcome::Infeasible);
        let out = replan_profile(&params, path, 0.0, v, &nz, &window(t_max - 1.0)).unwrap();
        assert!(matches!(out, ReplanOutcome::Profile(_)));
    }

    #[test]
    fn late_exit_gives_fallback() {
        let (layout, params, nz) = setup(LayoutKind::FourWay1L, 2.0);
        let path = layout.path_between(Road::West, Road::East).unwrap();
        let v = kmh(50.0);
        let z = &path.zone_intervals;
        let windows = [
            ZoneWindow {
                zone: z[0].zone,
                t_enter_min: 10.0,
                t_exit_max: 10.1,
            },
            ZoneWindow {
                zone: z[1].zone,
                t_enter_min: 10.0,
                t_exit_max: 10.2,
            },
        ];
        let out = replan_profile(&params, path, 0.0, v, &nz, &windows).unwrap();
        let ReplanOutcome::Fallback(p) = out else {
            panic!("{out:?}")
        };
        let entry = profile_zone_times(&p, path, params.length).unwrap()[0].t_enter;
        assert!((10.0 - 1e-9..10.001).contains(&entry));
    }

    #[test]
    fn plan_from_standstill() {
        let (layout, params, _) = setup(LayoutKind::FourWay2L, 0.0);
        let path = layout.path_between(Road::North, Road::East).unwrap();
        let p = plan_from_state(&params, path, 5.0, 99.0, 0.0).unwrap();
        check_profile(&p, &params, path, 99.0).unwrap();
        assert!(p.t_int > 5.0);
    }

    #[test]
    fn all_paths_propose_valid_profiles() {
        for kind in LayoutKind::ALL {
            let (layout, params, nz) = setup(kind, 10.0);
            for path in &layout.paths {
                let p = propose_profile(&params, path, 1.0, layout.params.v_max, &nz).unwrap();
                check_profile(&p, &params, path, nz.length).unwrap();
                assert!((p.end().s - (path.last_zone_exit() + params.length)).abs() < 1e-6);
            }
        }
    }
}
