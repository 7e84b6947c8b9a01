//! Intersection geometry: lanes, paths, conflict zones and negotiation zones
//! for the four supported layouts, plus the zone-design formulas.
//!
//! Arc positions along a [`Path`] are measured from the start of the
//! negotiation zone of its entry lane, so the intersection entrance sits at
//! arc position `approach_length` on every path.

pub mod geometry;

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kmh;
use geometry::{membership_changes, Centerline, Point, Rect, Segment};

#[derive(Debug, Error, PartialEq)]
pub enum LayoutError {
    #[error("unknown layout kind `{0}`")]
    UnknownKind(String),
    #[error("invalid layout parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },
    #[error("no path from lane {entry} to lane {exit}")]
    DisallowedPair { entry: LaneId, exit: LaneId },
    #[error("no path from {entry} to {exit}")]
    DisallowedRoads { entry: Road, exit: Road },
    #[error("braking deceleration must be positive, got {0}")]
    NonPositiveDeceleration(f64),
    #[error(
        "negotiation zone does not fit: length {length} m + braking distance {braking} m exceeds approach {approach} m"
    )]
    NegotiationZoneTooLong { length: f64, braking: f64, approach: f64 },
    #[error("layout invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayoutKind {
    #[serde(rename = "four-way-1L")]
    FourWay1L,
    #[serde(rename = "three-way-1L")]
    ThreeWay1L,
    #[serde(rename = "roundabout")]
    Roundabout,
    #[serde(rename = "four-way-2L")]
    FourWay2L,
}

impl LayoutKind {
    pub const ALL: [LayoutKind; 4] = [
        LayoutKind::FourWay1L,
        LayoutKind::ThreeWay1L,
        LayoutKind::Roundabout,
        LayoutKind::FourWay2L,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayoutKind::FourWay1L => "four-way-1L",
            LayoutKind::ThreeWay1L => "three-way-1L",
            LayoutKind::Roundabout => "roundabout",
            LayoutKind::FourWay2L => "four-way-2L",
        }
    }

    pub fn zone_count(self) -> usize {
        match self {
            LayoutKind::FourWay1L => 4,
            LayoutKind::ThreeWay1L => 3,
            LayoutKind::Roundabout | LayoutKind::FourWay2L => 8,
        }
    }

    pub fn roads(self) -> &'static [Road] {
        match self {
            LayoutKind::ThreeWay1L => &[Road::West, Road::East, Road::South],
            _ => &[Road::North, Road::East, Road::South, Road::West],
        }
    }
}

impl fmt::Display for LayoutKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayoutKind {
    type Err = LayoutError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LayoutKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| LayoutError::UnknownKind(s.to_string()))
    }
}

/// Cardinal direction of a road arm (roundabout arms reuse the same names).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Road {
    North,
    East,
    South,
    West,
}

impl Road {
    /// Direction from the intersection center towards the arm.
    pub fn angle(self) -> f64 {
        match self {
            Road::East => 0.0,
            Road::North => FRAC_PI_2,
            Road::West => PI,
            Road::South => 3.0 * FRAC_PI_2,
        }
    }

    fn from_angle(angle: f64) -> Road {
        let quarter = (angle.rem_euclid(2.0 * PI) / FRAC_PI_2).round() as i64 % 4;
        match quarter {
            0 => Road::East,
            1 => Road::North,
            2 => Road::West,
            _ => Road::South,
        }
    }

    /// Vehicles on the East-West axis have precedence under the priority rule.
    pub fn is_horizontal(self) -> bool {
        matches!(self, Road::East | Road::West)
    }

    pub fn short(self) -> &'static str {
        match self {
            Road::North => "N",
            Road::East => "E",
            Road::South => "S",
            Road::West => "W",
        }
    }
}

impl fmt::Display for Road {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Road::North => "North",
            Road::East => "East",
            Road::South => "South",
            Road::West => "West",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LaneId(pub u16);

impl fmt::Display for LaneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "lane{}", self.0)
    }
}

/// Conflict-zone label, numbered from 1 as in the scheduling-table columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ZoneId(pub u16);

impl ZoneId {
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }
}

impl fmt::Display for ZoneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "zone{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PathId(pub u16);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LaneDirection {
    Incoming,
    Outgoing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    pub id: LaneId,
    pub road: Road,
    pub direction: LaneDirection,
    /// 0 is the rightmost (outer) lane.
    pub index: u8,
    pub width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TurnKind {
    Straight,
    Left,
    Right,
    RoundaboutExit(u8),
}

impl TurnKind {
    pub fn is_straight(self) -> bool {
        self == TurnKind::Straight
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConflictZone {
    pub id: ZoneId,
    pub shape: Rect,
}

/// Stretch of a path inside one conflict zone, in arc positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZoneInterval {
    pub zone: ZoneId,
    pub entry: f64,
    pub exit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub id: PathId,
    pub entry_lane: LaneId,
    pub exit_lane: LaneId,
    pub entry_road: Road,
    pub exit_road: Road,
    pub turn_kind: TurnKind,
    /// Arc position of the intersection entrance (the approach distance L).
    pub approach_length: f64,
    /// Arc position where the path leaves the intersection area.
    pub exit_start: f64,
    /// Arc position of the end of the outgoing road.
    pub total_length: f64,
    pub zone_intervals: Vec<ZoneInterval>,
    pub centerline: Centerline,
}

impl Path {
    pub fn first_zone_entry(&self) -> f64 {
        self.zone_intervals.first().map_or(self.approach_length, |z| z.entry)
    }

    pub fn last_zone_exit(&self) -> f64 {
        self.zone_intervals.last().map_or(self.exit_start, |z| z.exit)
    }

    pub fn zones(&self) -> impl Iterator<Item = ZoneId> + '_ {
        self.zone_intervals.iter().map(|z| z.zone)
    }

    pub fn crosses(&self, zone: ZoneId) -> bool {
        self.zones().any(|z| z == zone)
    }

    pub fn shares_zone_with(&self, other: &Path) -> bool {
        self.zones().any(|z| other.crosses(z))
    }

    pub fn point_at(&self, s: f64) -> Point {
        self.centerline.point_at(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NegotiationZone {
    pub lane: LaneId,
    /// Distance from the road origin to the zone start.
    pub start_pos: f64,
    pub length: f64,
    pub hold_speed: f64,
}

/// Dimensions of a layout. Defaults follow the reference simulation settings;
/// ring radius is a declared default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutParams {
    pub approach_length: f64,
    pub road_length: f64,
    pub lane_width: f64,
    /// Side of the square zones (four-way-1L) or length of the rectangular ones.
    pub zone_length: f64,
    pub zone_width: f64,
    /// Side of the secondary square zones (roundabout, four-way-2L).
    pub square_side: f64,
    pub ring_radius: f64,
    pub v_max: f64,
    pub v_max_turn: f64,
}

impl LayoutParams {
    pub fn defaults(kind: LayoutKind) -> Self {
        let base = LayoutParams {
            approach_length: 100.0,
            road_length: 200.0,
            lane_width: 3.2,
            zone_length: 7.2,
            zone_width: 7.2,
            square_side: 0.0,
            ring_radius: 0.0,
            v_max: kmh(50.0),
            v_max_turn: kmh(20.0),
        };
        match kind {
            LayoutKind::FourWay1L => base,
            LayoutKind::ThreeWay1L => LayoutParams {
                zone_width: 3.6,
                ..base
            },
            LayoutKind::Roundabout => LayoutParams {
                zone_length: 5.2,
                zone_width: 3.2,
                square_side: 3.0,
                ring_radius: 12.0,
                v_max: kmh(23.0),
                v_max_turn: kmh(23.0),
                ..base
            },
            LayoutKind::FourWay2L => LayoutParams {
                zone_length: 8.2,
                zone_width: 3.2,
                square_side: 3.2,
                ..base
            },
        }
    }
}

/// Optional dimension overrides, as found in scenario config files.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutOverrides {
    pub approach_length: Option<f64>,
    pub road_length: Option<f64>,
    pub lane_width: Option<f64>,
    pub zone_length: Option<f64>,
    pub zone_width: Option<f64>,
    pub square_side: Option<f64>,
    pub ring_radius: Option<f64>,
    pub v_max: Option<f64>,
    pub v_max_turn: Option<f64>,
}

impl LayoutOverrides {
    pub fn apply(&self, mut p: LayoutParams) -> Result<LayoutParams, LayoutError> {
        let fields: [(&'static str, Option<f64>, &mut f64); 9] = [
            ("approach_length", self.approach_length, &mut p.approach_length),
            ("road_length", self.road_length, &mut p.road_length),
            ("lane_width", self.lane_width, &mut p.lane_width),
            ("zone_length", self.zone_length, &mut p.zone_length),
            ("zone_width", self.zone_width, &mut p.zone_width),
            ("square_side", self.square_side, &mut p.square_side),
            ("ring_radius", self.ring_radius, &mut p.ring_radius),
            ("v_max", self.v_max, &mut p.v_max),
            ("v_max_turn", self.v_max_turn, &mut p.v_max_turn),
        ];
        for (field, value, slot) in fields {
            if let Some(v) = value {
                if !(v.is_finite() && v > 0.0) {
                    return Err(LayoutError::InvalidParameter {
                        field,
                        reason: format!("must be positive, got {v}"),
                    });
                }
                *slot = v;
            }
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntersectionLayout {
    pub kind: LayoutKind,
    pub params: LayoutParams,
    pub lanes: Vec<Lane>,
    pub conflict_zones: Vec<ConflictZone>,
    pub paths: Vec<Path>,
    pub negotiation_zones: Vec<NegotiationZone>,
}

/// Minimum distance between the negotiation-zone end and the intersection
/// entrance that lets a vehicle at `v_neg` stop with deceleration `b`.
pub fn min_negotiation_distance(v_neg: f64, b: f64) -> Result<f64, LayoutError> {
    if !(b > 0.0) {
        return Err(LayoutError::NonPositiveDeceleration(b));
    }
    Ok(v_neg * v_neg / (2.0 * b))
}

/// Highest negotiation-zone speed that still allows stopping within `d`.
pub fn max_speed_for_distance(d: f64, b: f64) -> Result<f64, LayoutError> {
    if !(b > 0.0) {
        return Err(LayoutError::NonPositiveDeceleration(b));
    }
    Ok((2.0 * b * d.max(0.0)).sqrt())
}

/// Negotiation-zone length needed to finish a negotiation lasting `t_neg_max`.
pub fn min_negotiation_length(v_neg: f64, t_neg_max: f64) -> f64 {
    v_neg * t_neg_max
}

pub fn build_layout(kind: LayoutKind, overrides: &LayoutOverrides) -> Result<IntersectionLayout, LayoutError> {
    let params = overrides.apply(LayoutParams::defaults(kind))?;
    validate_params(kind, &params)?;
    let (zones, sketches) = match kind {
        LayoutKind::FourWay1L => four_way_1l(&params),
        LayoutKind::ThreeWay1L => three_way_1l(&params),
        LayoutKind::Roundabout => roundabout(&params),
        LayoutKind::FourWay2L => four_way_2l(&params),
    };
    let inside = intersection_area(kind, &params);

    let mut lanes: Vec<Lane> = Vec::new();
    let mut lane_for = |road: Road, direction: LaneDirection, index: u8| -> LaneId {
        if let Some(l) = lanes
            .iter()
            .find(|l| l.road == road && l.direction == direction && l.index == index)
        {
            return l.id;
        }
        let id = LaneId(lanes.len() as u16);
        lanes.push(Lane {
            id,
            road,
            direction,
            index,
            width: params.lane_width,
        });
        id
    };

    let mut paths = Vec::with_capacity(sketches.len());
    for (i, sk) in sketches.into_iter().enumerate() {
        let entry_lane = lane_for(sk.entry_road, LaneDirection::Incoming, sk.entry_index);
        let exit_lane = lane_for(sk.exit_road, LaneDirection::Outgoing, sk.exit_index);
        let raw = Centerline::new(sk.segments);
        let raw_len = raw.length();
        let entrance = membership_changes(&raw, 0.0, raw_len, 0.01, &inside)
            .into_iter()
            .find(|&(_, now_inside)| now_inside)
            .map(|(s, _)| s)
            .ok_or_else(|| LayoutError::Invariant(format!("path {i} never enters the intersection")))?;
        let line = raw.with_origin(entrance - params.approach_length);
        let approach = params.approach_length;
        let exit_start = membership_changes(&line, approach, line.length(), 0.01, &inside)
            .into_iter()
            .find(|&(_, now_inside)| !now_inside)
            .map(|(s, _)| s)
            .ok_or_else(|| LayoutError::Invariant(format!("path {i} never leaves the intersection")))?;
        let mut zone_intervals = Vec::new();
        for zone in &zones {
            let changes = membership_changes(&line, approach - 2.0, exit_start + 2.0, 0.01, |p| {
                zone.shape.contains(p)
            });
            let mut open = None;
            for (s, now_inside) in changes {
                if now_inside {
                    open = Some(s);
                } else if let Some(entry) = open.take() {
                    zone_intervals.push(ZoneInterval {
                        zone: zone.id,
                        entry,
                        exit: s,
                    });
                }
            }
            if open.is_some() {
                return Err(LayoutError::Invariant(format!("path {i} ends inside {}", zone.id)));
            }
        }
        zone_intervals.sort_by(|a, b| a.entry.total_cmp(&b.entry));
        paths.push(Path {
            id: PathId(i as u16),
            entry_lane,
            exit_lane,
            entry_road: sk.entry_road,
            exit_road: sk.exit_road,
            turn_kind: sk.turn,
            approach_length: approach,
            exit_start,
            total_length: exit_start + params.road_length,
            zone_intervals,
            centerline: line,
        });
    }

    lanes.sort_by_key(|l| l.id);
    let mut layout = IntersectionLayout {
        kind,
        params,
        lanes,
        conflict_zones: zones,
        paths,
        negotiation_zones: Vec::new(),
    };
    layout.configure_negotiation(0.0, params.v_max, 4.5)?;
    layout.check_invariants()?;
    Ok(layout)
}

fn validate_params(kind: LayoutKind, p: &LayoutParams) -> Result<(), LayoutError> {
    let bad = |field, reason: String| Err(LayoutError::InvalidParameter { field, reason });
    if p.approach_length >= p.road_length {
        return bad(
            "approach_length",
            format!(
                "{} m must be shorter than road_length {} m",
                p.approach_length, p.road_length
            ),
        );
    }
    if p.v_max_turn > p.v_max {
        return bad(
            "v_max_turn",
            format!("{} m/s exceeds v_max {} m/s", p.v_max_turn, p.v_max),
        );
    }
    match kind {
        LayoutKind::Roundabout => {
            let needed = 0.5 * p.zone_length.max(p.square_side) + p.lane_width;
            if p.ring_radius < needed {
                return bad("ring_radius", format!("{} m is too small for the zones", p.ring_radius));
            }
        }
        LayoutKind::FourWay2L | LayoutKind::ThreeWay1L => {
            if p.zone_width > p.zone_length {
                return bad("zone_width", "must not exceed zone_length".to_string());
            }
        }
        LayoutKind::FourWay1L => {}
    }
    Ok(())
}

impl IntersectionLayout {
    pub fn path(&self, id: PathId) -> &Path {
        &self.paths[id.0 as usize]
    }

    pub fn lane(&self, id: LaneId) -> &Lane {
        &self.lanes[id.0 as usize]
    }

    pub fn zone(&self, id: ZoneId) -> &ConflictZone {
        &self.conflict_zones[id.index()]
    }

    pub fn path_for(&self, entry_lane: LaneId, exit_lane: LaneId) -> Result<&Path, LayoutError> {
        self.paths
            .iter()
            .find(|p| p.entry_lane == entry_lane && p.exit_lane == exit_lane)
            .ok_or(LayoutError::DisallowedPair {
                entry: entry_lane,
                exit: exit_lane,
            })
    }

    /// The path joining two roads; each road pair has at most one path.
    pub fn path_between(&self, entry: Road, exit: Road) -> Result<&Path, LayoutError> {
        self.paths
            .iter()
            .find(|p| p.entry_road == entry && p.exit_road == exit)
            .ok_or(LayoutError::DisallowedRoads { entry, exit })
    }

    pub fn paths_from(&self, entry: Road) -> impl Iterator<Item = &Path> + '_ {
        self.paths.iter().filter(move |p| p.entry_road == entry)
    }

    pub fn incoming_lanes(&self) -> impl Iterator<Item = &Lane> + '_ {
        self.lanes.iter().filter(|l| l.direction == LaneDirection::Incoming)
    }

    pub fn negotiation_zone(&self, lane: LaneId) -> Option<&NegotiationZone> {
        self.negotiation_zones.iter().find(|z| z.lane == lane)
    }

    /// Installs a negotiation zone of `length` at the start of every
    /// approach, checking that a vehicle at `hold_speed` can still stop with
    /// deceleration `b` between the zone end and the intersection entrance.
    pub fn configure_negotiation(&mut self, length: f64, hold_speed: f64, b: f64) -> Result<(), LayoutError> {
        if !(length >= 0.0) {
            return Err(LayoutError::InvalidParameter {
                field: "negotiation_length",
                reason: format!("must be non-negative, got {length}"),
            });
        }
        let braking = min_negotiation_distance(hold_speed, b)?;
        let approach = self.params.approach_length;
        if length + braking > approach + 1e-9 {
            return Err(LayoutError::NegotiationZoneTooLong {
                length,
                braking,
                approach,
            });
        }
        let start_pos = self.params.road_length - approach;
        self.negotiation_zones = self
            .incoming_lanes()
            .map(|l| NegotiationZone {
                lane: l.id,
                start_pos,
                length,
                hold_speed,
            })
            .collect();
        Ok(())
    }

    pub fn check_invariants(&self) -> Result<(), LayoutError> {
        let fail = |msg: String| Err(LayoutError::Invariant(msg));
        if self.conflict_zones.len() != self.kind.zone_count() {
            return fail(format!(
                "{} has {} zones, expected {}",
                self.kind,
                self.conflict_zones.len(),
                self.kind.zone_count()
            ));
        }
        for (i, a) in self.conflict_zones.iter().enumerate() {
            if !(a.shape.length > 0.0 && a.shape.width > 0.0) {
                return fail(format!("{} has a degenerate shape", a.id));
            }
            for b in &self.conflict_zones[i + 1..] {
                if a.shape.overlaps(&b.shape) {
                    return fail(format!("{} overlaps {}", a.id, b.id));
                }
            }
        }
        for p in &self.paths {
            let mut prev_exit = f64::NEG_INFINITY;
            for z in &p.zone_intervals {
                if z.entry < p.approach_length - 1e-6 {
                    return fail(format!("path {:?} enters {} before the entrance", p.id, z.zone));
                }
                if z.entry < prev_exit - 1e-6 || z.exit <= z.entry || z.exit > p.total_length {
                    return fail(format!("path {:?} has disordered zone intervals", p.id));
                }
                prev_exit = z.exit;
            }
            if self
                .paths
                .iter()
                .filter(|q| q.entry_lane == p.entry_lane && q.exit_lane == p.exit_lane)
                .count()
                != 1
            {
                return fail(format!("duplicate path for lanes {} -> {}", p.entry_lane, p.exit_lane));
            }
        }
        Ok(())
    }
}

struct PathSketch {
    entry_road: Road,
    exit_road: Road,
    entry_index: u8,
    exit_index: u8,
    turn: TurnKind,
    segments: Vec<Segment>,
}

const FAR: f64 = 400.0;

fn line(from: (f64, f64), to: (f64, f64)) -> Segment {
    Segment::Line {
        from: Point::new(from.0, from.1),
        to: Point::new(to.0, to.1),
    }
}

fn arc(center: (f64, f64), radius: f64, start_angle: f64, sweep: f64) -> Segment {
    Segment::Arc {
        center: Point::new(center.0, center.1),
        radius,
        start_angle,
        sweep,
    }
}

/// Straight continuation of `seg` for `len` meters in its final heading.
fn extend(seg: &Segment, len: f64) -> Segment {
    let end = seg.end();
    let before = seg.point_at(seg.length() - 1e-3);
    let d = end.dist(before);
    let dir = ((end.x - before.x) / d, (end.y - before.y) / d);
    line((end.x, end.y), (end.x + dir.0 * len, end.y + dir.1 * len))
}

fn with_exit(mut segs: Vec<Segment>) -> Vec<Segment> {
    let last = *segs.last().expect("non-empty");
    segs.push(extend(&last, FAR));
    segs
}

fn intersection_area(kind: LayoutKind, p: &LayoutParams) -> impl Fn(Point) -> bool {
    let tol = 1e-9;
    let (hx, hy, radius) = match kind {
        LayoutKind::FourWay1L => (p.zone_length, p.zone_length, None),
        LayoutKind::FourWay2L => {
            let half = p.square_side + 0.5 * p.zone_length;
            (half, half, None)
        }
        LayoutKind::ThreeWay1L => (p.zone_length, p.zone_width, None),
        LayoutKind::Roundabout => (0.0, 0.0, Some(p.ring_radius + 0.5 * p.lane_width + 0.4)),
    };
    move |pt: Point| match radius {
        Some(r) => pt.norm() <= r + tol,
        None => pt.x.abs() <= hx + tol && pt.y.abs() <= hy + tol,
    }
}

/// Rotates a sketch drawn for the West arm onto `entry`.
fn rotate_sketches(west: Vec<PathSketch>, roads: &[Road]) -> Vec<PathSketch> {
    let mut out = Vec::new();
    for &entry in roads {
        let rot = entry.angle() - PI;
        for sk in &west {
            out.push(PathSketch {
                entry_road: entry,
                exit_road: Road::from_angle(sk.exit_road.angle() + rot),
                entry_index: sk.entry_index,
                exit_index: sk.exit_index,
                turn: sk.turn,
                segments: sk.segments.iter().map(|s| s.rotated(rot)).collect(),
            });
        }
    }
    out
}

const FOUR_ROADS: [Road; 4] = [Road::West, Road::South, Road::East, Road::North];

fn four_way_1l(p: &LayoutParams) -> (Vec<ConflictZone>, Vec<PathSketch>) {
    let b = p.zone_length;
    let h = 0.5 * b;
    let zones = vec![
        Rect::axis_aligned(-b, 0.0, -b, 0.0),
        Rect::axis_aligned(0.0, b, -b, 0.0),
        Rect::axis_aligned(0.0, b, 0.0, b),
        Rect::axis_aligned(-b, 0.0, 0.0, b),
    ];
    let start = (-b - FAR, -h);
    let west = vec![
        PathSketch {
            entry_road: Road::West,
            exit_road: Road::East,
            entry_index: 0,
            exit_index: 0,
            turn: TurnKind::Straight,
            segments: vec![line(start, (b + FAR, -h))],
        },
        PathSketch {
            entry_road: Road::West,
            exit_road: Road::South,
            entry_index: 0,
            exit_index: 0,
            turn: TurnKind::Right,
            segments: with_exit(vec![line(start, (-b, -h)), arc((-b, -b), b - h, FRAC_PI_2, -FRAC_PI_2)]),
        },
        PathSketch {
            entry_road: Road::West,
            exit_road: Road::North,
            entry_index: 0,
            exit_index: 0,
            turn: TurnKind::Left,
            segments: with_exit(vec![line(start, (-b, -h)), arc((-b, b), b + h, -FRAC_PI_2, FRAC_PI_2)]),
        },
    ];
    (number_zones(zones), rotate_sketches(west, &FOUR_ROADS))
}

fn four_way_2l(p: &LayoutParams) -> (Vec<ConflictZone>, Vec<PathSketch>) {
    let s = p.square_side;
    let l = p.zone_length;
    let b = s + 0.5 * l;
    let outer = b - 0.5 * s;
    let inner = 0.25 * l;
    let hl = 0.5 * l;
    let zones = vec![
        Rect::axis_aligned(-b, -b + s, -b, -b + s),
        Rect::axis_aligned(b - s, b, -b, -b + s),
        Rect::axis_aligned(b - s, b, b - s, b),
        Rect::axis_aligned(-b, -b + s, b - s, b),
        Rect::axis_aligned(-hl, hl, -b, -b + p.zone_width),
        Rect::axis_aligned(b - p.zone_width, b, -hl, hl),
        Rect::axis_aligned(-hl, hl, b - p.zone_width, b),
        Rect::axis_aligned(-b, -b + p.zone_width, -hl, hl),
    ];
    let west = vec![
        PathSketch {
            entry_road: Road::West,
            exit_road: Road::East,
            entry_index: 0,
            exit_index: 0,
            turn: TurnKind::Straight,
            segments: vec![line((-b - FAR, -outer), (b + FAR, -outer))],
        },
        PathSketch {
            entry_road: Road::West,
            exit_road: Road::South,
            entry_index: 0,
            exit_index: 0,
            turn: TurnKind::Right,
            segments: with_exit(vec![
                line((-b - FAR, -outer), (-b, -outer)),
                arc((-b, -b), b - outer, FRAC_PI_2, -FRAC_PI_2),
            ]),
        },
        PathSketch {
            entry_road: Road::West,
            exit_road: Road::North,
            entry_index: 1,
            exit_index: 1,
            turn: TurnKind::Left,
            segments: with_exit(vec![
                line((-b - FAR, -inner), (-b, -inner)),
                arc((-b, b), b + inner, -FRAC_PI_2, FRAC_PI_2),
            ]),
        },
    ];
    (number_zones(zones), rotate_sketches(west, &FOUR_ROADS))
}

/// T-junction: the through road runs West-East, the stem comes from South.
/// Zones 1 and 2 cover the eastbound half of the through road, zone 3 sits
/// centered on the westbound half.
fn three_way_1l(p: &LayoutParams) -> (Vec<ConflictZone>, Vec<PathSketch>) {
    let l = p.zone_length;
    let w = p.zone_width;
    let h = 0.5 * w;
    // Left turns sweep wide enough to cross the eastbound half before
    // reaching the stem.
    let r = 3.6 * h;
    let zones = vec![
        Rect::axis_aligned(-l, 0.0, -w, 0.0),
        Rect::axis_aligned(0.0, l, -w, 0.0),
        Rect::axis_aligned(-0.5 * l, 0.5 * l, 0.0, w),
    ];
    let sketch = |entry_road, exit_road, turn, segments| PathSketch {
        entry_road,
        exit_road,
        entry_index: 0,
        exit_index: 0,
        turn,
        segments,
    };
    let sketches = vec![
        sketch(
            Road::West,
            Road::East,
            TurnKind::Straight,
            vec![line((-l - FAR, -h), (l + FAR, -h))],
        ),
        sketch(
            Road::West,
            Road::South,
            TurnKind::Right,
            with_exit(vec![
                line((-l - FAR, -h), (-w, -h)),
                arc((-w, -w), h, FRAC_PI_2, -FRAC_PI_2),
            ]),
        ),
        sketch(
            Road::East,
            Road::West,
            TurnKind::Straight,
            vec![line((l + FAR, h), (-l - FAR, h))],
        ),
        sketch(
            Road::East,
            Road::South,
            TurnKind::Left,
            with_exit(vec![
                line((l + FAR, h), (r - h, h)),
                arc((r - h, h - r), r, FRAC_PI_2, FRAC_PI_2),
            ]),
        ),
        sketch(
            Road::South,
            Road::East,
            TurnKind::Right,
            with_exit(vec![line((h, -w - FAR), (h, -w)), arc((w, -w), h, PI, -FRAC_PI_2)]),
        ),
        sketch(
            Road::South,
            Road::West,
            TurnKind::Left,
            with_exit(vec![
                line((h, h - r - FAR), (h, h - r)),
                arc((h - r, h - r), r, 0.0, FRAC_PI_2),
            ]),
        ),
    ];
    (number_zones(zones), sketches)
}

/// Counter-clockwise single-lane ring. Arm k owns zone 2k+1 (rectangle at
/// its entry) and zone 2k+2 (square halfway to the next exit).
fn roundabout(p: &LayoutParams) -> (Vec<ConflictZone>, Vec<PathSketch>) {
    let r = p.ring_radius;
    let off = 0.5 * p.lane_width;
    let delta = (off / r).asin();
    let join = (r * r - off * off).sqrt();
    let arms = [Road::East, Road::North, Road::West, Road::South];
    let mut zones = Vec::new();
    for road in arms {
        let a = road.angle();
        let on_ring = |angle: f64| Point::new(r * angle.cos(), r * angle.sin());
        zones.push(Rect {
            center: on_ring(a + delta),
            length: p.zone_length,
            width: p.zone_width,
            heading: a + delta + FRAC_PI_2,
        });
        zones.push(Rect {
            center: on_ring(a + 0.25 * PI),
            length: p.square_side,
            width: p.square_side,
            heading: a + 0.25 * PI + FRAC_PI_2,
        });
    }
    let mut sketches = Vec::new();
    for (k, entry) in arms.into_iter().enumerate() {
        let a = entry.angle();
        let (u, n) = ((a.cos(), a.sin()), (-a.sin(), a.cos()));
        let far = ((join + FAR) * u.0 + off * n.0, (join + FAR) * u.1 + off * n.1);
        let join_pt = (join * u.0 + off * n.0, join * u.1 + off * n.1);
        for exit_no in 1..=3u8 {
            let exit = arms[(k + exit_no as usize) % 4];
            let sweep = exit_no as f64 * FRAC_PI_2 - 2.0 * delta;
            let ring = arc((0.0, 0.0), r, a + delta, sweep);
            let b = exit.angle();
            let (ub, nb) = ((b.cos(), b.sin()), (-b.sin(), b.cos()));
            let out_from = (join * ub.0 - off * nb.0, join * ub.1 - off * nb.1);
            let out_to = (out_from.0 + FAR * ub.0, out_from.1 + FAR * ub.1);
            sketches.push(PathSketch {
                entry_road: entry,
                exit_road: exit,
                entry_index: 0,
                exit_index: 0,
                turn: TurnKind::RoundaboutExit(exit_no),
                segments: vec![line(far, join_pt), ring, line(out_from, out_to)],
            });
        }
    }
    (number_zones(zones), sketches)
}

fn number_zones(shapes: Vec<Rect>) -> Vec<ConflictZone> {
    shapes
        .into_iter()
        .enumerate()
        .map(|(i, shape)| ConflictZone {
            id: ZoneId(i as u16 + 1),
            shape,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(kind: LayoutKind) -> IntersectionLayout {
        build_layout(kind, &LayoutOverrides::default()).unwrap()
    }

    #[test]
    fn zone_counts_per_kind() {
        for kind in LayoutKind::ALL {
            assert_eq!(layout(kind).conflict_zones.len(), kind.zone_count(), "{kind}");
        }
    }

    #[test]
    fn four_way_zones_are_squares_of_side_7_2() {
        let l = layout(LayoutKind::FourWay1L);
        assert_eq!(l.params.approach_length, 100.0);
        for z in &l.conflict_zones {
            assert!((z.shape.length - 7.2).abs() < 1e-12);
            assert!((z.shape.width - 7.2).abs() < 1e-12);
        }
    }

    #[test]
    fn roundabout_zone_shapes() {
        let l = layout(LayoutKind::Roundabout);
        let rects = l
            .conflict_zones
            .iter()
            .filter(|z| (z.shape.length - 5.2).abs() < 1e-12 && (z.shape.width - 3.2).abs() < 1e-12)
            .count();
        let squares = l
            .conflict_zones
            .iter()
            .filter(|z| (z.shape.length - 3.0).abs() < 1e-12 && (z.shape.width - 3.0).abs() < 1e-12)
            .count();
        assert_eq!((rects, squares), (4, 4));
    }

    #[test]
    fn four_way_turn_zone_counts() {
        let l = layout(LayoutKind::FourWay1L);
        for p in &l.paths {
            let expected = match p.turn_kind {
                TurnKind::Right => 1,
                TurnKind::Straight => 2,
                TurnKind::Left => 3,
                TurnKind::RoundaboutExit(_) => unreachable!(),
            };
            assert_eq!(p.zone_intervals.len(), expected, "{:?}", p.turn_kind);
        }
        let we = l.path_between(Road::West, Road::East).unwrap();
        assert_eq!(we.zones().collect::<Vec<_>>(), vec![ZoneId(1), ZoneId(2)]);
        let en = l.path_between(Road::East, Road::North).unwrap();
        assert_eq!(en.zones().collect::<Vec<_>>(), vec![ZoneId(3)]);
    }

    #[test]
    fn two_lane_turn_zone_counts() {
        let l = layout(LayoutKind::FourWay2L);
        for p in &l.paths {
            let expected = match p.turn_kind {
                TurnKind::Right => 1,
                TurnKind::Left => 2,
                TurnKind::Straight => 3,
                TurnKind::RoundaboutExit(_) => unreachable!(),
            };
            assert_eq!(p.zone_intervals.len(), expected, "{:?}", p.turn_kind);
        }
        assert_eq!(l.incoming_lanes().count(), 8);
    }

    #[test]
    fn roundabout_exit_zone_counts() {
        let l = layout(LayoutKind::Roundabout);
        for p in &l.paths {
            let TurnKind::RoundaboutExit(k) = p.turn_kind else {
                panic!()
            };
            assert_eq!(p.zone_intervals.len(), 2 * k as usize);
        }
    }

    #[test]
    fn three_way_turns() {
        let l = layout(LayoutKind::ThreeWay1L);
        assert_eq!(l.paths.len(), 6);
        for p in &l.paths {
            match p.turn_kind {
                TurnKind::Right => assert_eq!(p.zone_intervals.len(), 1),
                TurnKind::Left => assert_eq!(p.zone_intervals.len(), 3),
                _ => {}
            }
        }
    }

    #[test]
    fn u_turn_is_disallowed() {
        let l = layout(LayoutKind::FourWay1L);
        let err = l.path_between(Road::West, Road::West).unwrap_err();
        assert!(matches!(err, LayoutError::DisallowedRoads { .. }));
        let we = l.path_between(Road::West, Road::East).unwrap();
        let ww_exit = l
            .lanes
            .iter()
            .find(|ln| ln.road == Road::West && ln.direction == LaneDirection::Outgoing)
            .unwrap();
        assert!(l.path_for(we.entry_lane, ww_exit.id).is_err());
        assert_eq!(l.path_for(we.entry_lane, we.exit_lane).unwrap().id, we.id);
    }

    #[test]
    fn unknown_kind_and_bad_override() {
        assert!(matches!(
            "hexagon".parse::<LayoutKind>(),
            Err(LayoutError::UnknownKind(_))
        ));
        let bad = LayoutOverrides {
            lane_width: Some(-1.0),
            ..Default::default()
        };
        assert!(matches!(
            build_layout(LayoutKind::FourWay1L, &bad),
            Err(LayoutError::InvalidParameter {
                field: "lane_width",
                ..
            })
        ));
        let turn = LayoutOverrides {
            v_max_turn: Some(20.0),
            ..Default::default()
        };
        assert!(build_layout(LayoutKind::FourWay1L, &turn).is_err());
    }

    #[test]
    fn negotiation_distance_values() {
        let v = kmh(50.0);
        assert!((min_negotiation_distance(v, 4.5).unwrap() - 21.433).abs() < 0.001);
        assert_eq!(min_negotiation_distance(0.0, 4.5).unwrap(), 0.0);
        assert!(min_negotiation_distance(10.0, 0.0).is_err());
        assert!((max_speed_for_distance(10.0, 4.5).unwrap() * 3.6 - 34.15).abs() < 0.01);
        assert!((min_negotiation_length(v, 0.4) - 5.556).abs() < 0.001);
        assert_eq!(min_negotiation_length(7.0, 0.0), 0.0);
    }

    #[test]
    fn configured_negotiation_lengths_fit() {
        let cases = [
            (LayoutKind::FourWay1L, [2.0, 10.0]),
            (LayoutKind::ThreeWay1L, [2.0, 10.0]),
            (LayoutKind::Roundabout, [2.0, 7.5]),
            (LayoutKind::FourWay2L, [2.0, 17.0]),
        ];
        for (kind, lengths) in cases {
            let mut l = layout(kind);
            let v = l.params.v_max;
            for len in lengths {
                l.configure_negotiation(len, v, 4.5).unwrap();
                let nz = l.negotiation_zones[0];
                let d = min_negotiation_distance(nz.hold_speed, 4.5).unwrap();
                assert!(nz.start_pos + nz.length + d <= l.params.road_length);
            }
        }
        let mut l = layout(LayoutKind::FourWay1L);
        assert!(l.configure_negotiation(90.0, kmh(50.0), 4.5).is_err());
    }
}
