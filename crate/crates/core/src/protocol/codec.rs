//! Fixed-layout big-endian wire format.
//!
//! Every message starts with a 36-byte prefix:
//!
//! | bytes | field |
//! |------:|-------|
//! | 23 | header: version u8, message id u8, station id u32, generation time u32 (ms), reference latitude i32, reference longitude i32 (1e-7 deg), altitude i16 (cm), heading u16 (0.01 deg), sequence u8 |
//! | 1 | station type (high nibble) and role (low nibble) |
//! | 2 | maneuver type: 1 proposal, 2 response, 3 cancel |
//! | 10 | vehicle status: speed u16 (cm/s), heading u16 (0.01 deg), acceleration i16 (cm/s²), length u8 (dm), width u8 (dm), lane u8, path u8 |
//!
//! followed by the body:
//!
//! * proposal: n waypoints of 11 bytes: time u32 (ms), position i32 (cm), speed u16 (cm/s), acceleration i8 (0.1 m/s²);
//! * response: n time-resource reservations of 9 bytes: zone u8, flags u8, start u32 (ms), duration u24 (ms, `0xFFFFFF` = open-ended);
//! * cancel: one empty maneuver-descriptor byte.
//!
//! Item counts are implied by the message length.

use std::fmt::Write as _;

use byteorder::{BigEndian, ByteOrder, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::ZoneId;
use crate::planner::{MobilityProfile, PlanError, Waypoint, ZoneWindow};

pub const HEADER_LEN: usize = 23;
pub const PREFIX_LEN: usize = 36;
pub const WAYPOINT_LEN: usize = 11;
pub const TRR_LEN: usize = 9;
pub const CANCEL_LEN: usize = PREFIX_LEN + 1;
pub const MAX_WAYPOINTS: usize = 40;
pub const MAX_TRRS: usize = 10;

const MANEUVER_PROPOSAL: u16 = 1;
const MANEUVER_RESPONSE: u16 = 2;
const MANEUVER_CANCEL: u16 = 3;
const OPEN_DURATION: u32 = 0xFF_FFFF;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("buffer of {got} bytes is too short, need {need}")]
    Truncated { need: usize, got: usize },
    #[error("body of {len} bytes is not a whole number of {item}-byte items")]
    BadLength { len: usize, item: usize },
    #[error("unknown maneuver type {0}")]
    UnknownManeuverType(u16),
    #[error("unknown station role {0}")]
    UnknownRole(u8),
    #[error("{count} items exceed the limit of {max}")]
    TooManyItems { count: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Header {
    pub version: u8,
    pub message_id: u8,
    pub station_id: u32,
    pub generation_time_ms: u32,
    pub ref_latitude: i32,
    pub ref_longitude: i32,
    pub altitude_cm: i16,
    pub heading: u16,
    pub sequence: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum StationRole {
    #[default]
    Vehicle = 0,
    Controller = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VehicleStatus {
    pub speed_cms: u16,
    pub heading: u16,
    pub accel_cms2: i16,
    pub length_dm: u8,
    pub width_dm: u8,
    pub lane: u8,
    pub path: u8,
}

/// Fields shared by every message type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Envelope {
    pub header: Header,
    /// 4-bit station type.
    pub station_type: u8,
    pub role: StationRole,
    pub status: VehicleStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireWaypoint {
    pub t_ms: u32,
    pub s_cm: i32,
    pub v_cms: u16,
    /// Acceleration towards the next waypoint, in 0.1 m/s².
    pub accel_dms2: i8,
}

/// Time-resource reservation: a zone and the interval granted on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trr {
    pub zone: u8,
    pub flags: u8,
    pub start_ms: u32,
    /// `None` for an open-ended window.
    pub duration_ms: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Message {
    Proposal {
        env: Envelope,
        waypoints: Vec<WireWaypoint>,
    },
    Response {
        env: Envelope,
        trrs: Vec<Trr>,
    },
    Cancel {
        env: Envelope,
    },
}

impl Message {
    pub fn encoded_len(&self) -> usize {
        match self {
            Message::Proposal { waypoints, .. } => PREFIX_LEN + WAYPOINT_LEN * waypoints.len(),
            Message::Response { trrs, .. } => PREFIX_LEN + TRR_LEN * trrs.len(),
            Message::Cancel { .. } => CANCEL_LEN,
        }
    }

    pub fn envelope(&self) -> &Envelope {
        match self {
            Message::Proposal { env, .. } | Message::Response { env, .. } | Message::Cancel { env } => env,
        }
    }
}

fn write_prefix(out: &mut Vec<u8>, env: &Envelope, maneuver: u16) {
    let h = &env.header;
    // Writes into a Vec cannot fail.
    out.push(h.version);
    out.push(h.message_id);
    out.write_u32::<BigEndian>(h.station_id).unwrap();
    out.write_u32::<BigEndian>(h.generation_time_ms).unwrap();
    out.write_i32::<BigEndian>(h.ref_latitude).unwrap();
    out.write_i32::<BigEndian>(h.ref_longitude).unwrap();
    out.write_i16::<BigEndian>(h.altitude_cm).unwrap();
    out.write_u16::<BigEndian>(h.heading).unwrap();
    out.push(h.sequence);
    out.push((env.station_type & 0x0F) << 4 | env.role as u8);
    out.write_u16::<BigEndian>(maneuver).unwrap();
    let s = &env.status;
    out.write_u16::<BigEndian>(s.speed_cms).unwrap();
    out.write_u16::<BigEndian>(s.heading).unwrap();
    out.write_i16::<BigEndian>(s.accel_cms2).unwrap();
    out.extend_from_slice(&[s.length_dm, s.width_dm, s.lane, s.path]);
}

pub fn encode(msg: &Message) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::with_capacity(msg.encoded_len());
    match msg {
        Message::Proposal { env, waypoints } => {
            if waypoints.len() > MAX_WAYPOINTS {
                return Err(CodecError::TooManyItems {
                    count: waypoints.len(),
                    max: MAX_WAYPOINTS,
                });
            }
            write_prefix(&mut out, env, MANEUVER_PROPOSAL);
            for w in waypoints {
                out.write_u32::<BigEndian>(w.t_ms).unwrap();
                out.write_i32::<BigEndian>(w.s_cm).unwrap();
                out.write_u16::<BigEndian>(w.v_cms).unwrap();
                out.write_i8(w.accel_dms2).unwrap();
            }
        }
        Message::Response { env, trrs } => {
            if trrs.len() > MAX_TRRS {
                return Err(CodecError::TooManyItems {
                    count: trrs.len(),
                    max: MAX_TRRS,
                });
            }
            write_prefix(&mut out, env, MANEUVER_RESPONSE);
            for t in trrs {
                out.push(t.zone);
                out.push(t.flags);
                out.write_u32::<BigEndian>(t.start_ms).unwrap();
                out.write_u24::<BigEndian>(t.duration_ms.map_or(OPEN_DURATION, |d| d.min(OPEN_DURATION - 1)))
                    .unwrap();
            }
        }
        Message::Cancel { env } => {
            write_prefix(&mut out, env, MANEUVER_CANCEL);
            out.push(0);
        }
    }
    Ok(out)
}

pub fn decode(buf: &[u8]) -> Result<Message, CodecError> {
    if buf.len() < PREFIX_LEN {
        return Err(CodecError::Truncated {
            need: PREFIX_LEN,
            got: buf.len(),
        });
    }
    let mut r = &buf[..PREFIX_LEN];
    // Reads within the checked prefix cannot fail.
    let header = Header {
        version: r.read_u8().unwrap(),
        message_id: r.read_u8().unwrap(),
        station_id: r.read_u32::<BigEndian>().unwrap(),
        generation_time_ms: r.read_u32::<BigEndian>().unwrap(),
        ref_latitude: r.read_i32::<BigEndian>().unwrap(),
        ref_longitude: r.read_i32::<BigEndian>().unwrap(),
        altitude_cm: r.read_i16::<BigEndian>().unwrap(),
        heading: r.read_u16::<BigEndian>().unwrap(),
        sequence: r.read_u8().unwrap(),
    };
    let type_role = r.read_u8().unwrap();
    let role = match type_role & 0x0F {
        0 => StationRole::Vehicle,
        1 => StationRole::Controller,
        other => return Err(CodecError::UnknownRole(other)),
    };
    let maneuver = r.read_u16::<BigEndian>().unwrap();
    let status = VehicleStatus {
        speed_cms: r.read_u16::<BigEndian>().unwrap(),
        heading: r.read_u16::<BigEndian>().unwrap(),
        accel_cms2: r.read_i16::<BigEndian>().unwrap(),
        length_dm: r.read_u8().unwrap(),
        width_dm: r.read_u8().unwrap(),
        lane: r.read_u8().unwrap(),
        path: r.read_u8().unwrap(),
    };
    let env = Envelope {
        header,
        station_type: type_role >> 4,
        role,
        status,
    };
    let body = &buf[PREFIX_LEN..];
    let items = |item: usize, max: usize| -> Result<usize, CodecError> {
        if !body.len().is_multiple_of(item) {
            return Err(CodecError::BadLength { len: body.len(), item });
        }
        let count = body.len() / item;
        if count > max {
            return Err(CodecError::TooManyItems { count, max });
        }
        Ok(count)
    };
    match maneuver {
        MANEUVER_PROPOSAL => {
            let n = items(WAYPOINT_LEN, MAX_WAYPOINTS)?;
            let waypoints = body
                .chunks_exact(WAYPOINT_LEN)
                .take(n)
                .map(|c| WireWaypoint {
                    t_ms: BigEndian::read_u32(&c[0..4]),
                    s_cm: BigEndian::read_i32(&c[4..8]),
                    v_cms: BigEndian::read_u16(&c[8..10]),
                    accel_dms2: c[10] as i8,
                })
                .collect();
            Ok(Message::Proposal { env, waypoints })
        }
        MANEUVER_RESPONSE => {
            let n = items(TRR_LEN, MAX_TRRS)?;
            let trrs = body
                .chunks_exact(TRR_LEN)
                .take(n)
                .map(|c| {
                    let d = BigEndian::read_u24(&c[6..9]);
                    Trr {
                        zone: c[0],
                        flags: c[1],
                        start_ms: BigEndian::read_u32(&c[2..6]),
                        duration_ms: (d != OPEN_DURATION).then_some(d),
                    }
                })
                .collect();
            Ok(Message::Response { env, trrs })
        }
        MANEUVER_CANCEL => {
            if body.len() != 1 {
                return Err(CodecError::Truncated {
                    need: CANCEL_LEN,
                    got: buf.len(),
                });
            }
            Ok(Message::Cancel { env })
        }
        other => Err(CodecError::UnknownManeuverType(other)),
    }
}

/// Space-separated hex bytes, 16 per line, each line prefixed by its offset.
pub fn hex_dump(bytes: &[u8]) -> String {
    let mut out = String::new();
    for (i, chunk) in bytes.chunks(16).enumerate() {
        let _ = write!(out, "{:04x}:", i * 16);
        for b in chunk {
            let _ = write!(out, " {b:02x}");
        }
        out.push('\n');
    }
    out
}

fn to_ms(t: f64) -> u32 {
    (t * 1000.0).round().rem_euclid(4_294_967_296.0) as u32
}

/// Quantizes a profile into wire waypoints.
pub fn waypoints_to_wire(profile: &MobilityProfile) -> Vec<WireWaypoint> {
    let w = &profile.waypoints;
    (0..w.len())
        .map(|i| {
            let accel = if i + 1 < w.len() { profile.accel(i) } else { 0.0 };
            WireWaypoint {
                t_ms: to_ms(w[i].t),
                s_cm: (w[i].s * 100.0).round() as i32,
                v_cms: (w[i].v * 100.0).round().clamp(0.0, u16::MAX as f64) as u16,
                accel_dms2: (accel * 10.0).round().clamp(-128.0, 127.0) as i8,
            }
        })
        .collect()
}

/// Rebuilds a profile from wire waypoints; `entrance` is the arc position
/// of the intersection entrance.
pub fn profile_from_wire(waypoints: &[WireWaypoint], entrance: f64) -> Result<MobilityProfile, PlanError> {
    let w = waypoints
        .iter()
        .map(|w| Waypoint {
            t: w.t_ms as f64 / 1000.0,
            s: w.s_cm as f64 / 100.0,
            v: w.v_cms as f64 / 100.0,
        })
        .collect();
    MobilityProfile::from_waypoints(w, entrance)
}

/// Windows to reservations, rounding inwards to whole milliseconds.
pub fn windows_to_trrs(windows: &[ZoneWindow]) -> Vec<Trr> {
    windows
        .iter()
        .map(|w| {
            let start = (w.t_enter_min.max(0.0) * 1000.0).ceil();
            let duration_ms = w
                .t_exit_max
                .is_finite()
                .then(|| ((w.t_exit_max * 1000.0).floor() - start).max(0.0) as u32);
            Trr {
                zone: w.zone.0 as u8,
                flags: 0,
                start_ms: start as u32,
                duration_ms,
            }
        })
        .collect()
}

pub fn trrs_to_windows(trrs: &[Trr]) -> Vec<ZoneWindow> {
    trrs.iter()
        .map(|t| {
            let start = t.start_ms as f64 / 1000.0;
            ZoneWindow {
                zone: ZoneId(t.zone as u16),
                t_enter_min: start,
                t_exit_max: t.duration_ms.map_or(f64::INFINITY, |d| start + d as f64 / 1000.0),
            }
        })
        .collect()
}
