//! Car-following and the legacy right-of-way rules.

use crate::layout::{LayoutKind, Road, TurnKind};

use super::config::{CarFollowing, SignalTiming};

/// Krauss safe speed behind a leader `gap` meters ahead (bumper to bumper,
/// standstill gap already removed) moving at `v_leader`.
pub fn krauss_safe_speed(cf: &CarFollowing, v: f64, gap: f64, v_leader: f64) -> f64 {
    if gap <= 0.0 {
        return 0.0;
    }
    let denom = ((v + v_leader) / (2.0 * cf.decel) + cf.tau).max(1e-6);
    (v_leader + (gap - v_leader * cf.tau) / denom).max(0.0)
}

/// Speed for the next step: accelerate towards `cap`, never above any safe
/// speed in `limits`, never braking harder than the emergency limit.
pub fn next_speed(
    cf: &CarFollowing,
    v: f64,
    a_max: f64,
    dt: f64,
    cap: f64,
    limits: impl IntoIterator<Item = f64>,
) -> f64 {
    let wanted = limits.into_iter().fold((v + a_max * dt).min(cap), f64::min);
    wanted.max(v - cf.emergency_decel * dt).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Light {
    Green,
    Yellow,
    Red,
}

/// Fixed-time plan: the East-West axis first, then North-South.
pub fn light_for(timing: &SignalTiming, layout: LayoutKind, t: f64, road: Road, turn: TurnKind) -> Light {
    let two_lane = layout == LayoutKind::FourWay2L;
    let (green, axis_len) = if two_lane {
        let g = if turn == TurnKind::Left {
            timing.green_two_lane + timing.left_extension
        } else {
            timing.green_two_lane
        };
        (g, timing.green_two_lane + timing.left_extension + timing.yellow)
    } else {
        (timing.green, timing.green + timing.yellow)
    };
    let phase = t.rem_euclid(2.0 * axis_len);
    let own_axis_first = road.is_horizontal();
    let local = if own_axis_first { phase } else { phase - axis_len };
    if !(0.0..axis_len).contains(&local) {
        Light::Red
    } else if local < green {
        Light::Green
    } else if local < green + timing.yellow {
        Light::Yellow
    } else {
        Light::Red
    }
}
