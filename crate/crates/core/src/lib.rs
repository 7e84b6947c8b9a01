//! Non-stop autonomous intersection management over V2N links.
//!
//! Vehicles plan their own mobility profiles and negotiate per-zone time
//! reservations with a single intersection controller. The crate bundles the
//! intersection geometry, the vehicle-side planner, the controller's
//! scheduling table, the message codec and negotiation state machines, an
//! M/G/1 analysis of the controller, a fixed-step traffic simulator with
//! baseline management methods, and KPI post-processing.

// Range checks are written as `!(x >= lo)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod controller;
pub mod layout;
pub mod metrics;
pub mod planner;
pub mod protocol;
pub mod queueing;
pub mod simulator;

/// Converts km/h to m/s.
pub fn kmh(v: f64) -> f64 {
    v / 3.6
}
