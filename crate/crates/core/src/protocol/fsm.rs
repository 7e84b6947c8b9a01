//! Vehicle-side negotiation state machine.
//!
//! The machine tracks protocol state only; the caller runs the planner and
//! compares zone times against received windows, feeding the results back
//! as events.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::{ZoneTime, ZoneWindow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NegotiationState {
    Idle,
    /// Computing a (new) proposal.
    Proposing,
    AwaitingResponse,
    Agreed,
    BackupTriggered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureReason {
    Deadline,
    Infeasible,
    ExchangeCap,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("event {event} is not allowed in state {state:?}")]
pub struct ProtocolError {
    pub state: NegotiationState,
    pub event: &'static str,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlannerResult {
    Profile,
    Fallback,
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VehicleEvent {
    /// Vehicle crosses the start of its negotiation zone; `deadline` is the
    /// time it will leave the zone.
    EnterNegotiationZone {
        deadline: f64,
    },
    Planned(PlannerResult),
    /// A response arrived; `accepted` is true when the current proposal's
    /// zone times fit inside every returned window.
    Response {
        accepted: bool,
    },
    Deadline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VehicleOutput {
    /// Ask the planner for a proposal (initial or replanned).
    Plan,
    SendProposal,
    SendCancel(FailureReason),
    Agreed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleNegotiation {
    pub state: NegotiationState,
    /// Messages exchanged so far, in both directions.
    pub exchanges: u32,
    pub deadline: f64,
    pub max_exchanges: u32,
    pub failure: Option<FailureReason>,
}

impl VehicleNegotiation {
    pub fn new(max_exchanges: u32) -> Self {
        VehicleNegotiation {
            state: NegotiationState::Idle,
            exchanges: 0,
            deadline: f64::INFINITY,
            max_exchanges,
            failure: None,
        }
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.state, NegotiationState::Agreed | NegotiationState::BackupTriggered)
    }

    fn fail(&mut self, reason: FailureReason) -> Vec<VehicleOutput> {
        self.state = NegotiationState::BackupTriggered;
        self.failure = Some(reason);
        self.exchanges += 1;
        vec![VehicleOutput::SendCancel(reason)]
    }

    pub fn step(&mut self, event: VehicleEvent) -> Result<Vec<VehicleOutput>, ProtocolError> {
        use NegotiationState as S;
        let violation = |state, event| Err(ProtocolError { state, event });
        match (self.state, event) {
            (S::Idle, VehicleEvent::EnterNegotiationZone { deadline }) => {
                self.deadline = deadline;
                self.state = S::Proposing;
                Ok(vec![VehicleOutput::Plan])
            }
            (S::Proposing, VehicleEvent::Planned(PlannerResult::Infeasible)) => {
                Ok(self.fail(FailureReason::Infeasible))
            }
            (S::Proposing, VehicleEvent::Planned(_)) => {
                if self.exchanges + 2 > self.max_exchanges {
                    return Ok(self.fail(FailureReason::ExchangeCap));
                }
                self.exchanges += 1;
                self.state = S::AwaitingResponse;
                Ok(vec![VehicleOutput::SendProposal])
            }
            (S::AwaitingResponse, VehicleEvent::Response { accepted }) => {
                self.exchanges += 1;
                if accepted {
                    self.state = S::Agreed;
                    Ok(vec![VehicleOutput::Agreed])
                } else {
                    self.state = S::Proposing;
                    Ok(vec![VehicleOutput::Plan])
                }
            }
            (S::Proposing | S::AwaitingResponse, VehicleEvent::Deadline) => Ok(self.fail(FailureReason::Deadline)),
            (S::Agreed | S::BackupTriggered, VehicleEvent::Deadline) => Ok(Vec::new()),
            // A response racing a cancel is dropped.
            (S::BackupTriggered, VehicleEvent::Response { .. }) => Ok(Vec::new()),
            (state, VehicleEvent::EnterNegotiationZone { .. }) => violation(state, "enter-negotiation-zone"),
            (state, VehicleEvent::Planned(_)) => violation(state, "planner-outcome"),
            (state, VehicleEvent::Response { .. }) => violation(state, "response"),
            (state, VehicleEvent::Deadline) => violation(state, "deadline"),
        }
    }
}

/// Implicit acceptance: every zone time lies inside the window for its zone.
pub fn fits_windows(times: &[ZoneTime], windows: &[ZoneWindow], tol: f64) -> bool {
    times.iter().all(|zt| {
        windows
            .iter()
            .find(|w| w.zone == zt.zone)
            .is_some_and(|w| zt.t_enter >= w.t_enter_min - tol && zt.t_exit <= w.t_exit_max + tol)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::ZoneId;

    fn start() -> VehicleNegotiation {
        let mut n = VehicleNegotiation::new(10);
        n.step(VehicleEvent::EnterNegotiationZone { deadline: 1.0 }).unwrap();
        n
    }

    #[test]
    fn accept_first_try() {
        let mut n = start();
        assert_eq!(
            n.step(VehicleEvent::Planned(PlannerResult::Profile)).unwrap(),
            vec![VehicleOutput::SendProposal]
        );
        n.step(VehicleEvent::Response { accepted: true }).unwrap();
        assert_eq!((n.state, n.exchanges), (NegotiationState::Agreed, 2));
    }

    #[test]
    fn revise_then_accept_is_four_messages() {
        let mut n = start();
        n.step(VehicleEvent::Planned(PlannerResult::Profile)).unwrap();
        assert_eq!(
            n.step(VehicleEvent::Response { accepted: false }).unwrap(),
            vec![VehicleOutput::Plan]
        );
        n.step(VehicleEvent::Planned(PlannerResult::Profile)).unwrap();
        n.step(VehicleEvent::Response { accepted: true }).unwrap();
        assert_eq!((n.state, n.exchanges), (NegotiationState::Agreed, 4));
    }

    #[test]
    fn deadline_cancels() {
        let mut n = start();
        n.step(VehicleEvent::Planned(PlannerResult::Fallback)).unwrap();
        assert_eq!(
            n.step(VehicleEvent::Deadline).unwrap(),
            vec![VehicleOutput::SendCancel(FailureReason::Deadline)]
        );
        assert_eq!(n.state, NegotiationState::BackupTriggered);
    }

    #[test]
    fn infeasible_and_cap() {
        let mut n = start();
        n.step(VehicleEvent::Planned(PlannerResult::Infeasible)).unwrap();
        assert_eq!(n.failure, Some(FailureReason::Infeasible));

        let mut n = start();
        for _ in 0..5 {
            n.step(VehicleEvent::Planned(PlannerResult::Profile)).unwrap();
            n.step(VehicleEvent::Response { accepted: false }).unwrap();
        }
        assert_eq!(n.exchanges, 10);
        n.step(VehicleEvent::Planned(PlannerResult::Profile)).unwrap();
        assert_eq!(n.failure, Some(FailureReason::ExchangeCap));
    }

    #[test]
    fn wrong_state_is_an_error() {
        let mut n = VehicleNegotiation::new(10);
        assert!(n.step(VehicleEvent::Response { accepted: true }).is_err());
        let mut n = start();
        assert!(n.step(VehicleEvent::EnterNegotiationZone { deadline: 2.0 }).is_err());
    }

    #[test]
    fn window_fit() {
        let t = [ZoneTime {
            zone: ZoneId(1),
            t_enter: 1.0,
            t_exit: 2.0,
        }];
        let w = |a, b| {
            [ZoneWindow {
                zone: ZoneId(1),
                t_enter_min: a,
                t_exit_max: b,
            }]
        };
        assert!(fits_windows(&t, &w(0.9, 2.1), 0.0));
        assert!(!fits_windows(&t, &w(1.1, 2.1), 0.0));
        assert!(!fits_windows(&t, &[], 0.0));
    }
}
