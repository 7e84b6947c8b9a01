//! Negotiation messages, their binary encoding, network delay models, the
//! negotiation state machines and the controller's serving queue.

pub mod codec;
pub mod delay;
pub mod fsm;
pub mod queue;

pub use codec::{decode, encode, CodecError, Message};
pub use delay::{DelayModel, Link, Network};
pub use fsm::{NegotiationState, ProtocolError, VehicleEvent, VehicleNegotiation, VehicleOutput};
pub use queue::ServingQueue;
