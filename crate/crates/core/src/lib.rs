//! Resource contracts for hosted software components.
//!
//! Components declare the files, memory and sockets they need as contracts
//! made of resource utilisation profiles. A broker admits and reserves those
//! contracts against platform capacity, a contract manager drives the
//! submit/subscribe/amend protocol, and each component runs inside a
//! container whose monitors supervise every access and hand violations to a
//! sanction engine.

pub mod broker;
pub mod contracts;
pub mod host;
pub mod negotiation;
pub mod container;
pub mod resources;
pub mod sanctions;
