//! Command-line interface and live steering service for the levitation
//! simulator.
//!
//! The service keeps one [`session::SessionState`] behind a lock. Commands
//! arrive as JSON lines on a TCP socket ([`protocol`]) and are applied one at
//! a time; telemetry subscribers read consistent snapshots of the same state
//! at their own rate. The same port answers plain HTTP GET requests for
//! `/state`, `/frame`, `/session` and `/field`.

pub mod cli;
pub mod error;
pub mod experiment;
pub mod protocol;
pub mod server;
pub mod session;

pub use error::{Result, ServiceError};
