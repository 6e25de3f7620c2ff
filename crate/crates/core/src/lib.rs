//! Software model of an FPGA-driven ultrasonic levitation platform.
//!
//! The crate follows the hardware dataflow: a host computes per-channel
//! phases for a commanded focal point ([`phase`]), the phases are quantized
//! into clock-cycle delays and loaded into the controller's registers
//! ([`upac`]), the resulting emission is superposed into an acoustic field
//! that traps and moves a small particle ([`field`], [`trajectory`]), and
//! two receiver channels listen for echoes from the particle ([`echo`]).
//!
//! Lengths are millimetres and frequencies hertz throughout the public API,
//! unless a name says otherwise. Forces and potentials are SI.

pub mod echo;
pub mod error;
pub mod field;
pub mod geometry;
pub mod medium;
pub mod phase;
pub mod trajectory;
pub mod upac;

pub use error::{Error, Result};

/// Position or direction in millimetres.
pub type Vec3 = nalgebra::Vector3<f64>;
