//! Continuous-wave field synthesis, radiation force and particle motion.
//!
//! Lengths are millimetres throughout the public API; forces, energies and
//! masses are SI.

pub mod directivity;
pub mod dynamics;
pub mod gorkov;
pub mod model;
pub mod slice;
pub mod trap;

pub use gorkov::{gorkov_potential, radiation_force, GorkovParams};
pub use model::{
    calibrated_source_amplitude, focused_field, pressure_at, spl, FieldModel, FieldSample,
};
pub use slice::{measure_focal_width, Axis, FieldSlice, FocalWidth, PlaneSpec};
pub use dynamics::{simulate_particle, Drive, DynamicsOptions, Integrator, ParticleState, Trajectory};
pub use trap::{analyze_trap, standard_rig, standard_trap, TrapAnalysis};
