use std::f64::consts::PI;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use super::gorkov::{force_unchecked, GorkovParams, EPS_DENSITY, EPS_RADIUS, EPS_SOUND_SPEED};
use super::model::{calibrated_source_amplitude, FieldModel};
use crate::geometry::{ArrayLayout, WorkingVolume};
use crate::medium::{MediumState, AIR_VISCOSITY};
use crate::phase::{MultiplexSchedule, PhaseFrame};
use crate::{Error, Result, Vec3};

/// Standard gravity, m/s².
pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    /// mm
    pub position: Vec3,
    /// mm/s
    pub velocity: Vec3,
    /// mm
    pub radius: f64,
    /// kg/m³
    pub density: f64,
}

impl ParticleState {
    pub fn new(position: Vec3, radius: f64, density: f64) -> Result<Self> {
        if !(radius > 0.0 && density > 0.0) {
            return Err(Error::InvalidArgument("particle radius and density must be positive".into()));
        }
        Ok(Self {
            position,
            velocity: Vec3::zeros(),
            radius,
            density,
        })
    }

    /// 1 mm expanded polystyrene bead at rest.
    pub fn eps(position: Vec3) -> Self {
        Self::new(position, EPS_RADIUS, EPS_DENSITY).expect("valid constants")
    }

    /// kg
    pub fn mass(&self) -> f64 {
        self.density * 4.0 / 3.0 * PI * (self.radius * 1e-3).powi(3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsOptions {
    pub gravity: bool,
    pub drag: bool,
    /// m/s
    pub particle_sound_speed: f64,
    /// Pa·mm per emitter.
    pub source_amplitude: f64,
    /// Keep every n-th state in the returned trajectory.
    pub record_every: usize,
}

impl Default for DynamicsOptions {
    fn default() -> Self {
        Self {
            gravity: true,
            drag: true,
            particle_sound_speed: EPS_SOUND_SPEED,
            source_amplitude: calibrated_source_amplitude(),
            record_every: 1,
        }
    }
}

/// What the array emits while the particle moves.
#[derive(Debug, Clone, Copy)]
pub enum Drive<'a> {
    Off,
    Frame(&'a PhaseFrame),
    Schedule(&'a MultiplexSchedule),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EscapeEvent {
    pub step: usize,
    /// s
    pub time: f64,
    pub position: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<ParticleState>,
    pub escape: Option<EscapeEvent>,
}

impl Trajectory {
    pub fn last(&self) -> &ParticleState {
        self.states.last().expect("trajectory holds the initial state")
    }

    /// `t,x,y,z,vx,vy,vz` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "t,x,y,z,vx,vy,vz")?;
        for (t, s) in self.times.iter().zip(&self.states) {
            let (p, v) = (s.position, s.velocity);
            writeln!(out, "{t},{},{},{},{},{},{}", p.x, p.y, p.z, v.x, v.y, v.z)?;
        }
        Ok(())
    }
}

/// Semi-implicit Euler stepper for one particle in a switchable field.
#[derive(Debug, Clone)]
pub struct Integrator {
    layout: ArrayLayout,
    medium: MediumState,
    options: DynamicsOptions,
    params: GorkovParams,
    model: Option<FieldModel>,
    state: ParticleState,
    volume: WorkingVolume,
    mass: f64,
    drag_coefficient: f64,
    time: f64,
}

impl Integrator {
    pub fn new(
        layout: &ArrayLayout,
        medium: &MediumState,
        particle: ParticleState,
        options: DynamicsOptions,
    ) -> Result<Self> {
        if options.record_every == 0 {
            return Err(Error::InvalidArgument("record_every must be ≥ 1".into()));
        }
        let params = GorkovParams::new(
            particle.radius,
            particle.density,
            options.particle_sound_speed,
            medium,
        )?;
        params.validate(medium.wavelength_mm(layout.emitter_carrier()?))?;
        Ok(Self {
            layout: layout.clone(),
            medium: *medium,
            options,
            params,
            model: None,
            state: particle,
            volume: layout.working_volume(),
            mass: particle.mass(),
            drag_coefficient: 6.0 * PI * AIR_VISCOSITY * particle.radius * 1e-3,
            time: 0.0,
        })
    }

    pub fn state(&self) -> &ParticleState {
        &self.state
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn params(&self) -> &GorkovParams {
        &self.params
    }

    pub fn set_frame(&mut self, frame: Option<&PhaseFrame>) -> Result<()> {
        self.model = match frame {
            Some(f) => Some(FieldModel::new(
                &self.layout,
                f,
                &self.medium,
                self.options.source_amplitude,
            )?),
            None => None,
        };
        Ok(())
    }

    /// Total force on the particle at its current state, newtons.
    pub fn force(&self) -> Result<Vec3> {
        let mut f = match &self.model {
            Some(m) => force_unchecked(m, &self.params, &self.state.position)?,
            None => Vec3::zeros(),
        };
        if self.options.gravity {
            f.z -= self.mass * GRAVITY;
        }
        if self.options.drag {
            f -= self.drag_coefficient * self.state.velocity * 1e-3;
        }
        Ok(f)
    }

    /// Advances by `dt` seconds; returns false once the particle has left the
    /// working volume.
    pub fn step(&mut self, dt: f64) -> Result<bool> {
        let accel = self.force()? / self.mass * 1e3;
        self.state.velocity += accel * dt;
        self.state.position += self.state.velocity * dt;
        self.time += dt;
        Ok(self.volume.contains(&self.state.position))
    }
}

/// Integrates the particle for `duration` seconds. Under a schedule the
/// frame switches every dwell, which must span at least ten steps.
pub fn simulate_particle(
    layout: &ArrayLayout,
    drive: Drive<'_>,
    medium: &MediumState,
    particle: ParticleState,
    dt: f64,
    duration: f64,
    options: DynamicsOptions,
) -> Result<Trajectory> {
    if !(dt > 0.0 && duration >= 0.0) {
        return Err(Error::InvalidArgument("dt must be positive and duration non-negative".into()));
    }
    let mut integrator = Integrator::new(layout, medium, particle, options)?;
    if let Drive::Schedule(s) = drive {
        if s.frames.is_empty() {
            return Err(Error::InvalidArgument("empty schedule".into()));
        }
        if dt > s.dwell / 10.0 * (1.0 + 1e-9) {
            return Err(Error::InvalidArgument(format!(
                "dt {dt} s exceeds a tenth of the {} s dwell",
                s.dwell
            )));
        }
    }
    if let Drive::Frame(f) = drive {
        integrator.set_frame(Some(f))?;
    }
    let steps = (duration / dt).round() as usize;
    let mut out = Trajectory {
        times: vec![0.0],
        states: vec![particle],
        escape: None,
    };
    let mut active_slot = usize::MAX;
    for i in 0..steps {
        if let Drive::Schedule(s) = drive {
            let slot = ((i as f64 * dt / s.dwell).floor() as usize) % s.frames.len();
            if slot != active_slot {
                integrator.set_frame(Some(&s.frames[slot]))?;
                active_slot = slot;
            }
        }
        let inside = integrator.step(dt)?;
        let t = (i + 1) as f64 * dt;
        if !inside {
            out.times.push(t);
            out.states.push(*integrator.state());
            out.escape = Some(EscapeEvent {
                step: i + 1,
                time: t,
                position: integrator.state().position,
            });
            break;
        }
        if (i + 1) % options.record_every == 0 || i + 1 == steps {
            out.times.push(t);
            out.states.push(*integrator.state());
        }
    }
    Ok(out)
}
