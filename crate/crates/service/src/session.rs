//! Shared state of a live steering session and its on-disk form.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sonotrap_core::field::trap::{find_equilibrium, LEVITATION_HEIGHT};
use sonotrap_core::field::{
    calibrated_source_amplitude, standard_rig, DynamicsOptions, FieldModel, FieldSlice, Integrator, ParticleState,
    PlaneSpec,
};
use sonotrap_core::geometry::ArrayLayout;
use sonotrap_core::medium::{read_and_update, MediumState, TemperatureSource};
use sonotrap_core::phase::{focal_width, ControllerTiming, FocalCommand, PhaseFrame, PhaseKernel, QuantizationConfig};
use sonotrap_core::trajectory::{plan_steps_with_width, TrajectorySpec};
use sonotrap_core::upac::{load_frame, RegisterFile};
use sonotrap_core::Vec3;

use crate::error::{Result, ServiceError};

pub const SESSION_VERSION: u64 = 1;
/// Events kept in memory and written to session files.
pub const HISTORY_LIMIT: usize = 10_000;
/// Longest particle integration step in a live session, s.
pub const MAX_PARTICLE_DT: f64 = 50e-6;
/// Largest telemetry slice side, in samples.
pub const MAX_SLICE_SAMPLES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    FocusMoved { target: Vec3 },
    TemperatureSet { temperature: f64 },
    TrajectoryStarted { schedule: ScheduleSpec },
    TrajectoryStopped { target: Vec3 },
    ParticlePlaced { position: Vec3 },
    ParticleLost { position: Vec3 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub seq: u64,
    /// Simulated seconds since the session began.
    pub sim_time: f64,
    #[serde(flatten)]
    pub event: SessionEvent,
}

/// A trajectory and the frame rate it is played at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub trajectory: TrajectorySpec,
    /// Hz
    pub refresh_rate: f64,
}

#[derive(Debug, Clone)]
struct ActiveSchedule {
    spec: ScheduleSpec,
    waypoints: Vec<FocalCommand>,
    frames: Vec<PhaseFrame>,
    index: usize,
    cycles: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryProgress {
    pub waypoint: usize,
    pub waypoints: usize,
    pub cycles: u64,
    pub schedule: ScheduleSpec,
}

/// What a telemetry event reports about the session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub sim_time: f64,
    pub focus: Vec3,
    pub temperature: f64,
    pub speed_of_sound: f64,
    /// mm
    pub wavelength: f64,
    pub refresh_rate: f64,
    pub particle: Option<ParticleState>,
    pub trajectory: Option<TrajectoryProgress>,
    /// Events recorded in the session history so far.
    pub history_events: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub slice: Option<SliceData>,
}

/// |p| on a decimated plane, row-major with u varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceData {
    pub plane: PlaneSpec,
    pub size: usize,
    pub abs_p: Vec<f64>,
}

/// Reply to a focus move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoveReport {
    pub focus: Vec3,
    pub delays_cycles: Vec<u32>,
    /// Receipt to registers loaded, µs.
    pub latency_us: f64,
}

/// Everything needed to evaluate the field outside the session lock.
#[derive(Debug, Clone)]
pub struct FieldSnapshot {
    pub layout: ArrayLayout,
    pub frame: PhaseFrame,
    pub medium: MediumState,
}

impl FieldSnapshot {
    pub fn model(&self) -> Result<FieldModel> {
        Ok(FieldModel::new(&self.layout, &self.frame, &self.medium, calibrated_source_amplitude())?)
    }

    /// Slice of |p|, coarsened until it fits in a 64 × 64 grid.
    pub fn slice(&self, plane: PlaneSpec) -> Result<SliceData> {
        let plane = decimate(plane)?;
        let slice = FieldSlice::compute(&self.model()?, plane)?;
        Ok(SliceData {
            plane,
            size: slice.size(),
            abs_p: slice.values.iter().map(|p| p.norm()).collect(),
        })
    }
}

/// Raises the pitch of `plane` until it has at most 64 samples per side.
pub fn decimate(mut plane: PlaneSpec) -> Result<PlaneSpec> {
    if !(plane.pitch > 0.0 && plane.half_extent >= 0.0 && plane.half_extent.is_finite()) {
        return Err(ServiceError::Invalid(format!(
            "slice pitch {} and half extent {} must be positive",
            plane.pitch, plane.half_extent
        )));
    }
    if plane.samples() > MAX_SLICE_SAMPLES {
        plane.pitch = plane.half_extent / ((MAX_SLICE_SAMPLES - 1) / 2) as f64;
        while plane.samples() > MAX_SLICE_SAMPLES {
            plane.pitch *= 1.0 + 1e-9;
        }
    }
    Ok(plane)
}

/// On-disk session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionFile {
    pub version: u64,
    pub layout: ArrayLayout,
    pub medium: MediumState,
    pub command: FocalCommand,
    pub timing: ControllerTiming,
    pub particle: Option<ParticleState>,
    pub schedule: Option<ScheduleSpec>,
    pub sim_time: f64,
    pub next_seq: u64,
    pub history: Vec<HistoryEntry>,
}

/// Live session: the array, the air, the command being emitted and the
/// particle it holds.
#[derive(Debug, Clone)]
pub struct SessionState {
    layout: ArrayLayout,
    medium: MediumState,
    quant: QuantizationConfig,
    kernel: PhaseKernel,
    command: FocalCommand,
    frame: PhaseFrame,
    registers: RegisterFile,
    timing: ControllerTiming,
    particle: Option<Integrator>,
    schedule: Option<ActiveSchedule>,
    history: VecDeque<HistoryEntry>,
    next_seq: u64,
    sim_time: f64,
}

fn dynamics() -> DynamicsOptions {
    DynamicsOptions {
        record_every: 1,
        ..DynamicsOptions::default()
    }
}

/// Levitation height above the array centre, or the middle of the working
/// volume when that is out of reach.
pub fn default_focus(layout: &ArrayLayout) -> Vec3 {
    let volume = layout.working_volume();
    let preferred = Vec3::new(0.0, 0.0, LEVITATION_HEIGHT);
    if volume.contains(&preferred) {
        preferred
    } else {
        volume.center()
    }
}

impl SessionState {
    /// Session focused at [`default_focus`], software timing, no particle.
    pub fn new(layout: ArrayLayout, medium: MediumState) -> Result<Self> {
        let quant = QuantizationConfig::for_layout(&layout)?;
        let kernel = PhaseKernel::new(&layout, &medium, &quant)?;
        let command = FocalCommand::focus(default_focus(&layout));
        let frame = kernel.frame(&command)?;
        let blank = RegisterFile::new(&frame.channels, quant.cycles_per_period());
        let registers = load_frame(&blank, &frame)?;
        Ok(Self {
            layout,
            medium,
            quant,
            kernel,
            command,
            frame,
            registers,
            timing: ControllerTiming::software(),
            particle: None,
            schedule: None,
            history: VecDeque::new(),
            next_seq: 0,
            sim_time: 0.0,
        })
    }

    /// Flat 8×8 under a reflector with a bead resting in the trap.
    pub fn standard(medium: MediumState) -> Result<Self> {
        let mut session = Self::new(standard_rig(&medium)?, medium)?;
        session.place_particle(ParticleState::eps(session.command.target))?;
        Ok(session)
    }

    pub fn layout(&self) -> &ArrayLayout {
        &self.layout
    }

    pub fn medium(&self) -> &MediumState {
        &self.medium
    }

    pub fn command(&self) -> &FocalCommand {
        &self.command
    }

    pub fn current_frame(&self) -> &PhaseFrame {
        &self.frame
    }

    pub fn registers(&self) -> &RegisterFile {
        &self.registers
    }

    pub fn timing(&self) -> &ControllerTiming {
        &self.timing
    }

    pub fn particle(&self) -> Option<&ParticleState> {
        self.particle.as_ref().map(Integrator::state)
    }

    pub fn schedule(&self) -> Option<&ScheduleSpec> {
        self.schedule.as_ref().map(|s| &s.spec)
    }

    pub fn history(&self) -> impl Iterator<Item = &HistoryEntry> + '_ {
        self.history.iter()
    }

    pub fn sim_time(&self) -> f64 {
        self.sim_time
    }

    pub fn set_timing(&mut self, timing: ControllerTiming) {
        self.timing = timing;
    }

    fn record(&mut self, event: SessionEvent) {
        if self.history.len() == HISTORY_LIMIT {
            self.history.pop_front();
        }
        self.history.push_back(HistoryEntry {
            seq: self.next_seq,
            sim_time: self.sim_time,
            event,
        });
        self.next_seq += 1;
    }

    /// Makes `frame` the emitted frame: registers, then the particle's field.
    fn emit(&mut self, command: FocalCommand, frame: PhaseFrame) -> Result<()> {
        self.registers = load_frame(&self.registers, &frame)?;
        if let Some(p) = &mut self.particle {
            p.set_frame(Some(&frame))?;
        }
        self.command = command;
        self.frame = frame;
        Ok(())
    }

    /// Steers the focus; an out-of-volume target leaves the session as it was.
    /// A running trajectory is stopped.
    pub fn move_focus(&mut self, target: Vec3) -> Result<MoveReport> {
        let received = Instant::now();
        let command = FocalCommand::focus(target);
        let frame = self.kernel.frame(&command)?;
        self.emit(command, frame)?;
        let latency_us = received.elapsed().as_secs_f64() * 1e6;
        if self.schedule.take().is_some() {
            self.record(SessionEvent::TrajectoryStopped { target });
        }
        self.record(SessionEvent::FocusMoved { target });
        Ok(MoveReport {
            focus: target,
            delays_cycles: self.frame.delays_cycles.clone(),
            latency_us,
        })
    }

    /// New air temperature; every frame in use is recomputed before this
    /// returns.
    pub fn set_temperature(&mut self, temperature: f64) -> Result<()> {
        let medium = MediumState::from_temperature(temperature)?.with_density(self.medium.density_air())?;
        self.apply_medium(medium)?;
        self.record(SessionEvent::TemperatureSet { temperature });
        Ok(())
    }

    /// Reads `source` and applies the reading; on a failed read the session
    /// is unchanged.
    pub fn refresh_temperature(&mut self, source: &mut dyn TemperatureSource) -> Result<()> {
        let medium = read_and_update(source, &self.medium)?;
        if medium != self.medium {
            self.apply_medium(medium)?;
            self.record(SessionEvent::TemperatureSet {
                temperature: medium.temperature(),
            });
        }
        Ok(())
    }

    fn apply_medium(&mut self, medium: MediumState) -> Result<()> {
        let kernel = PhaseKernel::new(&self.layout, &medium, &self.quant)?;
        let frame = kernel.frame(&self.command)?;
        let schedule_frames = match &self.schedule {
            Some(s) => Some(kernel.batch(&s.waypoints)?),
            None => None,
        };
        let particle = match &self.particle {
            Some(p) => Some(Integrator::new(&self.layout, &medium, *p.state(), dynamics())?),
            None => None,
        };
        self.medium = medium;
        self.kernel = kernel;
        self.particle = particle;
        if let (Some(s), Some(frames)) = (&mut self.schedule, schedule_frames) {
            s.frames = frames;
        }
        let command = self.command;
        self.emit(command, frame)
    }

    /// Plays `spec` from its first waypoint, cycling until stopped. Without
    /// a rate the session's refresh rate is used.
    pub fn start_trajectory(&mut self, spec: TrajectorySpec, refresh_rate: Option<f64>) -> Result<ScheduleSpec> {
        let timing = match refresh_rate {
            Some(r) => ControllerTiming::from_refresh_rate(r)?,
            None => self.timing,
        };
        let lambda = self.medium.wavelength_mm(self.layout.emitter_carrier()?);
        let width = focal_width(lambda, spec.height, self.layout.side_length())?;
        let waypoints = plan_steps_with_width(&spec, &timing, width)?;
        let frames = self.kernel.batch(&waypoints)?;
        let schedule = ScheduleSpec {
            trajectory: spec,
            refresh_rate: timing.refresh_rate,
        };
        self.emit(waypoints[0], frames[0].clone())?;
        self.timing = timing;
        self.schedule = Some(ActiveSchedule {
            spec: schedule,
            waypoints,
            frames,
            index: 0,
            cycles: 0,
        });
        self.record(SessionEvent::TrajectoryStarted { schedule });
        Ok(schedule)
    }

    /// Halts a trajectory; the focus stays on the waypoint last emitted.
    pub fn stop(&mut self) -> Option<Vec3> {
        self.schedule.take().map(|_| {
            let target = self.command.target;
            self.record(SessionEvent::TrajectoryStopped { target });
            target
        })
    }

    /// Puts `particle` at rest in the equilibrium of the current trap.
    pub fn place_particle(&mut self, particle: ParticleState) -> Result<Vec3> {
        let model = FieldModel::new(&self.layout, &self.frame, &self.medium, calibrated_source_amplitude())?;
        let probe = Integrator::new(&self.layout, &self.medium, particle, dynamics())?;
        let position = find_equilibrium(&model, probe.params(), self.command.target, true)?;
        let resting = ParticleState {
            position,
            velocity: Vec3::zeros(),
            ..particle
        };
        self.set_particle(Some(resting))?;
        self.record(SessionEvent::ParticlePlaced { position });
        Ok(position)
    }

    fn set_particle(&mut self, particle: Option<ParticleState>) -> Result<()> {
        self.particle = match particle {
            Some(p) => {
                let mut integrator = Integrator::new(&self.layout, &self.medium, p, dynamics())?;
                integrator.set_frame(Some(&self.frame))?;
                Some(integrator)
            }
            None => None,
        };
        Ok(())
    }

    /// Runs `frames` controller frames: the trajectory (if any) steps one
    /// waypoint per frame and the particle is integrated over each in steps
    /// of at most [`MAX_PARTICLE_DT`].
    pub fn advance(&mut self, frames: usize) -> Result<()> {
        if self.schedule.is_none() && self.particle.is_none() {
            self.sim_time += frames as f64 * self.timing.latency;
            return Ok(());
        }
        for _ in 0..frames {
            if let Some(s) = &mut self.schedule {
                s.index += 1;
                if s.index == s.waypoints.len() {
                    s.index = 0;
                    s.cycles += 1;
                }
                let (command, frame) = (s.waypoints[s.index], s.frames[s.index].clone());
                self.emit(command, frame)?;
            }
            let substeps = (self.timing.latency / MAX_PARTICLE_DT).ceil().max(1.0) as usize;
            let dt = self.timing.latency / substeps as f64;
            if let Some(p) = &mut self.particle {
                for _ in 0..substeps {
                    if !p.step(dt)? {
                        let position = p.state().position;
                        self.particle = None;
                        self.record(SessionEvent::ParticleLost { position });
                        break;
                    }
                }
            }
            self.sim_time += self.timing.latency;
        }
        Ok(())
    }

    pub fn telemetry(&self, with_particle: bool) -> Telemetry {
        let carrier = self.quant.carrier_hz();
        Telemetry {
            sim_time: self.sim_time,
            focus: self.command.target,
            temperature: self.medium.temperature(),
            speed_of_sound: self.medium.speed_of_sound(),
            wavelength: self.medium.wavelength_mm(carrier),
            refresh_rate: self.timing.refresh_rate,
            particle: if with_particle { self.particle().copied() } else { None },
            trajectory: self.schedule.as_ref().map(|s| TrajectoryProgress {
                waypoint: s.index,
                waypoints: s.waypoints.len(),
                cycles: s.cycles,
                schedule: s.spec,
            }),
            history_events: self.next_seq,
            slice: None,
        }
    }

    pub fn field_snapshot(&self) -> FieldSnapshot {
        FieldSnapshot {
            layout: self.layout.clone(),
            frame: self.frame.clone(),
            medium: self.medium,
        }
    }

    pub fn to_file(&self) -> SessionFile {
        SessionFile {
            version: SESSION_VERSION,
            layout: self.layout.clone(),
            medium: self.medium,
            command: self.command,
            timing: self.timing,
            particle: self.particle().copied(),
            schedule: self.schedule().copied(),
            sim_time: self.sim_time,
            next_seq: self.next_seq,
            history: self.history.iter().cloned().collect(),
        }
    }

    /// Rebuilds a session; a saved trajectory restarts from its first
    /// waypoint.
    pub fn from_file(file: SessionFile) -> Result<Self> {
        if file.version != SESSION_VERSION {
            return Err(ServiceError::VersionMismatch {
                expected: SESSION_VERSION,
                found: file.version,
            });
        }
        let mut session = Self::new(file.layout, file.medium)?;
        session.timing = file.timing;
        let frame = session.kernel.frame(&file.command)?;
        session.emit(file.command, frame)?;
        session.set_particle(file.particle)?;
        if let Some(s) = file.schedule {
            session.start_trajectory(s.trajectory, Some(s.refresh_rate))?;
            session.emit(file.command, session.kernel.frame(&file.command)?)?;
        }
        let skip = file.history.len().saturating_sub(HISTORY_LIMIT);
        session.history = file.history.into_iter().skip(skip).collect();
        session.next_seq = file.next_seq;
        session.sim_time = file.sim_time;
        Ok(session)
    }
}

/// Writes the session as JSON, via a temporary file so a crash never leaves
/// a half-written session behind.
pub fn persist_session(session: &SessionState, path: &Path) -> Result<()> {
    write_session_file(&session.to_file(), path)
}

pub fn write_session_file(file: &SessionFile, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(file).map_err(|e| ServiceError::Invalid(e.to_string()))?;
    let tmp = path.with_extension("partial");
    {
        let mut out = fs::File::create(&tmp)?;
        out.write_all(text.as_bytes())?;
        out.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a session file, checking its version before anything else.
pub fn load_session(path: &Path) -> Result<SessionState> {
    let text = fs::read_to_string(path)?;
    let what = path.display().to_string();
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| ServiceError::parse(&what, &e))?;
    let found = value.get("version").ok_or_else(|| ServiceError::Parse {
        what: what.clone(),
        line: 1,
        column: 1,
        message: "missing version field".into(),
    })?;
    match found.as_u64() {
        Some(SESSION_VERSION) => {}
        Some(found) => {
            return Err(ServiceError::VersionMismatch {
                expected: SESSION_VERSION,
                found,
            })
        }
        None => {
            return Err(ServiceError::Parse {
                what,
                line: 1,
                column: 1,
                message: format!("version {found} is not an unsigned integer"),
            })
        }
    }
    let file: SessionFile = serde_json::from_str(&text).map_err(|e| ServiceError::parse(&what, &e))?;
    SessionState::from_file(file)
}
