//! Speed sweeps described by a TOML or JSON file.
//!
//! ```toml
//! name = "orbit"
//! shape = "circular"          # or "linear"
//! radius_or_length = 30.0     # mm
//! speeds = [200.0, 385.0]     # mm/s
//! timing = ["software", "hardware", 12000.0]
//! iterations = 5              # optional, 10 sweeps or 5 orbits by default
//! height = 100.0              # optional, mm
//! temperature_c = 14.33       # optional
//!
//! [particle]                  # optional, 1 mm EPS bead by default
//! radius = 0.5
//! density = 29.63
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sonotrap_core::field::gorkov::{EPS_DENSITY, EPS_RADIUS};
use sonotrap_core::field::{standard_rig, ParticleState};
use sonotrap_core::medium::MediumState;
use sonotrap_core::phase::ControllerTiming;
use sonotrap_core::trajectory::{run_experiment, Shape, TrajectorySpec};
use sonotrap_core::Vec3;

use crate::error::{Result, ServiceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Linear,
    Circular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimingSpec {
    /// "software" or "hardware".
    Named(String),
    /// Refresh rate in Hz.
    Rate(f64),
}

impl TimingSpec {
    pub fn resolve(&self) -> Result<(String, ControllerTiming)> {
        match self {
            TimingSpec::Named(name) => match name.as_str() {
                "software" => Ok((name.clone(), ControllerTiming::software())),
                "hardware" => Ok((name.clone(), ControllerTiming::hardware())),
                other => Err(ServiceError::Invalid(format!(
                    "timing {other:?} is neither \"software\", \"hardware\" nor a rate in Hz"
                ))),
            },
            TimingSpec::Rate(hz) => Ok((format!("{hz} Hz"), ControllerTiming::from_refresh_rate(*hz)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(t) => vec![t.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleSpec {
    #[serde(default = "eps_radius")]
    pub radius: f64,
    #[serde(default = "eps_density")]
    pub density: f64,
}

fn eps_radius() -> f64 {
    EPS_RADIUS
}

fn eps_density() -> f64 {
    EPS_DENSITY
}

impl Default for ParticleSpec {
    fn default() -> Self {
        Self {
            radius: EPS_RADIUS,
            density: EPS_DENSITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub shape: ShapeKind,
    pub radius_or_length: f64,
    pub speeds: Vec<f64>,
    pub timing: OneOrMany<TimingSpec>,
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default = "default_height")]
    pub height: f64,
    #[serde(default)]
    pub temperature_c: Option<f64>,
    #[serde(default)]
    pub particle: ParticleSpec,
}

fn default_height() -> f64 {
    100.0
}

impl ExperimentSpec {
    /// JSON for `.json` files, TOML otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let what = path.display().to_string();
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            serde_json::from_str(&text).map_err(|e| ServiceError::parse(&what, &e))
        } else {
            toml::from_str(&text).map_err(|e| {
                let (line, column) = e
                    .span()
                    .map(|s| line_column(&text, s.start))
                    .unwrap_or((0, 0));
                ServiceError::Parse {
                    what,
                    line,
                    column,
                    message: e.message().to_string(),
                }
            })
        }
    }

    pub fn shape(&self) -> Shape {
        match self.shape {
            ShapeKind::Linear => Shape::Linear {
                path_length: self.radius_or_length,
            },
            ShapeKind::Circular => Shape::Circular {
                radius: self.radius_or_length,
            },
        }
    }
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub experiment: String,
    pub pipeline: String,
    /// mm/s
    pub speed: f64,
    /// mm
    pub step: f64,
    /// Hz
    pub refresh: f64,
    /// Step times the software refresh rate, mm/s.
    pub normalized_speed: f64,
    pub completed: bool,
    pub achieved_speed: f64,
    pub rms_error: f64,
    pub escape_frame: Option<usize>,
}

/// Runs every (timing, speed) pair in order on the standard rig.
pub fn run(spec: &ExperimentSpec) -> Result<Vec<ExperimentRow>> {
    if spec.speeds.is_empty() {
        return Err(ServiceError::Invalid("speeds must list at least one speed".into()));
    }
    let medium = match spec.temperature_c {
        Some(t) => MediumState::from_temperature(t)?,
        None => MediumState::reference(),
    };
    let layout = standard_rig(&medium)?;
    let particle = ParticleState::new(Vec3::new(0.0, 0.0, spec.height), spec.particle.radius, spec.particle.density)?;
    let shape = spec.shape();
    let iterations = spec.iterations.unwrap_or_else(|| shape.default_iterations());
    let name = spec.name.clone().unwrap_or_else(|| format!("{:?}", spec.shape).to_lowercase());
    let software = ControllerTiming::software().refresh_rate;
    let mut rows = Vec::new();
    for timing in spec.timing.to_vec() {
        let (pipeline, timing) = timing.resolve()?;
        for &speed in &spec.speeds {
            let plan = TrajectorySpec::at_speed(shape, speed, spec.height, &timing);
            let result = run_experiment(&layout, &medium, &plan, &timing, &particle, iterations)?;
            rows.push(ExperimentRow {
                experiment: name.clone(),
                pipeline: pipeline.clone(),
                speed,
                step: plan.step_size,
                refresh: timing.refresh_rate,
                normalized_speed: plan.step_size * software,
                completed: result.completed,
                achieved_speed: result.achieved_speed,
                rms_error: result.rms_tracking_error,
                escape_frame: result.escape_frame,
            });
        }
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[ExperimentRow], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "experiment,pipeline,speed,step,refresh,normalized_speed,completed,achieved_speed,rms_error,escape_frame"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.experiment,
            r.pipeline,
            r.speed,
            r.step,
            r.refresh,
            r.normalized_speed,
            r.completed,
            r.achieved_speed,
            r.rms_error,
            r.escape_frame.map(|f| f.to_string()).unwrap_or_default()
        )?;
    }
    Ok(())
}
