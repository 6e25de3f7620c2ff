//! `sonotrap` command line. Every flag can also be set through a
//! `SONOTRAP_*` environment variable.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sonotrap_core::echo::{amplitude_vs_size, detect, simulate_echo, AdcModel, DEFAULT_NOISE_FLOOR};
use sonotrap_core::field::{
    calibrated_source_amplitude, measure_focal_width, simulate_particle, standard_rig, Axis, Drive, DynamicsOptions,
    FieldModel, FieldSlice, ParticleState, PlaneSpec,
};
use sonotrap_core::geometry::{
    build_spherical_cap, presets, with_emitter_carrier, ArrayLayout, CARRIER_25K, DEFAULT_CAP_RADIUS,
};
use sonotrap_core::medium::{read_and_update, FileSource, MediumState};
use sonotrap_core::phase::bench::benchmark;
use sonotrap_core::phase::{compute_frame, FocalCommand, QuantizationConfig, DEFAULT_CLOCK_HZ};
use sonotrap_core::upac::{generate, load_frame, write_edges, RegisterFile};
use sonotrap_core::Vec3;

use crate::error::{Result, ServiceError};
use crate::experiment::{self, ExperimentSpec};
use crate::server::{self, ServerConfig};
use crate::session::{load_session, SessionState};

#[derive(Debug, Parser)]
#[command(name = "sonotrap", version, about = "Phased-array levitation simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CommandLine,
}

#[derive(Debug, Subcommand)]
pub enum CommandLine {
    /// Per-channel phases and delays for one focal point.
    Phases(PhasesArgs),
    /// Pressure on a plane through the focus.
    Field(FieldArgs),
    /// Trajectory speed sweep from a TOML or JSON spec file.
    Experiment(ExperimentArgs),
    /// Echo from a particle on the two receiver channels.
    Echo(EchoArgs),
    /// Frame computation timing.
    Bench(BenchArgs),
    /// Live steering service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    X,
    Y,
    Z,
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::X => Axis::X,
            AxisArg::Y => Axis::Y,
            AxisArg::Z => Axis::Z,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct MediumArgs {
    /// Air temperature, °C.
    #[arg(long = "temp", env = "SONOTRAP_TEMP", conflicts_with = "temp_file")]
    pub temp: Option<f64>,
    /// File holding the air temperature in °C.
    #[arg(long, env = "SONOTRAP_TEMP_FILE")]
    pub temp_file: Option<PathBuf>,
}

impl MediumArgs {
    pub fn medium(&self) -> Result<MediumState> {
        if let Some(path) = &self.temp_file {
            let mut source = FileSource { path: path.clone() };
            return Ok(read_and_update(&mut source, &MediumState::reference())?);
        }
        Ok(match self.temp {
            Some(t) => MediumState::from_temperature(t)?,
            None => MediumState::reference(),
        })
    }
}

#[derive(Debug, Args)]
pub struct PhasesArgs {
    /// Focal point x,y,z in mm.
    #[arg(long, env = "SONOTRAP_TARGET", value_parser = parse_vec3, allow_hyphen_values = true)]
    pub target: Vec3,
    /// Preset name, `reflector:Z`, or a layout JSON file.
    #[arg(long, env = "SONOTRAP_LAYOUT", default_value = "flat")]
    pub layout: String,
    #[command(flatten)]
    pub medium: MediumArgs,
    /// Emitter carrier, Hz.
    #[arg(long, env = "SONOTRAP_CARRIER")]
    pub carrier: Option<f64>,
    /// Controller clock, Hz.
    #[arg(long, env = "SONOTRAP_CLOCK", default_value_t = DEFAULT_CLOCK_HZ)]
    pub clock: f64,
    #[arg(long, env = "SONOTRAP_FORMAT", value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Also write the controller's output edges (`tick channel level`).
    #[arg(long)]
    pub edges: Option<PathBuf>,
    /// Carrier periods covered by the edge dump.
    #[arg(long, default_value_t = 3)]
    pub periods: u32,
}

#[derive(Debug, Args)]
pub struct FieldArgs {
    #[arg(long, env = "SONOTRAP_TARGET", value_parser = parse_vec3, allow_hyphen_values = true, default_value = "0,0,100")]
    pub target: Vec3,
    #[arg(long, env = "SONOTRAP_LAYOUT", default_value = "flat")]
    pub layout: String,
    #[command(flatten)]
    pub medium: MediumArgs,
    /// Axis normal to the plane; the plane passes through the target.
    #[arg(long, value_enum, default_value_t = AxisArg::Y)]
    pub normal: AxisArg,
    /// mm
    #[arg(long, default_value_t = 30.0)]
    pub half_extent: f64,
    /// mm
    #[arg(long, default_value_t = 0.5)]
    pub pitch: f64,
    /// CSV destination; standard output by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Plane description as JSON.
    #[arg(long)]
    pub header: Option<PathBuf>,
    /// Focal width along x as JSON.
    #[arg(long)]
    pub width: Option<PathBuf>,
    /// Particle trajectory CSV for a bead released at `--start`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    pub start: Option<Vec3>,
    /// s
    #[arg(long, default_value_t = 0.05)]
    pub duration: f64,
    /// s
    #[arg(long, default_value_t = 1e-5)]
    pub dt: f64,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    pub spec: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "SONOTRAP_FORMAT", value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct EchoArgs {
    #[arg(long, env = "SONOTRAP_LAYOUT", default_value = "flat-echo-we")]
    pub layout: String,
    #[command(flatten)]
    pub medium: MediumArgs,
    /// Particle centre x,y,z in mm.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true, default_value = "0,0,100")]
    pub position: Vec3,
    /// Particle diameter, mm.
    #[arg(long, default_value_t = 1.0)]
    pub size: f64,
    /// Probe burst frequency, Hz; the first receiver's carrier by default.
    #[arg(long)]
    pub probe: Option<f64>,
    /// Listening window, s.
    #[arg(long, default_value_t = 2e-3)]
    pub duration: f64,
    #[arg(long, env = "SONOTRAP_SEED", default_value_t = 0)]
    pub seed: u64,
    /// ADC noise σ in quantization steps.
    #[arg(long, default_value_t = 2.0)]
    pub noise_steps: f64,
    /// Detection threshold in quantization steps.
    #[arg(long, default_value_t = DEFAULT_NOISE_FLOOR)]
    pub noise_floor: f64,
    /// Directory for `channel_<id>.pcm` and `channel_<id>.json`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Comma-separated diameters in mm: print the echo amplitude for each
    /// instead of running detection.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 160)]
    pub frames: usize,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    #[arg(long, env = "SONOTRAP_LAYOUT", default_value = "flat")]
    pub layout: String,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "SONOTRAP_HOST", default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "SONOTRAP_PORT", default_value_t = 7878)]
    pub port: u16,
    /// Session file: loaded if present and rewritten after every change.
    #[arg(long, env = "SONOTRAP_SESSION")]
    pub session: Option<PathBuf>,
    #[arg(long, env = "SONOTRAP_LAYOUT", default_value = "standard")]
    pub layout: String,
    #[command(flatten)]
    pub medium: MediumArgs,
    /// Controller refresh rate, Hz; the software pipeline's by default.
    #[arg(long, env = "SONOTRAP_REFRESH_RATE")]
    pub refresh_rate: Option<f64>,
    /// Start without a particle in the trap.
    #[arg(long)]
    pub no_particle: bool,
}

fn parse_vec3(s: &str) -> std::result::Result<Vec3, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [x, y, z] => Ok(Vec3::new(x, y, z)),
        _ => Err(format!("expected x,y,z, got {} values", parts.len())),
    }
}

/// Resolves a preset name, `reflector:Z`, or a layout JSON path.
pub fn resolve_layout(name: &str, medium: &MediumState) -> Result<ArrayLayout> {
    Ok(match name {
        "flat" => presets::flat_8x8(),
        "standard" => standard_rig(medium)?,
        "flat-echo" => presets::flat_echo(),
        "flat-echo-we" => presets::flat_echo_west_east(),
        "flat-echo-ns" => presets::flat_echo_north_south(),
        "cap" => presets::spherical_cap(),
        "double-cap" => build_spherical_cap(DEFAULT_CAP_RADIUS, 64, CARRIER_25K, true)?,
        "dual-cap" => presets::dual_frequency_cap(),
        "dual-cap-swapped" => presets::dual_frequency_cap_swapped(),
        other => match other.strip_prefix("reflector:") {
            Some(z) => {
                let z = z
                    .parse()
                    .map_err(|_| ServiceError::Invalid(format!("reflector height {z:?} is not a number")))?;
                presets::flat_with_reflector(z)?
            }
            None => {
                let path = Path::new(other);
                if !path.exists() {
                    return Err(ServiceError::Invalid(format!(
                        "{other:?} is neither a layout preset nor a file"
                    )));
                }
                ArrayLayout::from_json(&fs::read_to_string(path)?)?
            }
        },
    })
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).map_err(io::Error::from)?;
    writeln!(out)?;
    Ok(())
}

/// Parses `args` (program name first) and runs the subcommand; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: CommandLine) -> Result<()> {
    match command {
        CommandLine::Phases(a) => phases(a),
        CommandLine::Field(a) => field(a),
        CommandLine::Experiment(a) => run_experiment(a),
        CommandLine::Echo(a) => echo(a),
        CommandLine::Bench(a) => bench(a),
        CommandLine::Serve(a) => serve(a),
    }
}

#[derive(Debug, Serialize)]
struct ChannelPhase {
    id: usize,
    phase_rad: f64,
    delay_cycles: u32,
}

fn phases(a: PhasesArgs) -> Result<()> {
    let medium = a.medium.medium()?;
    let mut layout = resolve_layout(&a.layout, &medium)?;
    if let Some(carrier) = a.carrier {
        layout = with_emitter_carrier(&layout, carrier)?;
    }
    let quant = QuantizationConfig::new(a.clock, layout.emitter_carrier()?)?;
    let frame = compute_frame(&layout, &FocalCommand::focus(a.target), &medium, &quant)?;
    let rows: Vec<ChannelPhase> = frame
        .channels
        .iter()
        .zip(&frame.phases)
        .zip(&frame.delays_cycles)
        .map(|((&id, &phase_rad), &delay_cycles)| ChannelPhase {
            id,
            phase_rad,
            delay_cycles,
        })
        .collect();
    if let Some(path) = &a.edges {
        let blank = RegisterFile::new(&frame.channels, quant.cycles_per_period());
        let registers = load_frame(&blank, &frame)?;
        let waveforms = generate(&registers, f64::from(a.periods) / quant.carrier_hz(), &quant)?;
        write_edges(&waveforms, BufWriter::new(File::create(path)?))?;
    }
    match a.format {
        Format::Json => print_json(&rows),
        Format::Csv => {
            let mut out = output(None)?;
            writeln!(out, "id,phase_rad,delay_cycles")?;
            for r in &rows {
                writeln!(out, "{},{},{}", r.id, r.phase_rad, r.delay_cycles)?;
            }
            out.flush()?;
            Ok(())
        }
    }
}

fn field(a: FieldArgs) -> Result<()> {
    let medium = a.medium.medium()?;
    let layout = resolve_layout(&a.layout, &medium)?;
    let quant = QuantizationConfig::for_layout(&layout)?;
    let frame = compute_frame(&layout, &FocalCommand::focus(a.target), &medium, &quant)?;
    let model = FieldModel::new(&layout, &frame, &medium, calibrated_source_amplitude())?;
    let plane = PlaneSpec::through(&a.target, a.normal.into(), a.half_extent, a.pitch);
    let slice = FieldSlice::compute(&model, plane)?;
    let mut out = output(a.out.as_deref())?;
    slice.write_csv(&mut out)?;
    out.flush()?;
    if let Some(path) = &a.header {
        fs::write(path, slice.header_json())?;
    }
    if let Some(path) = &a.width {
        let width = measure_focal_width(&model, &a.target, &plane)?;
        fs::write(path, serde_json::to_string_pretty(&width).map_err(io::Error::from)?)?;
    }
    if let Some(path) = &a.trace {
        let particle = ParticleState::eps(a.start.unwrap_or(a.target));
        let trajectory = simulate_particle(
            &layout,
            Drive::Frame(&frame),
            &medium,
            particle,
            a.dt,
            a.duration,
            DynamicsOptions::default(),
        )?;
        let mut out = BufWriter::new(File::create(path)?);
        trajectory.write_csv(&mut out)?;
        out.flush()?;
    }
    Ok(())
}

fn run_experiment(a: ExperimentArgs) -> Result<()> {
    let spec = ExperimentSpec::load(&a.spec)?;
    let rows = experiment::run(&spec)?;
    let mut out = output(a.out.as_deref())?;
    match a.format {
        Format::Csv => experiment::write_csv(&rows, &mut out)?,
        Format::Json => {
            serde_json::to_writer_pretty(&mut out, &rows).map_err(io::Error::from)?;
            writeln!(out)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn echo(a: EchoArgs) -> Result<()> {
    let medium = a.medium.medium()?;
    let layout = resolve_layout(&a.layout, &medium)?;
    let probe = match a.probe {
        Some(p) => p,
        None => layout
            .receivers()
            .next()
            .map(|r| r.carrier_frequency)
            .ok_or(sonotrap_core::Error::NoReceiver)?,
    };
    if let Some(sizes) = &a.sizes {
        return print_json(&amplitude_vs_size(&layout, a.position, probe, sizes, &medium)?);
    }
    if !(a.size > 0.0) {
        return Err(ServiceError::Invalid(format!("particle size {} mm must be positive", a.size)));
    }
    let mut particle = ParticleState::eps(a.position);
    particle.radius = a.size / 2.0;
    let adc = AdcModel {
        noise_steps: a.noise_steps,
        seed: a.seed,
        ..AdcModel::zedboard()
    };
    let traces = simulate_echo(&layout, &particle, probe, &medium, &adc, a.duration)?;
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir)?;
        for t in &traces {
            let mut pcm = BufWriter::new(File::create(dir.join(format!("channel_{}.pcm", t.channel)))?);
            t.write_pcm(&mut pcm)?;
            pcm.flush()?;
            fs::write(dir.join(format!("channel_{}.json", t.channel)), t.sidecar_json())?;
        }
    }
    print_json(&detect(&traces, a.noise_floor)?)
}

#[derive(Debug, Serialize)]
struct BenchOutput {
    #[serde(flatten)]
    report: sonotrap_core::phase::bench::BenchReport,
    refresh_identity: bool,
}

fn bench(a: BenchArgs) -> Result<()> {
    let layout = resolve_layout(&a.layout, &MediumState::reference())?;
    let report = benchmark(&layout, a.frames, a.reps)?;
    print_json(&BenchOutput {
        refresh_identity: report.refresh_identity_holds(),
        report,
    })
}

fn serve(a: ServeArgs) -> Result<()> {
    let existing = a.session.as_deref().filter(|p| p.exists());
    let mut session = match existing {
        Some(path) => load_session(path)?,
        None => {
            let medium = a.medium.medium()?;
            let layout = resolve_layout(&a.layout, &medium)?;
            let mut session = SessionState::new(layout, medium)?;
            if !a.no_particle && session.layout().reflector_z().is_some() {
                let target = session.command().target;
                session.place_particle(ParticleState::eps(target))?;
            }
            session
        }
    };
    if let Some(rate) = a.refresh_rate {
        session.set_timing(sonotrap_core::phase::ControllerTiming::from_refresh_rate(rate)?);
    }
    let config = ServerConfig {
        autosave: a.session.clone(),
        temperature_file: a.medium.temp_file.clone(),
    };
    let handle = server::start(session, (a.host.as_str(), a.port), config)?;
    println!("listening on {}", handle.local_addr());
    io::stdout().flush()?;
    handle.wait();
    Ok(())
}
