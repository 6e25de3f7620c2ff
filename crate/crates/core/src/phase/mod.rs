//! Per-channel phase computation for focal commands.
//!
//! For a transducer at r_i and a focal target r_f, the path length is the
//! Euclidean distance between them and the phase is the fractional part of
//! that distance in wavelengths, scaled to radians. Phases are then
//! quantized into whole clock cycles for the controller registers.

pub mod bench;

use std::f64::consts::{PI, TAU};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::ArrayLayout;
use crate::medium::MediumState;
use crate::{Error, Result, Vec3};

pub use bench::{benchmark, BenchReport};

/// Controller master clock.
pub const DEFAULT_CLOCK_HZ: f64 = 100e6;

pub fn path_length(transducer: &Vec3, target: &Vec3) -> f64 {
    (target - transducer).norm()
}

/// Phase in [0, 2π) for a path of `path` mm at wavelength `lambda` mm.
pub fn phase_shift(path: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "wavelength {lambda} mm must be positive"
        )));
    }
    Ok(wrapped_phase(path, lambda))
}

#[inline]
fn wrapped_phase(path: f64, lambda: f64) -> f64 {
    let phase = TAU * path.rem_euclid(lambda) / lambda;
    if phase >= TAU {
        0.0
    } else {
        phase
    }
}

/// Predicted focal width w = 2λR/D.
pub fn focal_width(lambda: f64, focal_length: f64, side_length: f64) -> Result<f64> {
    if !(lambda > 0.0 && focal_length > 0.0 && side_length > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "focal width needs positive λ, R, D (got {lambda}, {focal_length}, {side_length})"
        )));
    }
    Ok(2.0 * lambda * focal_length / side_length)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Signature {
    #[default]
    SingleFocus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalCommand {
    pub target: Vec3,
    #[serde(default)]
    pub signature: Signature,
}

impl FocalCommand {
    pub fn focus(target: Vec3) -> Self {
        Self {
            target,
            signature: Signature::SingleFocus,
        }
    }
}

/// Clock-to-carrier ratio that sets the delay resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizationConfig {
    clock_hz: f64,
    carrier_hz: f64,
    cycles_per_period: u32,
}

impl QuantizationConfig {
    pub fn new(clock_hz: f64, carrier_hz: f64) -> Result<Self> {
        if !(clock_hz > 0.0 && carrier_hz > 0.0) {
            return Err(Error::InvalidArgument("clock and carrier must be positive".into()));
        }
        let ratio = clock_hz / carrier_hz;
        if ratio.fract() != 0.0 || ratio < 2.0 || ratio > f64::from(u32::MAX) {
            return Err(Error::InvalidArgument(format!(
                "clock {clock_hz} Hz / carrier {carrier_hz} Hz must be an integer ≥ 2"
            )));
        }
        Ok(Self {
            clock_hz,
            carrier_hz,
            cycles_per_period: ratio as u32,
        })
    }

    /// 100 MHz clock driving the layout's emitter carrier.
    pub fn for_layout(layout: &ArrayLayout) -> Result<Self> {
        Self::new(DEFAULT_CLOCK_HZ, layout.emitter_carrier()?)
    }

    pub fn clock_hz(&self) -> f64 {
        self.clock_hz
    }

    pub fn carrier_hz(&self) -> f64 {
        self.carrier_hz
    }

    pub fn cycles_per_period(&self) -> u32 {
        self.cycles_per_period
    }

    /// Round-to-nearest (ties to even) cycle count for a phase in [0, 2π).
    pub fn quantize(&self, phase: f64) -> u32 {
        let n = self.cycles_per_period;
        let cycles = (phase / TAU * f64::from(n)).round_ties_even() as u32;
        if cycles >= n {
            cycles - n
        } else {
            cycles
        }
    }

    pub fn cycles_to_phase(&self, cycles: u32) -> f64 {
        TAU * f64::from(cycles) / f64::from(self.cycles_per_period)
    }

    /// Worst-case phase error introduced by [`quantize`](Self::quantize).
    pub fn max_error(&self) -> f64 {
        PI / f64::from(self.cycles_per_period)
    }
}

/// One complete set of channel phases for a focal command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseFrame {
    /// Emitter channel id for each entry below.
    pub channels: Vec<usize>,
    pub phases: Vec<f64>,
    pub delays_cycles: Vec<u32>,
    pub command: FocalCommand,
    pub medium_snapshot: MediumState,
    pub quantization: QuantizationConfig,
}

impl PhaseFrame {
    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    /// Phase actually emitted once the delays are applied.
    pub fn quantized_phases(&self) -> impl Iterator<Item = f64> + '_ {
        self.delays_cycles
            .iter()
            .map(|&d| self.quantization.cycles_to_phase(d))
    }
}

/// Emitter positions laid out for the per-channel kernel.
#[derive(Debug, Clone)]
pub struct PhaseKernel {
    channels: Vec<usize>,
    xs: Vec<f64>,
    ys: Vec<f64>,
    zs: Vec<f64>,
    lambda: f64,
    quant: QuantizationConfig,
    medium: MediumState,
    volume: crate::geometry::WorkingVolume,
}

impl PhaseKernel {
    pub fn new(layout: &ArrayLayout, medium: &MediumState, quant: &QuantizationConfig) -> Result<Self> {
        let carrier = layout.emitter_carrier()?;
        if carrier != quant.carrier_hz() {
            return Err(Error::InvalidArgument(format!(
                "quantization carrier {} Hz differs from emitter carrier {carrier} Hz",
                quant.carrier_hz()
            )));
        }
        let emitters: Vec<_> = layout.emitters().collect();
        Ok(Self {
            channels: emitters.iter().map(|t| t.id).collect(),
            xs: emitters.iter().map(|t| t.position.x).collect(),
            ys: emitters.iter().map(|t| t.position.y).collect(),
            zs: emitters.iter().map(|t| t.position.z).collect(),
            lambda: medium.wavelength_mm(carrier),
            quant: *quant,
            medium: *medium,
            volume: layout.working_volume(),
        })
    }

    pub fn wavelength(&self) -> f64 {
        self.lambda
    }

    fn check(&self, command: &FocalCommand, index: Option<usize>) -> Result<()> {
        if self.volume.contains(&command.target) {
            Ok(())
        } else {
            Err(Error::OutOfVolume {
                target: command.target.into(),
                bounds: self.volume.to_string(),
                index,
            })
        }
    }

    /// Phase of one channel: the accelerator's unit of work.
    #[inline]
    pub fn channel_phase(&self, channel: usize, target: &Vec3) -> f64 {
        let dx = target.x - self.xs[channel];
        let dy = target.y - self.ys[channel];
        let dz = target.z - self.zs[channel];
        wrapped_phase((dx * dx + dy * dy + dz * dz).sqrt(), self.lambda)
    }

    fn frame_unchecked(&self, command: &FocalCommand) -> PhaseFrame {
        let phases: Vec<f64> = (0..self.channels.len())
            .map(|i| self.channel_phase(i, &command.target))
            .collect();
        let delays_cycles = phases.iter().map(|&p| self.quant.quantize(p)).collect();
        PhaseFrame {
            channels: self.channels.clone(),
            phases,
            delays_cycles,
            command: *command,
            medium_snapshot: self.medium,
            quantization: self.quant,
        }
    }

    pub fn frame(&self, command: &FocalCommand) -> Result<PhaseFrame> {
        self.check(command, None)?;
        Ok(self.frame_unchecked(command))
    }

    /// Frames for many commands, evaluated in parallel; output order follows
    /// input order.
    pub fn batch(&self, commands: &[FocalCommand]) -> Result<Vec<PhaseFrame>> {
        if commands.is_empty() {
            return Err(Error::InvalidArgument("batch needs at least one command".into()));
        }
        for (i, c) in commands.iter().enumerate() {
            self.check(c, Some(i))?;
        }
        Ok(commands
            .par_iter()
            .map(|c| self.frame_unchecked(c))
            .collect())
    }
}

pub fn compute_frame(
    layout: &ArrayLayout,
    command: &FocalCommand,
    medium: &MediumState,
    quant: &QuantizationConfig,
) -> Result<PhaseFrame> {
    PhaseKernel::new(layout, medium, quant)?.frame(command)
}

pub fn batch_compute(
    layout: &ArrayLayout,
    commands: &[FocalCommand],
    medium: &MediumState,
    quant: &QuantizationConfig,
) -> Result<Vec<PhaseFrame>> {
    PhaseKernel::new(layout, medium, quant)?.batch(commands)
}

/// Frame computation latency and the refresh rate it allows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerTiming {
    pub latency: f64,
    pub refresh_rate: f64,
}

impl ControllerTiming {
    /// Phase computation on the processor alone.
    pub const SOFTWARE_LATENCY: f64 = 154e-6;
    /// Phase computation on one accelerator compute unit.
    pub const HARDWARE_LATENCY: f64 = 60e-6;

    pub fn from_latency(latency: f64) -> Result<Self> {
        if !(latency > 0.0) {
            return Err(Error::InvalidArgument(format!("latency {latency} s must be positive")));
        }
        Ok(Self {
            latency,
            refresh_rate: 1.0 / latency,
        })
    }

    pub fn from_refresh_rate(refresh_rate: f64) -> Result<Self> {
        if !(refresh_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "refresh rate {refresh_rate} Hz must be positive"
            )));
        }
        Ok(Self {
            latency: 1.0 / refresh_rate,
            refresh_rate,
        })
    }

    pub fn software() -> Self {
        Self::from_latency(Self::SOFTWARE_LATENCY).expect("positive")
    }

    pub fn hardware() -> Self {
        Self::from_latency(Self::HARDWARE_LATENCY).expect("positive")
    }
}

/// Time-division multiplexed focal points: one frame is emitted at a time,
/// cycling through `frames` with `dwell` seconds each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplexSchedule {
    pub frames: Vec<PhaseFrame>,
    pub dwell: f64,
    pub cycle_rate: f64,
}

impl MultiplexSchedule {
    /// Frame active at time `t` seconds.
    pub fn frame_at(&self, t: f64) -> &PhaseFrame {
        let slot = (t / self.dwell).floor().max(0.0) as usize;
        &self.frames[slot % self.frames.len()]
    }

    pub fn refresh_rate(&self) -> f64 {
        1.0 / self.dwell
    }
}

pub fn multiplex(
    layout: &ArrayLayout,
    commands: &[FocalCommand],
    medium: &MediumState,
    quant: &QuantizationConfig,
    timing: &ControllerTiming,
) -> Result<MultiplexSchedule> {
    if commands.is_empty() {
        return Err(Error::InvalidArgument("multiplexing needs at least one command".into()));
    }
    let frames = batch_compute(layout, commands, medium, quant)?;
    Ok(MultiplexSchedule {
        cycle_rate: timing.refresh_rate / frames.len() as f64,
        frames,
        dwell: timing.latency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_flat_array, presets, CARRIER_40K};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn quant40() -> QuantizationConfig {
        QuantizationConfig::new(DEFAULT_CLOCK_HZ, CARRIER_40K).unwrap()
    }

    #[test]
    fn path_lengths() {
        let origin = Vec3::zeros();
        let focus = Vec3::new(0.0, 0.0, 100.0);
        assert_eq!(path_length(&origin, &focus), 100.0);
        let corner = Vec3::new(-57.75, -57.75, 0.0);
        let expected = (57.75_f64.powi(2) * 2.0 + 100.0_f64.powi(2)).sqrt();
        assert_abs_diff_eq!(path_length(&corner, &focus), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(path_length(&corner, &focus), 129.1128, epsilon = 1e-4);
        assert_eq!(path_length(&corner, &corner), 0.0);
    }

    /// Remainder by repeated subtraction, independent of `rem_euclid`.
    fn fmod_oracle(path: f64, lambda: f64) -> f64 {
        let whole = (path / lambda).floor();
        TAU * (path - whole * lambda) / lambda
    }

    #[test]
    fn phase_shifts() {
        assert_eq!(phase_shift(17.0, 8.5).unwrap(), 0.0);
        assert_abs_diff_eq!(phase_shift(4.25, 8.5).unwrap(), PI, epsilon = 1e-12);
        let p = phase_shift(136.79, 8.5).unwrap();
        assert_abs_diff_eq!(p, fmod_oracle(136.79, 8.5), epsilon = 1e-12);
        assert_abs_diff_eq!(p, 0.58397, epsilon = 1e-5);
        assert!(phase_shift(1.0, 0.0).is_err());
        assert!(phase_shift(1.0, -8.5).is_err());
    }

    #[test]
    fn focal_width_prediction() {
        assert_abs_diff_eq!(focal_width(8.5, 100.0, 132.0).unwrap(), 12.878_787_878_8, epsilon = 1e-9);
        assert_abs_diff_eq!(focal_width(13.6, 100.0, 132.0).unwrap(), 20.606_060_606, epsilon = 1e-8);
        assert!(focal_width(8.5, 100.0, 0.0).is_err());
        let w = focal_width(8.5, 100.0, 132.0).unwrap();
        assert_abs_diff_eq!(2.0 * 8.5 * 100.0 / w, 132.0, epsilon = 1e-9);
    }

    #[test]
    fn quantization_config_requires_integer_ratio() {
        assert_eq!(quant40().cycles_per_period(), 2500);
        assert!(QuantizationConfig::new(100e6, 30_000.0).is_err());
        assert!(QuantizationConfig::new(1.0, 1.0).is_err());
        assert_eq!(QuantizationConfig::new(2.0, 1.0).unwrap().cycles_per_period(), 2);
    }

    #[test]
    fn worked_delay() {
        assert_eq!(quant40().quantize(phase_shift(136.79, 8.5).unwrap()), 232);
        // Ties go to the even cycle count.
        let q = QuantizationConfig::new(4.0, 1.0).unwrap();
        assert_eq!(q.quantize(TAU * 0.5 / 4.0), 0);
        assert_eq!(q.quantize(TAU * 1.5 / 4.0), 2);
        assert_eq!(q.quantize(TAU * 3.9 / 4.0), 0);
    }

    #[test]
    fn on_axis_frame_is_mirror_symmetric() {
        let layout = presets::flat_8x8();
        let frame = compute_frame(
            &layout,
            &FocalCommand::focus(Vec3::new(0.0, 0.0, 100.0)),
            &MediumState::reference(),
            &quant40(),
        )
        .unwrap();
        let position = |i: usize| layout.transducers()[frame.channels[i]].position;
        for i in 0..frame.len() {
            for j in 0..frame.len() {
                let (a, b) = (position(i), position(j));
                if (a.x + b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9
                    || (a.y + b.y).abs() < 1e-9 && (a.x - b.x).abs() < 1e-9
                {
                    assert_eq!(frame.phases[i], frame.phases[j]);
                }
            }
        }
        let corner = fmod_oracle((57.75_f64.powi(2) * 2.0 + 1e4).sqrt(), 8.5);
        assert_abs_diff_eq!(frame.phases[0], corner, epsilon = 1e-9);
    }

    #[test]
    fn single_emitter_frame() {
        let layout = build_flat_array(1, 1, 10.0, CARRIER_40K).unwrap();
        let frame = compute_frame(
            &layout,
            &FocalCommand::focus(Vec3::new(0.0, 0.0, 50.0)),
            &MediumState::reference(),
            &quant40(),
        )
        .unwrap();
        assert_eq!(frame.len(), 1);
        assert!(frame.delays_cycles[0] < 2500);
    }

    #[test]
    fn receivers_get_no_phase() {
        let layout = presets::flat_echo();
        let frame = compute_frame(
            &layout,
            &FocalCommand::focus(Vec3::new(0.0, 0.0, 100.0)),
            &MediumState::reference(),
            &quant40(),
        )
        .unwrap();
        assert_eq!(frame.len(), 62);
        assert!(!frame.channels.contains(&0) && !frame.channels.contains(&7));
    }

    #[test]
    fn rejects_targets_outside_volume() {
        let layout = presets::flat_8x8();
        let air = MediumState::reference();
        let err = compute_frame(
            &layout,
            &FocalCommand::focus(Vec3::new(0.0, 0.0, -10.0)),
            &air,
            &quant40(),
        );
        assert!(matches!(err, Err(Error::OutOfVolume { index: None, .. })));
        let commands = [
            FocalCommand::focus(Vec3::new(0.0, 0.0, 100.0)),
            FocalCommand::focus(Vec3::new(500.0, 0.0, 100.0)),
        ];
        let err = batch_compute(&layout, &commands, &air, &quant40());
        assert!(matches!(err, Err(Error::OutOfVolume { index: Some(1), .. })));
    }

    #[test]
    fn mismatched_carrier_is_rejected() {
        let quant = QuantizationConfig::new(DEFAULT_CLOCK_HZ, 25_000.0).unwrap();
        assert!(compute_frame(
            &presets::flat_8x8(),
            &FocalCommand::focus(Vec3::new(0.0, 0.0, 100.0)),
            &MediumState::reference(),
            &quant,
        )
        .is_err());
    }

    #[test]
    fn multiplex_rates() {
        let layout = presets::flat_8x8();
        let air = MediumState::reference();
        let timing = ControllerTiming::from_refresh_rate(16_600.0).unwrap();
        let one = [FocalCommand::focus(Vec3::new(0.0, 0.0, 100.0))];
        let s = multiplex(&layout, &one, &air, &quant40(), &timing).unwrap();
        assert_abs_diff_eq!(s.cycle_rate, 16_600.0, epsilon = 1e-9);
        let two = [one[0], FocalCommand::focus(Vec3::new(10.0, 0.0, 100.0))];
        let s = multiplex(&layout, &two, &air, &quant40(), &timing).unwrap();
        assert_abs_diff_eq!(s.cycle_rate, 8_300.0, epsilon = 1e-9);
        assert_eq!(s.frame_at(0.5 * s.dwell).command, two[0]);
        assert_eq!(s.frame_at(1.5 * s.dwell).command, two[1]);
        assert_eq!(s.frame_at(2.5 * s.dwell).command, two[0]);
        assert!(multiplex(&layout, &[], &air, &quant40(), &timing).is_err());
    }

    #[test]
    fn timing_identities() {
        let sw = ControllerTiming::software();
        let hw = ControllerTiming::hardware();
        assert_abs_diff_eq!(sw.refresh_rate, 6_493.5, epsilon = 0.1);
        assert_abs_diff_eq!(hw.refresh_rate, 16_666.7, epsilon = 0.1);
        assert!((sw.refresh_rate / 1e3 - 6.49).abs() < 0.01);
        assert!((hw.refresh_rate / 1e3 - 16.6).abs() < 0.1);
        assert!(ControllerTiming::from_latency(0.0).is_err());
    }

    #[test]
    fn temperature_changes_off_axis_phase() {
        let layout = presets::flat_8x8();
        let target = FocalCommand::focus(Vec3::new(5.0, -3.0, 100.0));
        let a = compute_frame(&layout, &target, &MediumState::from_temperature(20.0).unwrap(), &quant40()).unwrap();
        let b = compute_frame(&layout, &target, &MediumState::from_temperature(21.0).unwrap(), &quant40()).unwrap();
        assert_ne!(a.phases[0], b.phases[0]);
    }

    proptest! {
        #[test]
        fn shift_invariance(
            dx in -50.0..50.0f64, dy in -50.0..50.0f64, dz in -50.0..50.0f64,
            tx in -50.0..50.0f64, ty in -50.0..50.0f64, tz in 20.0..200.0f64,
        ) {
            let shift = Vec3::new(dx, dy, dz);
            let target = Vec3::new(tx, ty, tz);
            for t in presets::flat_8x8().transducers() {
                let a = phase_shift(path_length(&t.position, &target), 8.5).unwrap();
                let b = phase_shift(path_length(&(t.position + shift), &(target + shift)), 8.5).unwrap();
                let diff = (a - b).abs();
                prop_assert!(diff.min(TAU - diff) < 1e-9);
            }
        }

        #[test]
        fn periodic_in_path(path in 0.0..500.0f64) {
            let a = phase_shift(path, 8.5).unwrap();
            let b = phase_shift(path + 8.5, 8.5).unwrap();
            let diff = (a - b).abs();
            prop_assert!(diff.min(TAU - diff) < 1e-9);
            prop_assert!((0.0..TAU).contains(&a));
        }

        #[test]
        fn quantization_error_bound(phase in 0.0..TAU) {
            let q = quant40();
            let cycles = q.quantize(phase);
            prop_assert!(cycles < 2500);
            let diff = (phase - q.cycles_to_phase(cycles)).abs();
            prop_assert!(diff.min(TAU - diff) <= q.max_error() + 1e-12);
        }
    }
}
