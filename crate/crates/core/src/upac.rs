//! Register-level model of the phased-array controller.
//!
//! Each channel holds a delay in master-clock cycles and emits a 50 % duty
//! square wave at the carrier, shifted by that delay. Waveforms are modelled
//! at the logic level, one sample per clock tick.

use std::f64::consts::TAU;
use std::io::{self, Write};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::phase::{PhaseFrame, QuantizationConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelRegister {
    pub channel: usize,
    pub delay_cycles: u32,
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterFile {
    registers: Vec<ChannelRegister>,
    cycles_per_period: u32,
}

impl RegisterFile {
    /// All channels enabled with zero delay.
    pub fn new(channels: &[usize], cycles_per_period: u32) -> Self {
        Self {
            registers: channels
                .iter()
                .map(|&channel| ChannelRegister {
                    channel,
                    delay_cycles: 0,
                    enabled: true,
                })
                .collect(),
            cycles_per_period,
        }
    }

    pub fn registers(&self) -> &[ChannelRegister] {
        &self.registers
    }

    pub fn cycles_per_period(&self) -> u32 {
        self.cycles_per_period
    }

    pub fn set_enabled(&mut self, index: usize, enabled: bool) {
        self.registers[index].enabled = enabled;
    }
}

/// Copies a frame's delays into a register file of matching shape.
pub fn load_frame(registers: &RegisterFile, frame: &PhaseFrame) -> Result<RegisterFile> {
    if frame.delays_cycles.len() != registers.registers.len() {
        return Err(Error::FrameShape {
            expected: registers.registers.len(),
            found: frame.delays_cycles.len(),
        });
    }
    if frame.quantization.cycles_per_period() != registers.cycles_per_period {
        return Err(Error::InvalidArgument(format!(
            "frame quantized at {} cycles/period, registers run at {}",
            frame.quantization.cycles_per_period(),
            registers.cycles_per_period
        )));
    }
    let mut next = registers.clone();
    for ((reg, &delay), &channel) in next
        .registers
        .iter_mut()
        .zip(&frame.delays_cycles)
        .zip(&frame.channels)
    {
        debug_assert!(delay < registers.cycles_per_period);
        reg.channel = channel;
        reg.delay_cycles = delay;
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DigitalWaveform {
    pub channel: usize,
    pub samples: Vec<bool>,
    pub sample_rate: f64,
}

impl DigitalWaveform {
    /// Ticks at which the output goes 0 → 1.
    pub fn rising_edges(&self) -> Vec<usize> {
        self.samples
            .windows(2)
            .enumerate()
            .filter(|(_, w)| !w[0] && w[1])
            .map(|(i, _)| i + 1)
            .collect()
    }
}

#[inline]
fn level(tick: u64, delay: u32, period: u32, enabled: bool) -> bool {
    if !enabled {
        return false;
    }
    let period = u64::from(period);
    let phase = (tick + period - u64::from(delay) % period) % period;
    phase < period / 2
}

fn ticks_for(duration: f64, quant: &QuantizationConfig) -> Result<usize> {
    let ticks = (duration * quant.clock_hz()).round();
    if !(ticks >= 2.0 * f64::from(quant.cycles_per_period())) {
        return Err(Error::InvalidArgument(format!(
            "{duration} s covers fewer than two carrier periods"
        )));
    }
    Ok(ticks as usize)
}

/// Samples every channel for `duration` seconds from tick 0.
pub fn generate(
    registers: &RegisterFile,
    duration: f64,
    quant: &QuantizationConfig,
) -> Result<Vec<DigitalWaveform>> {
    if quant.cycles_per_period() != registers.cycles_per_period {
        return Err(Error::InvalidArgument("clock configuration differs from registers".into()));
    }
    let ticks = ticks_for(duration, quant)?;
    let period = registers.cycles_per_period;
    Ok(registers
        .registers
        .iter()
        .map(|r| DigitalWaveform {
            channel: r.channel,
            samples: (0..ticks as u64)
                .map(|t| level(t, r.delay_cycles, period, r.enabled))
                .collect(),
            sample_rate: quant.clock_hz(),
        })
        .collect())
}

/// Zero-delay square wave, the common epoch all delays refer to.
pub fn reference_waveform(duration: f64, quant: &QuantizationConfig) -> Result<DigitalWaveform> {
    let ticks = ticks_for(duration, quant)?;
    let period = quant.cycles_per_period();
    Ok(DigitalWaveform {
        channel: usize::MAX,
        samples: (0..ticks as u64).map(|t| level(t, 0, period, true)).collect(),
        sample_rate: quant.clock_hz(),
    })
}

/// Phase of `b` relative to `a` in [0, 2π), from rising-edge offsets.
pub fn measured_phase(a: &DigitalWaveform, b: &DigitalWaveform) -> Result<f64> {
    let edges_a = a.rising_edges();
    let edges_b = b.rising_edges();
    if edges_a.len() < 2 || edges_b.is_empty() {
        return Err(Error::NoEdges);
    }
    let period = edges_a[1] - edges_a[0];
    let offset = (edges_b[0] + period - edges_a[0] % period) % period;
    Ok(TAU * offset as f64 / period as f64)
}

/// Writes one `tick channel level` line per edge, plus the initial level of
/// every channel at tick 0.
pub fn write_edges<W: Write>(waveforms: &[DigitalWaveform], mut out: W) -> io::Result<()> {
    let mut events: Vec<(usize, usize, bool)> = Vec::new();
    for w in waveforms {
        if let Some(&first) = w.samples.first() {
            events.push((0, w.channel, first));
        }
        for (i, pair) in w.samples.windows(2).enumerate() {
            if pair[0] != pair[1] {
                events.push((i + 1, w.channel, pair[1]));
            }
        }
    }
    events.sort_unstable();
    for (tick, channel, level) in events {
        writeln!(out, "{tick} {channel} {}", u8::from(level))?;
    }
    Ok(())
}

/// Live controller: frames are staged by one thread and picked up by the
/// waveform generator only at carrier-period boundaries, so a period never
/// mixes delays from two frames.
#[derive(Debug)]
pub struct Controller {
    state: Mutex<ControllerState>,
    quant: QuantizationConfig,
}

#[derive(Debug)]
struct ControllerState {
    active: RegisterFile,
    pending: Option<RegisterFile>,
    tick: u64,
}

/// Output of one carrier period.
#[derive(Debug, Clone)]
pub struct PeriodOutput {
    pub start_tick: u64,
    /// Register contents this period was generated from.
    pub registers: RegisterFile,
    pub waveforms: Vec<DigitalWaveform>,
}

impl Controller {
    pub fn new(channels: &[usize], quant: QuantizationConfig) -> Self {
        Self {
            state: Mutex::new(ControllerState {
                active: RegisterFile::new(channels, quant.cycles_per_period()),
                pending: None,
                tick: 0,
            }),
            quant,
        }
    }

    /// Stages a frame; it takes effect at the next period boundary.
    pub fn load_frame(&self, frame: &PhaseFrame) -> Result<()> {
        let mut state = self.state.lock().expect("controller lock");
        let base = state.pending.as_ref().unwrap_or(&state.active);
        let next = load_frame(base, frame)?;
        state.pending = Some(next);
        Ok(())
    }

    pub fn registers(&self) -> RegisterFile {
        self.state.lock().expect("controller lock").active.clone()
    }

    /// Generates the next carrier period.
    pub fn next_period(&self) -> PeriodOutput {
        let (registers, start_tick) = {
            let mut state = self.state.lock().expect("controller lock");
            if let Some(next) = state.pending.take() {
                state.active = next;
            }
            let start = state.tick;
            state.tick += u64::from(self.quant.cycles_per_period());
            (state.active.clone(), start)
        };
        let period = registers.cycles_per_period;
        let waveforms = registers
            .registers
            .iter()
            .map(|r| DigitalWaveform {
                channel: r.channel,
                samples: (start_tick..start_tick + u64::from(period))
                    .map(|t| level(t, r.delay_cycles, period, r.enabled))
                    .collect(),
                sample_rate: self.quant.clock_hz(),
            })
            .collect();
        PeriodOutput {
            start_tick,
            registers,
            waveforms,
        }
    }
}
