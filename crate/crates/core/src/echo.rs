//! Echo detection with the two ADC channels.
//!
//! The lowest-id receiver fires a Hann-windowed tone burst at the probe
//! frequency; every receiver picks up the echo scattered by the particle.
//! Received voltages pass through the receiver's resonance (a Q = 10
//! band-pass) and are sampled by the ADC. Echo paths are free-field: the
//! reflector plate only enters through the levitation leakage in
//! [`self_interference`].
//!
//! PCM export writes each sample as the 12-bit code shifted left by four
//! bits into a little-endian `u16`, with a JSON sidecar carrying
//! `sample_rate`, `probe_frequency` and `channel`.

use std::f64::consts::{PI, TAU};
use std::io::{self, Read, Write};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::field::directivity::directivity;
use crate::field::dynamics::ParticleState;
use crate::field::model::calibrated_source_amplitude;
use crate::geometry::{ArrayLayout, Transducer};
use crate::medium::MediumState;
use crate::{Error, Result, Vec3};

/// Carrier cycles in a probe burst.
pub const BURST_CYCLES: f64 = 20.0;
pub const RECEIVER_Q: f64 = 10.0;
/// Receiver output per pascal at resonance, after a 40 dB preamplifier, V/Pa.
pub const RECEIVER_SENSITIVITY: f64 = 0.5;
/// Fraction of rail-hitting samples that flags a trace as saturated.
pub const SATURATION_FRACTION: f64 = 0.01;
/// Matched-filter threshold for [`detect`], in quantization steps.
pub const DEFAULT_NOISE_FLOOR: f64 = 3.0;
/// Pre-roll that lets the receiver filter settle on continuous leakage, s.
const LEAKAGE_PREROLL: f64 = 2e-3;

/// Two-channel successive-approximation ADC with additive Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdcModel {
    pub bits: u32,
    pub channels: usize,
    /// Hz
    pub sample_rate: f64,
    /// Input span in volts, centred on mid-scale.
    pub full_scale: f64,
    /// Noise standard deviation in quantization steps.
    pub noise_steps: f64,
    pub seed: u64,
}

impl AdcModel {
    pub const MAX_SAMPLE_RATE: f64 = 1e6;
    pub const MAX_CHANNELS: usize = 2;

    /// 12 bits, 2 channels, 1 MSPS, 1 V span, σ = 2 steps.
    pub fn zedboard() -> Self {
        Self {
            bits: 12,
            channels: 2,
            sample_rate: Self::MAX_SAMPLE_RATE,
            full_scale: 1.0,
            noise_steps: 2.0,
            seed: 0,
        }
    }

    pub fn noiseless(self) -> Self {
        Self { noise_steps: 0.0, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.bits) {
            return Err(Error::InvalidArgument(format!("{} ADC bits unsupported", self.bits)));
        }
        if self.channels == 0 || self.channels > Self::MAX_CHANNELS {
            return Err(Error::AdcChannelLimit {
                limit: Self::MAX_CHANNELS,
                requested: self.channels,
            });
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= Self::MAX_SAMPLE_RATE) {
            return Err(Error::InvalidArgument(format!(
                "sample rate {} Hz outside (0, 1 MHz]",
                self.sample_rate
            )));
        }
        if !(self.full_scale > 0.0 && self.noise_steps >= 0.0) {
            return Err(Error::InvalidArgument("full scale must be positive and noise non-negative".into()));
        }
        Ok(())
    }

    pub fn max_code(&self) -> u16 {
        ((1u32 << self.bits) - 1) as u16
    }

    pub fn mid_scale(&self) -> u16 {
        (1u32 << (self.bits - 1)) as u16
    }

    /// Volts per code.
    pub fn step(&self) -> f64 {
        self.full_scale / f64::from(1u32 << self.bits)
    }

    pub fn quantize(&self, volts: f64) -> u16 {
        let code = (volts / self.step()).round() + f64::from(self.mid_scale());
        code.clamp(0.0, f64::from(self.max_code())) as u16
    }

    pub fn to_volts(&self, code: u16) -> f64 {
        (f64::from(code) - f64::from(self.mid_scale())) * self.step()
    }
}

/// One sampled receiver channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EchoTrace {
    pub channel: usize,
    pub samples: Vec<u16>,
    pub sample_rate: f64,
    pub probe_frequency: f64,
    pub receiver_carrier: f64,
    pub receiver_position: Vec3,
    pub adc: AdcModel,
}

/// Metadata written next to raw PCM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcmSidecar {
    pub sample_rate: f64,
    pub probe_frequency: f64,
    pub channel: usize,
}

impl EchoTrace {
    pub fn sidecar(&self) -> PcmSidecar {
        PcmSidecar {
            sample_rate: self.sample_rate,
            probe_frequency: self.probe_frequency,
            channel: self.channel,
        }
    }

    pub fn sidecar_json(&self) -> String {
        serde_json::to_string_pretty(&self.sidecar()).expect("sidecar serializes")
    }

    /// Codes left-justified in 16-bit little-endian words.
    pub fn write_pcm<W: Write>(&self, mut out: W) -> io::Result<()> {
        let shift = 16 - self.adc.bits;
        for &s in &self.samples {
            out.write_all(&(s << shift).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn clipped_fraction(&self) -> f64 {
        let max = self.adc.max_code();
        let clipped = self.samples.iter().filter(|&&s| s == 0 || s == max).count();
        clipped as f64 / self.samples.len().max(1) as f64
    }
}

/// Reads codes written by [`EchoTrace::write_pcm`].
pub fn read_pcm<R: Read>(mut input: R, bits: u32) -> io::Result<Vec<u16>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() % 2 != 0 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "odd PCM byte count"));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]) >> (16 - bits))
        .collect())
}

/// Scattering length of a small sphere, mm: k²a³ rolled off as a nears λ/2.
pub fn scatter(radius: f64, wavelength: f64) -> f64 {
    let k = TAU / wavelength;
    k * k * radius.powi(3) / (1.0 + (2.0 * radius / wavelength).powi(2))
}

/// Magnitude response of a second-order resonance at `f`.
pub fn resonance_gain(f: f64, f0: f64, q: f64) -> f64 {
    1.0 / (1.0 + q * q * (f / f0 - f0 / f).powi(2)).sqrt()
}

/// Constant-peak-gain band-pass biquad.
#[derive(Debug, Clone, Copy)]
struct Resonator {
    b0: f64,
    a1: f64,
    a2: f64,
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(f0: f64, q: f64, sample_rate: f64) -> Self {
        let w0 = TAU * f0 / sample_rate;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b0: alpha / a0,
            a1: -2.0 * w0.cos() / a0,
            a2: (1.0 - alpha) / a0,
            x1: 0.0,
            x2: 0.0,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn process(&mut self, x: f64) -> f64 {
        let y = self.b0 * (x - self.x2) - self.a1 * self.y1 - self.a2 * self.y2;
        self.x2 = self.x1;
        self.x1 = x;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }

    fn filter(f0: f64, sample_rate: f64, input: impl IntoIterator<Item = f64>) -> Vec<f64> {
        let mut r = Self::new(f0, RECEIVER_Q, sample_rate);
        input.into_iter().map(|x| r.process(x)).collect()
    }
}

fn burst_duration(probe_frequency: f64) -> f64 {
    BURST_CYCLES / probe_frequency
}

/// Burst value at time `t` after its start, with carrier phase offset.
fn burst_at(t: f64, probe_frequency: f64, phase: f64) -> f64 {
    let length = burst_duration(probe_frequency);
    if !(0.0..length).contains(&t) {
        return 0.0;
    }
    let window = 0.5 - 0.5 * (TAU * t / length).cos();
    window * (TAU * probe_frequency * t + phase).cos()
}

/// Ring-down after a burst ends: three filter time constants, s.
fn tail_duration(receiver_carrier: f64) -> f64 {
    3.0 * RECEIVER_Q / (PI * receiver_carrier)
}

fn angle_from(t: &Transducer, towards: &Vec3) -> Option<f64> {
    let v = towards - t.position;
    let cos = v.dot(&t.normal) / v.norm();
    (cos > 0.0).then(|| cos.clamp(-1.0, 1.0).acos())
}

fn receivers<'a>(layout: &'a ArrayLayout, adc: &AdcModel) -> Result<Vec<&'a Transducer>> {
    let rx: Vec<_> = layout.receivers().collect();
    if rx.is_empty() {
        return Err(Error::NoReceiver);
    }
    if rx.len() > adc.channels {
        return Err(Error::AdcChannelLimit {
            limit: adc.channels,
            requested: rx.len(),
        });
    }
    Ok(rx)
}

/// Echo geometry for one receiver.
#[derive(Debug, Clone, Copy, PartialEq)]
struct EchoPath {
    /// Transmitter to particle, mm.
    d1: f64,
    /// Particle to receiver, mm.
    d2: f64,
    /// Peak echo voltage before the receiver filter.
    amplitude: f64,
}

fn echo_paths(
    rx: &[&Transducer],
    particle: &ParticleState,
    probe_frequency: f64,
    medium: &MediumState,
) -> Vec<EchoPath> {
    let lambda = medium.wavelength_mm(probe_frequency);
    let k = TAU / lambda;
    let tx = rx[0];
    let p = particle.position;
    let d1 = (p - tx.position).norm();
    let tx_gain = resonance_gain(probe_frequency, tx.carrier_frequency, RECEIVER_Q)
        * angle_from(tx, &p).map_or(0.0, |th| directivity(k * tx.radius, th));
    let incident = calibrated_source_amplitude() * tx_gain / d1;
    let scattered = incident * scatter(particle.radius, lambda);
    rx.iter()
        .map(|r| {
            let d2 = (p - r.position).norm();
            let rx_dir = angle_from(r, &p).map_or(0.0, |th| directivity(k * r.radius, th));
            EchoPath {
                d1,
                d2,
                amplitude: scattered / d2 * rx_dir * RECEIVER_SENSITIVITY,
            }
        })
        .collect()
}

/// Filtered receiver voltages before the ADC.
fn analog_echo(
    rx: &[&Transducer],
    particle: &ParticleState,
    probe_frequency: f64,
    medium: &MediumState,
    sample_rate: f64,
    samples: usize,
) -> Vec<Vec<f64>> {
    let c = medium.speed_of_sound() * 1e3;
    echo_paths(rx, particle, probe_frequency, medium)
        .iter()
        .zip(rx)
        .map(|(path, r)| {
            let delay = (path.d1 + path.d2) / c;
            let raw = (0..samples)
                .map(|n| path.amplitude * burst_at(n as f64 / sample_rate - delay, probe_frequency, 0.0));
            Resonator::filter(r.carrier_frequency, sample_rate, raw)
        })
        .collect()
}

fn check_particle(layout: &ArrayLayout, particle: &ParticleState) -> Result<()> {
    let volume = layout.working_volume();
    if !volume.contains(&particle.position) {
        return Err(Error::OutOfVolume {
            target: particle.position.into(),
            bounds: format!("{volume:?}"),
            index: None,
        });
    }
    Ok(())
}

/// Samples `duration` seconds of echo on every receiver of `layout`.
pub fn simulate_echo(
    layout: &ArrayLayout,
    particle: &ParticleState,
    probe_frequency: f64,
    medium: &MediumState,
    adc: &AdcModel,
    duration: f64,
) -> Result<Vec<EchoTrace>> {
    adc.validate()?;
    if !(probe_frequency > 0.0 && duration > 0.0) {
        return Err(Error::InvalidArgument("probe frequency and duration must be positive".into()));
    }
    let rx = receivers(layout, adc)?;
    check_particle(layout, particle)?;
    let samples = (duration * adc.sample_rate).round() as usize;
    let analog = analog_echo(&rx, particle, probe_frequency, medium, adc.sample_rate, samples);
    let mut rng = ChaCha8Rng::seed_from_u64(adc.seed);
    let noise = Normal::new(0.0, adc.noise_steps * adc.step())
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(analog
        .into_iter()
        .zip(rx)
        .map(|(volts, r)| EchoTrace {
            channel: r.id,
            samples: volts
                .iter()
                .map(|v| adc.quantize(v + noise.sample(&mut rng)))
                .collect(),
            sample_rate: adc.sample_rate,
            probe_frequency,
            receiver_carrier: r.carrier_frequency,
            receiver_position: r.position,
            adc: *adc,
        })
        .collect())
}

/// Burst as the receiver sees it, in phase and quadrature, with unit peak.
fn template(probe_frequency: f64, receiver_carrier: f64, sample_rate: f64) -> (Vec<f64>, Vec<f64>) {
    let n = ((burst_duration(probe_frequency) + tail_duration(receiver_carrier)) * sample_rate).ceil() as usize;
    let make = |phase: f64| {
        Resonator::filter(
            receiver_carrier,
            sample_rate,
            (0..n).map(|i| burst_at(i as f64 / sample_rate, probe_frequency, phase)),
        )
    };
    let (i, q) = (make(0.0), make(-PI / 2.0));
    let peak = i.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    (i.iter().map(|x| x / peak).collect(), q.iter().map(|x| x / peak).collect())
}

/// Matched-filter envelope: for each lag, the amplitude of a template copy
/// starting there, in the input's units.
fn matched_envelope(x: &[f64], probe_frequency: f64, receiver_carrier: f64, sample_rate: f64) -> Vec<f64> {
    let (ti, tq) = template(probe_frequency, receiver_carrier, sample_rate);
    let energy: f64 = ti.iter().map(|v| v * v).sum();
    if x.len() < ti.len() {
        return Vec::new();
    }
    (0..=x.len() - ti.len())
        .map(|k| {
            let w = &x[k..k + ti.len()];
            let ci: f64 = w.iter().zip(&ti).map(|(a, b)| a * b).sum();
            let cq: f64 = w.iter().zip(&tq).map(|(a, b)| a * b).sum();
            (ci * ci + cq * cq).sqrt() / energy
        })
        .collect()
}

/// Index and value of the envelope peak, refined by a parabola through its
/// neighbours.
fn envelope_peak(env: &[f64]) -> (f64, f64) {
    let Some((k, &peak)) = env.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)) else {
        return (0.0, 0.0);
    };
    if k == 0 || k + 1 >= env.len() {
        return (k as f64, peak);
    }
    let (a, b, c) = (env[k - 1], peak, env[k + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom < 0.0 { 0.5 * (a - c) / denom } else { 0.0 };
    (k as f64 + shift, peak)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    West,
    East,
    North,
    South,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    Negative,
    Zero,
    Positive,
}

impl Sign {
    pub fn of(v: f64) -> Self {
        if v > 0.0 {
            Sign::Positive
        } else if v < 0.0 {
            Sign::Negative
        } else {
            Sign::Zero
        }
    }
}

/// Matched-filter result for one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelEcho {
    pub channel: usize,
    /// Sample index at which the echo burst starts.
    pub arrival_sample: f64,
    /// Echo amplitude in quantization steps.
    pub peak_steps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub detected: bool,
    pub direction: Option<Direction>,
    /// Strongest echo amplitude, volts.
    pub amplitude: f64,
    /// Offset sign along x, y, z; axes without a receiver pair stay Zero.
    pub estimated_offset_sign: [Sign; 3],
    pub channels: Vec<ChannelEcho>,
    pub saturation_warning: Option<String>,
}

/// Lag below which two arrivals count as simultaneous, samples.
const LAG_RESOLUTION: f64 = 0.5;
/// Amplitude ratio that decides a tie in arrival time.
const AMPLITUDE_RESOLUTION: f64 = 1.05;

/// Matched-filters each trace and, with two receivers, locates the particle
/// on the axis joining them: the particle sits on the side of the receiver
/// hearing it first (or louder, if the arrivals coincide).
pub fn detect(traces: &[EchoTrace], noise_floor: f64) -> Result<DetectionResult> {
    if traces.is_empty() {
        return Err(Error::InvalidArgument("detection needs at least one trace".into()));
    }
    let channels: Vec<ChannelEcho> = traces
        .iter()
        .map(|t| {
            let mid = f64::from(t.adc.mid_scale());
            let x: Vec<f64> = t.samples.iter().map(|&s| f64::from(s) - mid).collect();
            let env = matched_envelope(&x, t.probe_frequency, t.receiver_carrier, t.sample_rate);
            let (arrival_sample, peak_steps) = envelope_peak(&env);
            ChannelEcho {
                channel: t.channel,
                arrival_sample,
                peak_steps,
            }
        })
        .collect();
    let saturated: Vec<String> = traces
        .iter()
        .filter(|t| t.clipped_fraction() >= SATURATION_FRACTION)
        .map(|t| format!("channel {} clipped on {:.1}% of samples", t.channel, 100.0 * t.clipped_fraction()))
        .collect();
    let strongest = channels.iter().map(|c| c.peak_steps).fold(0.0, f64::max);
    let detected = strongest > noise_floor;
    let mut signs = [Sign::Zero; 3];
    let mut direction = None;
    if detected && traces.len() >= 2 {
        let (a, b) = (&traces[0], &traces[1]);
        let (ea, eb) = (&channels[0], &channels[1]);
        let span = b.receiver_position - a.receiver_position;
        let axis = if span.x.abs() >= span.y.abs() { 0 } else { 1 };
        let lag = eb.arrival_sample - ea.arrival_sample;
        let near = if lag <= -LAG_RESOLUTION {
            Some(b)
        } else if lag >= LAG_RESOLUTION {
            Some(a)
        } else if eb.peak_steps > AMPLITUDE_RESOLUTION * ea.peak_steps {
            Some(b)
        } else if ea.peak_steps > AMPLITUDE_RESOLUTION * eb.peak_steps {
            Some(a)
        } else {
            None
        };
        if let Some(near) = near {
            let centre = (a.receiver_position + b.receiver_position) / 2.0;
            let sign = Sign::of(near.receiver_position[axis] - centre[axis]);
            signs[axis] = sign;
            direction = match (axis, sign) {
                (0, Sign::Negative) => Some(Direction::West),
                (0, Sign::Positive) => Some(Direction::East),
                (1, Sign::Negative) => Some(Direction::South),
                (1, Sign::Positive) => Some(Direction::North),
                _ => None,
            };
        }
    }
    Ok(DetectionResult {
        detected,
        direction,
        amplitude: strongest * traces[0].adc.step(),
        estimated_offset_sign: signs,
        channels,
        saturation_warning: (!saturated.is_empty()).then(|| saturated.join("; ")),
    })
}

fn listening_window(layout: &ArrayLayout, particle: &Vec3, probe_frequency: f64, medium: &MediumState) -> f64 {
    let c = medium.speed_of_sound() * 1e3;
    let tx = layout.receivers().next().map_or(*particle, |t| t.position);
    let far = layout
        .receivers()
        .map(|r| (particle - r.position).norm())
        .fold(0.0, f64::max);
    let carrier = layout.receivers().map(|r| r.carrier_frequency).fold(f64::INFINITY, f64::min);
    ((particle - tx).norm() + far) / c + burst_duration(probe_frequency) + 2.0 * tail_duration(carrier)
}

/// One point of an amplitude-versus-size curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizePoint {
    /// Particle diameter, mm.
    pub size: f64,
    /// Mean peak receiver voltage before the ADC.
    pub amplitude: f64,
    /// Whether the levitation carrier can hold a particle this large (λ/2).
    pub in_trap_range: bool,
}

/// Echo amplitude for EPS spheres of the given diameters at `position`.
pub fn amplitude_vs_size(
    layout: &ArrayLayout,
    position: Vec3,
    probe_frequency: f64,
    sizes: &[f64],
    medium: &MediumState,
) -> Result<Vec<SizePoint>> {
    if !(probe_frequency > 0.0) {
        return Err(Error::InvalidArgument("probe frequency must be positive".into()));
    }
    let adc = AdcModel::zedboard();
    let rx = receivers(layout, &adc)?;
    let limit = medium.wavelength_mm(layout.emitter_carrier()?) / 2.0;
    let samples = (listening_window(layout, &position, probe_frequency, medium) * adc.sample_rate).ceil() as usize;
    sizes
        .iter()
        .map(|&size| {
            let mut particle = ParticleState::eps(position);
            particle.radius = size / 2.0;
            if !(size > 0.0) {
                return Err(Error::InvalidArgument(format!("particle size {size} mm must be positive")));
            }
            check_particle(layout, &particle)?;
            let analog = analog_echo(&rx, &particle, probe_frequency, medium, adc.sample_rate, samples);
            let amplitude = analog
                .iter()
                .map(|v| v.iter().fold(0.0_f64, |m, x| m.max(x.abs())))
                .sum::<f64>()
                / analog.len() as f64;
            Ok(SizePoint {
                size,
                amplitude,
                in_trap_range: size <= limit,
            })
        })
        .collect()
}

/// Matched-filter peaks of the particle echo and of the continuous
/// levitation drive leaking into the receivers, volts, strongest channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interference {
    pub echo_peak: f64,
    pub leakage_peak: f64,
}

impl Interference {
    pub fn echo_to_leakage_db(&self) -> f64 {
        20.0 * (self.echo_peak / self.leakage_peak).log10()
    }
}

/// Complex leakage pressure at a receiver from every emitter (and its
/// image in the reflector) driven at its carrier and focused on `focus`.
fn leakage(layout: &ArrayLayout, r: &Transducer, focus: &Vec3, medium: &MediumState) -> Complex64 {
    let amplitude = calibrated_source_amplitude();
    let mut sum = Complex64::new(0.0, 0.0);
    for e in layout.emitters() {
        let k = medium.wavenumber_mm(e.carrier_frequency);
        let phase = k * (focus - e.position).norm();
        let mut sources = vec![(e.position, e.normal)];
        if let Some(zr) = layout.reflector_z() {
            let mut p = e.position;
            p.z = 2.0 * zr - p.z;
            let mut n = e.normal;
            n.z = -n.z;
            sources.push((p, n));
        }
        for (position, normal) in sources {
            let image = Transducer {
                position,
                normal,
                ..e.clone()
            };
            let Some(out) = angle_from(&image, &r.position) else { continue };
            let Some(inc) = angle_from(r, &position) else { continue };
            let d = (r.position - position).norm();
            let gain = directivity(k * e.radius, out) * directivity(k * r.radius, inc) / d;
            sum += Complex64::from_polar(amplitude * gain, phase - k * d);
        }
    }
    sum
}

/// Compares the echo with the leakage of the levitation field, both after
/// the receiver filter and matched filter, with no ADC in the way.
pub fn self_interference(
    layout: &ArrayLayout,
    position: Vec3,
    probe_frequency: f64,
    medium: &MediumState,
) -> Result<Interference> {
    let adc = AdcModel::zedboard();
    let rx = receivers(layout, &adc)?;
    let particle = ParticleState::eps(position);
    check_particle(layout, &particle)?;
    let fs = adc.sample_rate;
    let samples = (listening_window(layout, &position, probe_frequency, medium) * fs).ceil() as usize;
    let echo = analog_echo(&rx, &particle, probe_frequency, medium, fs, samples);
    let preroll = (LEAKAGE_PREROLL * fs).round() as usize;
    let mut result = Interference {
        echo_peak: 0.0,
        leakage_peak: 0.0,
    };
    for (r, echo) in rx.iter().zip(&echo) {
        let (_, e) = envelope_peak(&matched_envelope(echo, probe_frequency, r.carrier_frequency, fs));
        let l = leakage(layout, r, &position, medium) * RECEIVER_SENSITIVITY;
        let carrier = layout.emitter_carrier()?;
        let raw = (0..preroll + samples).map(|n| l.norm() * (TAU * carrier * n as f64 / fs + l.arg()).cos());
        let filtered = Resonator::filter(r.carrier_frequency, fs, raw);
        let (_, leak) = envelope_peak(&matched_envelope(
            &filtered[preroll..],
            probe_frequency,
            r.carrier_frequency,
            fs,
        ));
        result.echo_peak = result.echo_peak.max(e);
        result.leakage_peak = result.leakage_peak.max(leak);
    }
    Ok(result)
}
