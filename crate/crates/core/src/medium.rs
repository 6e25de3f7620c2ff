//! Temperature-dependent air model and temperature sources.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Speed of sound at 0 °C, m/s.
pub const SPEED_OF_SOUND_0C: f64 = 331.4;
/// Linear temperature coefficient, m/s per °C.
pub const SPEED_OF_SOUND_SLOPE: f64 = 0.6;
/// Dry air at 20 °C, kg/m³.
pub const AIR_DENSITY: f64 = 1.204;
/// Dynamic viscosity of air at 20 °C, Pa·s.
pub const AIR_VISCOSITY: f64 = 1.81e-5;

pub const SENSOR_MIN_C: f64 = -40.0;
pub const SENSOR_MAX_C: f64 = 85.0;

/// Temperature at which sound travels at 340 m/s, giving λ = 8.5 mm at 40 kHz.
pub const REFERENCE_TEMPERATURE_C: f64 = (340.0 - SPEED_OF_SOUND_0C) / SPEED_OF_SOUND_SLOPE;

/// c = 331.4 + 0.6·T, guarded to the sensor's operating range.
pub fn speed_of_sound(temperature: f64) -> Result<f64> {
    if !(SENSOR_MIN_C..=SENSOR_MAX_C).contains(&temperature) {
        return Err(Error::SensorRange(temperature));
    }
    Ok(SPEED_OF_SOUND_0C + SPEED_OF_SOUND_SLOPE * temperature)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MediumDocument")]
pub struct MediumState {
    temperature: f64,
    speed_of_sound: f64,
    density_air: f64,
}

#[derive(Deserialize)]
struct MediumDocument {
    temperature: f64,
    #[serde(default)]
    density_air: Option<f64>,
}

impl TryFrom<MediumDocument> for MediumState {
    type Error = Error;

    fn try_from(doc: MediumDocument) -> Result<Self> {
        let state = MediumState::from_temperature(doc.temperature)?;
        match doc.density_air {
            Some(rho) => state.with_density(rho),
            None => Ok(state),
        }
    }
}

impl MediumState {
    pub fn from_temperature(temperature: f64) -> Result<Self> {
        Ok(Self {
            temperature,
            speed_of_sound: speed_of_sound(temperature)?,
            density_air: AIR_DENSITY,
        })
    }

    /// Air at [`REFERENCE_TEMPERATURE_C`].
    pub fn reference() -> Self {
        Self::from_temperature(REFERENCE_TEMPERATURE_C).expect("reference is in range")
    }

    pub fn with_density(self, density_air: f64) -> Result<Self> {
        if !(density_air > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "air density {density_air} must be positive"
            )));
        }
        Ok(Self {
            density_air,
            ..self
        })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// m/s
    pub fn speed_of_sound(&self) -> f64 {
        self.speed_of_sound
    }

    /// kg/m³
    pub fn density_air(&self) -> f64 {
        self.density_air
    }

    /// Wavelength in millimetres. Panics on a non-positive carrier; use
    /// [`wavelength`] for checked input.
    pub fn wavelength_mm(&self, carrier: f64) -> f64 {
        assert!(carrier > 0.0, "carrier must be positive");
        self.speed_of_sound / carrier * 1e3
    }

    /// Wavenumber in rad/mm.
    pub fn wavenumber_mm(&self, carrier: f64) -> f64 {
        std::f64::consts::TAU / self.wavelength_mm(carrier)
    }
}

pub fn wavelength(carrier: f64, state: &MediumState) -> Result<f64> {
    if !(carrier > 0.0) {
        return Err(Error::InvalidArgument(format!("carrier {carrier} Hz must be positive")));
    }
    Ok(state.wavelength_mm(carrier))
}

/// Largest particle radius a trap at `carrier` can hold: a quarter wavelength,
/// i.e. a diameter of half a wavelength.
pub fn max_particle_radius(carrier: f64, state: &MediumState) -> Result<f64> {
    Ok(wavelength(carrier, state)? / 4.0)
}

/// Something that can report ambient temperature on request.
pub trait TemperatureSource {
    fn read(&mut self) -> Result<f64>;
    fn resolution_bits(&self) -> u32;
    /// Worst-case absolute error, °C.
    fn accuracy(&self) -> f64;
}

/// Returns a fresh state built from a new reading; `state` is left untouched
/// whether or not the read succeeds.
pub fn read_and_update(
    source: &mut dyn TemperatureSource,
    state: &MediumState,
) -> Result<MediumState> {
    let temperature = source.read()?;
    MediumState::from_temperature(temperature)?.with_density(state.density_air)
}

/// Fixed reading, configured from `temperature_c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MockSource {
    pub temperature: f64,
}

impl TemperatureSource for MockSource {
    fn read(&mut self) -> Result<f64> {
        Ok(self.temperature)
    }

    fn resolution_bits(&self) -> u32 {
        64
    }

    fn accuracy(&self) -> f64 {
        0.0
    }
}

/// Digital sensor with 14-bit conversion over the operating range and
/// ±0.2 °C accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HygroSource {
    pub true_temperature: f64,
}

impl HygroSource {
    pub const BITS: u32 = 14;
    pub const ACCURACY: f64 = 0.2;

    pub fn step() -> f64 {
        (SENSOR_MAX_C - SENSOR_MIN_C) / f64::from(1u32 << Self::BITS)
    }

    /// Raw conversion code for a temperature.
    pub fn code(temperature: f64) -> u32 {
        let max = (1u32 << Self::BITS) - 1;
        ((temperature - SENSOR_MIN_C) / Self::step())
            .round()
            .clamp(0.0, f64::from(max)) as u32
    }
}

impl TemperatureSource for HygroSource {
    fn read(&mut self) -> Result<f64> {
        if !(SENSOR_MIN_C..=SENSOR_MAX_C).contains(&self.true_temperature) {
            return Err(Error::SensorRange(self.true_temperature));
        }
        Ok(SENSOR_MIN_C + f64::from(Self::code(self.true_temperature)) * Self::step())
    }

    fn resolution_bits(&self) -> u32 {
        Self::BITS
    }

    fn accuracy(&self) -> f64 {
        Self::ACCURACY
    }
}

/// Reads a single decimal °C value from a file on every request.
#[derive(Debug, Clone, PartialEq)]
pub struct FileSource {
    pub path: PathBuf,
}

impl TemperatureSource for FileSource {
    fn read(&mut self) -> Result<f64> {
        let text = std::fs::read_to_string(&self.path)
            .map_err(|e| Error::SensorIo(format!("{}: {e}", self.path.display())))?;
        text.trim()
            .parse()
            .map_err(|e| Error::SensorIo(format!("{}: {e}", self.path.display())))
    }

    fn resolution_bits(&self) -> u32 {
        64
    }

    fn accuracy(&self) -> f64 {
        0.0
    }
}
