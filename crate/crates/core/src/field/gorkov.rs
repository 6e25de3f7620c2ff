use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::model::FieldModel;
use crate::medium::MediumState;
use crate::{Error, Result, Vec3};

/// Expanded polystyrene bead used in the levitation tests.
pub const EPS_RADIUS: f64 = 0.5;
pub const EPS_DENSITY: f64 = 29.63;
/// Longitudinal sound speed assumed for EPS, m/s.
pub const EPS_SOUND_SPEED: f64 = 900.0;

/// Small sphere in a sound field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GorkovParams {
    /// mm
    pub particle_radius: f64,
    /// kg/m³
    pub particle_density: f64,
    /// m/s
    pub particle_sound_speed: f64,
    /// kg/m³
    pub medium_density: f64,
    /// m/s
    pub medium_sound_speed: f64,
}

impl GorkovParams {
    pub fn new(
        particle_radius: f64,
        particle_density: f64,
        particle_sound_speed: f64,
        medium: &MediumState,
    ) -> Result<Self> {
        if !(particle_radius > 0.0 && particle_density > 0.0 && particle_sound_speed > 0.0) {
            return Err(Error::InvalidArgument(
                "particle radius, density and sound speed must be positive".into(),
            ));
        }
        Ok(Self {
            particle_radius,
            particle_density,
            particle_sound_speed,
            medium_density: medium.density_air(),
            medium_sound_speed: medium.speed_of_sound(),
        })
    }

    pub fn eps(medium: &MediumState) -> Self {
        Self::new(EPS_RADIUS, EPS_DENSITY, EPS_SOUND_SPEED, medium).expect("valid constants")
    }

    /// Monopole (compressibility) contrast.
    pub fn f1(&self) -> f64 {
        1.0 - self.medium_density * self.medium_sound_speed.powi(2)
            / (self.particle_density * self.particle_sound_speed.powi(2))
    }

    /// Dipole (density) contrast.
    pub fn f2(&self) -> f64 {
        2.0 * (self.particle_density - self.medium_density)
            / (2.0 * self.particle_density + self.medium_density)
    }

    /// kg
    pub fn mass(&self) -> f64 {
        self.particle_density * 4.0 / 3.0 * PI * (self.particle_radius * 1e-3).powi(3)
    }

    /// Coefficients (K₁, K₂) with U = K₁|p|² − K₂|∇p|², SI units.
    fn coefficients(&self, wavelength_mm: f64) -> (f64, f64) {
        let a = self.particle_radius * 1e-3;
        let rho = self.medium_density;
        let c = self.medium_sound_speed;
        let omega = 2.0 * PI * c / (wavelength_mm * 1e-3);
        let volume_term = 2.0 * PI * a.powi(3);
        (
            volume_term * self.f1() / (6.0 * rho * c * c),
            volume_term * self.f2() / (4.0 * rho * omega * omega),
        )
    }

    /// Rejects particles too large for the small-sphere model at this wavelength.
    pub fn validate(&self, wavelength_mm: f64) -> Result<()> {
        if self.particle_radius > wavelength_mm / 4.0 {
            return Err(Error::InvalidArgument(format!(
                "particle radius {} mm exceeds λ/4 = {} mm",
                self.particle_radius,
                wavelength_mm / 4.0
            )));
        }
        Ok(())
    }
}

/// Finite-difference step used for guards and self-checks, mm.
pub fn difference_step(wavelength_mm: f64) -> f64 {
    wavelength_mm / 100.0
}

fn guard(model: &FieldModel, params: &GorkovParams, point: &Vec3) -> Result<()> {
    params.validate(model.wavelength())?;
    if model.nearest_source_distance(point) < 2.0 * difference_step(model.wavelength()) {
        return Err(Error::Singularity((*point).into()));
    }
    Ok(())
}

/// Time-averaged potential energy of the particle, joules.
pub fn gorkov_potential(model: &FieldModel, params: &GorkovParams, point: &Vec3) -> Result<f64> {
    guard(model, params, point)?;
    let d = model.derivatives(point)?;
    let (k1, k2) = params.coefficients(model.wavelength());
    // Gradient from per-mm to per-m.
    let grad_sq = d.gradient.iter().map(|g| g.norm_sqr()).sum::<f64>() * 1e6;
    Ok(k1 * d.pressure.norm_sqr() - k2 * grad_sq)
}

/// Radiation force −∇U in newtons, from the closed-form field derivatives.
pub fn radiation_force(model: &FieldModel, params: &GorkovParams, point: &Vec3) -> Result<Vec3> {
    guard(model, params, point)?;
    force_unchecked(model, params, point)
}

pub(crate) fn force_unchecked(model: &FieldModel, params: &GorkovParams, point: &Vec3) -> Result<Vec3> {
    let d = model.derivatives(point)?;
    let (k1, k2) = params.coefficients(model.wavelength());
    let p_conj = d.pressure.conj();
    let g_conj = d.gradient.map(|g| g.conj());
    // ∇|p|² = 2 Re(p* ∇p); ∇|∇p|² = 2 Re(H ∇p*). Per-m units: ×1e3 and ×1e9.
    let grad_p2 = d.gradient.map(|g| (p_conj * g).re * 2.0e3);
    let grad_g2 = (d.hessian * g_conj).map(|h| h.re * 2.0e9);
    Ok(-(k1 * grad_p2 - k2 * grad_g2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::model::{calibrated_source_amplitude, focused_field};
    use crate::geometry::{build_flat_array, presets, CARRIER_40K};
    use approx::assert_abs_diff_eq;

    #[test]
    fn eps_contrast_factors() {
        let params = GorkovParams::eps(&MediumState::reference());
        assert_abs_diff_eq!(params.f2(), 2.0 * (29.63 - 1.204) / (2.0 * 29.63 + 1.204), epsilon = 1e-15);
        assert_abs_diff_eq!(params.f2(), 0.9403, epsilon = 1e-4);
        assert!(params.f1() > 0.99 && params.f1() < 1.0);
        // 1 mm bead: 29.63 kg/m³ × π/6 mm³.
        assert_abs_diff_eq!(params.mass(), 29.63 * PI / 6.0 * 1e-9, epsilon = 1e-20);
    }

    #[test]
    fn oversized_particle_rejected() {
        let medium = MediumState::reference();
        let big = GorkovParams::new(3.0, 30.0, 900.0, &medium).unwrap();
        let (_, model) = focused_field(&presets::flat_8x8(), Vec3::new(0.0, 0.0, 100.0), &medium, 1.0).unwrap();
        assert!(gorkov_potential(&model, &big, &Vec3::new(0.0, 0.0, 100.0)).is_err());
        assert!(GorkovParams::new(0.0, 30.0, 900.0, &medium).is_err());
    }

    #[test]
    fn too_close_to_source() {
        let medium = MediumState::reference();
        let layout = build_flat_array(1, 1, 10.0, CARRIER_40K).unwrap();
        let model = FieldModel::from_phases(&layout, &[0.0], &medium, 1.0).unwrap();
        let params = GorkovParams::eps(&medium);
        assert!(matches!(
            radiation_force(&model, &params, &Vec3::new(0.0, 0.0, 0.1)),
            Err(Error::Singularity(_))
        ));
    }

    #[test]
    fn force_matches_potential_differences() {
        let medium = MediumState::reference();
        let (_, model) = focused_field(
            &presets::flat_with_reflector(119.0).unwrap(),
            Vec3::new(0.0, 0.0, 100.0),
            &medium,
            calibrated_source_amplitude(),
        )
        .unwrap();
        let params = GorkovParams::eps(&medium);
        let point = Vec3::new(3.1, -1.7, 97.3);
        let f = radiation_force(&model, &params, &point).unwrap();
        let h = difference_step(model.wavelength()) / 2.0;
        for axis in 0..3 {
            let mut e = Vec3::zeros();
            e[axis] = h;
            let u = |q: Vec3| gorkov_potential(&model, &params, &q).unwrap();
            let fd = -(8.0 * (u(point + e) - u(point - e)) - (u(point + 2.0 * e) - u(point - 2.0 * e)))
                / (12.0 * h * 1e-3);
            assert_abs_diff_eq!(f[axis], fd, epsilon = 1e-6 * f.norm());
        }
    }
}
