use std::collections::HashMap;
use std::f64::consts::SQRT_2;
use std::sync::OnceLock;

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::directivity::piston;
use crate::geometry::{presets, ArrayLayout, WorkingVolume};
use crate::medium::MediumState;
use crate::phase::{compute_frame, FocalCommand, PhaseFrame, QuantizationConfig};
use crate::{Error, Result, Vec3};

/// Reference pressure for SPL in air, pascals.
pub const SPL_REFERENCE: f64 = 20e-6;
/// On-focus SPL the source amplitude is calibrated to.
pub const CALIBRATION_SPL: f64 = 172.0;
/// Distance below which a point counts as sitting on a source centre, mm.
const SOURCE_EPSILON: f64 = 1e-6;

pub type CVec3 = Vector3<Complex64>;
pub type CMat3 = Matrix3<Complex64>;

/// Complex pressure at a point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub point: Vec3,
    pub pressure: Complex64,
}

impl FieldSample {
    pub fn magnitude(&self) -> f64 {
        self.pressure.norm()
    }

    pub fn spl(&self) -> f64 {
        spl(self.pressure)
    }
}

/// Sound pressure level in dB re 20 µPa; −∞ for zero pressure.
pub fn spl(pressure: Complex64) -> f64 {
    let rms = pressure.norm() / SQRT_2;
    if rms == 0.0 {
        f64::NEG_INFINITY
    } else {
        20.0 * (rms / SPL_REFERENCE).log10()
    }
}

/// Pressure amplitude giving `level` dB SPL.
pub fn pressure_for_spl(level: f64) -> f64 {
    SPL_REFERENCE * SQRT_2 * 10f64.powf(level / 20.0)
}

/// Pressure and its first two spatial derivatives (per mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Derivatives {
    pub pressure: Complex64,
    pub gradient: CVec3,
    pub hessian: CMat3,
}

#[derive(Debug, Clone, Copy)]
struct Source {
    position: Vec3,
    normal: Vec3,
    /// amplitude · e^{jφ}
    weight: Complex64,
    /// (k·a)²
    kappa2: f64,
}

/// Monochromatic field of a driven layout: piston sources plus their images
/// in the reflector, if there is one.
#[derive(Debug, Clone)]
pub struct FieldModel {
    sources: Vec<Source>,
    k: f64,
    wavelength: f64,
    volume: WorkingVolume,
}

impl FieldModel {
    /// Field emitted with the frame's quantized delays.
    pub fn new(
        layout: &ArrayLayout,
        frame: &PhaseFrame,
        medium: &MediumState,
        source_amplitude: f64,
    ) -> Result<Self> {
        let emitters = layout.emitter_count();
        if frame.len() != emitters {
            return Err(Error::FrameShape {
                expected: emitters,
                found: frame.len(),
            });
        }
        let by_id: HashMap<usize, f64> = frame
            .channels
            .iter()
            .copied()
            .zip(frame.quantized_phases())
            .collect();
        let phases = layout
            .emitters()
            .map(|t| {
                by_id.get(&t.id).copied().ok_or_else(|| {
                    Error::InvalidArgument(format!("frame has no channel {}", t.id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_phases(layout, &phases, medium, source_amplitude)
    }

    /// Field for explicit phases, one per emitter in layout order.
    pub fn from_phases(
        layout: &ArrayLayout,
        phases: &[f64],
        medium: &MediumState,
        source_amplitude: f64,
    ) -> Result<Self> {
        let carrier = layout.emitter_carrier()?;
        if phases.len() != layout.emitter_count() {
            return Err(Error::FrameShape {
                expected: layout.emitter_count(),
                found: phases.len(),
            });
        }
        if !(source_amplitude >= 0.0 && source_amplitude.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "source amplitude {source_amplitude} must be finite and non-negative"
            )));
        }
        let k = medium.wavenumber_mm(carrier);
        let mut sources: Vec<Source> = layout
            .emitters()
            .zip(phases)
            .map(|(t, &phase)| Source {
                position: t.position,
                normal: t.normal,
                weight: Complex64::from_polar(source_amplitude, phase),
                kappa2: (k * t.radius).powi(2),
            })
            .collect();
        if let Some(zr) = layout.reflector_z() {
            let images: Vec<Source> = sources
                .iter()
                .map(|s| Source {
                    position: Vec3::new(s.position.x, s.position.y, 2.0 * zr - s.position.z),
                    normal: Vec3::new(s.normal.x, s.normal.y, -s.normal.z),
                    ..*s
                })
                .collect();
            sources.extend(images);
        }
        Ok(Self {
            sources,
            k,
            wavelength: medium.wavelength_mm(carrier),
            volume: layout.working_volume(),
        })
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn wavenumber(&self) -> f64 {
        self.k
    }

    pub fn working_volume(&self) -> &WorkingVolume {
        &self.volume
    }

    /// Number of real plus image sources.
    pub fn source_count(&self) -> usize {
        self.sources.len()
    }

    /// Distance from `point` to the closest source centre, mm.
    pub fn nearest_source_distance(&self, point: &Vec3) -> f64 {
        self.sources
            .iter()
            .map(|s| (point - s.position).norm())
            .fold(f64::INFINITY, f64::min)
    }

    fn check(&self, point: &Vec3) -> Result<()> {
        if !point.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite evaluation point".into()));
        }
        if self.nearest_source_distance(point) < SOURCE_EPSILON {
            return Err(Error::Singularity((*point).into()));
        }
        Ok(())
    }

    pub fn pressure(&self, point: &Vec3) -> Result<Complex64> {
        self.check(point)?;
        let mut sum = Complex64::new(0.0, 0.0);
        for s in &self.sources {
            let v = point - s.position;
            let d = v.norm();
            let along = v.dot(&s.normal);
            // Points behind a piston get nothing from it.
            if along <= 0.0 {
                continue;
            }
            let t = (s.kappa2 * (1.0 - (along / d).powi(2))).max(0.0);
            let h = piston(t).h;
            sum += s.weight * Complex64::from_polar(h / d, -self.k * d);
        }
        Ok(sum)
    }

    pub fn sample(&self, point: &Vec3) -> Result<FieldSample> {
        Ok(FieldSample {
            point: *point,
            pressure: self.pressure(point)?,
        })
    }

    /// Pressure at many points, evaluated in parallel.
    pub fn pressures(&self, points: &[Vec3]) -> Result<Vec<Complex64>> {
        points.par_iter().map(|p| self.pressure(p)).collect()
    }

    /// Closed-form pressure, gradient and Hessian.
    pub fn derivatives(&self, point: &Vec3) -> Result<Derivatives> {
        self.check(point)?;
        let zero = Complex64::new(0.0, 0.0);
        let mut p = zero;
        let mut g = CVec3::from_element(zero);
        let mut hess = CMat3::from_element(zero);
        let jk = Complex64::new(0.0, -self.k);
        for s in &self.sources {
            let v = point - s.position;
            let sn = v.dot(&s.normal);
            if sn <= 0.0 {
                continue;
            }
            let n = s.normal;
            let d2 = v.norm_squared();
            let d = d2.sqrt();
            let d4 = d2 * d2;
            let kk = s.kappa2;
            let t = (kk * (1.0 - sn * sn / d2)).max(0.0);
            let dir = piston(t);

            // ∇t = αv + βn; ∇d = v/d.
            let alpha = 2.0 * kk * sn * sn / d4;
            let beta = -2.0 * kk * sn / d2;

            // e^{−jkd}/d and its d-derivatives.
            let e = Complex64::from_polar(1.0 / d, -self.k * d);
            let a = jk - 1.0 / d;
            let e1 = e * a;
            let e2 = e * (a * a + 1.0 / d2);

            let w = s.weight;
            let c_tt = w * dir.d2h * e;
            let c_t = w * dir.dh * e;
            let c_td = w * dir.dh * e1;
            let c_dd = w * dir.h * e2;
            let c_d = w * dir.h * e1;

            p += w * dir.h * e;
            let g_v = c_t * alpha + c_d / d;
            let g_n = c_t * beta;
            for i in 0..3 {
                g[i] += g_v * v[i] + g_n * n[i];
            }

            // Hessian on the basis I, vvᵀ, nnᵀ, vnᵀ + nvᵀ.
            let h_i = c_t * alpha + c_d / d;
            let h_vv = c_tt * (alpha * alpha) - c_t * (8.0 * kk * sn * sn / (d4 * d2))
                + c_td * (2.0 * alpha / d)
                + c_dd / d2
                - c_d / (d2 * d);
            let h_nn = c_tt * (beta * beta) - c_t * (2.0 * kk / d2);
            let h_vn = c_tt * (alpha * beta) + c_t * (4.0 * kk * sn / d4) + c_td * (beta / d);
            for i in 0..3 {
                for j in i..3 {
                    let mut h = h_vv * (v[i] * v[j]) + h_nn * (n[i] * n[j]) + h_vn * (v[i] * n[j] + n[i] * v[j]);
                    if i == j {
                        h += h_i;
                    }
                    hess[(i, j)] += h;
                }
            }
        }
        for i in 0..3 {
            for j in 0..i {
                hess[(i, j)] = hess[(j, i)];
            }
        }
        Ok(Derivatives {
            pressure: p,
            gradient: g,
            hessian: hess,
        })
    }
}

/// Field of `layout` focused at `target` with the given medium and amplitude.
pub fn focused_field(
    layout: &ArrayLayout,
    target: Vec3,
    medium: &MediumState,
    source_amplitude: f64,
) -> Result<(PhaseFrame, FieldModel)> {
    let quant = QuantizationConfig::for_layout(layout)?;
    let frame = compute_frame(layout, &FocalCommand::focus(target), medium, &quant)?;
    let model = FieldModel::new(layout, &frame, medium, source_amplitude)?;
    Ok((frame, model))
}

pub fn pressure_at(
    layout: &ArrayLayout,
    frame: &PhaseFrame,
    medium: &MediumState,
    point: &Vec3,
    source_amplitude: f64,
) -> Result<Complex64> {
    FieldModel::new(layout, frame, medium, source_amplitude)?.pressure(point)
}

/// Per-emitter amplitude (Pa·mm) at which the flat 8×8 array, focused 100 mm
/// above its centre at the reference temperature, reaches the calibration SPL
/// at the focus.
pub fn calibrated_source_amplitude() -> f64 {
    static AMPLITUDE: OnceLock<f64> = OnceLock::new();
    *AMPLITUDE.get_or_init(|| {
        let focus = Vec3::new(0.0, 0.0, 100.0);
        let (_, unit) = focused_field(&presets::flat_8x8(), focus, &MediumState::reference(), 1.0)
            .expect("calibration rig is valid");
        let p = unit.pressure(&focus).expect("focus is away from sources");
        pressure_for_spl(CALIBRATION_SPL) / p.norm()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_flat_array, CARRIER_40K};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::TAU;

    #[test]
    fn spl_reference_points() {
        assert_abs_diff_eq!(spl(Complex64::new(7962.0 * SQRT_2, 0.0)), 172.0, epsilon = 1e-3);
        assert_abs_diff_eq!(spl(Complex64::new(20e-6 * SQRT_2, 0.0)), 0.0, epsilon = 1e-9);
        let a = spl(Complex64::new(3.0, 4.0));
        let b = spl(Complex64::new(6.0, 8.0));
        assert_abs_diff_eq!(b - a, 20.0 * 2f64.log10(), epsilon = 1e-12);
        assert_eq!(spl(Complex64::new(0.0, 0.0)), f64::NEG_INFINITY);
        assert_abs_diff_eq!(spl(Complex64::new(pressure_for_spl(95.5), 0.0)), 95.5, epsilon = 1e-9);
    }

    #[test]
    fn single_emitter_phase_advances_with_distance() {
        let layout = build_flat_array(1, 1, 10.0, CARRIER_40K).unwrap();
        let medium = MediumState::reference();
        let model = FieldModel::from_phases(&layout, &[0.0], &medium, 1.0).unwrap();
        let lambda = model.wavelength();
        let a = model.pressure(&Vec3::new(0.0, 0.0, 50.0)).unwrap();
        let b = model.pressure(&Vec3::new(0.0, 0.0, 50.0 + lambda)).unwrap();
        let c = model.pressure(&Vec3::new(0.0, 0.0, 50.0 + lambda / 4.0)).unwrap();
        assert_abs_diff_eq!((b / a).arg(), 0.0, epsilon = 1e-9);
        // e^{−jkd}: a quarter wavelength further is a quarter turn behind.
        assert_abs_diff_eq!((c / a).arg(), -TAU / 4.0, epsilon = 1e-9);
        assert_abs_diff_eq!(a.norm(), 1.0 / 50.0, epsilon = 1e-15);
    }

    #[test]
    fn symmetric_pair_doubles_on_axis() {
        let pair = build_flat_array(2, 1, 20.0, CARRIER_40K).unwrap();
        let single = build_flat_array(1, 1, 20.0, CARRIER_40K).unwrap();
        let medium = MediumState::reference();
        let both = FieldModel::from_phases(&pair, &[0.0, 0.0], &medium, 1.0).unwrap();
        for z in [30.0, 77.0, 140.0] {
            let on_axis = Vec3::new(0.0, 0.0, z);
            // Same distance as either pair member has to the axis point.
            let offset = FieldModel::from_phases(&single, &[0.0], &medium, 1.0)
                .unwrap()
                .pressure(&Vec3::new(10.0, 0.0, z))
                .unwrap();
            let p = both.pressure(&on_axis).unwrap();
            assert_abs_diff_eq!(p.re, 2.0 * offset.re, epsilon = 1e-15);
            assert_abs_diff_eq!(p.im, 2.0 * offset.im, epsilon = 1e-15);
        }
    }

    #[test]
    fn singularity_at_source_centre() {
        let layout = build_flat_array(1, 1, 10.0, CARRIER_40K).unwrap();
        let model = FieldModel::from_phases(&layout, &[0.0], &MediumState::reference(), 1.0).unwrap();
        assert!(matches!(model.pressure(&Vec3::zeros()), Err(Error::Singularity(_))));
        assert!(matches!(model.derivatives(&Vec3::zeros()), Err(Error::Singularity(_))));
        // Behind the piston the field is zero rather than an error.
        assert_eq!(model.pressure(&Vec3::new(0.0, 0.0, -5.0)).unwrap().norm(), 0.0);
    }

    #[test]
    fn frame_shape_is_checked() {
        let layout = presets::flat_8x8();
        let (mut frame, _) = focused_field(&layout, Vec3::new(0.0, 0.0, 100.0), &MediumState::reference(), 1.0)
            .unwrap();
        frame.phases.pop();
        frame.delays_cycles.pop();
        frame.channels.pop();
        assert!(matches!(
            FieldModel::new(&layout, &frame, &MediumState::reference(), 1.0),
            Err(Error::FrameShape { expected: 64, found: 63 })
        ));
    }

    #[test]
    fn reflector_adds_images() {
        let layout = presets::flat_with_reflector(119.0).unwrap();
        let (_, model) =
            focused_field(&layout, Vec3::new(0.0, 0.0, 100.0), &MediumState::reference(), 1.0).unwrap();
        assert_eq!(model.source_count(), 128);
        // Pressure antinode on a rigid wall: incident and image arrive in phase.
        let near_wall = Vec3::new(3.0, -2.0, 119.0);
        let direct = FieldModel::new(
            &presets::flat_8x8(),
            &focused_field(&layout, Vec3::new(0.0, 0.0, 100.0), &MediumState::reference(), 1.0)
                .unwrap()
                .0,
            &MediumState::reference(),
            1.0,
        )
        .unwrap()
        .pressure(&near_wall)
        .unwrap();
        let total = model.pressure(&near_wall).unwrap();
        assert_abs_diff_eq!(total.re, 2.0 * direct.re, epsilon = 1e-12);
        assert_abs_diff_eq!(total.im, 2.0 * direct.im, epsilon = 1e-12);
    }

    #[test]
    fn calibration_hits_target_level() {
        let a = calibrated_source_amplitude();
        let focus = Vec3::new(0.0, 0.0, 100.0);
        let (_, model) = focused_field(&presets::flat_8x8(), focus, &MediumState::reference(), a).unwrap();
        assert_abs_diff_eq!(spl(model.pressure(&focus).unwrap()), 172.0, epsilon = 1e-9);
    }
}
