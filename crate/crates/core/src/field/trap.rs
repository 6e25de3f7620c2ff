//! Standing-wave trap between the flat array and the reflector plate.

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::dynamics::GRAVITY;
use super::gorkov::{force_unchecked, GorkovParams};
use super::model::{calibrated_source_amplitude, focused_field, FieldModel};
use crate::geometry::{presets, ArrayLayout, CARRIER_40K};
use crate::medium::MediumState;
use crate::{Error, Result, Vec3};

/// Levitation height of the open-loop tests, mm.
pub const LEVITATION_HEIGHT: f64 = 100.0;

/// Flat 8×8 with the plate a quarter wavelength above the levitation height,
/// which puts the first pressure node under the plate at that height.
pub fn standard_rig(medium: &MediumState) -> Result<ArrayLayout> {
    presets::flat_with_reflector(LEVITATION_HEIGHT + medium.wavelength_mm(CARRIER_40K) / 4.0)
}

/// Field of the standard rig focused at `(x, y, LEVITATION_HEIGHT)` with the
/// calibrated amplitude.
pub fn standard_trap(medium: &MediumState, x: f64, y: f64) -> Result<FieldModel> {
    let layout = standard_rig(medium)?;
    let (_, model) = focused_field(
        &layout,
        Vec3::new(x, y, LEVITATION_HEIGHT),
        medium,
        calibrated_source_amplitude(),
    )?;
    Ok(model)
}

fn bisect(f: impl Fn(f64) -> Result<f64>, mut lo: f64, mut hi: f64) -> Result<f64> {
    let f_lo = f(lo)?;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if (f(mid)? > 0.0) == (f_lo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Heights of the |p| minima on the vertical line through (x, y), in
/// ascending order.
pub fn axial_nodes(model: &FieldModel, x: f64, y: f64, z_lo: f64, z_hi: f64) -> Result<Vec<f64>> {
    // d|p|²/dz changes sign from − to + at a minimum.
    let slope = |z: f64| -> Result<f64> {
        let d = model.derivatives(&Vec3::new(x, y, z))?;
        Ok((d.pressure.conj() * d.gradient.z).re)
    };
    let step = model.wavelength() / 40.0;
    let n = ((z_hi - z_lo) / step).ceil() as usize;
    let mut nodes = Vec::new();
    let mut prev = (z_lo, slope(z_lo)?);
    for i in 1..=n {
        let z = (z_lo + i as f64 * step).min(z_hi);
        let s = slope(z)?;
        if prev.1 < 0.0 && s >= 0.0 {
            nodes.push(bisect(slope, prev.0, z)?);
        }
        prev = (z, s);
    }
    Ok(nodes)
}

fn total_force(model: &FieldModel, params: &GorkovParams, p: &Vec3, gravity: bool) -> Result<Vec3> {
    let mut f = force_unchecked(model, params, p)?;
    if gravity {
        f.z -= params.mass() * GRAVITY;
    }
    Ok(f)
}

/// ∂F/∂x by central differences of the analytic force, N/m.
pub fn force_jacobian(model: &FieldModel, params: &GorkovParams, p: &Vec3) -> Result<Matrix3<f64>> {
    let h = model.wavelength() * 1e-4;
    let mut j = Matrix3::zeros();
    for axis in 0..3 {
        let mut e = Vec3::zeros();
        e[axis] = h;
        let col = (force_unchecked(model, params, &(p + e))? - force_unchecked(model, params, &(p - e))?)
            / (2.0 * h * 1e-3);
        j.set_column(axis, &col);
    }
    Ok(j)
}

/// Newton iteration for the point where radiation force balances gravity
/// (or vanishes, without gravity).
pub fn find_equilibrium(
    model: &FieldModel,
    params: &GorkovParams,
    guess: Vec3,
    gravity: bool,
) -> Result<Vec3> {
    let mut p = guess;
    let limit = model.wavelength() / 8.0;
    for _ in 0..100 {
        let f = total_force(model, params, &p, gravity)?;
        let j = force_jacobian(model, params, &p)?;
        let delta = j
            .lu()
            .solve(&(-f))
            .ok_or_else(|| Error::InvalidArgument("singular trap Jacobian".into()))?
            * 1e3;
        // Keep each Newton step inside the basin around the guess.
        let delta = if delta.norm() > limit { delta * (limit / delta.norm()) } else { delta };
        p += delta;
        if (p - guess).norm() > model.wavelength() / 2.0 {
            return Err(Error::InvalidArgument(format!(
                "no equilibrium within λ/2 of {guess:?}"
            )));
        }
        if delta.norm() < 1e-12 {
            return Ok(p);
        }
    }
    Ok(p)
}

/// Summary of a trap for the levitated particle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapAnalysis {
    pub equilibrium: Vec3,
    pub equilibrium_without_gravity: Vec3,
    pub nearest_node: f64,
    /// node − z_eq, mm; positive when the particle hangs below the node.
    pub offset_below_node: f64,
    /// Axial |p| minima around the trap, ascending, mm.
    pub nodes: Vec<f64>,
    pub wavelength: f64,
    /// Eigenvalues of the force Jacobian, N/m; all negative for a stable trap.
    pub stiffness_eigenvalues: [f64; 3],
    pub stable: bool,
    /// Largest upward radiation force on the axis within λ/2 of the trap, N.
    pub max_lift: f64,
    pub weight: f64,
}

impl TrapAnalysis {
    pub fn node_spacings(&self) -> Vec<f64> {
        self.nodes.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Gaps between the nearest node and its neighbours, mm.
    pub fn adjacent_spacings(&self) -> Vec<f64> {
        self.nodes
            .windows(2)
            .filter(|w| w.contains(&self.nearest_node))
            .map(|w| w[1] - w[0])
            .collect()
    }
}

/// Axial nodes, gravity equilibrium and stability of the trap nearest to
/// `guess`, which should lie within about λ/8 of a node.
pub fn analyze_trap(model: &FieldModel, params: &GorkovParams, guess: Vec3) -> Result<TrapAnalysis> {
    let lambda = model.wavelength();
    params.validate(lambda)?;
    let eq = find_equilibrium(model, params, guess, true)?;
    let eq0 = find_equilibrium(model, params, guess, false)?;
    let (z_min, z_max) = model.working_volume().z_range;
    let nodes = axial_nodes(
        model,
        eq.x,
        eq.y,
        (eq.z - 2.0 * lambda).max(z_min),
        (eq.z + 2.0 * lambda).min(z_max),
    )?;
    let nearest = nodes
        .iter()
        .copied()
        .min_by(|a, b| (a - eq.z).abs().total_cmp(&(b - eq.z).abs()))
        .ok_or_else(|| Error::InvalidArgument("no pressure node near the trap".into()))?;
    let jacobian = force_jacobian(model, params, &eq)?;
    let sym = (jacobian + jacobian.transpose()) / 2.0;
    let eig = SymmetricEigen::new(sym).eigenvalues;
    let mut lift: f64 = 0.0;
    for i in 0..=100 {
        let z = eq.z - lambda / 4.0 + lambda / 2.0 * i as f64 / 100.0;
        lift = lift.max(force_unchecked(model, params, &Vec3::new(eq.x, eq.y, z))?.z);
    }
    Ok(TrapAnalysis {
        equilibrium: eq,
        equilibrium_without_gravity: eq0,
        nearest_node: nearest,
        offset_below_node: nearest - eq.z,
        nodes,
        wavelength: lambda,
        stiffness_eigenvalues: [eig[0], eig[1], eig[2]],
        stable: eig.iter().all(|&e| e < 0.0),
        max_lift: lift,
        weight: params.mass() * GRAVITY,
    })
}
