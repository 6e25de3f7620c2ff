use std::io::{self, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::model::{spl, FieldModel};
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    /// In-plane axes (u, v) of a plane normal to `self`.
    pub fn in_plane(self) -> (Axis, Axis) {
        match self {
            Axis::X => (Axis::Y, Axis::Z),
            Axis::Y => (Axis::X, Axis::Z),
            Axis::Z => (Axis::X, Axis::Y),
        }
    }

    fn label(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

/// Axis-aligned sampling plane, centred on (`center_u`, `center_v`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub normal: Axis,
    pub offset: f64,
    pub center_u: f64,
    pub center_v: f64,
    /// Half side of the square sampled region, mm.
    pub half_extent: f64,
    /// Grid pitch, mm.
    pub pitch: f64,
}

impl PlaneSpec {
    /// Plane normal to `normal` through `point`, centred on it.
    pub fn through(point: &Vec3, normal: Axis, half_extent: f64, pitch: f64) -> Self {
        let (u, v) = normal.in_plane();
        Self {
            normal,
            offset: point[normal.index()],
            center_u: point[u.index()],
            center_v: point[v.index()],
            half_extent,
            pitch,
        }
    }

    /// Samples per side.
    pub fn samples(&self) -> usize {
        2 * (self.half_extent / self.pitch).floor() as usize + 1
    }

    fn validate(&self) -> Result<()> {
        if !(self.pitch > 0.0 && self.half_extent >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "slice pitch {} and half extent {} must be positive",
                self.pitch, self.half_extent
            )));
        }
        Ok(())
    }

    pub fn point(&self, iu: usize, iv: usize) -> Vec3 {
        let n = self.samples();
        let half = (n / 2) as f64;
        let (u, v) = self.normal.in_plane();
        let mut p = Vec3::zeros();
        p[self.normal.index()] = self.offset;
        p[u.index()] = self.center_u + (iu as f64 - half) * self.pitch;
        p[v.index()] = self.center_v + (iv as f64 - half) * self.pitch;
        p
    }

    pub fn contains(&self, point: &Vec3) -> bool {
        (point[self.normal.index()] - self.offset).abs() < 1e-9
    }
}

/// Complex pressure on a square grid; row-major with v the slow index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSlice {
    pub plane: PlaneSpec,
    pub values: Vec<Complex64>,
}

impl FieldSlice {
    pub fn compute(model: &FieldModel, plane: PlaneSpec) -> Result<Self> {
        plane.validate()?;
        let n = plane.samples();
        let points: Vec<Vec3> = (0..n)
            .flat_map(|iv| (0..n).map(move |iu| (iu, iv)))
            .map(|(iu, iv)| plane.point(iu, iv))
            .collect();
        Ok(Self {
            plane,
            values: model.pressures(&points)?,
        })
    }

    pub fn size(&self) -> usize {
        self.plane.samples()
    }

    pub fn at(&self, iu: usize, iv: usize) -> Complex64 {
        self.values[iv * self.size() + iu]
    }

    /// Grid indices and position of the largest |p|.
    pub fn peak(&self) -> (usize, usize, Vec3) {
        let n = self.size();
        let (i, _) = self
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
            .expect("non-empty slice");
        let (iu, iv) = (i % n, i / n);
        (iu, iv, self.plane.point(iu, iv))
    }

    pub fn header_json(&self) -> String {
        serde_json::to_string_pretty(&self.plane).expect("plane serializes")
    }

    /// `u,v,abs_p,spl` rows, with u and v named after the in-plane axes.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let (u, v) = self.plane.normal.in_plane();
        writeln!(out, "{},{},abs_p,spl", u.label(), v.label())?;
        let n = self.size();
        for iv in 0..n {
            for iu in 0..n {
                let p = self.plane.point(iu, iv);
                let value = self.at(iu, iv);
                writeln!(
                    out,
                    "{},{},{},{}",
                    p[u.index()],
                    p[v.index()],
                    value.norm(),
                    spl(value)
                )?;
            }
        }
        Ok(())
    }
}

/// Full widths of the focal spot along x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalWidth {
    pub focus: Vec3,
    pub peak_spl: f64,
    /// −6 dB full width, mm.
    pub minus_6db: f64,
    /// −3 dB full width, mm.
    pub minus_3db: f64,
}

/// Largest grid pitch accepted for width measurements, as a fraction of λ.
pub const MAX_PITCH_FRACTION: f64 = 0.25;

/// Walks the x line through `focus` within `plane` and bisects the −6 dB and
/// −3 dB crossings on either side of it.
pub fn measure_focal_width(model: &FieldModel, focus: &Vec3, plane: &PlaneSpec) -> Result<FocalWidth> {
    plane.validate()?;
    if plane.normal == Axis::X {
        return Err(Error::InvalidArgument("x line does not lie in a plane normal to x".into()));
    }
    if !plane.contains(focus) {
        return Err(Error::InvalidArgument("focus is not in the measurement plane".into()));
    }
    if plane.pitch > MAX_PITCH_FRACTION * model.wavelength() {
        return Err(Error::InvalidArgument(format!(
            "pitch {} mm is coarser than λ/4 = {} mm",
            plane.pitch,
            model.wavelength() / 4.0
        )));
    }
    let peak = model.pressure(focus)?.norm();
    let steps = (plane.half_extent / plane.pitch).floor() as usize;
    let at = |dx: f64| model.pressure(&(focus + Vec3::new(dx, 0.0, 0.0))).map(|p| p.norm());

    let crossing = |level: f64, sign: f64| -> Result<f64> {
        let threshold = peak * 10f64.powf(-level / 20.0);
        let mut prev = 0.0;
        for i in 1..=steps {
            let x = sign * i as f64 * plane.pitch;
            if at(x)? < threshold {
                let (mut inside, mut outside) = (prev, x);
                for _ in 0..60 {
                    let mid = 0.5 * (inside + outside);
                    if at(mid)? < threshold {
                        outside = mid;
                    } else {
                        inside = mid;
                    }
                }
                return Ok(0.5 * (inside + outside));
            }
            prev = x;
        }
        Err(Error::SliceTooSmall(plane.half_extent))
    };
    Ok(FocalWidth {
        focus: *focus,
        peak_spl: spl(model.pressure(focus)?),
        minus_6db: crossing(6.0, 1.0)? - crossing(6.0, -1.0)?,
        minus_3db: crossing(3.0, 1.0)? - crossing(3.0, -1.0)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::model::focused_field;
    use crate::geometry::presets;
    use crate::medium::MediumState;
    use approx::assert_abs_diff_eq;

    fn focus_model() -> (Vec3, FieldModel) {
        let focus = Vec3::new(0.0, 0.0, 100.0);
        let (_, model) = focused_field(&presets::flat_8x8(), focus, &MediumState::reference(), 1.0).unwrap();
        (focus, model)
    }

    #[test]
    fn grid_layout() {
        let plane = PlaneSpec::through(&Vec3::new(1.0, 2.0, 3.0), Axis::Z, 2.0, 1.0);
        assert_eq!(plane.samples(), 5);
        assert_eq!(plane.point(2, 2), Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(plane.point(0, 4), Vec3::new(-1.0, 4.0, 3.0));
        let side = PlaneSpec::through(&Vec3::new(1.0, 2.0, 3.0), Axis::Y, 1.0, 1.0);
        assert_eq!(side.point(0, 2), Vec3::new(0.0, 2.0, 4.0));
    }

    #[test]
    fn slice_peak_is_at_focus() {
        let (focus, model) = focus_model();
        let slice = FieldSlice::compute(&model, PlaneSpec::through(&focus, Axis::Z, 20.0, 1.0)).unwrap();
        let (_, _, peak) = slice.peak();
        assert!((peak - focus).norm() <= 1.0);
    }

    #[test]
    fn csv_and_header() {
        let (focus, model) = focus_model();
        let slice = FieldSlice::compute(&model, PlaneSpec::through(&focus, Axis::Y, 1.0, 1.0)).unwrap();
        let mut out = Vec::new();
        slice.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "x,z,abs_p,spl");
        assert_eq!(lines.len(), 10);
        assert!(lines[5].starts_with("0,100,"));
        let header: PlaneSpec = serde_json::from_str(&slice.header_json()).unwrap();
        assert_eq!(header, slice.plane);
    }

    #[test]
    fn width_near_prediction() {
        let (focus, model) = focus_model();
        let w = measure_focal_width(&model, &focus, &PlaneSpec::through(&focus, Axis::Z, 40.0, 0.5)).unwrap();
        assert!((w.minus_6db - 13.0).abs() < 2.6, "{w:?}");
        assert!(w.minus_3db < w.minus_6db);
    }

    #[test]
    fn width_guards() {
        let (focus, model) = focus_model();
        let small = PlaneSpec::through(&focus, Axis::Z, 3.0, 0.5);
        assert_eq!(measure_focal_width(&model, &focus, &small), Err(Error::SliceTooSmall(3.0)));
        let coarse = PlaneSpec::through(&focus, Axis::Z, 40.0, 2.5);
        assert!(measure_focal_width(&model, &focus, &coarse).is_err());
        let off = PlaneSpec::through(&(focus + Vec3::new(0.0, 0.0, 1.0)), Axis::Z, 40.0, 0.5);
        assert!(measure_focal_width(&model, &focus, &off).is_err());
        let normal_x = PlaneSpec::through(&focus, Axis::X, 40.0, 0.5);
        assert!(measure_focal_width(&model, &focus, &normal_x).is_err());
    }

    #[test]
    fn width_is_symmetric_about_axis() {
        let (focus, model) = focus_model();
        for dx in [2.0, 5.0, 9.0] {
            let a = model.pressure(&(focus + Vec3::new(dx, 0.0, 0.0))).unwrap().norm();
            let b = model.pressure(&(focus - Vec3::new(dx, 0.0, 0.0))).unwrap().norm();
            assert_abs_diff_eq!(a / b, 1.0, epsilon = 1e-9);
        }
    }
}
