//! Transducer array layouts and their working volumes.
//!
//! Coordinates are millimetres in an array-centred frame with +z up. Flat
//! arrays sit in the z = 0 plane facing +z; spherical caps place their
//! centre of curvature at the origin.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vec3};

/// Emitting aperture radius of the 16 mm transducers.
pub const DEFAULT_APERTURE_RADIUS: f64 = 8.0;
/// Grid pitch that gives the 132 mm side length of the 8×8 board.
pub const DEFAULT_PITCH: f64 = 16.5;
pub const DEFAULT_CAP_RADIUS: f64 = 100.0;
pub const CARRIER_40K: f64 = 40_000.0;
pub const CARRIER_25K: f64 = 25_000.0;
/// The on-board ADC samples two channels.
pub const MAX_RECEIVERS: usize = 2;

const NORMAL_TOLERANCE: f64 = 1e-9;
/// Clearance added between neighbouring apertures on a cap.
const CAP_CLEARANCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Emitter,
    Receiver,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transducer {
    pub id: usize,
    #[serde(rename = "pos")]
    pub position: Vec3,
    pub normal: Vec3,
    pub radius: f64,
    #[serde(rename = "freq")]
    pub carrier_frequency: f64,
    pub role: Role,
}

impl Transducer {
    pub fn is_emitter(&self) -> bool {
        self.role == Role::Emitter
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayoutKind {
    Flat,
    FlatWithReflector,
    SphericalCap,
    DoubleSided,
}

/// An immutable, validated arrangement of transducers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayoutDocument", into = "LayoutDocument")]
pub struct ArrayLayout {
    kind: LayoutKind,
    transducers: Vec<Transducer>,
    reflector_z: Option<f64>,
    side_length: f64,
    cap_radius: Option<f64>,
}

/// Wire form of [`ArrayLayout`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayoutDocument {
    kind: LayoutKind,
    transducers: Vec<Transducer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reflector_z: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cap_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    side_length: Option<f64>,
}

impl TryFrom<LayoutDocument> for ArrayLayout {
    type Error = Error;

    fn try_from(doc: LayoutDocument) -> Result<Self> {
        let side_length = match doc.side_length {
            Some(d) => d,
            None => aperture_extent(&doc.transducers),
        };
        ArrayLayout::new(
            doc.kind,
            doc.transducers,
            doc.reflector_z,
            side_length,
            doc.cap_radius,
        )
    }
}

impl From<ArrayLayout> for LayoutDocument {
    fn from(layout: ArrayLayout) -> Self {
        LayoutDocument {
            kind: layout.kind,
            transducers: layout.transducers,
            reflector_z: layout.reflector_z,
            cap_radius: layout.cap_radius,
            side_length: Some(layout.side_length),
        }
    }
}

impl ArrayLayout {
    fn new(
        kind: LayoutKind,
        transducers: Vec<Transducer>,
        reflector_z: Option<f64>,
        side_length: f64,
        cap_radius: Option<f64>,
    ) -> Result<Self> {
        if transducers.is_empty() {
            return Err(Error::InvalidArgument("layout has no transducers".into()));
        }
        for (i, t) in transducers.iter().enumerate() {
            if t.id != i {
                return Err(Error::InvalidArgument(format!(
                    "channel ids must be contiguous from 0, found {} at index {i}",
                    t.id
                )));
            }
            if (t.normal.norm() - 1.0).abs() > NORMAL_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "channel {i} normal is not a unit vector"
                )));
            }
            if !(t.radius > 0.0) || !(t.carrier_frequency > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "channel {i} needs positive radius and carrier"
                )));
            }
            if !t.position.iter().all(|c| c.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "channel {i} position is not finite"
                )));
            }
        }
        let receivers = transducers.iter().filter(|t| !t.is_emitter()).count();
        if receivers > MAX_RECEIVERS {
            return Err(Error::AdcChannelLimit {
                limit: MAX_RECEIVERS,
                requested: receivers,
            });
        }
        match (kind, reflector_z) {
            (LayoutKind::FlatWithReflector, Some(z)) => {
                let top = transducers
                    .iter()
                    .map(|t| t.position.z)
                    .fold(f64::NEG_INFINITY, f64::max);
                if !(z > 0.0 && z > top) {
                    return Err(Error::InvalidArgument(format!(
                        "reflector at z = {z} mm must be above every transducer"
                    )));
                }
            }
            (LayoutKind::FlatWithReflector, None) => {
                return Err(Error::InvalidArgument(
                    "reflector layout without reflector_z".into(),
                ))
            }
            (_, Some(_)) => {
                return Err(Error::InvalidArgument(
                    "only flat layouts can carry a reflector".into(),
                ))
            }
            _ => {}
        }
        if !(side_length > 0.0) {
            return Err(Error::InvalidArgument("side length must be positive".into()));
        }
        Ok(Self {
            kind,
            transducers,
            reflector_z,
            side_length,
            cap_radius,
        })
    }

    pub fn kind(&self) -> LayoutKind {
        self.kind
    }

    pub fn transducers(&self) -> &[Transducer] {
        &self.transducers
    }

    pub fn reflector_z(&self) -> Option<f64> {
        self.reflector_z
    }

    /// Side length D of the emitting aperture.
    pub fn side_length(&self) -> f64 {
        self.side_length
    }

    pub fn cap_radius(&self) -> Option<f64> {
        self.cap_radius
    }

    pub fn emitters(&self) -> impl Iterator<Item = &Transducer> + '_ {
        self.transducers.iter().filter(|t| t.is_emitter())
    }

    pub fn receivers(&self) -> impl Iterator<Item = &Transducer> + '_ {
        self.transducers.iter().filter(|t| !t.is_emitter())
    }

    pub fn emitter_count(&self) -> usize {
        self.emitters().count()
    }

    /// Carrier shared by all emitters, or an error if they disagree.
    pub fn emitter_carrier(&self) -> Result<f64> {
        let mut emitters = self.emitters();
        let first = emitters
            .next()
            .ok_or_else(|| Error::InvalidArgument("layout has no emitters".into()))?
            .carrier_frequency;
        if emitters.any(|t| t.carrier_frequency != first) {
            return Err(Error::InvalidArgument(
                "emitters do not share one carrier".into(),
            ));
        }
        Ok(first)
    }

    /// Centroid of the emitter positions.
    pub fn emitter_centroid(&self) -> Vec3 {
        let n = self.emitter_count().max(1) as f64;
        self.emitters().map(|t| t.position).sum::<Vec3>() / n
    }

    pub fn working_volume(&self) -> WorkingVolume {
        let half = self.side_length / 2.0;
        match self.kind {
            LayoutKind::Flat => WorkingVolume {
                x_range: (-half, half),
                y_range: (-half, half),
                z_range: (FLAT_MIN_HEIGHT, FLAT_MAX_HEIGHT),
            },
            LayoutKind::FlatWithReflector => WorkingVolume {
                x_range: (-half, half),
                y_range: (-half, half),
                z_range: (
                    FLAT_MIN_HEIGHT,
                    self.reflector_z.unwrap_or(FLAT_MAX_HEIGHT),
                ),
            },
            LayoutKind::SphericalCap | LayoutKind::DoubleSided => {
                let r = self.cap_radius.unwrap_or(DEFAULT_CAP_RADIUS) / 2.0;
                WorkingVolume {
                    x_range: (-r, r),
                    y_range: (-r, r),
                    z_range: (-r, r),
                }
            }
        }
    }

    /// Serializes to the JSON layout document.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("layout serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidArgument(e.to_string()))
    }
}

const FLAT_MIN_HEIGHT: f64 = 10.0;
const FLAT_MAX_HEIGHT: f64 = 250.0;

/// Axis-aligned box of admissible focal targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkingVolume {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
}

impl WorkingVolume {
    pub fn contains(&self, p: &Vec3) -> bool {
        let within = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        within(p.x, self.x_range) && within(p.y, self.y_range) && within(p.z, self.z_range)
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(
            (self.x_range.0 + self.x_range.1) / 2.0,
            (self.y_range.0 + self.y_range.1) / 2.0,
            (self.z_range.0 + self.z_range.1) / 2.0,
        )
    }
}

impl fmt::Display for WorkingVolume {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "x∈[{}, {}] y∈[{}, {}] z∈[{}, {}]",
            self.x_range.0,
            self.x_range.1,
            self.y_range.0,
            self.y_range.1,
            self.z_range.0,
            self.z_range.1
        )
    }
}

/// Extreme emitter centres plus one aperture diameter.
fn aperture_extent(transducers: &[Transducer]) -> f64 {
    let span = |axis: usize| {
        let (lo, hi) = transducers
            .iter()
            .filter(|t| t.is_emitter())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
                (lo.min(t.position[axis]), hi.max(t.position[axis]))
            });
        if lo.is_finite() {
            hi - lo
        } else {
            0.0
        }
    };
    let diameter = transducers
        .iter()
        .map(|t| 2.0 * t.radius)
        .fold(0.0, f64::max);
    span(0).max(span(1)) + diameter
}

/// Centred `nx × ny` grid of emitters in the z = 0 plane.
pub fn build_flat_array(nx: usize, ny: usize, pitch: f64, carrier: f64) -> Result<ArrayLayout> {
    build_flat_array_with_aperture(nx, ny, pitch, carrier, DEFAULT_APERTURE_RADIUS)
}

pub fn build_flat_array_with_aperture(
    nx: usize,
    ny: usize,
    pitch: f64,
    carrier: f64,
    radius: f64,
) -> Result<ArrayLayout> {
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidArgument("grid needs at least one row and column".into()));
    }
    if !(pitch > 0.0) {
        return Err(Error::InvalidArgument(format!("pitch {pitch} mm must be positive")));
    }
    if nx.max(ny) > 1 && pitch < 2.0 * radius {
        return Err(Error::LayoutInfeasible(format!(
            "pitch {pitch} mm is smaller than the {} mm aperture",
            2.0 * radius
        )));
    }
    let x0 = (nx as f64 - 1.0) / 2.0 * pitch;
    let y0 = (ny as f64 - 1.0) / 2.0 * pitch;
    let transducers = (0..ny)
        .flat_map(|j| (0..nx).map(move |i| (i, j)))
        .enumerate()
        .map(|(id, (i, j))| Transducer {
            id,
            position: Vec3::new(i as f64 * pitch - x0, j as f64 * pitch - y0, 0.0),
            normal: Vec3::z(),
            radius,
            carrier_frequency: carrier,
            role: Role::Emitter,
        })
        .collect();
    ArrayLayout::new(
        LayoutKind::Flat,
        transducers,
        None,
        nx.max(ny) as f64 * pitch,
        None,
    )
}

/// Emitters on a spherical shell of radius `cap_radius`, all aimed at the
/// centre of curvature (the origin).
///
/// Single-sided caps hang above the origin facing down. The double-sided
/// variant places half of the transducers on the top cap and mirrors the
/// other half below the z = 0 plane.
pub fn build_spherical_cap(
    cap_radius: f64,
    count: usize,
    carrier: f64,
    double_sided: bool,
) -> Result<ArrayLayout> {
    if !(cap_radius > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "cap radius {cap_radius} mm must be positive"
        )));
    }
    if count == 0 {
        return Err(Error::InvalidArgument("cap needs at least one transducer".into()));
    }
    if double_sided && count % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "double-sided cap needs an even count, got {count}"
        )));
    }
    let radius = DEFAULT_APERTURE_RADIUS;
    let per_side = if double_sided { count / 2 } else { count };
    let top = cap_positions(cap_radius, per_side, 2.0 * radius + CAP_CLEARANCE)?;

    let mut positions = top.clone();
    if double_sided {
        positions.extend(top.iter().map(|p| Vec3::new(p.x, p.y, -p.z)));
    }
    let transducers: Vec<_> = positions
        .into_iter()
        .enumerate()
        .map(|(id, position)| Transducer {
            id,
            position,
            normal: -position.normalize(),
            radius,
            carrier_frequency: carrier,
            role: Role::Emitter,
        })
        .collect();
    check_no_overlap(&transducers)?;

    let kind = if double_sided {
        LayoutKind::DoubleSided
    } else {
        LayoutKind::SphericalCap
    };
    let side_length = aperture_extent(&transducers);
    ArrayLayout::new(kind, transducers, None, side_length, Some(cap_radius))
}

/// Ring packing on the upper hemisphere: one transducer at the pole, then
/// rings one `spacing` chord apart, each filled to capacity.
fn cap_positions(cap_radius: f64, count: usize, spacing: f64) -> Result<Vec<Vec3>> {
    let half_chord = spacing / (2.0 * cap_radius);
    if half_chord >= 1.0 {
        return Err(Error::LayoutInfeasible(format!(
            "cap radius {cap_radius} mm too small for {spacing} mm spacing"
        )));
    }
    let ring_step = 2.0 * half_chord.asin();
    let mut positions = vec![Vec3::new(0.0, 0.0, cap_radius)];
    let mut ring = 1;
    while positions.len() < count {
        let polar = ring as f64 * ring_step;
        if polar > std::f64::consts::FRAC_PI_2 {
            return Err(Error::LayoutInfeasible(format!(
                "{count} transducers do not fit on a {cap_radius} mm hemisphere"
            )));
        }
        let ring_radius = cap_radius * polar.sin();
        let ratio = spacing / (2.0 * ring_radius);
        let capacity = if ratio >= 1.0 {
            1
        } else {
            (std::f64::consts::PI / ratio.asin()).floor() as usize
        };
        let n = capacity.min(count - positions.len());
        positions.extend((0..n).map(|i| {
            let azimuth = std::f64::consts::TAU * i as f64 / n as f64;
            Vec3::new(
                ring_radius * azimuth.cos(),
                ring_radius * azimuth.sin(),
                cap_radius * polar.cos(),
            )
        }));
        ring += 1;
    }
    Ok(positions)
}

fn check_no_overlap(transducers: &[Transducer]) -> Result<()> {
    for (i, a) in transducers.iter().enumerate() {
        for b in &transducers[i + 1..] {
            let gap = (a.position - b.position).norm();
            if gap < a.radius + b.radius {
                return Err(Error::LayoutInfeasible(format!(
                    "channels {} and {} overlap ({gap:.3} mm apart)",
                    a.id, b.id
                )));
            }
        }
    }
    Ok(())
}

/// Adds a rigid reflector plane at height `z` above a flat array.
pub fn add_reflector(layout: &ArrayLayout, z: f64) -> Result<ArrayLayout> {
    if layout.kind != LayoutKind::Flat {
        return Err(Error::InvalidArgument(format!(
            "reflectors apply to flat arrays, not {:?}",
            layout.kind
        )));
    }
    let top = layout
        .transducers
        .iter()
        .map(|t| t.position.z)
        .fold(f64::NEG_INFINITY, f64::max);
    if !(z > top) || !(z > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "reflector at z = {z} mm is not above the emitter plane"
        )));
    }
    ArrayLayout::new(
        LayoutKind::FlatWithReflector,
        layout.transducers.clone(),
        Some(z),
        layout.side_length,
        layout.cap_radius,
    )
}

/// Turns existing channels into receivers tuned to `receiver_carrier`.
pub fn mark_receivers(
    layout: &ArrayLayout,
    ids: &[usize],
    receiver_carrier: f64,
) -> Result<ArrayLayout> {
    if ids.is_empty() {
        return Ok(layout.clone());
    }
    if !(receiver_carrier > 0.0) {
        return Err(Error::InvalidArgument("receiver carrier must be positive".into()));
    }
    let mut transducers = layout.transducers.clone();
    for &id in ids {
        let t = transducers
            .get_mut(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no channel {id}")))?;
        t.role = Role::Receiver;
        t.carrier_frequency = receiver_carrier;
    }
    let receivers = transducers.iter().filter(|t| !t.is_emitter()).count();
    if receivers > MAX_RECEIVERS {
        return Err(Error::AdcChannelLimit {
            limit: MAX_RECEIVERS,
            requested: receivers,
        });
    }
    ArrayLayout::new(
        layout.kind,
        transducers,
        layout.reflector_z,
        layout.side_length,
        layout.cap_radius,
    )
}

/// Same layout with every emitter driven at `carrier`.
pub fn with_emitter_carrier(layout: &ArrayLayout, carrier: f64) -> Result<ArrayLayout> {
    if !(carrier > 0.0) {
        return Err(Error::InvalidArgument(format!("carrier {carrier} Hz must be positive")));
    }
    let mut transducers = layout.transducers.clone();
    for t in transducers.iter_mut().filter(|t| t.is_emitter()) {
        t.carrier_frequency = carrier;
    }
    ArrayLayout::new(
        layout.kind,
        transducers,
        layout.reflector_z,
        layout.side_length,
        layout.cap_radius,
    )
}

/// Appends a receiver transducer as a new channel.
pub fn add_receiver(
    layout: &ArrayLayout,
    position: Vec3,
    normal: Vec3,
    carrier: f64,
) -> Result<ArrayLayout> {
    let mut transducers = layout.transducers.clone();
    transducers.push(Transducer {
        id: transducers.len(),
        position,
        normal: normal.normalize(),
        radius: DEFAULT_APERTURE_RADIUS,
        carrier_frequency: carrier,
        role: Role::Receiver,
    });
    check_no_overlap(&transducers)?;
    ArrayLayout::new(
        layout.kind,
        transducers,
        layout.reflector_z,
        layout.side_length,
        layout.cap_radius,
    )
}

/// The arrays used in the experiments.
pub mod presets {
    use super::*;

    /// 8×8 board at 40 kHz, D = 132 mm.
    pub fn flat_8x8() -> ArrayLayout {
        build_flat_array(8, 8, DEFAULT_PITCH, CARRIER_40K).expect("preset is valid")
    }

    pub fn flat_with_reflector(z: f64) -> Result<ArrayLayout> {
        add_reflector(&flat_8x8(), z)
    }

    /// 8×8 board with the two south-row corner channels listening:
    /// channel 0 on the west side and channel 7 on the east side.
    pub fn flat_echo() -> ArrayLayout {
        mark_receivers(&flat_8x8(), &[0, 7], CARRIER_40K).expect("preset is valid")
    }

    /// Receivers at the west and east edges of row 3.
    pub fn flat_echo_west_east() -> ArrayLayout {
        mark_receivers(&flat_8x8(), &[24, 31], CARRIER_40K).expect("preset is valid")
    }

    /// Receivers at the south and north edges of column 3.
    pub fn flat_echo_north_south() -> ArrayLayout {
        mark_receivers(&flat_8x8(), &[3, 59], CARRIER_40K).expect("preset is valid")
    }

    pub fn spherical_cap() -> ArrayLayout {
        build_spherical_cap(DEFAULT_CAP_RADIUS, 64, CARRIER_25K, false).expect("preset is valid")
    }

    /// 32 + 32 transducers at 25 kHz levitating, plus two 40 kHz receivers
    /// on the lower shell at west and east.
    pub fn dual_frequency_cap() -> ArrayLayout {
        dual_frequency_cap_with(CARRIER_25K, CARRIER_40K)
    }

    /// The dual-frequency cap with the roles swapped: 40 kHz levitating and
    /// 25 kHz receivers.
    pub fn dual_frequency_cap_swapped() -> ArrayLayout {
        dual_frequency_cap_with(CARRIER_40K, CARRIER_25K)
    }

    fn dual_frequency_cap_with(levitation: f64, receiver: f64) -> ArrayLayout {
        let cap = build_spherical_cap(DEFAULT_CAP_RADIUS, 64, levitation, true)
            .expect("preset is valid");
        let polar = 0.66_f64;
        let (r, h) = (
            DEFAULT_CAP_RADIUS * polar.sin(),
            DEFAULT_CAP_RADIUS * polar.cos(),
        );
        let west = Vec3::new(-r, 0.0, -h);
        let east = Vec3::new(r, 0.0, -h);
        let with_west = add_receiver(&cap, west, -west, receiver).expect("preset is valid");
        add_receiver(&with_west, east, -east, receiver).expect("preset is valid")
    }
}
