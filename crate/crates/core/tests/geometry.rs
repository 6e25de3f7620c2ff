use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use sonotrap_core::field::trap::axial_nodes;
use sonotrap_core::field::{calibrated_source_amplitude, focused_field};
use sonotrap_core::geometry::*;
use sonotrap_core::medium::MediumState;
use sonotrap_core::{Error, Vec3};

#[test]
fn flat_preset_shape() {
    let flat = presets::flat_8x8();
    assert_eq!(flat.transducers().len(), 64);
    assert_eq!(flat.emitter_count(), 64);
    assert_eq!(flat.kind(), LayoutKind::Flat);
    assert_abs_diff_eq!(flat.side_length(), 132.0);
    for (i, t) in flat.transducers().iter().enumerate() {
        assert_eq!(t.id, i);
        assert_eq!(t.normal, Vec3::z());
        assert_eq!(t.position.z, 0.0);
        assert_eq!(t.carrier_frequency, CARRIER_40K);
    }
}

#[test]
fn corner_matches_grid_enumeration() {
    let flat = presets::flat_8x8();
    let mut expected = Vec::new();
    for iy in 0..8 {
        for ix in 0..8 {
            expected.push((ix as f64 * 16.5 - 57.75, iy as f64 * 16.5 - 57.75));
        }
    }
    let mut found: Vec<_> = flat.transducers().iter().map(|t| (t.position.x, t.position.y)).collect();
    let key = |p: &(f64, f64)| (p.1, p.0);
    found.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap());
    for (f, e) in found.iter().zip(&expected) {
        assert_abs_diff_eq!(f.0, e.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.1, e.1, epsilon = 1e-12);
    }
    assert!(found.contains(&(-57.75, -57.75)));
}

#[test]
fn degenerate_grid_and_bad_pitch() {
    let one = build_flat_array(1, 1, 10.0, CARRIER_40K).unwrap();
    assert_eq!(one.transducers().len(), 1);
    assert_eq!(one.transducers()[0].position, Vec3::zeros());
    assert!(matches!(build_flat_array(8, 8, 0.0, CARRIER_40K), Err(Error::InvalidArgument(_))));
    assert!(matches!(build_flat_array(8, 8, -1.0, CARRIER_40K), Err(Error::InvalidArgument(_))));
}

#[test]
fn spherical_caps() {
    let cap = build_spherical_cap(100.0, 64, CARRIER_25K, false).unwrap();
    assert_eq!(cap.transducers().len(), 64);
    for t in cap.transducers() {
        assert_abs_diff_eq!(t.position.norm(), 100.0, epsilon = 1e-6);
        assert_abs_diff_eq!(t.normal.norm(), 1.0, epsilon = 1e-9);
        // Facing the centre of curvature.
        assert_abs_diff_eq!((t.normal + t.position / 100.0).norm(), 0.0, epsilon = 1e-9);
    }

    let double = build_spherical_cap(100.0, 64, CARRIER_25K, true).unwrap();
    assert_eq!(double.kind(), LayoutKind::DoubleSided);
    let top = double.transducers().iter().filter(|t| t.position.z > 0.0).count();
    let bottom = double.transducers().iter().filter(|t| t.position.z < 0.0).count();
    assert_eq!((top, bottom), (32, 32));
    assert!(build_spherical_cap(100.0, 63, CARRIER_25K, true).is_err());

    let single = build_spherical_cap(100.0, 1, CARRIER_25K, false).unwrap();
    let t = &single.transducers()[0];
    assert_abs_diff_eq!(t.position.x, 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(t.position.y, 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!((t.normal + Vec3::z()).norm(), 0.0, epsilon = 1e-12);
}

#[test]
fn crowded_cap_is_infeasible() {
    assert!(matches!(
        build_spherical_cap(20.0, 64, CARRIER_25K, false),
        Err(Error::LayoutInfeasible(_))
    ));
}

#[test]
fn reflector_rules() {
    let flat = presets::flat_8x8();
    let r = add_reflector(&flat, 100.0).unwrap();
    assert_eq!(r.kind(), LayoutKind::FlatWithReflector);
    assert_eq!(r.reflector_z(), Some(100.0));
    assert!(matches!(add_reflector(&flat, -5.0), Err(Error::InvalidArgument(_))));
    assert!(add_reflector(&presets::spherical_cap(), 100.0).is_err());
}

#[test]
fn reflector_node_count_matches_brute_force_scan() {
    let medium = MediumState::reference();
    let layout = presets::flat_with_reflector(85.0).unwrap();
    let (_, model) = focused_field(&layout, Vec3::new(0.0, 0.0, 60.0), &medium, calibrated_source_amplitude()).unwrap();
    let (lo, hi) = (5.0, 85.0);
    let nodes = axial_nodes(&model, 0.0, 0.0, lo, hi).unwrap();

    // Local minima of |p| on a 0.01 mm grid.
    let n = ((hi - lo) / 0.01) as usize;
    let mag: Vec<f64> = (0..=n)
        .map(|i| model.pressure(&Vec3::new(0.0, 0.0, lo + i as f64 * 0.01)).unwrap().norm())
        .collect();
    let minima: Vec<f64> = (1..n)
        .filter(|&i| mag[i] < mag[i - 1] && mag[i] <= mag[i + 1])
        .map(|i| lo + i as f64 * 0.01)
        .collect();
    assert_eq!(nodes.len(), minima.len(), "{nodes:?} vs {minima:?}");
    for (a, b) in nodes.iter().zip(&minima) {
        assert!((a - b).abs() < 0.02);
    }
    // Close to the array the incident field has no clean standing-wave
    // structure; from the first node up to the plate the count follows λ/2.
    let lambda = model.wavelength();
    let ideal = 2.0 * (hi - nodes[0]) / lambda;
    assert!((nodes.len() as f64 - ideal).abs() <= 1.0, "{nodes:?}, ideal {ideal}");
    assert!((hi - nodes.last().unwrap() - lambda / 4.0).abs() < 0.5);
}

#[test]
fn receivers() {
    let flat = presets::flat_8x8();
    let echo = mark_receivers(&flat, &[0, 7], CARRIER_40K).unwrap();
    assert_eq!(echo.emitter_count(), 62);
    assert_eq!(echo.receivers().count(), 2);
    assert_eq!(mark_receivers(&flat, &[], CARRIER_40K).unwrap(), flat);
    assert!(matches!(
        mark_receivers(&flat, &[0, 1, 2], CARRIER_40K),
        Err(Error::AdcChannelLimit { limit: 2, requested: 3 })
    ));
    assert!(mark_receivers(&flat, &[64], CARRIER_40K).is_err());
}

#[test]
fn preset_role_counts() {
    let presets = [
        (presets::flat_8x8(), 64, 0),
        (presets::flat_echo(), 62, 2),
        (presets::flat_echo_west_east(), 62, 2),
        (presets::flat_echo_north_south(), 62, 2),
        (presets::spherical_cap(), 64, 0),
        (presets::dual_frequency_cap(), 64, 2),
        (presets::dual_frequency_cap_swapped(), 64, 2),
    ];
    for (layout, emitters, receivers) in presets {
        assert!([64, 66].contains(&layout.transducers().len()));
        assert_eq!(layout.emitter_count(), emitters);
        assert_eq!(layout.receivers().count(), receivers);
        for t in layout.transducers() {
            assert!([CARRIER_25K, CARRIER_40K].contains(&t.carrier_frequency));
        }
    }
    let dual = presets::dual_frequency_cap();
    assert!(dual.emitters().all(|t| t.carrier_frequency == CARRIER_25K));
    assert!(dual.receivers().all(|t| t.carrier_frequency == CARRIER_40K));
}

#[test]
fn json_round_trip_and_field_names() {
    for layout in [presets::flat_echo(), presets::flat_with_reflector(100.0).unwrap(), presets::dual_frequency_cap()] {
        let text = layout.to_json();
        assert_eq!(ArrayLayout::from_json(&text).unwrap(), layout);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let t = &v["transducers"][0];
        for key in ["id", "pos", "normal", "radius", "freq", "role"] {
            assert!(t.get(key).is_some(), "missing {key}");
        }
    }
    assert!(ArrayLayout::from_json("{\"kind\":\"Flat\"}").is_err());
}

#[test]
fn working_volume_above_flat_arrays() {
    for layout in [presets::flat_8x8(), presets::flat_with_reflector(100.0).unwrap()] {
        let v = layout.working_volume();
        assert!(v.z_range.0 > 0.0 && v.z_range.0 < v.z_range.1);
        assert!(v.contains(&Vec3::new(0.0, 0.0, 100.0)));
        assert!(!v.contains(&Vec3::new(0.0, 0.0, -10.0)));
    }
}

proptest! {
    #[test]
    fn flat_distances_mirror_symmetric(nx in 1usize..10, ny in 1usize..10, pitch in 16.0f64..30.0) {
        let layout = build_flat_array(nx, ny, pitch, CARRIER_40K).unwrap();
        let sorted = |f: &dyn Fn(&Vec3) -> Vec3| {
            let mut d: Vec<f64> = layout.transducers().iter().map(|t| f(&t.position).norm()).collect();
            d.sort_by(f64::total_cmp);
            d
        };
        let base = sorted(&|p| *p);
        let fx = sorted(&|p| Vec3::new(-p.x, p.y, p.z));
        let fy = sorted(&|p| Vec3::new(p.x, -p.y, p.z));
        for ((a, b), c) in base.iter().zip(&fx).zip(&fy) {
            prop_assert!((a - b).abs() < 1e-9 && (a - c).abs() < 1e-9);
        }
        prop_assert!((layout.side_length() - nx.max(ny) as f64 * pitch).abs() < 1e-9);
        // Channel ids contiguous from zero.
        for (i, t) in layout.transducers().iter().enumerate() {
            prop_assert_eq!(t.id, i);
        }
    }
}

#[test]
fn retuned_emitters_keep_receivers() {
    let echo = presets::flat_echo();
    let retuned = with_emitter_carrier(&echo, CARRIER_25K).unwrap();
    assert_eq!(retuned.emitter_carrier().unwrap(), CARRIER_25K);
    assert!(retuned.receivers().all(|t| t.carrier_frequency == CARRIER_40K));
    assert_eq!(retuned.transducers().len(), echo.transducers().len());
    assert!(with_emitter_carrier(&echo, 0.0).is_err());
}
