use std::collections::BTreeMap;
use std::f64::consts::SQRT_2;

use phaselab::energy::{energy, modica_defect, EnergyRegion};
use phaselab::io::{read_field, write_field};
use phaselab::levelset::{extract_layers, layer_geometry, LevelOptions};
use phaselab::solver::{newton_refine, residual, solve, sup_norm, SolveConfig};
use phaselab::stability::{morse_index, EigenOptions, StabilityRegion};
use phaselab::{BoundaryConditions, Face, GridSpec, ScalarField};
use proptest::prelude::*;

fn tilted_kink(theta: f64, h: f64) -> ScalarField {
    let g = GridSpec::with_spacing(&[-8.0, -8.0], &[8.0, 8.0], h).unwrap();
    let (c, s) = (theta.cos(), theta.sin());
    ScalarField::from_fn(g, BoundaryConditions::uniform(2, Face::Dirichlet), 1.0, |p| ((c * p[0] + s * p[1]) / SQRT_2).tanh()).unwrap()
}

#[test]
fn tilted_layer_solve_extract_and_roundtrip() {
    let theta: f64 = 0.3;
    let (u, rep) = newton_refine(&tilted_kink(theta, 0.1), &SolveConfig::default()).unwrap();
    assert!(rep.converged, "{rep:?}");
    assert!(modica_defect(&u, Some(2.0)).unwrap().max_defect < 5e-3);

    let layers = extract_layers(&u, 0.0, &LevelOptions { axis: Some(0), ..Default::default() }).unwrap();
    assert_eq!(layers.heights.len(), 1);
    let geo = layer_geometry(&layers).unwrap();
    for (k, x) in layers.heights[0].iter().enumerate() {
        let y = layers.base.point(k)[0];
        if y.abs() < 6.0 {
            assert!((x + y * theta.tan()).abs() < 2e-3, "y={y}: x={x}");
            assert!(geo.mean_curvature[0][k].abs() < 1e-2);
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let (_, json) = write_field(dir.path(), "u", &u, &BTreeMap::new()).unwrap();
    let back = read_field(&json).unwrap();
    assert_eq!(back.values(), u.values());
    assert_eq!(sup_norm(&residual(&back)), sup_norm(&residual(&u)));
}

#[test]
fn relaxation_from_sign_data_is_stable_with_one_zero_mode() {
    let g = GridSpec::with_spacing(&[-12.0], &[12.0], 0.02).unwrap();
    let sign = ScalarField::from_fn(g, BoundaryConditions::uniform(1, Face::Dirichlet), 1.0, |p| p[0].signum()).unwrap();
    let (u, rep) = solve(&sign, &SolveConfig::default()).unwrap();
    assert!(rep.converged && rep.final_residual < 1e-8);
    assert!(rep.energy_history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    // Normalized energy of one layer is 1.
    let e = energy(&u, &EnergyRegion::Whole).unwrap();
    assert!((e - 1.0).abs() < 1e-4, "{e}");
    let spec = morse_index(&u, &StabilityRegion::Whole, &EigenOptions { count: 3, ..Default::default() }).unwrap();
    assert_eq!(spec.morse_index, 0);
    assert!(spec.eigenvalues[0].abs() < 0.02 && spec.eigenvalues[1] > 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn energy_is_translation_invariant(shift in -3.0f64..3.0) {
        let g = GridSpec::with_spacing(&[-20.0], &[20.0], 0.02).unwrap();
        let bc = BoundaryConditions::uniform(1, Face::Neumann);
        let base = ScalarField::from_fn(g.clone(), bc.clone(), 1.0, |p| (p[0] / SQRT_2).tanh()).unwrap();
        let moved = ScalarField::from_fn(g, bc, 1.0, |p| ((p[0] - shift) / SQRT_2).tanh()).unwrap();
        let (a, b) = (energy(&base, &EnergyRegion::Whole).unwrap(), energy(&moved, &EnergyRegion::Whole).unwrap());
        prop_assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn residual_is_odd(theta in 0.0f64..1.5, amp in 0.1f64..1.0) {
        let u = tilted_kink(theta, 0.25);
        let v: Vec<f64> = u.values().iter().map(|x| amp * x).collect();
        let plus = u.with_values(v.clone()).unwrap();
        let minus = u.with_values(v.iter().map(|x| -x).collect()).unwrap();
        for (a, b) in residual(&plus).iter().zip(residual(&minus)) {
            prop_assert!((a + b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
