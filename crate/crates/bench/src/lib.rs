//! Fixtures shared by the kernel benchmarks.

use std::f64::consts::SQRT_2;

use phaselab::flatness::{graph_sample, AnnularSample};
use phaselab::toda::{liouville_two_layer, liouville_two_layer_slope, TodaConfig, TodaEnd, DEFAULT_KAPPA};
use phaselab::{BoundaryConditions, Face, GridSpec, ScalarField};

/// tanh profile across the line x cos(theta) + y sin(theta) = 0 on [-L, L]^2.
pub fn tilted_kink(half_width: f64, h: f64, theta: f64) -> ScalarField {
    let g = GridSpec::with_spacing(&[-half_width, -half_width], &[half_width, half_width], h).expect("grid");
    let (c, s) = (theta.cos(), theta.sin());
    ScalarField::from_fn(g, BoundaryConditions::uniform(2, Face::Dirichlet), 1.0, |p| ((c * p[0] + s * p[1]) / SQRT_2).tanh())
        .expect("field")
}

/// The 1D kink on [-20, 20] with a smooth perturbation of size `amp`.
pub fn perturbed_kink_1d(h: f64, amp: f64) -> ScalarField {
    let g = GridSpec::with_spacing(&[-20.0], &[20.0], h).expect("grid");
    ScalarField::from_fn(g, BoundaryConditions::uniform(1, Face::Dirichlet), 1.0, |p| (p[0] / SQRT_2).tanh() + amp * (-p[0] * p[0]).exp())
        .expect("field")
}

/// Symmetric two-layer Liouville problem on [r_min, r_max], seeded near
/// the explicit solution.
pub fn liouville_config(mu: f64, r_min: f64, r_max: f64) -> TodaConfig {
    let (a1, a2) = liouville_two_layer(r_min, mu, DEFAULT_KAPPA);
    let (s1, s2) = liouville_two_layer_slope(r_max, mu);
    let mut cfg =
        TodaConfig::new(2, r_min, r_max, vec![TodaEnd::Value(a1), TodaEnd::Value(a2)], vec![TodaEnd::Slope(s1), TodaEnd::Slope(s2)]);
    let grid = cfg.validate().expect("grid");
    let bump = |r: f64| 0.2 * (-(r.ln()).powi(2)).exp();
    let (f1, f2) = grid
        .radii()
        .iter()
        .map(|&r| {
            let (e1, e2) = liouville_two_layer(r, mu, DEFAULT_KAPPA);
            (e1 - bump(r), e2 + bump(r))
        })
        .unzip();
    cfg.initial = Some(vec![f1, f2]);
    cfg
}

/// Graph x3 = 0.02 R^0.6 over annuli 2^0 .. 2^24.
pub fn borderline_graph() -> AnnularSample {
    graph_sample(3, (0, 24), 32, &|r, _| 0.02 * r.powf(0.6), 9).expect("sample")
}
