//! Normalised energy, the density ratio M_r and diagnostics built on it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::{restrict_to_ball, weighted_dot, BoundaryConditions, Face, GridSpec, NodeKind, ScalarField};
use crate::linalg::least_squares;
use crate::potential::{sigma, well};

/// Where to integrate.
#[derive(Debug, Clone, PartialEq)]
pub enum EnergyRegion {
    Whole,
    Ball { center: Vec<f64>, radius: f64 },
}

/// Pointwise density eps |grad u|^2 / 2 + W(u) / eps with centred gradients.
pub fn energy_density(field: &ScalarField) -> Vec<f64> {
    let eps = field.epsilon();
    let g2 = field.gradient_sq();
    field.values().par_iter().zip(g2.par_iter()).map(|(u, g)| 0.5 * eps * g + well(*u) / eps).collect()
}

/// (1 / sigma_{n-1}) int_region (eps |grad u|^2 / 2 + W(u) / eps).
pub fn energy(field: &ScalarField, region: &EnergyRegion) -> Result<f64> {
    let e = energy_density(field);
    energy_of_density(field, &e, region)
}

fn energy_of_density(field: &ScalarField, e: &[f64], region: &EnergyRegion) -> Result<f64> {
    let topo = field.topology();
    let w = match region {
        EnergyRegion::Whole => topo.weights.clone(),
        EnergyRegion::Ball { center, radius } => restrict_to_ball(field.grid(), center, *radius)?.weights(&topo),
    };
    Ok(weighted_dot(&w, e, &vec![1.0; e.len()]) / sigma(field.dim()))
}

/// The discrete energy whose gradient is the finite-difference equation:
/// edge differences for the Dirichlet term, trapezoid weights for W.
/// Normalised by sigma_{n-1} like [`energy`].
pub fn discrete_energy(field: &ScalarField) -> f64 {
    let topo = field.topology();
    let eps = field.epsilon();
    let grad = dirichlet_form(field.grid(), field.bc(), field.values());
    let pot: Vec<f64> = field.values().iter().map(|v| well(*v) / eps).collect();
    (0.5 * eps * grad + weighted_dot(&topo.weights, &pot, &vec![1.0; pot.len()])) / sigma(field.dim())
}

/// Sum over grid edges of w (dx/h)^2, where an edge along axis a carries h
/// times the trapezoid weights of the other axes. Periodic wrap edges are
/// included once.
pub(crate) fn dirichlet_form(grid: &GridSpec, bc: &BoundaryConditions, x: &[f64]) -> f64 {
    let d = grid.dim();
    let mut total = 0.0;
    for a in 0..d {
        let s = grid.stride(a);
        let n = grid.counts()[a];
        let h = grid.spacing()[a];
        let parts: Vec<f64> = (0..grid.len())
            .into_par_iter()
            .with_min_len(4096)
            .map(|idx| {
                let m = grid.unravel(idx);
                if m[a] + 1 >= n {
                    return 0.0;
                }
                let mut w = h;
                for b in 0..d {
                    if b == a {
                        continue;
                    }
                    let nb = grid.counts()[b];
                    let hb = grid.spacing()[b];
                    if bc.is_periodic(b) {
                        if m[b] == nb - 1 {
                            return 0.0;
                        }
                        w *= hb;
                    } else {
                        w *= if m[b] == 0 || m[b] == nb - 1 { 0.5 * hb } else { hb };
                    }
                }
                let dx = (x[idx + s] - x[idx]) / h;
                w * dx * dx
            })
            .collect();
        total += parts.iter().sum::<f64>();
    }
    total
}

/// M_r = r^{1-n} E(B_r) at a list of radii about a centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityProfile {
    pub center: Vec<f64>,
    pub radii: Vec<f64>,
    pub values: Vec<f64>,
    pub epsilon: f64,
}

pub fn density_profile(field: &ScalarField, center: &[f64], radii: &[f64]) -> Result<DensityProfile> {
    if radii.is_empty() || radii.windows(2).any(|w| !(w[1] > w[0])) || radii[0] <= 0.0 {
        return invalid("radii must be positive and strictly increasing");
    }
    let e = energy_density(field);
    let n = field.dim() as i32;
    let values = radii
        .iter()
        .map(|&r| {
            let en = energy_of_density(field, &e, &EnergyRegion::Ball { center: center.to_vec(), radius: r })?;
            Ok(en * r.powi(1 - n))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(DensityProfile { center: center.to_vec(), radii: radii.to_vec(), values, epsilon: field.epsilon() })
}

/// A decrease of M_r between consecutive radii.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Drop {
    pub r_lo: f64,
    pub r_hi: f64,
    pub amount: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    /// Drops larger than tolerance plus quadrature slack.
    pub violations: Vec<Drop>,
    /// Drops above tolerance but within the slack.
    pub within_slack: Vec<Drop>,
    pub tol: f64,
    pub slack: f64,
}

pub const MONOTONE_TOL: f64 = 1e-6;
pub const QUADRATURE_SLACK: f64 = 0.02;

/// Compare consecutive M_r; drops up to tol + slack * M_r count as slack.
pub fn check_monotone(profile: &DensityProfile, tol: f64, slack: f64) -> MonotonicityReport {
    let mut violations = Vec::new();
    let mut within_slack = Vec::new();
    for i in 0..profile.values.len().saturating_sub(1) {
        let (a, b) = (profile.values[i], profile.values[i + 1]);
        let amount = a - b;
        if amount > tol {
            let d = Drop { r_lo: profile.radii[i], r_hi: profile.radii[i + 1], amount };
            if amount > tol + slack * a.abs() {
                violations.push(d);
            } else {
                within_slack.push(d);
            }
        }
    }
    MonotonicityReport { violations, within_slack, tol, slack }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModicaReport {
    pub max_defect: f64,
    pub location: Vec<f64>,
    pub nodes_checked: usize,
}

/// max of eps^2 |grad u|^2 / 2 - W(u) over nodes at least `margin` from
/// every non-periodic face (default 5 eps).
pub fn modica_defect(field: &ScalarField, margin: Option<f64>) -> Result<ModicaReport> {
    let eps = field.epsilon();
    let margin = margin.unwrap_or(5.0 * eps);
    let grid = field.grid();
    let upper = grid.upper();
    let g2 = field.gradient_sq();
    let d = grid.dim();
    let mut best = f64::NEG_INFINITY;
    let mut loc = vec![0.0; d];
    let mut count = 0;
    for idx in 0..grid.len() {
        let p = grid.point(idx);
        let inside =
            (0..d).all(|a| field.bc().is_periodic(a) || (p[a] - grid.lower()[a] >= margin - 1e-12 && upper[a] - p[a] >= margin - 1e-12));
        if !inside {
            continue;
        }
        count += 1;
        let v = 0.5 * eps * eps * g2[idx] - well(field.values()[idx]);
        if v > best {
            best = v;
            loc = p[..d].to_vec();
        }
    }
    if count == 0 {
        return Err(Error::InsufficientData(format!("no nodes farther than {margin} from the boundary")));
    }
    Ok(ModicaReport { max_defect: best, location: loc, nodes_checked: count })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityClass {
    TrivialOrOneDimensional,
    AboveThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllardReport {
    pub class: DensityClass,
    pub plateau: f64,
    pub spread: f64,
}

/// Plateau of the last three radii, compared with 1 + delta.
pub fn allard_classify(profile: &DensityProfile, delta: f64) -> Result<AllardReport> {
    let v = &profile.values;
    if v.len() < 3 {
        return Err(Error::InsufficientData("need at least three radii to detect a plateau".into()));
    }
    let tail = &v[v.len() - 3..];
    let max = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = tail.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = tail.iter().sum::<f64>() / 3.0;
    let spread = if max - min <= 1e-12 { 0.0 } else { (max - min) / mean.abs().max(1e-300) };
    if spread >= 0.01 {
        return Err(Error::InsufficientData(format!("profile has not plateaued (relative spread {spread:.3e})")));
    }
    let class = if mean <= 1.0 + delta { DensityClass::TrivialOrOneDimensional } else { DensityClass::AboveThreshold };
    Ok(AllardReport { class, plateau: mean, spread })
}

/// Fit of log(|grad u|^2/2 + W(u)) = log C - rate * dist over [2 eps, 10 eps].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub amplitude: f64,
    pub rate: f64,
    /// (distance, mean log-density, fit residual) per shell.
    pub shells: Vec<(f64, f64, f64)>,
}

pub const MIN_DECAY_SHELLS: usize = 10;

/// Decay away from the flat layer {x . normal = offset}.
pub fn decay_fit(field: &ScalarField, normal: &[f64], offset: f64) -> Result<DecayFit> {
    let d = field.dim();
    if normal.len() != d {
        return invalid(format!("normal has {} components, field has {d}", normal.len()));
    }
    let nn = normal.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(nn > 0.0) {
        return invalid("layer normal must be non-zero");
    }
    let u = field.values();
    if u.iter().all(|v| v.abs() > 0.5) || u.iter().all(|v| *v > -0.5) || u.iter().all(|v| *v < 0.5) {
        return Err(Error::InsufficientData("field has no transition layer".into()));
    }
    let eps = field.epsilon();
    let g2 = field.gradient_sq();
    let (lo, hi) = (2.0 * eps, 10.0 * eps);
    let width = field.grid().max_spacing().max((hi - lo) / 200.0);
    let nshell = ((hi - lo) / width).floor() as usize;
    let mut sum = vec![0.0; nshell];
    let mut sum_d = vec![0.0; nshell];
    let mut cnt = vec![0usize; nshell];
    let grid = field.grid();
    let upper = grid.upper();
    let topo = field.topology();
    for idx in 0..grid.len() {
        if matches!(topo.kinds[idx], NodeKind::Image(_)) {
            continue;
        }
        let p = grid.point(idx);
        // Stay clear of non-periodic faces, where one-sided gradients and
        // boundary data distort the decay.
        let clear =
            (0..d).all(|a| field.bc().axis(a)[0] == Face::Periodic || (p[a] - grid.lower()[a] > 2.0 * eps && upper[a] - p[a] > 2.0 * eps));
        if !clear {
            continue;
        }
        let dist = ((0..d).map(|a| p[a] * normal[a]).sum::<f64>() / nn - offset).abs();
        if dist < lo || dist >= hi {
            continue;
        }
        let e = 0.5 * g2[idx] + well(u[idx]);
        if !(e > 0.0) {
            continue;
        }
        let k = (((dist - lo) / width) as usize).min(nshell - 1);
        sum[k] += e.ln();
        sum_d[k] += dist;
        cnt[k] += 1;
    }
    let shells: Vec<(f64, f64)> = (0..nshell).filter(|&k| cnt[k] > 0).map(|k| (sum_d[k] / cnt[k] as f64, sum[k] / cnt[k] as f64)).collect();
    if shells.len() < MIN_DECAY_SHELLS {
        return Err(Error::InsufficientData(format!("{} usable shells, need {MIN_DECAY_SHELLS}", shells.len())));
    }
    let rows: Vec<Vec<f64>> = shells.iter().map(|s| vec![1.0, s.0]).collect();
    let y: Vec<f64> = shells.iter().map(|s| s.1).collect();
    let fit = least_squares(&rows, &y)?;
    let (a, b) = (fit.coefficients[0], fit.coefficients[1]);
    let shells = shells.iter().map(|&(x, v)| (x, v, v - a - b * x)).collect();
    Ok(DecayFit { amplitude: a.exp(), rate: -b, shells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{BoundaryConditions, GridSpec};
    use crate::potential::Kink;

    fn kink_1d(eps: f64, l: f64, h: f64) -> ScalarField {
        let g = GridSpec::with_spacing(&[-l], &[l], h).unwrap();
        ScalarField::from_fn(g, BoundaryConditions::uniform(1, Face::Dirichlet), eps, |p| Kink::default().value(p[0] / eps)).unwrap()
    }

    fn plane_2d(l: f64, h: f64, angle: f64, eps: f64) -> ScalarField {
        let g = GridSpec::with_spacing(&[-l, -l], &[l, l], h).unwrap();
        let (c, s) = (angle.cos(), angle.sin());
        ScalarField::from_fn(g, BoundaryConditions::uniform(2, Face::Neumann), eps, move |p| {
            Kink::default().value((c * p[0] + s * p[1]) / eps)
        })
        .unwrap()
    }

    #[test]
    fn constants_and_kink_energy() {
        let g = GridSpec::with_spacing(&[-2.0, -2.0], &[2.0, 2.0], 0.02).unwrap();
        let one = ScalarField::from_fn(g.clone(), BoundaryConditions::uniform(2, Face::Neumann), 1.0, |_| 1.0).unwrap();
        assert_eq!(energy(&one, &EnergyRegion::Whole).unwrap(), 0.0);
        let zero = ScalarField::from_fn(g, BoundaryConditions::uniform(2, Face::Neumann), 1.0, |_| 0.0).unwrap();
        let e = energy(&zero, &EnergyRegion::Ball { center: vec![0.0, 0.0], radius: 1.0 }).unwrap();
        let exact = 3.0 * std::f64::consts::PI / (16.0 * std::f64::consts::SQRT_2);
        assert!((e / exact - 1.0).abs() < 0.01, "{e}");
        let k = kink_1d(1.0, 20.0, 0.01);
        assert!((energy(&k, &EnergyRegion::Whole).unwrap() - 1.0).abs() < 0.01);
        assert!((discrete_energy(&k) - 1.0).abs() < 0.01);
    }

    #[test]
    fn flat_layer_density_is_orientation_independent() {
        for deg in [0.0f64, 30.0, 45.0] {
            let f = plane_2d(20.0, 0.1, deg.to_radians(), 1.0);
            let radii: Vec<f64> = (5..=15).map(|r| r as f64).collect();
            let p = density_profile(&f, &[0.0, 0.0], &radii).unwrap();
            for v in &p.values {
                assert!((v - 1.0).abs() < 0.02, "angle {deg}: {v}");
            }
            assert!(check_monotone(&p, MONOTONE_TOL, QUADRATURE_SLACK).violations.is_empty());
        }
    }

    #[test]
    fn density_rescaling_consistency() {
        let base = plane_2d(20.0, 0.1, 0.0, 1.0);
        for eps in [1.0, 0.5, 0.25] {
            let f = plane_2d(20.0 * eps, 0.1 * eps, 0.0, eps);
            for r in [4.0, 8.0, 12.0] {
                let a = density_profile(&f, &[0.0, 0.0], &[r * eps]).unwrap().values[0];
                let b = density_profile(&base, &[0.0, 0.0], &[r]).unwrap().values[0];
                assert!((a / b - 1.0).abs() < 0.01, "eps={eps} r={r}: {a} {b}");
            }
        }
    }

    #[test]
    fn additivity_of_separated_layers() {
        let g = GridSpec::with_spacing(&[-40.0, -40.0], &[40.0, 40.0], 0.1).unwrap();
        let bc = BoundaryConditions::uniform(2, Face::Neumann);
        for j in 1..=3usize {
            let heights: Vec<f64> = (0..j).map(|i| 5.0 * (2.0 * i as f64 - (j as f64 - 1.0))).collect();
            let f = ScalarField::from_fn(g.clone(), bc.clone(), 1.0, |p| {
                let k = Kink::default();
                // Alternating layers: product of signs across each height.
                heights.iter().enumerate().map(|(i, h)| if i % 2 == 0 { k.value(p[0] - h) } else { -k.value(p[0] - h) }).product()
            })
            .unwrap();
            let p = density_profile(&f, &[0.0, 0.0], &[33.0, 35.0, 37.0]).unwrap();
            let plateau = allard_classify(&p, 0.1).unwrap().plateau;
            assert!((plateau / j as f64 - 1.0).abs() < 0.03, "J={j}: {plateau}");
        }
    }

    #[test]
    fn allard_classes() {
        let f = plane_2d(20.0, 0.1, 0.0, 1.0);
        let p = density_profile(&f, &[0.0, 0.0], &[15.0, 16.0, 17.0]).unwrap();
        assert_eq!(allard_classify(&p, 0.1).unwrap().class, DensityClass::TrivialOrOneDimensional);
        let g = GridSpec::with_spacing(&[-5.0, -5.0], &[5.0, 5.0], 0.1).unwrap();
        let one = ScalarField::from_fn(g, BoundaryConditions::uniform(2, Face::Neumann), 1.0, |_| 1.0).unwrap();
        let p = density_profile(&one, &[0.0, 0.0], &[1.0, 2.0, 3.0]).unwrap();
        let rep = allard_classify(&p, 0.1).unwrap();
        assert_eq!(rep.class, DensityClass::TrivialOrOneDimensional);
        assert_eq!(rep.plateau, 0.0);
        let short = DensityProfile { center: vec![0.0], radii: vec![1.0, 2.0, 3.0], values: vec![0.5, 0.8, 0.9], epsilon: 1.0 };
        assert!(allard_classify(&short, 0.1).is_err());
    }

    #[test]
    fn modica_on_kink_and_zero() {
        let k = kink_1d(1.0, 20.0, 0.01);
        let r = modica_defect(&k, None).unwrap();
        assert!(r.max_defect.abs() < 1e-4);
        let g = GridSpec::with_spacing(&[-20.0], &[20.0], 0.1).unwrap();
        let z = ScalarField::from_fn(g, BoundaryConditions::uniform(1, Face::Neumann), 1.0, |_| 0.0).unwrap();
        assert_eq!(modica_defect(&z, None).unwrap().max_defect, -0.25);
    }

    #[test]
    fn decay_rates() {
        let k = kink_1d(1.0, 20.0, 0.01);
        let fit = decay_fit(&k, &[1.0], 0.0).unwrap();
        assert!(fit.rate > 2.7 && fit.rate < 2.9, "{}", fit.rate);
        let k2 = kink_1d(0.5, 10.0, 0.005);
        let fit2 = decay_fit(&k2, &[1.0], 0.0).unwrap();
        assert!((fit2.rate / fit.rate / 2.0 - 1.0).abs() < 0.05, "{}", fit2.rate);
        let g = GridSpec::with_spacing(&[-20.0], &[20.0], 0.1).unwrap();
        let c = ScalarField::from_fn(g, BoundaryConditions::uniform(1, Face::Neumann), 1.0, |_| 1.0).unwrap();
        assert!(decay_fit(&c, &[1.0], 0.0).is_err());
    }

    #[test]
    fn noise_violates_monotonicity() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let g = GridSpec::with_spacing(&[-16.0, -16.0], &[16.0, 16.0], 0.2).unwrap();
        // Noise confined to a disc; outside it the field sits in a well.
        let vals: Vec<f64> = (0..g.len())
            .map(|i| {
                let p = g.point(i);
                if p[0] * p[0] + p[1] * p[1] < 16.0 {
                    rng.gen_range(-1.0..1.0)
                } else {
                    1.0
                }
            })
            .collect();
        let f = ScalarField::new(g, BoundaryConditions::uniform(2, Face::Neumann), 1.0, vals).unwrap();
        let radii: Vec<f64> = (1..=15).map(|r| r as f64).collect();
        let p = density_profile(&f, &[0.0, 0.0], &radii).unwrap();
        assert!(!check_monotone(&p, MONOTONE_TOL, QUADRATURE_SLACK).violations.is_empty());
    }
}
