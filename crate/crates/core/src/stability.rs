//! Second variation, Morse index of the linearised operator, and the
//! Sternberg-Zumbrun curvature quantity.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::dirichlet_form;
use crate::error::{invalid, Error, Result};
use crate::field::{laplacian, stable_sum, BoundaryConditions, Face, GridSpec, NodeKind, ScalarField, MAX_DIM};
use crate::linalg::{cg, dot, norm, solve_tridiagonal, Jacobi, KrylovOptions, LinearOperator, Preconditioner};
use crate::poisson::ShiftedPoisson;
use crate::potential::{sigma, well_d2};

/// Nodes on which test functions may be nonzero. Boundary nodes of
/// non-periodic axes are always excluded (Dirichlet truncation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StabilityRegion {
    Whole,
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    Exterior { center: Vec<f64>, radius: f64 },
    Mask(Vec<bool>),
}

pub fn active_nodes(field: &ScalarField, region: &StabilityRegion) -> Result<Vec<bool>> {
    let grid = field.grid();
    let d = grid.dim();
    let topo = field.topology();
    let check_len = |v: &[f64]| {
        if v.len() != d {
            invalid::<()>(format!("region has {} coordinates on a {d}-dimensional grid", v.len()))
        } else {
            Ok(())
        }
    };
    match region {
        StabilityRegion::Box { lower, upper } => {
            check_len(lower)?;
            check_len(upper)?;
        }
        StabilityRegion::Ball { center, radius } | StabilityRegion::Exterior { center, radius } => {
            check_len(center)?;
            if !(*radius >= 0.0) {
                return invalid("region radius must be non-negative");
            }
        }
        StabilityRegion::Mask(m) if m.len() != grid.len() => {
            return invalid(format!("mask of length {} for {} nodes", m.len(), grid.len()));
        }
        _ => {}
    }
    let mask: Vec<bool> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            if topo.kinds[i] != NodeKind::Free {
                return false;
            }
            let m = grid.unravel(i);
            for a in 0..d {
                if !field.bc().is_periodic(a) && (m[a] == 0 || m[a] + 1 == grid.counts()[a]) {
                    return false;
                }
            }
            let p = grid.point(i);
            let r2 = |c: &[f64]| (0..d).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>();
            match region {
                StabilityRegion::Whole => true,
                StabilityRegion::Box { lower, upper } => (0..d).all(|a| p[a] > lower[a] && p[a] < upper[a]),
                StabilityRegion::Ball { center, radius } => r2(center) < radius * radius,
                StabilityRegion::Exterior { center, radius } => r2(center) > radius * radius,
                StabilityRegion::Mask(m) => m[i],
            }
        })
        .collect();
    Ok(mask)
}

fn check_support(field: &ScalarField, eta: &[f64]) -> Result<Vec<bool>> {
    if eta.len() != field.values().len() {
        return invalid(format!("test function has {} values for {} nodes", eta.len(), field.values().len()));
    }
    let active = active_nodes(field, &StabilityRegion::Whole)?;
    let topo = field.topology();
    for (i, v) in eta.iter().enumerate() {
        let image = matches!(topo.kinds[i], NodeKind::Image(_));
        if !active[i] && !image && *v != 0.0 {
            let m = field.grid().unravel(i);
            return invalid(format!("test function is nonzero on the boundary at {:?}", &m[..field.dim()]));
        }
    }
    Ok(active)
}

/// Q(eta) = (1/sigma) sum (eps |grad eta|^2 + W''(u) eta^2 / eps), with the
/// gradient on grid edges.
pub fn second_variation(field: &ScalarField, eta: &[f64]) -> Result<f64> {
    check_support(field, eta)?;
    let mut x = eta.to_vec();
    field.topology().sync_images(&mut x);
    Ok(quadratic_form(field, &x))
}

fn quadratic_form(field: &ScalarField, x: &[f64]) -> f64 {
    let eps = field.epsilon();
    let topo = field.topology();
    let grad = dirichlet_form(field.grid(), field.bc(), x);
    let terms: Vec<f64> =
        (0..x.len()).into_par_iter().with_min_len(4096).map(|i| topo.weights[i] * well_d2(field.values()[i]) / eps * x[i] * x[i]).collect();
    let pot = stable_sum(&terms);
    (eps * grad + pot) / sigma(field.dim())
}

/// (1/sigma) sum w eta^2, the norm matching `second_variation`.
pub fn normalized_l2(field: &ScalarField, eta: &[f64]) -> f64 {
    let w = field.topology().weights;
    eta.iter().zip(&w).map(|(v, w)| w * v * v).sum::<f64>() / sigma(field.dim())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EigenOptions {
    pub count: usize,
    pub index_tol: f64,
    /// Relative Ritz residual for convergence.
    pub tol: f64,
    pub basis: Option<usize>,
    pub max_restarts: usize,
    pub seed: u64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self { count: 12, index_tol: 1e-4, tol: 1e-11, basis: None, max_restarts: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub eigenvalues: Vec<f64>,
    /// Full-grid layout, sup-norm 1, first nonzero entry positive.
    #[serde(skip)]
    pub eigenvectors: Vec<Vec<f64>>,
    pub morse_index: usize,
    pub index_tol: f64,
    /// Every computed eigenvalue is negative, so only index >= count is known.
    pub unresolved: bool,
    pub restarts: usize,
    pub active_nodes: usize,
}

impl SpectralReport {
    pub fn index_label(&self) -> String {
        if self.unresolved {
            format!(">= {}", self.morse_index)
        } else {
            self.morse_index.to_string()
        }
    }
}

/// L = -eps Delta_h + W''(u)/eps - shift, restricted to active nodes.
struct Linearized<'a> {
    field: &'a ScalarField,
    active: &'a [bool],
    coef: Vec<f64>,
}

impl LinearOperator for Linearized<'_> {
    fn len(&self) -> usize {
        self.active.len()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        laplacian(self.field.grid(), self.field.bc(), x, y);
        let eps = self.field.epsilon();
        y.par_iter_mut().enumerate().for_each(|(i, v)| {
            *v = if self.active[i] { self.coef[i] * x[i] - eps * *v } else { 0.0 };
        });
    }
}

/// Expand a compact vector to the grid; periodic images stay zero.
fn expand(field: &ScalarField, index: &[usize], x: &[f64]) -> Vec<f64> {
    let mut full = vec![0.0; field.values().len()];
    for (k, &i) in index.iter().enumerate() {
        full[i] = x[k];
    }
    full
}

struct ShiftInvert<'a> {
    op: Linearized<'a>,
    index: Vec<usize>,
    tridiagonal: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    precond: Box<dyn Preconditioner + 'a>,
}

impl<'a> ShiftInvert<'a> {
    fn new(field: &'a ScalarField, active: &'a [bool], shift: f64) -> Self {
        let eps = field.epsilon();
        let coef: Vec<f64> = field.values().iter().map(|u| well_d2(*u) / eps - shift).collect();
        let index: Vec<usize> = (0..active.len()).filter(|&i| active[i]).collect();
        let grid = field.grid();
        let tridiagonal = if field.dim() == 1 && !field.bc().is_periodic(0) {
            let e = eps / grid.spacing()[0].powi(2);
            let n = index.len();
            let diag: Vec<f64> = index.iter().map(|&i| coef[i] + 2.0 * e).collect();
            let off: Vec<f64> = (0..n).map(|k| if k + 1 < n && index[k + 1] == index[k] + 1 { -e } else { 0.0 }).collect();
            let sub: Vec<f64> = (0..n).map(|k| if k > 0 { off[k - 1] } else { 0.0 }).collect();
            Some((sub, diag, off))
        } else {
            None
        };
        let (cmin, cmax) = index.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &i| (a.min(coef[i]), b.max(coef[i])));
        let faces: Vec<[Face; 2]> = (0..field.dim()).map(|a| field.bc().axis(a)).collect();
        let precond: Box<dyn Preconditioner> = match ShiftedPoisson::new(grid, &faces, (cmin * cmax).sqrt(), eps) {
            Some(p) if tridiagonal.is_none() => Box::new(p.with_mask(active.to_vec())),
            _ => {
                let s: f64 = grid.spacing().iter().map(|h| 2.0 * eps / (h * h)).sum();
                Box::new(Jacobi(coef.iter().map(|c| c + s).collect()))
            }
        };
        Self { op: Linearized { field, active, coef }, index, tridiagonal, precond }
    }

    fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if let Some((sub, diag, sup)) = &self.tridiagonal {
            return solve_tridiagonal(sub, diag, sup, b);
        }
        let full_b = expand(self.op.field, &self.index, b);
        let mut x = vec![0.0; full_b.len()];
        let mut opts = KrylovOptions::new(1e-13, 10_000);
        opts.precond = Some(self.precond.as_ref());
        let out = cg(&self.op, &full_b, &mut x, &opts);
        if !out.converged && out.relative_residual > 1e-10 {
            return Err(Error::Eigen(format!("inner solve stalled at {:.2e}", out.relative_residual)));
        }
        Ok(self.index.iter().map(|&i| x[i]).collect())
    }

    /// Rayleigh quotient of the unshifted operator in the plain inner product.
    fn rayleigh(&self, x: &[f64], shift: f64) -> f64 {
        let full = expand(self.op.field, &self.index, x);
        let mut y = vec![0.0; full.len()];
        self.op.apply(&full, &mut y);
        let num: f64 = self.index.iter().enumerate().map(|(k, &i)| x[k] * y[i]).sum();
        num / dot(x, x) + shift
    }
}

/// Largest eigenpairs of a symmetric operator by thick-restart Lanczos with
/// full reorthogonalisation.
fn lanczos_largest<F>(n: usize, apply: F, opts: &EigenOptions) -> Result<(Vec<f64>, Vec<Vec<f64>>, usize)>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let k = opts.count.min(n);
    let m = opts.basis.unwrap_or(2 * k + 24).max(k + 8).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut random_unit = |basis: &[Vec<f64>]| {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..2 {
            for b in basis {
                let c = dot(b, &v);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let s = norm(&v);
        v.iter_mut().for_each(|x| *x /= s);
        v
    };
    let mut basis: Vec<Vec<f64>> = vec![random_unit(&[])];
    let mut t = DMatrix::<f64>::zeros(m, m);
    let mut start = 0;
    for restart in 0..=opts.max_restarts {
        let mut beta_last = 0.0;
        let mut residual_vec = Vec::new();
        for j in start..m {
            let mut w = apply(&basis[j])?;
            let scale = norm(&w);
            let mut coefs = vec![0.0; j + 1];
            for _ in 0..2 {
                for (i, b) in basis.iter().enumerate().take(j + 1) {
                    let c = dot(b, &w);
                    coefs[i] += c;
                    w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
                }
            }
            for (i, c) in coefs.iter().enumerate() {
                t[(i, j)] = *c;
                t[(j, i)] = *c;
            }
            let mut beta = norm(&w);
            if beta <= 1e-13 * scale.max(1e-300) {
                // Invariant subspace: continue with a fresh orthogonal direction.
                beta = 0.0;
                w = random_unit(&basis);
            } else {
                w.iter_mut().for_each(|x| *x /= beta);
            }
            if j + 1 < m {
                t[(j + 1, j)] = beta;
                t[(j, j + 1)] = beta;
                basis.push(w);
            } else {
                beta_last = beta;
                residual_vec = w;
            }
        }
        let eig = SymmetricEigen::new(t.clone());
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let converged = order.iter().take(k).all(|&i| {
            let res = (beta_last * eig.eigenvectors[(m - 1, i)]).abs();
            res <= opts.tol * eig.eigenvalues[i].abs().max(1e-300)
        });
        let ritz = |i: usize| -> Vec<f64> {
            let mut x = vec![0.0; n];
            for (j, b) in basis.iter().enumerate() {
                let c = eig.eigenvectors[(j, i)];
                x.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
            }
            x
        };
        if converged || restart == opts.max_restarts {
            if !converged {
                return Err(Error::Eigen(format!("Lanczos did not converge after {restart} restarts")));
            }
            let vals = order.iter().take(k).map(|&i| eig.eigenvalues[i]).collect();
            let vecs = order.iter().take(k).map(|&i| ritz(i)).collect();
            return Ok((vals, vecs, restart));
        }
        let keep = (k + (m - k) / 2).min(m - 1);
        let mut next: Vec<Vec<f64>> = order.iter().take(keep).map(|&i| ritz(i)).collect();
        t.fill(0.0);
        for (a, &i) in order.iter().take(keep).enumerate() {
            t[(a, a)] = eig.eigenvalues[i];
        }
        next.push(residual_vec);
        basis = next;
        start = keep;
    }
    unreachable!()
}

fn normalize_sign(v: &mut [f64]) {
    let s = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if s == 0.0 {
        return;
    }
    let first = v.iter().find(|x| x.abs() > 1e-12 * s).copied().unwrap_or(1.0);
    let f = if first < 0.0 { -1.0 / s } else { 1.0 / s };
    v.iter_mut().for_each(|x| *x *= f);
}

/// Lowest eigenpairs of -eps Delta + W''(u)/eps with zero values off the
/// region, by shift-invert Lanczos.
pub fn morse_index(field: &ScalarField, region: &StabilityRegion, opts: &EigenOptions) -> Result<SpectralReport> {
    if opts.count == 0 {
        return invalid("eigenvalue count must be positive");
    }
    if !(opts.index_tol >= 0.0 && opts.tol > 0.0) {
        return invalid("index_tol must be non-negative and tol positive");
    }
    let active = active_nodes(field, region)?;
    if !active.iter().any(|a| *a) {
        return invalid("stability region contains no interior nodes");
    }
    if let Some((sub, sub_active, map)) = crop_to_active(field, &active)? {
        let mut rep = spectrum_on(&sub, &sub_active, opts)?;
        for v in rep.eigenvectors.iter_mut() {
            let mut full = vec![0.0; field.values().len()];
            for (k, &i) in map.iter().enumerate() {
                full[i] = v[k];
            }
            *v = full;
        }
        return Ok(rep);
    }
    spectrum_on(field, &active, opts)
}

/// Copy of the field on the bounding box of `active` plus one fixed node
/// per side, when that box is interior and at most half the grid. The
/// eigenfunctions vanish off `active`, so Dirichlet data on the cut faces
/// change nothing. Returns the subfield, its active set and the map from
/// subgrid to grid indices.
#[allow(clippy::type_complexity)]
fn crop_to_active(field: &ScalarField, active: &[bool]) -> Result<Option<(ScalarField, Vec<bool>, Vec<usize>)>> {
    let grid = field.grid();
    let d = grid.dim();
    let mut lo = [usize::MAX; MAX_DIM];
    let mut hi = [0usize; MAX_DIM];
    for (i, _) in active.iter().enumerate().filter(|(_, a)| **a) {
        let m = grid.unravel(i);
        for a in 0..d {
            lo[a] = lo[a].min(m[a]);
            hi[a] = hi[a].max(m[a]);
        }
    }
    if (0..d).any(|a| lo[a] == 0 || hi[a] + 1 >= grid.counts()[a]) {
        return Ok(None);
    }
    let counts: Vec<usize> = (0..d).map(|a| hi[a] - lo[a] + 3).collect();
    if 2 * counts.iter().product::<usize>() > grid.len() {
        return Ok(None);
    }
    let lower: Vec<f64> = (0..d).map(|a| grid.coord(a, lo[a] - 1)).collect();
    let sub_grid = GridSpec::from_parts(&lower, grid.spacing(), &counts)?;
    let map: Vec<usize> = (0..sub_grid.len())
        .map(|k| {
            let m = sub_grid.unravel(k);
            let multi: Vec<usize> = (0..d).map(|a| m[a] + lo[a] - 1).collect();
            grid.ravel(&multi)
        })
        .collect();
    let values: Vec<f64> = map.iter().map(|&i| field.values()[i]).collect();
    let sub_active: Vec<bool> = map.iter().map(|&i| active[i]).collect();
    let sub = ScalarField::new(sub_grid, BoundaryConditions::uniform(d, Face::Dirichlet), field.epsilon(), values)?;
    Ok(Some((sub, sub_active, map)))
}

fn spectrum_on(field: &ScalarField, active: &[bool], opts: &EigenOptions) -> Result<SpectralReport> {
    let n = active.iter().filter(|a| **a).count();
    // W'' >= -1 and -Delta >= 0, so this shift lies below the spectrum.
    let shift = -1.0 / field.epsilon() - 1.0;
    let inv = ShiftInvert::new(field, active, shift);
    let (_, vecs, restarts) = lanczos_largest(n, |x| inv.solve(x), opts)?;
    let mut pairs: Vec<(f64, Vec<f64>)> = vecs.into_iter().map(|v| (inv.rayleigh(&v, shift), v)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let eigenvalues: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let eigenvectors: Vec<Vec<f64>> = pairs
        .into_iter()
        .map(|(_, v)| {
            let mut full = expand(field, &inv.index, &v);
            field.topology().sync_images(&mut full);
            normalize_sign(&mut full);
            full
        })
        .collect();
    let morse = eigenvalues.iter().filter(|l| **l < -opts.index_tol).count();
    Ok(SpectralReport {
        unresolved: morse == eigenvalues.len(),
        eigenvalues,
        eigenvectors,
        morse_index: morse,
        index_tol: opts.index_tol,
        restarts,
        active_nodes: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExteriorSweep {
    pub center: Vec<f64>,
    pub radii: Vec<f64>,
    pub indices: Vec<usize>,
    pub lowest: Vec<f64>,
    /// Smallest tested radius whose exterior is stable.
    pub r0: Option<f64>,
}

/// Morse index outside B_R for R = r_min 2^j up to `r_max`. The default
/// `r_max` is half the distance from the centre to the nearest face, so the
/// exterior always contains a slab of width comparable to the box.
pub fn stability_outside_ball(
    field: &ScalarField,
    center: &[f64],
    r_min: f64,
    r_max: Option<f64>,
    opts: &EigenOptions,
) -> Result<ExteriorSweep> {
    if center.len() != field.dim() || !(r_min > 0.0) {
        return invalid("need a centre in the grid dimension and r_min > 0");
    }
    let g = field.grid();
    let inradius = (0..field.dim()).map(|a| (center[a] - g.lower()[a]).min(g.upper()[a] - center[a])).fold(f64::INFINITY, f64::min);
    let r_max = r_max.unwrap_or(0.5 * inradius);
    let mut radii = Vec::new();
    let mut r = r_min;
    while r <= r_max * (1.0 + 1e-12) {
        radii.push(r);
        r *= 2.0;
    }
    if radii.is_empty() {
        return invalid(format!("r_min {r_min} exceeds r_max {r_max}"));
    }
    let sweep_opts = EigenOptions { count: opts.count.min(4), ..opts.clone() };
    let mut indices = Vec::new();
    let mut lowest = Vec::new();
    for &r in &radii {
        let rep = morse_index(field, &StabilityRegion::Exterior { center: center.to_vec(), radius: r }, &sweep_opts)?;
        indices.push(rep.morse_index);
        lowest.push(rep.eigenvalues[0]);
    }
    let r0 = radii.iter().zip(&indices).find(|(_, i)| **i == 0).map(|(r, _)| *r);
    Ok(ExteriorSweep { center: center.to_vec(), radii, indices, lowest, r0 })
}

/// A per node, with A^2 = (|D^2 u|^2 - |grad |grad u||^2) / |grad u|^2.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureQuantity {
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

pub fn sz_quantity(field: &ScalarField) -> CurvatureQuantity {
    let d = field.dim();
    let grad = field.gradient();
    let hess = field.hessian();
    let threshold = 1e-8 / field.epsilon();
    let slot = |i: usize, j: usize| {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        i * d - i * (i + 1) / 2 + j
    };
    let n = field.values().len();
    let (values, valid): (Vec<f64>, Vec<bool>) = (0..n)
        .into_par_iter()
        .map(|p| {
            let g2: f64 = (0..d).map(|a| grad[a][p] * grad[a][p]).sum();
            if g2.sqrt() <= threshold {
                return (0.0, false);
            }
            if d == 1 {
                // Level sets are points; the tangential part is empty.
                return (0.0, true);
            }
            let mut h2 = 0.0;
            let mut hg2 = 0.0;
            for i in 0..d {
                let mut row = 0.0;
                for j in 0..d {
                    let h = hess[slot(i, j)][p];
                    h2 += h * h;
                    row += h * grad[j][p];
                }
                hg2 += row * row;
            }
            let a2 = ((h2 - hg2 / g2) / g2).max(0.0);
            (a2.sqrt(), true)
        })
        .unzip();
    CurvatureQuantity { values, valid }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SzCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: Option<bool>,
    /// Why the comparison was not made.
    pub skipped: Option<String>,
    pub support_index: usize,
}

/// Compare the integrals of A^2 eta^2 |grad u|^2 and |grad eta|^2 |grad u|^2.
/// The comparison is only made when u is stable on the support of eta.
pub fn sz_inequality_check(field: &ScalarField, eta: &[f64], opts: &EigenOptions) -> Result<SzCheck> {
    check_support(field, eta)?;
    let mut eta = eta.to_vec();
    field.topology().sync_images(&mut eta);
    let support: Vec<bool> = eta.iter().map(|v| *v != 0.0).collect();
    if !support.iter().any(|s| *s) {
        return invalid("test function vanishes identically");
    }
    let a = sz_quantity(field);
    let g2 = field.gradient_sq();
    let eta_field = field.with_values(eta.clone())?;
    let eg2 = eta_field.gradient_sq();
    let lhs_vals: Vec<f64> = (0..eta.len()).map(|i| a.values[i].powi(2) * eta[i] * eta[i] * g2[i]).collect();
    let rhs_vals: Vec<f64> = (0..eta.len()).map(|i| eg2[i] * g2[i]).collect();
    let lhs = field.integrate(&lhs_vals);
    let rhs = field.integrate(&rhs_vals);
    let rep = morse_index(field, &StabilityRegion::Mask(support), &EigenOptions { count: opts.count.min(3), ..opts.clone() })?;
    if rep.morse_index > 0 {
        return Ok(SzCheck {
            lhs,
            rhs,
            satisfied: None,
            skipped: Some(format!("u is unstable on the support of eta (index {})", rep.index_label())),
            support_index: rep.morse_index,
        });
    }
    Ok(SzCheck { lhs, rhs, satisfied: Some(lhs <= rhs * (1.0 + 1e-9) + 1e-14), skipped: None, support_index: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{BoundaryConditions, GridSpec};
    use crate::linalg::tridiagonal_eigenvalues;
    use crate::potential::Kink;
    use proptest::prelude::*;

    fn kink_1d(h: f64) -> ScalarField {
        let g = GridSpec::with_spacing(&[-20.0], &[20.0], h).unwrap();
        ScalarField::from_fn(g, BoundaryConditions::uniform(1, Face::Dirichlet), 1.0, |p| Kink::default().value(p[0])).unwrap()
    }

    fn dense_1d(field: &ScalarField, k: usize) -> Vec<f64> {
        let h2 = field.grid().spacing()[0].powi(2);
        let v = field.values();
        let n = v.len();
        let diag: Vec<f64> = (1..n - 1).map(|i| 2.0 / h2 + well_d2(v[i])).collect();
        let off = vec![-1.0 / h2; n - 3];
        tridiagonal_eigenvalues(&diag, &off, k)
    }

    #[test]
    fn lanczos_matches_dense_eigensolve_in_2d() {
        let g = GridSpec::with_spacing(&[-3.0, -3.0], &[3.0, 3.0], 0.25).unwrap();
        let u = ScalarField::from_fn(g, BoundaryConditions::uniform(2, Face::Dirichlet), 1.0, |p| Kink::default().value(p[0] + 0.3 * p[1]))
            .unwrap();
        let n = u.grid().counts()[0];
        let h2 = 0.25f64 * 0.25;
        let inner: Vec<usize> = (0..u.grid().len())
            .filter(|&i| {
                let m = u.grid().unravel(i);
                m[0] > 0 && m[1] > 0 && m[0] + 1 < n && m[1] + 1 < n
            })
            .collect();
        let pos: std::collections::HashMap<usize, usize> = inner.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let mut a = DMatrix::<f64>::zeros(inner.len(), inner.len());
        for (k, &i) in inner.iter().enumerate() {
            a[(k, k)] = 4.0 / h2 + well_d2(u.values()[i]);
            for j in [i + 1, i - 1, i + n, i - n] {
                if let Some(&l) = pos.get(&j) {
                    a[(k, l)] = -1.0 / h2;
                }
            }
        }
        let mut dense: Vec<f64> = SymmetricEigen::new(a).eigenvalues.iter().copied().collect();
        dense.sort_by(f64::total_cmp);
        let rep = morse_index(&u, &StabilityRegion::Whole, &EigenOptions { count: 6, ..Default::default() }).unwrap();
        for (x, y) in rep.eigenvalues.iter().zip(&dense) {
            assert!((x - y).abs() < 1e-8, "{:?} vs {:?}", rep.eigenvalues, &dense[..6]);
        }
    }

    #[test]
    fn cropped_and_full_grid_spectra_agree() {
        let g = GridSpec::with_spacing(&[-10.0, -10.0], &[10.0, 10.0], 0.1).unwrap();
        let u =
            ScalarField::from_fn(g, BoundaryConditions::uniform(2, Face::Dirichlet), 1.0, |p| Kink::default().value(p[0] - p[1])).unwrap();
        let disc = |c: [f64; 2]| -> Vec<bool> {
            (0..u.grid().len())
                .map(|i| {
                    let p = u.grid().point(i);
                    (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) < 4.0
                })
                .collect()
        };
        let (a, b) = (disc([-7.0, -7.0]), disc([7.0, 7.0]));
        let both: Vec<bool> = a.iter().zip(&b).map(|(x, y)| *x || *y).collect();
        let opts = EigenOptions { count: 2, ..Default::default() };
        // Each disc alone is cropped; their union spans the grid and is not.
        let la = morse_index(&u, &StabilityRegion::Mask(a), &opts).unwrap().eigenvalues;
        let lb = morse_index(&u, &StabilityRegion::Mask(b), &opts).unwrap().eigenvalues;
        let lu = morse_index(&u, &StabilityRegion::Mask(both), &EigenOptions { count: 4, ..Default::default() }).unwrap();
        let mut merged = [la, lb].concat();
        merged.sort_by(f64::total_cmp);
        for (x, y) in merged.iter().zip(&lu.eigenvalues) {
            assert!((x - y).abs() < 1e-9, "{merged:?} vs {:?}", lu.eigenvalues);
        }
        assert_eq!(lu.eigenvectors[0].len(), u.grid().len());
    }

    #[test]
    fn kink_spectrum_matches_sturm_bisection() {
        let u = kink_1d(0.01);
        let rep = morse_index(&u, &StabilityRegion::Whole, &EigenOptions::default()).unwrap();
        assert!(rep.eigenvalues[0].abs() < 0.02);
        assert!((rep.eigenvalues[1] - 1.5).abs() < 0.05);
        assert_eq!(rep.morse_index, 0);
        let dense = dense_1d(&u, 12);
        for (a, b) in rep.eigenvalues.iter().zip(&dense) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        for (l, v) in rep.eigenvalues.iter().zip(&rep.eigenvectors) {
            let q = second_variation(&u, v).unwrap() / normalized_l2(&u, v);
            assert!((q - l).abs() <= 1e-6 * (1.0 + l.abs()));
        }
    }

    #[test]
    fn constant_states() {
        let g = GridSpec::with_spacing(&[-20.0, -20.0], &[20.0, 20.0], 0.5).unwrap();
        let bc = BoundaryConditions::uniform(2, Face::Dirichlet);
        let one = ScalarField::from_fn(g.clone(), bc.clone(), 1.0, |_| 1.0).unwrap();
        let opts = EigenOptions { count: 4, ..Default::default() };
        let rep = morse_index(&one, &StabilityRegion::Whole, &opts).unwrap();
        assert!(rep.eigenvalues[0] > 2.0 - 1e-9 && rep.morse_index == 0);
        let zero = ScalarField::from_fn(g, bc, 1.0, |_| 0.0).unwrap();
        let rep = morse_index(&zero, &StabilityRegion::Whole, &opts).unwrap();
        let expected = -1.0 + 2.0 * (4.0 / 0.25) * (std::f64::consts::PI / 160.0).sin().powi(2);
        assert!((rep.eigenvalues[0] - expected).abs() < 1e-8, "{} {expected}", rep.eigenvalues[0]);
        assert!(rep.morse_index >= 1 && rep.unresolved);
        assert_eq!(rep.index_label(), ">= 4");
    }

    #[test]
    fn periodic_zero_state_is_unstable() {
        let g = GridSpec::with_spacing(&[0.0, 0.0], &[10.0, 10.0], 0.25).unwrap();
        let u = ScalarField::from_fn(g, BoundaryConditions::uniform(2, Face::Periodic), 1.0, |_| 0.0).unwrap();
        let rep = morse_index(&u, &StabilityRegion::Whole, &EigenOptions { count: 3, ..Default::default() }).unwrap();
        assert!((rep.eigenvalues[0] + 1.0).abs() < 1e-8);
        assert!(rep.morse_index >= 1);
    }

    #[test]
    fn second_variation_examples() {
        let u = kink_1d(0.01);
        let k = Kink::default();
        let taper = |x: f64| crate::potential::cutoff(x / 10.0).0;
        let eta: Vec<f64> = (0..u.values().len())
            .map(|i| {
                let x = u.grid().coord(0, i);
                k.eval(x).dg * taper(x)
            })
            .collect();
        assert!(second_variation(&u, &eta).unwrap().abs() <= 1e-3);
        let g = GridSpec::with_spacing(&[-10.0], &[10.0], 0.05).unwrap();
        let bc = BoundaryConditions::uniform(1, Face::Dirichlet);
        let bump = |x: f64| (1.0 - (x / 10.0).powi(2)).max(0.0).powi(2);
        let one = ScalarField::from_fn(g.clone(), bc.clone(), 1.0, |_| 1.0).unwrap();
        let eta: Vec<f64> = (0..one.values().len()).map(|i| bump(one.grid().coord(0, i))).collect();
        assert!(second_variation(&one, &eta).unwrap() > 0.0);
        let zero = ScalarField::from_fn(g, bc, 1.0, |_| 0.0).unwrap();
        assert!(second_variation(&zero, &eta).unwrap() < 0.0);
        let mut bad = eta.clone();
        bad[0] = 1.0;
        assert!(second_variation(&zero, &bad).is_err());
    }

    #[test]
    fn exterior_sweeps() {
        let u = kink_1d(0.02);
        let opts = EigenOptions { count: 2, ..Default::default() };
        let sweep = stability_outside_ball(&u, &[0.0], 1.0, None, &opts).unwrap();
        assert_eq!(sweep.r0, Some(1.0));
        let g = GridSpec::with_spacing(&[-40.0, -40.0], &[40.0, 40.0], 1.0).unwrap();
        let zero = ScalarField::from_fn(g, BoundaryConditions::uniform(2, Face::Dirichlet), 1.0, |_| 0.0).unwrap();
        let sweep = stability_outside_ball(&zero, &[0.0, 0.0], 1.0, None, &opts).unwrap();
        assert_eq!(sweep.r0, None);
        assert!(sweep.indices.iter().all(|i| *i > 0));
    }

    #[test]
    fn index_is_monotone_under_inclusion() {
        let g = GridSpec::with_spacing(&[-12.0, -12.0], &[12.0, 12.0], 0.5).unwrap();
        let zero = ScalarField::from_fn(g, BoundaryConditions::uniform(2, Face::Dirichlet), 1.0, |_| 0.0).unwrap();
        let opts = EigenOptions { count: 30, ..Default::default() };
        let mut last = 0;
        for half in [2.0, 3.0, 5.0, 8.0] {
            let region = StabilityRegion::Box { lower: vec![-half; 2], upper: vec![half; 2] };
            let rep = morse_index(&zero, &region, &opts).unwrap();
            assert!(!rep.unresolved);
            assert!(rep.morse_index >= last);
            last = rep.morse_index;
        }
        assert!(last >= 2);
    }

    #[test]
    fn curvature_quantity() {
        let g = GridSpec::with_spacing(&[-10.0, -10.0], &[10.0, 10.0], 0.05).unwrap();
        let bc = BoundaryConditions::uniform(2, Face::Neumann);
        let k = Kink::default();
        let line = GridSpec::with_spacing(&[-20.0], &[20.0], 0.01).unwrap();
        let kink = ScalarField::from_fn(line, BoundaryConditions::uniform(1, Face::Dirichlet), 1.0, |p| k.value(p[0])).unwrap();
        let a = sz_quantity(&kink);
        assert!(a.values.iter().zip(&a.valid).all(|(v, ok)| !ok || *v == 0.0));
        let flat = ScalarField::from_fn(g.clone(), bc.clone(), 1.0, |p| k.value(p[0] + 0.3 * p[1])).unwrap();
        let a = sz_quantity(&flat);
        // Away from the layer |grad u| is tiny and A is dominated by
        // finite-difference error.
        let near = (0..a.values.len()).filter(|&i| flat.values()[i].abs() < 0.9);
        assert!(near.map(|i| a.values[i]).fold(0.0, f64::max) < 1e-3);
        let circle = ScalarField::from_fn(g.clone(), bc.clone(), 1.0, |p| k.value(p[0].hypot(p[1]) - 5.0)).unwrap();
        let a = sz_quantity(&circle);
        let mut worst: f64 = 0.0;
        for i in 0..circle.values().len() {
            let p = g.point(i);
            let r = p[0].hypot(p[1]);
            if (r - 5.0).abs() < 0.5 {
                worst = worst.max((a.values[i] * r - 1.0).abs());
            }
        }
        assert!(worst < 0.05, "{worst}");
        let c = ScalarField::from_fn(g, bc, 1.0, |_| 0.5).unwrap();
        let a = sz_quantity(&c);
        assert!(a.valid.iter().all(|v| !v) && a.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sz_inequality_cases() {
        let g = GridSpec::with_spacing(&[-12.0, -12.0], &[12.0, 12.0], 0.1).unwrap();
        let bc = BoundaryConditions::uniform(2, Face::Dirichlet);
        let k = Kink::default();
        let opts = EigenOptions { count: 2, ..Default::default() };
        let eta_of = |f: &ScalarField, c: f64, r: f64| -> Vec<f64> {
            (0..f.values().len())
                .map(|i| {
                    let p = f.grid().point(i);
                    let d = ((p[0] - c).powi(2) + p[1] * p[1]).sqrt() / r;
                    (1.0 - d * d).max(0.0).powi(2)
                })
                .collect()
        };
        let kink = ScalarField::from_fn(g.clone(), bc.clone(), 1.0, |p| k.value(p[0])).unwrap();
        let chk = sz_inequality_check(&kink, &eta_of(&kink, 0.0, 6.0), &opts).unwrap();
        assert_eq!(chk.satisfied, Some(true));
        assert!(chk.lhs < 1e-8 * chk.rhs);
        let zero = ScalarField::from_fn(g, bc, 1.0, |_| 0.0).unwrap();
        let chk = sz_inequality_check(&zero, &eta_of(&zero, 0.0, 8.0), &opts).unwrap();
        assert!(chk.satisfied.is_none() && chk.skipped.is_some());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn disjoint_supports_add(a in 0.1f64..2.0, b in 0.1f64..2.0, shift in -3.0f64..3.0) {
            let g = GridSpec::with_spacing(&[-20.0], &[20.0], 0.05).unwrap();
            let u = ScalarField::from_fn(g, BoundaryConditions::uniform(1, Face::Dirichlet), 1.0, |p| Kink::default().value(p[0] - shift)).unwrap();
            let bump = |x: f64, c: f64, amp: f64| amp * (1.0 - ((x - c) / 4.0).powi(2)).max(0.0).powi(2);
            let e1: Vec<f64> = (0..u.values().len()).map(|i| bump(u.grid().coord(0, i), -8.0, a)).collect();
            let e2: Vec<f64> = (0..u.values().len()).map(|i| bump(u.grid().coord(0, i), 8.0, b)).collect();
            let sum: Vec<f64> = e1.iter().zip(&e2).map(|(x, y)| x + y).collect();
            let q = second_variation(&u, &sum).unwrap();
            let parts = second_variation(&u, &e1).unwrap() + second_variation(&u, &e2).unwrap();
            prop_assert!((q - parts).abs() <= 1e-12 * (1.0 + q.abs()));
        }
    }
}
