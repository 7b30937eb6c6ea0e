//! Critical points of the Allen-Cahn energy: stabilised semi-implicit
//! gradient flow, Newton polishing, and radial two-point problems.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::discrete_energy;
use crate::error::{invalid, Error, Result};
use crate::field::{laplacian, three_point, Face, NodeKind, RadialField, ScalarField, Topology};
use crate::linalg::{cg, minres, solve_tridiagonal, Jacobi, KrylovOptions, LinearOperator, Preconditioner};
use crate::poisson::ShiftedPoisson;
use crate::potential::{well_d1, well_d2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stepping {
    /// Diffusion implicit, W' explicit with a stabilising shift.
    SemiImplicit,
    /// Forward Euler; dt is bounded by the diffusion limit.
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveConfig {
    pub max_iterations: usize,
    /// Target for the sup-norm of eps Delta u - W'(u)/eps.
    pub residual_tol: f64,
    /// Defaults to eps (semi-implicit) or 0.2 of the explicit bound.
    pub time_step: Option<f64>,
    pub stepping: Stepping,
    /// Shift S in (1/dt + S/eps) for semi-implicit steps.
    pub stabilization: f64,
    pub newton_switch_tol: f64,
    pub max_newton: usize,
    pub damping: f64,
    pub linear_tol: f64,
    pub max_linear: usize,
    /// Accept an explicit dt above the stability bound and disable step
    /// rejection, to reproduce the instability.
    pub allow_unstable_step: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            max_iterations: 5000,
            residual_tol: 1e-8,
            time_step: None,
            stepping: Stepping::SemiImplicit,
            stabilization: 2.0,
            newton_switch_tol: 1e-3,
            max_newton: 30,
            damping: 1.0,
            linear_tol: 1e-12,
            max_linear: 5000,
            allow_unstable_step: false,
        }
    }
}

/// Largest stable forward-Euler step for eps Delta_h.
pub fn explicit_step_bound(field: &ScalarField) -> f64 {
    let s: f64 = field.grid().spacing().iter().map(|h| 1.0 / (h * h)).sum();
    1.0 / (2.0 * field.epsilon() * s)
}

impl SolveConfig {
    pub fn validate(&self, field: &ScalarField) -> Result<()> {
        for (name, v) in
            [("residual_tol", self.residual_tol), ("newton_switch_tol", self.newton_switch_tol), ("linear_tol", self.linear_tol)]
        {
            if !(v > 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return invalid(format!("damping must lie in (0, 1], got {}", self.damping));
        }
        if !(self.stabilization >= 0.0) {
            return invalid("stabilization must be non-negative");
        }
        if let Some(dt) = self.time_step {
            if !(dt > 0.0 && dt.is_finite()) {
                return invalid(format!("time_step must be positive, got {dt}"));
            }
            let bound = explicit_step_bound(field);
            if self.stepping == Stepping::Explicit && dt > bound && !self.allow_unstable_step {
                return invalid(format!("explicit time_step {dt:.3e} exceeds the stability bound {bound:.3e}"));
            }
        }
        Ok(())
    }

    pub fn effective_time_step(&self, field: &ScalarField) -> f64 {
        self.time_step.unwrap_or(match self.stepping {
            Stepping::SemiImplicit => field.epsilon(),
            Stepping::Explicit => 0.2 * explicit_step_bound(field),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub newton_steps: usize,
    pub final_residual: f64,
    pub residual_history: Vec<f64>,
    pub energy_history: Vec<f64>,
    pub converged: bool,
    pub rejected_steps: usize,
    /// Newton met an indefinite linearisation and switched to MINRES.
    pub indefinite: bool,
    pub time_step: f64,
}

/// -eps Delta u + W'(u)/eps at free nodes, zero elsewhere.
pub fn residual(field: &ScalarField) -> Vec<f64> {
    let topo = field.topology();
    residual_with(field, &topo)
}

fn residual_with(field: &ScalarField, topo: &Topology) -> Vec<f64> {
    let eps = field.epsilon();
    let mut lap = vec![0.0; field.values().len()];
    laplacian(field.grid(), field.bc(), field.values(), &mut lap);
    lap.par_iter_mut().zip(field.values().par_iter()).zip(topo.kinds.par_iter()).for_each(|((l, u), k)| {
        *l = if *k == NodeKind::Free { -eps * *l + well_d1(*u) / eps } else { 0.0 };
    });
    lap
}

pub fn sup_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |a, v| a.max(v.abs()))
}

/// x -> c x - eps Delta_h x (c per node) on free nodes.
struct ShiftedLaplacian<'a> {
    field: &'a ScalarField,
    free: &'a [bool],
    coef: Vec<f64>,
}

impl LinearOperator for ShiftedLaplacian<'_> {
    fn len(&self) -> usize {
        self.free.len()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        laplacian(self.field.grid(), self.field.bc(), x, y);
        let eps = self.field.epsilon();
        y.par_iter_mut().enumerate().for_each(|(i, v)| {
            *v = if self.free[i] { self.coef[i] * x[i] - eps * *v } else { 0.0 };
        });
    }
}

fn one_dimensional_direct(field: &ScalarField) -> bool {
    field.dim() == 1 && !field.bc().is_periodic(0)
}

/// Solve (coef - eps Delta_h) x = b on free nodes. `shift` is a positive
/// lower bound used by the fast preconditioner.
fn solve_shifted(
    field: &ScalarField,
    topo: &Topology,
    coef: Vec<f64>,
    b: &[f64],
    tol: f64,
    max_it: usize,
    report: &mut SolveReport,
) -> Result<Vec<f64>> {
    let free = topo.free_mask();
    let n = b.len();
    let eps = field.epsilon();
    if one_dimensional_direct(field) {
        let h2 = field.grid().spacing()[0].powi(2);
        let e = eps / h2;
        let mut sub = vec![0.0; n];
        let mut sup = vec![0.0; n];
        let mut diag = vec![1.0; n];
        let mut rhs = vec![0.0; n];
        let faces = field.bc().axis(0);
        for i in 0..n {
            if !free[i] {
                continue;
            }
            diag[i] = coef[i] + 2.0 * e;
            rhs[i] = b[i];
            if i == 0 {
                if faces[0] == Face::Neumann {
                    sup[i] = -2.0 * e;
                }
            } else if i == n - 1 {
                if faces[1] == Face::Neumann {
                    sub[i] = -2.0 * e;
                }
            } else {
                sub[i] = if free[i - 1] { -e } else { 0.0 };
                sup[i] = if free[i + 1] { -e } else { 0.0 };
            }
        }
        return solve_tridiagonal(&sub, &diag, &sup, &rhs);
    }
    let faces: Vec<[Face; 2]> = (0..field.dim()).map(|a| field.bc().axis(a)).collect();
    let cmax = coef.iter().zip(&free).filter(|(_, f)| **f).map(|(c, _)| *c).fold(f64::NEG_INFINITY, f64::max);
    let cmin = coef.iter().zip(&free).filter(|(_, f)| **f).map(|(c, _)| *c).fold(f64::INFINITY, f64::min);
    let uniform = (cmax - cmin).abs() <= 1e-14 * cmax.abs().max(1.0);
    let fast = if cmax > 0.0 { ShiftedPoisson::new(field.grid(), &faces, cmax, eps) } else { None };
    if uniform {
        if let Some(p) = &fast {
            let mut x = vec![0.0; n];
            p.solve(b, &mut x);
            return Ok(x);
        }
    }
    let op = ShiftedLaplacian { field, free: &free, coef: coef.clone() };
    let jac = Jacobi(
        (0..n)
            .map(|i| {
                let s: f64 = field.grid().spacing().iter().map(|h| 2.0 * eps / (h * h)).sum();
                (coef[i] + s).abs().max(1e-300)
            })
            .collect(),
    );
    let pre: &dyn Preconditioner = match &fast {
        Some(p) => p,
        None => &jac,
    };
    let mut opts = KrylovOptions::new(tol, max_it);
    opts.weights = Some(&topo.weights);
    opts.precond = Some(pre);
    let mut x = vec![0.0; n];
    let out = cg(&op, b, &mut x, &opts);
    if out.converged {
        return Ok(x);
    }
    if out.breakdown {
        report.indefinite = true;
    }
    let mut x = vec![0.0; n];
    let out = minres(&op, b, &mut x, &opts);
    if !out.converged && out.relative_residual > 1e-3 {
        return Err(Error::NotConverged { iterations: out.iterations, residual: out.relative_residual });
    }
    Ok(x)
}

/// Gradient flow until the residual drops below `newton_switch_tol`.
pub fn relax(initial: &ScalarField, cfg: &SolveConfig) -> Result<(ScalarField, SolveReport)> {
    cfg.validate(initial)?;
    let topo = initial.topology();
    let free = topo.free_mask();
    let eps = initial.epsilon();
    let mut dt = cfg.effective_time_step(initial);
    let mut u = initial.clone();
    let mut report = SolveReport { time_step: dt, ..Default::default() };
    let mut r = residual_with(&u, &topo);
    let mut rn = sup_norm(&r);
    let mut energy = discrete_energy(&u);
    report.residual_history.push(rn);
    report.energy_history.push(energy);
    let mut best = rn;
    let checked = !(cfg.allow_unstable_step && cfg.stepping == Stepping::Explicit);
    while rn > cfg.newton_switch_tol && report.iterations < cfg.max_iterations {
        let vals = u.values();
        let next: Vec<f64> = match cfg.stepping {
            Stepping::Explicit => vals.iter().zip(&r).map(|(v, ri)| v - dt * ri).collect(),
            Stepping::SemiImplicit => {
                let c0 = 1.0 / dt + cfg.stabilization / eps;
                // Dirichlet data enter through the Laplacian of the fixed part.
                let mut fixed_part: Vec<f64> = vals.iter().zip(&free).map(|(v, f)| if *f { 0.0 } else { *v }).collect();
                topo.sync_images(&mut fixed_part);
                let mut lap_fixed = vec![0.0; vals.len()];
                laplacian(u.grid(), u.bc(), &fixed_part, &mut lap_fixed);
                let b: Vec<f64> = (0..vals.len())
                    .map(|i| if free[i] { c0 * vals[i] - well_d1(vals[i]) / eps + eps * lap_fixed[i] } else { 0.0 })
                    .collect();
                let x = solve_shifted(&u, &topo, vec![c0; vals.len()], &b, cfg.linear_tol, cfg.max_linear, &mut report)?;
                (0..vals.len()).map(|i| if free[i] { x[i] } else { vals[i] }).collect()
            }
        };
        let mut cand = u.with_values_unchecked(next);
        topo.sync_images(cand.values_mut());
        if cand.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { iteration: report.iterations + 1, residual: f64::INFINITY, best });
        }
        let e_new = discrete_energy(&cand);
        if checked && e_new > energy + 1e-12 * energy.abs().max(1.0) {
            report.rejected_steps += 1;
            dt *= 0.5;
            if dt < 1e-14 {
                return Err(Error::NotConverged { iterations: report.iterations, residual: rn });
            }
            continue;
        }
        u = cand;
        energy = e_new;
        report.iterations += 1;
        r = residual_with(&u, &topo);
        rn = sup_norm(&r);
        report.residual_history.push(rn);
        report.energy_history.push(energy);
        if !rn.is_finite() || rn > 10.0 * best {
            return Err(Error::Diverged { iteration: report.iterations, residual: rn, best });
        }
        best = best.min(rn);
    }
    report.time_step = dt;
    report.final_residual = rn;
    report.converged = rn <= cfg.residual_tol;
    Ok((u, report))
}

fn newton_core(field: &ScalarField, cfg: &SolveConfig, report: &mut SolveReport) -> Result<ScalarField> {
    let topo = field.topology();
    let free = topo.free_mask();
    let eps = field.epsilon();
    let mut u = field.clone();
    let mut r = residual_with(&u, &topo);
    let mut rn = sup_norm(&r);
    report.residual_history.push(rn);
    for _ in 0..cfg.max_newton {
        if rn <= cfg.residual_tol {
            break;
        }
        let coef: Vec<f64> = u.values().iter().map(|v| well_d2(*v) / eps).collect();
        let b: Vec<f64> = r.iter().map(|x| -x).collect();
        let tol = (1e-2 * rn).clamp(cfg.linear_tol, 1e-6);
        let delta = solve_shifted(&u, &topo, coef, &b, tol, cfg.max_linear, report)?;
        let mut alpha = cfg.damping;
        let mut accepted = false;
        while alpha >= 1.0 / 64.0 {
            let vals: Vec<f64> = u.values().iter().zip(&delta).zip(&free).map(|((v, d), f)| if *f { v + alpha * d } else { *v }).collect();
            let mut cand = u.with_values_unchecked(vals);
            topo.sync_images(cand.values_mut());
            let rc = residual_with(&cand, &topo);
            let rcn = sup_norm(&rc);
            if rcn.is_finite() && rcn < rn {
                u = cand;
                r = rc;
                rn = rcn;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
        report.newton_steps += 1;
        report.residual_history.push(rn);
    }
    report.final_residual = rn;
    report.converged = rn <= cfg.residual_tol;
    Ok(u)
}

/// Newton polish of a field already close to a critical point.
pub fn newton_refine(field: &ScalarField, cfg: &SolveConfig) -> Result<(ScalarField, SolveReport)> {
    cfg.validate(field)?;
    let r0 = sup_norm(&residual(field));
    if r0 > cfg.newton_switch_tol {
        return invalid(format!("residual {r0:.3e} is above newton_switch_tol {:.3e}; relax first", cfg.newton_switch_tol));
    }
    let mut report = SolveReport::default();
    let u = newton_core(field, cfg, &mut report)?;
    Ok((u, report))
}

/// Damped Newton from an ansatz, without the closeness precondition. Used
/// for unstable critical points that the gradient flow would leave.
pub fn newton_from_ansatz(field: &ScalarField, cfg: &SolveConfig) -> Result<(ScalarField, SolveReport)> {
    cfg.validate(field)?;
    let mut report = SolveReport::default();
    let u = newton_core(field, cfg, &mut report)?;
    Ok((u, report))
}

/// Relax, then polish with Newton.
pub fn solve(initial: &ScalarField, cfg: &SolveConfig) -> Result<(ScalarField, SolveReport)> {
    let (u, mut report) = relax(initial, cfg)?;
    if report.final_residual <= cfg.residual_tol {
        return Ok((u, report));
    }
    if report.final_residual > cfg.newton_switch_tol {
        return Err(Error::NotConverged { iterations: report.iterations, residual: report.final_residual });
    }
    let u = newton_core(&u, cfg, &mut report)?;
    Ok((u, report))
}

/// Right-hand side f(u, r) of u'' + (n-1) u'/r = f.
#[derive(Clone)]
pub enum RadialSource {
    /// f = W'(u) / eps^2.
    AllenCahn { epsilon: f64 },
    /// f = lambda e^{-u}.
    Liouville { lambda: f64 },
    /// Returns (f, df/du).
    Custom(Arc<dyn Fn(f64, f64) -> (f64, f64) + Send + Sync>),
}

impl RadialSource {
    fn eval(&self, u: f64, r: f64) -> (f64, f64) {
        match self {
            RadialSource::AllenCahn { epsilon } => {
                let e2 = epsilon * epsilon;
                (well_d1(u) / e2, well_d2(u) / e2)
            }
            RadialSource::Liouville { lambda } => {
                let v = lambda * (-u).exp();
                (v, -v)
            }
            RadialSource::Custom(f) => f(u, r),
        }
    }
}

/// Condition at one end of a radial interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EndCondition {
    Value(f64),
    Slope(f64),
    /// r u'(r) = c, the slope of an asymptote b + c log r.
    LogSlope(f64),
    /// u'(0) = 0 at r = 0.
    Regular,
}

fn one_sided_derivative(r: &[f64], j: usize, forward: bool) -> [(usize, f64); 3] {
    let idx: [usize; 3] = if forward { [j, j + 1, j + 2] } else { [j, j - 1, j - 2] };
    let xs: Vec<f64> = idx.iter().map(|&i| r[i]).collect();
    let w = crate::radial::fornberg_weights(r[j], &xs, 1);
    [(idx[0], w[1][0]), (idx[1], w[1][1]), (idx[2], w[1][2])]
}

/// Newton solve of u'' + (n-1) u'/r = f(u, r) with end conditions. The
/// input profile is the initial guess and fixes the sample radii.
pub fn solve_radial(
    profile: &RadialField,
    source: &RadialSource,
    left: EndCondition,
    right: EndCondition,
    cfg: &SolveConfig,
) -> Result<(RadialField, SolveReport)> {
    let r = &profile.r;
    if matches!(left, EndCondition::Regular) && r[0] != 0.0 {
        return invalid("regular end condition needs r_min = 0");
    }
    if matches!(right, EndCondition::Regular) {
        return invalid("regular end condition only applies at r = 0");
    }
    if profile.dim > 1 && r[0] == 0.0 && !matches!(left, EndCondition::Regular | EndCondition::Value(_)) {
        return invalid("at r = 0 use a regular or value condition");
    }
    let mut last_err = None;
    for cap in [cfg.damping, 0.5 * cfg.damping, 0.25 * cfg.damping] {
        match radial_newton(profile, source, left, right, cfg, cap) {
            Ok(out) => return Ok(out),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap())
}

type Row = Vec<(usize, f64)>;

fn radial_system(r: &[f64], u: &[f64], dim: usize, source: &RadialSource, ends: [EndCondition; 2]) -> (Vec<f64>, Vec<Row>) {
    let n = r.len();
    let k = (dim - 1) as f64;
    let mut f = vec![0.0; n];
    let mut rows: Vec<Row> = vec![Vec::new(); n];
    for j in 1..n - 1 {
        let (d2, d1) = three_point(r[j] - r[j - 1], r[j + 1] - r[j]);
        let c = if dim > 1 { k / r[j] } else { 0.0 };
        let w = [d2[0] + c * d1[0], d2[1] + c * d1[1], d2[2] + c * d1[2]];
        let (s, ds) = source.eval(u[j], r[j]);
        f[j] = w[0] * u[j - 1] + w[1] * u[j] + w[2] * u[j + 1] - s;
        rows[j] = vec![(j - 1, w[0]), (j, w[1] - ds), (j + 1, w[2])];
    }
    for (side, &cond) in ends.iter().enumerate() {
        let j = if side == 0 { 0 } else { n - 1 };
        match cond {
            EndCondition::Value(v) => {
                f[j] = u[j] - v;
                rows[j] = vec![(j, 1.0)];
            }
            EndCondition::Slope(_) | EndCondition::LogSlope(_) => {
                let target = match cond {
                    EndCondition::Slope(c) => c,
                    EndCondition::LogSlope(c) => c / r[j],
                    _ => unreachable!(),
                };
                let st = one_sided_derivative(r, j, side == 0);
                f[j] = st.iter().map(|(i, w)| w * u[*i]).sum::<f64>() - target;
                rows[j] = st.to_vec();
            }
            EndCondition::Regular => {
                let coefficient = dim as f64 * 2.0 / (r[1] * r[1]);
                let (s, ds) = source.eval(u[0], 0.0);
                f[0] = coefficient * (u[1] - u[0]) - s;
                rows[0] = vec![(0, -coefficient - ds), (1, coefficient)];
            }
        }
    }
    (f, rows)
}

fn solve_rows(rows: &[Row], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = rows.len();
    let mut rows = rows.to_vec();
    let mut rhs = rhs.to_vec();
    // Three-point end rows reach one column too far; eliminate it with the
    // neighbouring interior row.
    for &(j, nb, far) in &[(0usize, 1usize, 2usize), (n - 1, n - 2, n - 3)] {
        if let Some(pos) = rows[j].iter().position(|(c, _)| *c == far) {
            let a = rows[j][pos].1;
            let s = rows[nb].iter().find(|(c, _)| *c == far).map(|x| x.1).unwrap_or(0.0);
            if s == 0.0 {
                return Err(Error::Eigen("cannot eliminate end row".into()));
            }
            let factor = a / s;
            let nbrow = rows[nb].clone();
            let mut merged: Row = Vec::new();
            for col in [j.min(nb), j.max(nb), far] {
                let v = rows[j].iter().filter(|(c, _)| *c == col).map(|x| x.1).sum::<f64>()
                    - factor * nbrow.iter().filter(|(c, _)| *c == col).map(|x| x.1).sum::<f64>();
                if col != far {
                    merged.push((col, v));
                }
            }
            rows[j] = merged;
            rhs[j] -= factor * rhs[nb];
        }
    }
    let mut sub = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut sup = vec![0.0; n];
    for (j, row) in rows.iter().enumerate() {
        for &(c, v) in row {
            if c == j {
                diag[j] += v;
            } else if c + 1 == j {
                sub[j] += v;
            } else if c == j + 1 {
                sup[j] += v;
            }
        }
    }
    solve_tridiagonal(&sub, &diag, &sup, &rhs)
}

fn radial_newton(
    profile: &RadialField,
    source: &RadialSource,
    left: EndCondition,
    right: EndCondition,
    cfg: &SolveConfig,
    cap: f64,
) -> Result<(RadialField, SolveReport)> {
    let r = &profile.r;
    let ends = [left, right];
    let mut u = profile.values.clone();
    let mut report = SolveReport::default();
    // Rows are scaled by their largest coefficient so the residual is
    // comparable to a change in u; unscaled rows near a fine end sit at a
    // rounding floor of order eps_mach / h^2.
    let sup = |f: &[f64], rows: &[Row]| {
        f.iter().zip(rows).fold(0.0f64, |a, (v, row)| {
            let s = row.iter().fold(0.0f64, |m, (_, c)| m.max(c.abs())).max(1.0);
            a.max((v / s).abs())
        })
    };
    let (mut f, mut rows) = radial_system(r, &u, profile.dim, source, ends);
    let mut fn_ = sup(&f, &rows);
    report.residual_history.push(fn_);
    let mut stalled = false;
    for _ in 0..cfg.max_newton.max(50) {
        if fn_ <= cfg.residual_tol {
            break;
        }
        let neg: Vec<f64> = f.iter().map(|x| -x).collect();
        let delta = solve_rows(&rows, &neg)?;
        // The scaled residual can stall at rounding level before reaching
        // the target; a negligible full Newton step also counts as converged.
        if sup_norm(&delta) <= 1e-12 * sup_norm(&u).max(1.0) {
            stalled = true;
            break;
        }
        let mut alpha = cap;
        let mut accepted = false;
        while alpha >= 1e-4 {
            let cand: Vec<f64> = u.iter().zip(&delta).map(|(a, b)| a + alpha * b).collect();
            let (fc, rc) = radial_system(r, &cand, profile.dim, source, ends);
            let fcn = sup(&fc, &rc);
            if fcn.is_finite() && fcn < fn_ {
                u = cand;
                f = fc;
                rows = rc;
                fn_ = fcn;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
        report.newton_steps += 1;
        report.residual_history.push(fn_);
    }
    report.iterations = report.newton_steps;
    report.final_residual = fn_;
    report.converged = stalled || fn_ <= cfg.residual_tol;
    if !report.converged {
        return Err(Error::NotConverged { iterations: report.newton_steps, residual: fn_ });
    }
    Ok((RadialField::new(r.clone(), u, profile.dim)?, report))
}
