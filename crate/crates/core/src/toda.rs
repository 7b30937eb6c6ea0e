//! The radial Toda system for interacting layer heights,
//!
//!   Delta f_i = kappa (e^{-sqrt2 (f_i - f_{i-1})} - e^{-sqrt2 (f_{i+1} - f_i)}) + forcing,
//!
//! in R^m outside a ball, with log-end fits, the sqrt2 gap, interaction
//! integrability, the stability inequality, Farina's integral estimate and
//! the renormalised log potential.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{least_squares, solve_block_tridiagonal};
use crate::potential::{unit_sphere_area, SQRT2};
use crate::quadrature::integrate_adaptive;
use crate::radial::{integrate_annulus, interpolate_uniform, radial_laplacian, LogGrid};

/// Placeholder interaction constant. Gaps and integrability conclusions do
/// not depend on it; it only shifts the b_i.
pub const DEFAULT_KAPPA: f64 = 2.0 * SQRT2;

/// Deterministic error forcing sign_i A r^{-2-exponent}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forcing {
    pub amplitude: f64,
    #[serde(default = "default_forcing_exponent")]
    pub exponent: f64,
    /// One sign per layer; missing entries count as +1.
    #[serde(default)]
    pub signs: Vec<f64>,
}

fn default_forcing_exponent() -> f64 {
    0.125
}

impl Forcing {
    pub fn value(&self, layer: usize, r: f64) -> f64 {
        let sign = self.signs.get(layer).copied().unwrap_or(1.0);
        sign * self.amplitude * r.powf(-2.0 - self.exponent)
    }
}

/// Condition on f_i at one end of the radial interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TodaEnd {
    Value(f64),
    /// r f_i'(r) = c.
    Slope(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TodaConfig {
    pub layers: usize,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Base dimension m = n - 1.
    #[serde(default = "default_dim")]
    pub dim: usize,
    pub r_min: f64,
    pub r_max: f64,
    #[serde(default = "default_ppd")]
    pub points_per_decade: usize,
    pub inner: Vec<TodaEnd>,
    pub outer: Vec<TodaEnd>,
    #[serde(default)]
    pub forcing: Option<Forcing>,
    #[serde(default = "default_tol")]
    pub residual_tol: f64,
    #[serde(default = "default_newton")]
    pub max_newton: usize,
    /// Initial heights per layer on the log grid.
    #[serde(default, skip_serializing)]
    pub initial: Option<Vec<Vec<f64>>>,
}

fn default_kappa() -> f64 {
    DEFAULT_KAPPA
}
fn default_dim() -> usize {
    2
}
fn default_ppd() -> usize {
    64
}
fn default_tol() -> f64 {
    1e-8
}
fn default_newton() -> usize {
    60
}

impl TodaConfig {
    pub fn new(layers: usize, r_min: f64, r_max: f64, inner: Vec<TodaEnd>, outer: Vec<TodaEnd>) -> Self {
        Self {
            layers,
            kappa: DEFAULT_KAPPA,
            dim: 2,
            r_min,
            r_max,
            points_per_decade: 64,
            inner,
            outer,
            forcing: None,
            residual_tol: 1e-8,
            max_newton: 60,
            initial: None,
        }
    }

    pub fn validate(&self) -> Result<LogGrid> {
        if self.layers == 0 {
            return invalid("need at least one layer");
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return invalid("kappa must be positive");
        }
        if !(2..=9).contains(&self.dim) {
            return invalid(format!("base dimension {} outside 2..=9", self.dim));
        }
        if !(self.r_min > 0.0 && self.r_max / self.r_min >= 100.0 * (1.0 - 1e-12)) {
            return invalid("need r_min > 0 and r_max / r_min >= 100");
        }
        if self.inner.len() != self.layers || self.outer.len() != self.layers {
            return invalid("one end condition per layer is required at each end");
        }
        if self.inner.iter().zip(&self.outer).any(|(a, b)| matches!((a, b), (TodaEnd::Slope(_), TodaEnd::Slope(_)))) {
            return invalid("slope conditions at both ends leave a layer undetermined");
        }
        if !(self.residual_tol > 0.0) {
            return invalid("residual_tol must be positive");
        }
        let grid = LogGrid::new(self.r_min, self.r_max, self.points_per_decade)?;
        if let Some(init) = &self.initial {
            if init.len() != self.layers || init.iter().any(|v| v.len() != grid.n) {
                return invalid("initial heights do not match layers and grid");
            }
        }
        Ok(grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TodaSolution {
    pub grid: LogGrid,
    pub dim: usize,
    pub kappa: f64,
    pub forcing: Option<Forcing>,
    /// heights[i][j] = f_i(r_j).
    pub heights: Vec<Vec<f64>>,
    pub residual: f64,
    pub newton_steps: usize,
    pub ordered: bool,
}

impl TodaSolution {
    /// Heights b_i + c_i log r on a grid, e.g. to probe the critical gap.
    pub fn from_log_ends(grid: LogGrid, dim: usize, kappa: f64, ends: &[(f64, f64)]) -> Self {
        let heights: Vec<Vec<f64>> = ends.iter().map(|(b, c)| (0..grid.n).map(|j| b + c * grid.s(j)).collect()).collect();
        let ordered = is_ordered(&heights);
        Self { grid, dim, kappa, forcing: None, heights, residual: f64::NAN, newton_steps: 0, ordered }
    }

    pub fn radii(&self) -> Vec<f64> {
        self.grid.radii()
    }

    pub fn layers(&self) -> usize {
        self.heights.len()
    }

    /// e^{-sqrt2 (f_{i+1} - f_i)} on the grid, for pair (i, i+1).
    pub fn interaction(&self, i: usize) -> Vec<f64> {
        self.heights[i + 1].iter().zip(&self.heights[i]).map(|(a, b)| interaction_term(a - b)).collect()
    }
}

fn is_ordered(h: &[Vec<f64>]) -> bool {
    h.windows(2).all(|w| w[1].iter().zip(&w[0]).all(|(a, b)| a > b))
}

fn interaction_term(gap: f64) -> f64 {
    (-SQRT2 * gap).min(700.0).exp()
}

/// Right-hand side of the system at one radius.
pub fn toda_rhs(f: &[f64], r: f64, kappa: f64, forcing: Option<&Forcing>) -> Vec<f64> {
    let n = f.len();
    let mut out: Vec<f64> = (0..n).map(|i| forcing.map_or(0.0, |fc| fc.value(i, r))).collect();
    for k in 0..n.saturating_sub(1) {
        let e = kappa * interaction_term(f[k + 1] - f[k]);
        out[k + 1] += e;
        out[k] -= e;
    }
    out
}

fn rhs_jacobian(f: &[f64], kappa: f64) -> DMatrix<f64> {
    let n = f.len();
    let mut j = DMatrix::zeros(n, n);
    for k in 0..n.saturating_sub(1) {
        let e = SQRT2 * kappa * interaction_term(f[k + 1] - f[k]);
        j[(k + 1, k + 1)] -= e;
        j[(k + 1, k)] += e;
        j[(k, k + 1)] += e;
        j[(k, k)] -= e;
    }
    j
}

/// Delta f_i minus the right-hand side, with a seven-point radial Laplacian
/// on the log grid.
pub fn toda_residual(heights: &[Vec<f64>], grid: &LogGrid, dim: usize, kappa: f64, forcing: Option<&Forcing>) -> Result<Vec<Vec<f64>>> {
    if heights.iter().any(|h| h.len() != grid.n) {
        return invalid("heights do not match the grid");
    }
    if grid.n < 7 {
        return invalid("need at least 7 radii");
    }
    let laps: Vec<Vec<f64>> = heights.iter().map(|h| radial_laplacian(h, grid, dim, 3)).collect();
    let mut out = laps.clone();
    for j in 0..grid.n {
        let f: Vec<f64> = heights.iter().map(|h| h[j]).collect();
        let rhs = toda_rhs(&f, grid.r(j), kappa, forcing);
        for i in 0..heights.len() {
            out[i][j] -= rhs[i];
        }
    }
    Ok(out)
}

/// Damped Newton on the Numerov discretisation in s = log r. With
/// f = e^{-a s} y, a = (m - 2)/2, the radial equation becomes
/// y_ss = a^2 y + e^{(a+2) s} F(f).
pub fn solve_toda(cfg: &TodaConfig) -> Result<TodaSolution> {
    let grid = cfg.validate()?;
    let n = grid.n;
    let nl = cfg.layers;
    let h = grid.h;
    let a = (cfg.dim as f64 - 2.0) / 2.0;
    let forcing = cfg.forcing.as_ref();
    let initial: Vec<Vec<f64>> = match &cfg.initial {
        Some(v) => v.clone(),
        None => initial_guess(cfg, &grid),
    };
    let enforce_order = is_ordered(&initial);
    let mut y: Vec<DVector<f64>> = (0..n).map(|j| DVector::from_fn(nl, |i, _| (a * grid.s(j)).exp() * initial[i][j])).collect();

    let heights_of =
        |y: &[DVector<f64>]| -> Vec<Vec<f64>> { (0..nl).map(|i| (0..n).map(|j| (-a * grid.s(j)).exp() * y[j][i]).collect()).collect() };
    // G(s_j, y_j) and dG/dy.
    let g_of = |j: usize, yj: &DVector<f64>| -> (DVector<f64>, DMatrix<f64>) {
        let s = grid.s(j);
        let f: Vec<f64> = yj.iter().map(|v| (-a * s).exp() * v).collect();
        let rhs = toda_rhs(&f, s.exp(), cfg.kappa, forcing);
        let scale = ((a + 2.0) * s).exp();
        let g = DVector::from_fn(nl, |i, _| a * a * yj[i] + scale * rhs[i]);
        let jac = DMatrix::identity(nl, nl) * (a * a) + rhs_jacobian(&f, cfg.kappa) * (2.0 * s).exp();
        (g, jac)
    };
    let system = |y: &[DVector<f64>]| {
        let gs: Vec<(DVector<f64>, DMatrix<f64>)> = (0..n).map(|j| g_of(j, &y[j])).collect();
        let eye = DMatrix::<f64>::identity(nl, nl);
        let mut res = vec![DVector::zeros(nl); n];
        let mut lower = vec![DMatrix::zeros(nl, nl); n];
        let mut diag = vec![DMatrix::zeros(nl, nl); n];
        let mut upper = vec![DMatrix::zeros(nl, nl); n];
        let c = h * h / 12.0;
        for j in 1..n - 1 {
            let r = &y[j + 1] - &y[j] * 2.0 + &y[j - 1] - (&gs[j + 1].0 + &gs[j].0 * 10.0 + &gs[j - 1].0) * c;
            res[j] = r / (h * h);
            lower[j] = (&eye - &gs[j - 1].1 * c) / (h * h);
            diag[j] = (&eye * -2.0 - &gs[j].1 * (10.0 * c)) / (h * h);
            upper[j] = (&eye - &gs[j + 1].1 * c) / (h * h);
        }
        for (end, conds) in [(0usize, &cfg.inner), (n - 1, &cfg.outer)] {
            let s = grid.s(end);
            for (i, cond) in conds.iter().enumerate() {
                for k in 0..nl {
                    lower[end][(i, k)] = 0.0;
                    diag[end][(i, k)] = 0.0;
                    upper[end][(i, k)] = 0.0;
                }
                match *cond {
                    TodaEnd::Value(v) => {
                        res[end][i] = y[end][i] - (a * s).exp() * v;
                        diag[end][(i, i)] = 1.0;
                    }
                    TodaEnd::Slope(cs) => {
                        // y_s to third order from two nodes and the equation.
                        let target = a * y[end][i] + cs * (a * s).exp();
                        if end == 0 {
                            let ys = (y[1][i] - y[0][i]) / h - h / 6.0 * (2.0 * gs[0].0[i] + gs[1].0[i]);
                            res[0][i] = ys - target;
                            for k in 0..nl {
                                diag[0][(i, k)] = -h / 3.0 * gs[0].1[(i, k)];
                                upper[0][(i, k)] = -h / 6.0 * gs[1].1[(i, k)];
                            }
                            diag[0][(i, i)] += -1.0 / h - a;
                            upper[0][(i, i)] += 1.0 / h;
                        } else {
                            let ys = (y[end][i] - y[end - 1][i]) / h + h / 6.0 * (2.0 * gs[end].0[i] + gs[end - 1].0[i]);
                            res[end][i] = ys - target;
                            for k in 0..nl {
                                diag[end][(i, k)] = h / 3.0 * gs[end].1[(i, k)];
                                lower[end][(i, k)] = h / 6.0 * gs[end - 1].1[(i, k)];
                            }
                            diag[end][(i, i)] += 1.0 / h - a;
                            lower[end][(i, i)] += -1.0 / h;
                        }
                    }
                }
            }
        }
        (res, lower, diag, upper)
    };
    let sup = |r: &[DVector<f64>]| r.iter().flat_map(|v| v.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
    let merit = |r: &[DVector<f64>]| r.iter().map(|v| v.norm_squared()).sum::<f64>();

    let (mut res, mut lower, mut diag, mut upper) = system(&y);
    let mut rn = sup(&res);
    let mut mn = merit(&res);
    let mut steps = 0;
    let mut converged = rn <= cfg.residual_tol;
    while !converged && steps < cfg.max_newton {
        let neg: Vec<DVector<f64>> = res.iter().map(|v| -v).collect();
        let delta = solve_block_tridiagonal(&lower, &diag, &upper, &neg)?;
        let ymax = y.iter().flat_map(|v| v.iter()).fold(1.0f64, |m, x| m.max(x.abs()));
        let dmax = delta.iter().flat_map(|v| v.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
        if dmax <= 1e-13 * ymax {
            converged = true;
            break;
        }
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha >= 1e-4 {
            let cand: Vec<DVector<f64>> = y.iter().zip(&delta).map(|(a, d)| a + d * alpha).collect();
            if enforce_order && !is_ordered(&heights_of(&cand)) {
                alpha *= 0.5;
                continue;
            }
            let (r2, l2, d2, u2) = system(&cand);
            let m2 = merit(&r2);
            if m2.is_finite() && m2 <= (1.0 - 1e-4 * alpha) * mn {
                mn = m2;
                let n2 = sup(&r2);
                y = cand;
                res = r2;
                lower = l2;
                diag = d2;
                upper = u2;
                rn = n2;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
        steps += 1;
        converged = rn <= cfg.residual_tol;
    }
    if !converged {
        return Err(Error::NotConverged { iterations: steps, residual: rn });
    }
    let heights = heights_of(&y);
    let ordered = is_ordered(&heights);
    if enforce_order && !ordered {
        return Err(Error::InvalidArgument("layer ordering lost during the solve".into()));
    }
    Ok(TodaSolution {
        grid,
        dim: cfg.dim,
        kappa: cfg.kappa,
        forcing: cfg.forcing.clone(),
        heights,
        residual: rn,
        newton_steps: steps,
        ordered,
    })
}

fn initial_guess(cfg: &TodaConfig, grid: &LogGrid) -> Vec<Vec<f64>> {
    let (s0, s1) = (grid.s0, grid.s_max());
    (0..cfg.layers)
        .map(|i| {
            let line: Box<dyn Fn(f64) -> f64> = match (cfg.inner[i], cfg.outer[i]) {
                (TodaEnd::Value(p), TodaEnd::Value(q)) => Box::new(move |s| p + (q - p) * (s - s0) / (s1 - s0)),
                (TodaEnd::Value(p), TodaEnd::Slope(c)) => Box::new(move |s| p + c * (s - s0)),
                (TodaEnd::Slope(c), TodaEnd::Value(q)) => Box::new(move |s| q + c * (s - s1)),
                (TodaEnd::Slope(_), TodaEnd::Slope(_)) => Box::new(|_| 0.0),
            };
            (0..grid.n).map(|j| line(grid.s(j))).collect()
        })
        .collect()
}

/// Heights of the symmetric two-layer solution built from the Liouville
/// family w = -log(8 mu^2 / (1 + mu^2 r^2)^2), with v = (w + log(2 sqrt2 kappa)) / sqrt2
/// and f_2 = -f_1 = v / 2.
pub fn liouville_two_layer(r: f64, mu: f64, kappa: f64) -> (f64, f64) {
    let w = -(8.0 * mu * mu / (1.0 + mu * mu * r * r).powi(2)).ln();
    let v = (w + (2.0 * SQRT2 * kappa).ln()) / SQRT2;
    (-0.5 * v, 0.5 * v)
}

/// r f'(r) of the Liouville two-layer heights.
pub fn liouville_two_layer_slope(r: f64, mu: f64) -> (f64, f64) {
    let x = mu * mu * r * r;
    let dw = 4.0 * x / (1.0 + x);
    let dv = dw / SQRT2;
    (-0.5 * dv, 0.5 * dv)
}

/// f ~ b + c log r + d r^{-alpha} on a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogFit {
    pub b: f64,
    pub c: f64,
    pub correction: f64,
    /// Decay exponent of the correction; None when b + c log r is exact.
    pub alpha: Option<f64>,
    pub residual_rms: f64,
    pub window: (f64, f64),
}

fn fit_with(rows: &[(f64, f64)], alpha: Option<f64>) -> Option<(Vec<f64>, f64)> {
    let design: Vec<Vec<f64>> = rows
        .iter()
        .map(|(r, _)| {
            let mut v = vec![1.0, r.ln()];
            if let Some(a) = alpha {
                v.push(r.powf(-a));
            }
            v
        })
        .collect();
    let ys: Vec<f64> = rows.iter().map(|p| p.1).collect();
    least_squares(&design, &ys).ok().map(|f| (f.coefficients, f.residual_rms))
}

/// Fit b + c log r (+ d r^{-alpha}, alpha by variable projection) to samples
/// with r in `window`.
pub fn fit_log(radii: &[f64], values: &[f64], window: (f64, f64)) -> Result<LogFit> {
    let rows: Vec<(f64, f64)> = radii
        .iter()
        .zip(values)
        .filter(|(r, _)| **r >= window.0 * (1.0 - 1e-12) && **r <= window.1 * (1.0 + 1e-12))
        .map(|(r, v)| (*r, *v))
        .collect();
    if rows.len() < 8 {
        return Err(Error::InsufficientData(format!("{} samples in the fit window", rows.len())));
    }
    let scale = rows.iter().fold(1.0f64, |m, p| m.max(p.1.abs()));
    let (lin, rms) = fit_with(&rows, None).ok_or_else(|| Error::RankDeficient("log fit".into()))?;
    if rms <= 1e-12 * scale {
        return Ok(LogFit { b: lin[0], c: lin[1], correction: 0.0, alpha: None, residual_rms: rms, window });
    }
    let objective = |a: f64| fit_with(&rows, Some(a)).map_or(f64::INFINITY, |f| f.1);
    let grid: Vec<f64> = (1..=160).map(|k| 0.025 * k as f64).collect();
    let best = grid.iter().copied().min_by(|a, b| objective(*a).total_cmp(&objective(*b))).unwrap();
    let (mut lo, mut hi) = ((best - 0.025).max(1e-3), best + 0.025);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let x1 = hi - phi * (hi - lo);
        let x2 = lo + phi * (hi - lo);
        if objective(x1) < objective(x2) {
            hi = x2;
        } else {
            lo = x1;
        }
    }
    let alpha = 0.5 * (lo + hi);
    let (coef, rms3) = fit_with(&rows, Some(alpha)).ok_or_else(|| Error::RankDeficient("log fit".into()))?;
    if rms3 >= rms {
        return Ok(LogFit { b: lin[0], c: lin[1], correction: 0.0, alpha: None, residual_rms: rms, window });
    }
    Ok(LogFit { b: coef[0], c: coef[1], correction: coef[2], alpha: Some(alpha), residual_rms: rms3, window })
}

/// Per-layer fits on the outer decade.
pub fn fit_log_asymptotics(solution: &TodaSolution) -> Result<Vec<LogFit>> {
    let radii = solution.radii();
    let (r0, r1) = (radii[0], radii[radii.len() - 1]);
    if r1 / r0 < 100.0 * (1.0 - 1e-12) {
        return Err(Error::InsufficientData("solution spans fewer than two decades".into()));
    }
    solution.heights.iter().map(|h| fit_log(&radii, h, (r1 / 10.0, r1))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub gaps: Vec<f64>,
    pub pass: Vec<bool>,
    pub tol: f64,
}

impl GapReport {
    pub fn all_pass(&self) -> bool {
        self.pass.iter().all(|p| *p)
    }
}

/// Adjacent coefficient gaps against sqrt2 (1 + tol).
pub fn check_gap(fits: &[LogFit], tol: f64) -> GapReport {
    let gaps: Vec<f64> = fits.windows(2).map(|w| w[1].c - w[0].c).collect();
    let pass = gaps.iter().map(|g| g.abs() > SQRT2 * (1.0 + tol)).collect();
    GapReport { gaps, pass, tol }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairInteraction {
    /// Lower layer of the pair (0-based).
    pub pair: usize,
    pub total: f64,
    /// (r_lo, r_hi, integral) per dyadic annulus.
    pub dyads: Vec<(f64, f64, f64)>,
    /// Last dyad over the one before.
    pub tail_ratio: f64,
    pub convergent: bool,
}

/// Integrals of e^{-sqrt2 (f_{i+1} - f_i)} over the exterior domain with
/// dyadic partial sums.
pub fn interaction_integrals(solution: &TodaSolution) -> Vec<PairInteraction> {
    let g = &solution.grid;
    let (r0, r1) = (g.r(0), g.r(g.n - 1));
    let mut edges = vec![r0];
    while edges.last().unwrap() * 2.0 <= r1 * (1.0 + 1e-12) {
        edges.push(edges.last().unwrap() * 2.0);
    }
    (0..solution.layers().saturating_sub(1))
        .map(|i| {
            let v = solution.interaction(i);
            let dyads: Vec<(f64, f64, f64)> =
                edges.windows(2).map(|w| (w[0], w[1], integrate_annulus(&v, g, solution.dim, w[0], w[1]))).collect();
            let total = integrate_annulus(&v, g, solution.dim, r0, r1);
            let k = dyads.len();
            let tail_ratio = if k >= 2 && dyads[k - 2].2 > 0.0 {
                dyads[k - 1].2 / dyads[k - 2].2
            } else if k >= 2 {
                0.0
            } else {
                f64::NAN
            };
            PairInteraction { pair: i, total, dyads, tail_ratio, convergent: tail_ratio < 0.5 }
        })
        .collect()
}

/// Radial test functions on [inner, 2 outer], equal to 1 on [2 inner, outer].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RadialCutoff {
    LinearRamp {
        inner: f64,
        outer: f64,
    },
    /// Quintic smoothstep transitions.
    Smooth {
        inner: f64,
        outer: f64,
    },
}

fn smoothstep(x: f64) -> (f64, f64, f64) {
    if x <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if x >= 1.0 {
        return (1.0, 0.0, 0.0);
    }
    let p = x * x * x * (10.0 + x * (-15.0 + 6.0 * x));
    let dp = 30.0 * x * x * (1.0 - x) * (1.0 - x);
    let d2p = 60.0 * x * (1.0 - x) * (1.0 - 2.0 * x);
    (p, dp, d2p)
}

impl RadialCutoff {
    fn bounds(&self) -> (f64, f64) {
        match *self {
            RadialCutoff::LinearRamp { inner, outer } | RadialCutoff::Smooth { inner, outer } => (inner, outer),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.bounds();
        if !(a > 0.0 && b >= 2.0 * a) {
            return invalid(format!("cutoff needs 0 < inner and outer >= 2 inner, got ({a}, {b})"));
        }
        Ok(())
    }

    pub fn support(&self) -> (f64, f64) {
        let (a, b) = self.bounds();
        (a, 2.0 * b)
    }

    /// Points where the cutoff is not smooth or changes formula.
    pub fn breakpoints(&self) -> [f64; 4] {
        let (a, b) = self.bounds();
        [a, 2.0 * a, b, 2.0 * b]
    }

    /// (eta, eta', eta'').
    pub fn eval(&self, r: f64) -> (f64, f64, f64) {
        let (a, b) = self.bounds();
        match self {
            RadialCutoff::LinearRamp { .. } => {
                if r <= a || r >= 2.0 * b {
                    (0.0, 0.0, 0.0)
                } else if r < 2.0 * a {
                    ((r - a) / a, 1.0 / a, 0.0)
                } else if r <= b {
                    (1.0, 0.0, 0.0)
                } else {
                    ((2.0 * b - r) / b, -1.0 / b, 0.0)
                }
            }
            RadialCutoff::Smooth { .. } => {
                if r < 2.0 * a {
                    let (p, dp, d2p) = smoothstep((r - a) / a);
                    (p, dp / a, d2p / (a * a))
                } else if r <= b {
                    (1.0, 0.0, 0.0)
                } else {
                    let (p, dp, d2p) = smoothstep((2.0 * b - r) / b);
                    (p, -dp / b, d2p / (b * b))
                }
            }
        }
    }
}

/// Integral over r in [a, b] of g(r) |S^{m-1}| r^{m-1}, split at breakpoints.
fn radial_integral(g: &dyn Fn(f64) -> f64, m: usize, points: &[f64]) -> f64 {
    let area = unit_sphere_area(m);
    points
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| integrate_adaptive(|r| g(r) * r.powi(m as i32 - 1), w[0], w[1], 1e-14, 1e-12).0)
        .sum::<f64>()
        * area
}

fn sampled<'a>(solution_grid: &'a LogGrid, values: &'a [f64]) -> impl Fn(f64) -> f64 + 'a {
    move |r: f64| interpolate_uniform(values, solution_grid.s0, solution_grid.h, r.ln(), 6)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStability {
    pub pair: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
}

/// 2 sqrt2 kappa int V eta^2 against
/// (1 + C R0^{-1/8}) int |grad eta|^2 + C int eta^2 |x|^{-2-1/8}, per pair.
pub fn toda_stability_test(solution: &TodaSolution, cutoff: &RadialCutoff, constant: f64) -> Result<Vec<PairStability>> {
    cutoff.validate()?;
    let g = &solution.grid;
    let (lo, hi) = cutoff.support();
    if lo < g.r(0) * (1.0 - 1e-12) || hi > g.r(g.n - 1) * (1.0 + 1e-12) {
        return invalid("cutoff support leaves the solution grid");
    }
    let r0 = lo;
    let m = solution.dim;
    let bp = cutoff.breakpoints();
    let grad = radial_integral(&|r| cutoff.eval(r).1.powi(2), m, &bp);
    let weight = radial_integral(&|r| cutoff.eval(r).0.powi(2) * r.powf(-2.125), m, &bp);
    let rhs = (1.0 + constant * r0.powf(-0.125)) * grad + constant * weight;
    Ok((0..solution.layers().saturating_sub(1))
        .map(|i| {
            let v = solution.interaction(i);
            let vf = sampled(g, &v);
            let lhs = 2.0 * SQRT2 * solution.kappa * radial_integral(&|r| vf(r) * cutoff.eval(r).0.powi(2), m, &bp);
            PairStability { pair: i, lhs, rhs, satisfied: lhs <= rhs }
        })
        .collect())
}

/// The R-exponent (n - 1) - 2 (2q + 1) of the right-hand side in Farina's
/// estimate with the cutoff family eta_R.
pub fn farina_exponent(n: usize, q: f64) -> f64 {
    (n as f64 - 1.0) - 2.0 * (2.0 * q + 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FarinaReport {
    pub dim: usize,
    pub q: f64,
    pub exponent: f64,
    /// Exponent of the cutoff part of the right-hand side integral, from the
    /// last two radii.
    pub measured_exponent: f64,
    pub radii: Vec<f64>,
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    /// Relative growth of the left-hand side over the last dyad.
    pub last_increment: f64,
    pub saturated: bool,
}

/// Sweep R = 2 r0 2^j for a sampled interaction V on a log grid in R^m:
/// lhs = int V^{2q+1} eta_R^2, rhs = (int [|grad eta_R|^2 + |D^2 eta_R| + |y|^{-2-1/8}]^{2q+1})^{1/(2q+1)}.
pub fn farina_sweep(grid: &LogGrid, v: &[f64], dim: usize, q: f64, r0: f64) -> Result<FarinaReport> {
    if !(q > 0.0 && q < 2.0) {
        return invalid(format!("q = {q} outside (0, 2)"));
    }
    if v.len() != grid.n || !(r0 >= grid.r(0) * (1.0 - 1e-12)) {
        return invalid("interaction samples do not match the grid or r0 is below it");
    }
    let p = 2.0 * q + 1.0;
    let vf = sampled(grid, v);
    let rmax = grid.r(grid.n - 1);
    let mut radii = Vec::new();
    let mut r = 2.0 * r0;
    while 2.0 * r <= rmax * (1.0 + 1e-12) {
        radii.push(r);
        r *= 2.0;
    }
    if radii.len() < 3 {
        return Err(Error::InsufficientData("grid too short for a dyadic sweep".into()));
    }
    let mut lhs = Vec::new();
    let mut rhs = Vec::new();
    let mut cut_parts = Vec::new();
    for &big in &radii {
        let eta = RadialCutoff::Smooth { inner: r0, outer: big };
        let bp = eta.breakpoints();
        let hess = |r: f64| {
            let (_, d1, d2) = eta.eval(r);
            (d2 * d2 + (dim as f64 - 1.0) * (d1 / r).powi(2)).sqrt()
        };
        lhs.push(radial_integral(&|r| vf(r).max(0.0).powf(p) * eta.eval(r).0.powi(2), dim, &bp));
        let full = radial_integral(&|r| (eta.eval(r).1.powi(2) + hess(r) + r.powf(-2.125)).powf(p), dim, &bp);
        rhs.push(full.powf(1.0 / p));
        let outer_pts = [big, 2.0 * big];
        cut_parts.push(radial_integral(&|r| (eta.eval(r).1.powi(2) + hess(r)).powf(p), dim, &outer_pts));
    }
    let k = radii.len();
    let measured_exponent = (cut_parts[k - 1] / cut_parts[k - 2]).ln() / 2f64.ln();
    let last_increment = if lhs[k - 1] > 0.0 { (lhs[k - 1] - lhs[k - 2]) / lhs[k - 1] } else { 0.0 };
    Ok(FarinaReport {
        dim,
        q,
        exponent: farina_exponent(dim + 1, q),
        measured_exponent,
        radii,
        lhs,
        rhs,
        last_increment,
        saturated: last_increment < 0.02,
    })
}

/// v^a(r) = (1/2 pi) int (log|y - z| - log|z|) h(|z|) dz for a radial source
/// supported in [r_in, r_out] of the plane, and c^a = (1/2 pi) int h.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenormalizedPotential {
    pub radii: Vec<f64>,
    pub values: Vec<f64>,
    pub mass: f64,
}

/// For radial h the angular average of log|y - z| is log max(|y|, |z|), so
/// v^a(r) = int_{rho < r} h(rho) rho log(r / rho) d rho.
pub fn renormalized_potential(h: &dyn Fn(f64) -> f64, r_in: f64, r_out: f64, radii: &[f64]) -> Result<RenormalizedPotential> {
    if !(r_in > 0.0 && r_out > r_in) {
        return invalid("need 0 < r_in < r_out");
    }
    // Dyadic tails of int |h| rho: a log-divergent source keeps them flat.
    let mut edges = vec![r_in];
    while edges.last().unwrap() * 2.0 <= r_out {
        edges.push(edges.last().unwrap() * 2.0);
    }
    edges.push(r_out);
    let pieces: Vec<f64> = edges
        .windows(2)
        .filter(|w| w[1] > w[0] * (1.0 + 1e-12))
        .map(|w| integrate_adaptive(|x| h(x).abs() * x, w[0], w[1], 1e-15, 1e-12).0)
        .collect();
    let k = pieces.len();
    if k >= 4 {
        let head = pieces.iter().cloned().fold(0.0, f64::max);
        let tail = pieces[k - 3..].iter().sum::<f64>() / 3.0;
        // Tails that stay comparable to the bulk over the last dyads signal a
        // source that is not integrable.
        if head > 0.0 && tail > 0.25 * head && pieces[k - 2] > 0.9 * pieces[k - 3] {
            return invalid("source is not absolutely integrable (dyadic tails do not decay)");
        }
    }
    let mass = edges.windows(2).filter(|w| w[1] > w[0]).map(|w| integrate_adaptive(|x| h(x) * x, w[0], w[1], 1e-15, 1e-13).0).sum();
    let values = radii
        .iter()
        .map(|&r| {
            let top = r.min(r_out);
            if top <= r_in {
                return 0.0;
            }
            edges
                .iter()
                .copied()
                .filter(|e| *e < top)
                .chain(std::iter::once(top))
                .collect::<Vec<f64>>()
                .windows(2)
                .filter(|w| w[1] > w[0])
                .map(|w| integrate_adaptive(|x| h(x) * x * (r / x).ln(), w[0], w[1], 1e-15, 1e-13).0)
                .sum()
        })
        .collect();
    Ok(RenormalizedPotential { radii: radii.to_vec(), values, mass })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonicRemainder {
    pub values: Vec<f64>,
    /// sup |Delta v^b| away from the grid ends.
    pub defect: f64,
    pub fit: LogFit,
}

/// v^b = f - v^a on a log grid in the plane, its harmonicity defect and the
/// fit v^b ~ b + c log r on the outer decade.
pub fn harmonic_remainder(grid: &LogGrid, f: &[f64], va: &[f64], tol: f64) -> Result<HarmonicRemainder> {
    if f.len() != grid.n || va.len() != grid.n {
        return invalid("samples do not match the grid");
    }
    let vb: Vec<f64> = f.iter().zip(va).map(|(a, b)| a - b).collect();
    let lap = radial_laplacian(&vb, grid, 2, 3);
    let defect = lap[3..grid.n - 3].iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if defect > tol {
        return invalid(format!("harmonic remainder defect {defect:.3e} exceeds {tol:.3e}"));
    }
    let radii = grid.radii();
    let rmax = radii[grid.n - 1];
    let fit = fit_log(&radii, &vb, (rmax / 10.0, rmax))?;
    Ok(HarmonicRemainder { values: vb, defect, fit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn liouville_config(mu: f64, r_min: f64, r_max: f64) -> TodaConfig {
        let (a1, a2) = liouville_two_layer(r_min, mu, DEFAULT_KAPPA);
        let (s1, s2) = liouville_two_layer_slope(r_max, mu);
        let mut cfg =
            TodaConfig::new(2, r_min, r_max, vec![TodaEnd::Value(a1), TodaEnd::Value(a2)], vec![TodaEnd::Slope(s1), TodaEnd::Slope(s2)]);
        // The mixed problem has other radial branches; start near the oracle.
        let grid = cfg.validate().unwrap();
        let bump = |r: f64| 0.2 * (-(r.ln()).powi(2)).exp();
        let (f1, f2): (Vec<f64>, Vec<f64>) = grid
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

    #[test]
    fn single_layer_residual_is_the_laplacian() {
        let grid = LogGrid::new(1.0, 1000.0, 64).unwrap();
        let f: Vec<f64> = grid.radii().iter().map(|r| r * r).collect();
        let res = toda_residual(&[f], &grid, 2, DEFAULT_KAPPA, None).unwrap();
        let worst = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max((x - 4.0).abs()));
        assert!(worst(&res[0][3..grid.n - 3]) < 1e-8 && worst(&res[0]) < 1e-4);
    }

    #[test]
    fn closed_form_has_small_residual() {
        let grid = LogGrid::new(1.0, 100.0, 256).unwrap();
        for mu in [0.5, 1.0, 2.0] {
            let (f1, f2): (Vec<f64>, Vec<f64>) = grid.radii().iter().map(|r| liouville_two_layer(*r, mu, DEFAULT_KAPPA)).unzip();
            let res = toda_residual(&[f1, f2], &grid, 2, DEFAULT_KAPPA, None).unwrap();
            let worst = res.iter().flat_map(|v| v.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(worst <= 1e-6, "mu={mu}: {worst}");
        }
    }

    #[test]
    fn separated_constants_have_negligible_residual() {
        let grid = LogGrid::new(1.0, 100.0, 32).unwrap();
        let k = 20.0;
        let h: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64 * k; grid.n]).collect();
        let res = toda_residual(&h, &grid, 2, DEFAULT_KAPPA, None).unwrap();
        let worst = res.iter().flat_map(|v| v.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(worst <= 1e-10, "{worst}");
    }

    #[test]
    fn solver_matches_liouville_oracle() {
        for mu in [0.5, 1.0, 2.0] {
            let sol = solve_toda(&liouville_config(mu, 0.1, 100.0)).unwrap();
            let mut worst: f64 = 0.0;
            for (j, r) in sol.radii().iter().enumerate() {
                let (e1, e2) = liouville_two_layer(*r, mu, DEFAULT_KAPPA);
                worst = worst.max((sol.heights[0][j] - e1).abs()).max((sol.heights[1][j] - e2).abs());
            }
            assert!(
                worst < 1e-6,
                "mu={mu}: {worst} steps={} res={} h0={:?} h1={:?}",
                sol.newton_steps,
                sol.residual,
                &sol.heights[0][..3],
                &sol.heights[1][..3]
            );
            let fits = fit_log_asymptotics(&sol).unwrap();
            let gap = check_gap(&fits, 1e-2);
            assert!((gap.gaps[0] - 2.0 * SQRT2).abs() < 0.03 && gap.all_pass(), "{gap:?}");
            let ints = interaction_integrals(&sol);
            assert!(ints[0].convergent && ints[0].tail_ratio < 0.5);
        }
    }

    #[test]
    fn harmonic_single_layer_is_exact() {
        let (b, c) = (0.7, 1.3);
        let cfg = TodaConfig::new(1, 1.0, 1000.0, vec![TodaEnd::Value(b)], vec![TodaEnd::Slope(c)]);
        let sol = solve_toda(&cfg).unwrap();
        for (j, r) in sol.radii().iter().enumerate() {
            assert!((sol.heights[0][j] - b - c * r.ln()).abs() < 1e-10);
        }
        let fit = &fit_log_asymptotics(&sol).unwrap()[0];
        assert!((fit.b - b).abs() < 1e-10 && (fit.c - c).abs() < 1e-10 && fit.alpha.is_none());
        assert!(check_gap(std::slice::from_ref(fit), 1e-2).all_pass());
    }

    #[test]
    fn three_layers_stay_ordered() {
        let cfg = TodaConfig::new(
            3,
            1.0,
            1000.0,
            vec![TodaEnd::Value(-3.0), TodaEnd::Value(0.0), TodaEnd::Value(3.0)],
            vec![TodaEnd::Slope(-3.0), TodaEnd::Slope(0.2), TodaEnd::Slope(3.0)],
        );
        let sol = solve_toda(&cfg).unwrap();
        assert!(sol.ordered && sol.residual <= 1e-8);
        let res = toda_residual(&sol.heights, &sol.grid, 2, sol.kappa, None).unwrap();
        let worst = res.iter().flat_map(|v| v[3..v.len() - 3].iter()).fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn forcing_only_recovers_slope_and_exponent() {
        let amp = 1e-3;
        let c = 0.4;
        let particular = |r: f64| 64.0 * amp * r.powf(-0.125);
        let r0 = 1.0;
        let mut cfg =
            TodaConfig::new(1, r0, 1e4, vec![TodaEnd::Value(particular(r0))], vec![TodaEnd::Slope(c - 8.0 * amp * 1e4f64.powf(-0.125))]);
        cfg.forcing = Some(Forcing { amplitude: amp, exponent: 0.125, signs: vec![] });
        let sol = solve_toda(&cfg).unwrap();
        let fit = &fit_log_asymptotics(&sol).unwrap()[0];
        assert!((fit.c - c).abs() < 1e-4, "{fit:?}");
        assert!((fit.alpha.unwrap() - 0.125).abs() < 0.01, "{fit:?}");
    }

    #[test]
    fn critical_gap_is_flagged_twice() {
        let grid = LogGrid::new(1.0, 1e4, 64).unwrap();
        let sol = TodaSolution::from_log_ends(grid, 2, DEFAULT_KAPPA, &[(0.0, -SQRT2 / 2.0), (0.0, SQRT2 / 2.0)]);
        let fits = fit_log_asymptotics(&sol).unwrap();
        assert!(!check_gap(&fits, 1e-2).all_pass());
        let ints = interaction_integrals(&sol);
        assert!(!ints[0].convergent && ints[0].tail_ratio > 0.9);
        let lhs: Vec<f64> = [100.0, 4000.0]
            .iter()
            .map(|&big| toda_stability_test(&sol, &RadialCutoff::LinearRamp { inner: 1.0, outer: big }, 1.0).unwrap()[0].clone())
            .map(|p| p.lhs)
            .collect();
        assert!(lhs[1] > lhs[0] * 1.5);
        let last = toda_stability_test(&sol, &RadialCutoff::LinearRamp { inner: 1.0, outer: 4000.0 }, 1.0).unwrap();
        assert!(!last[0].satisfied);
    }

    #[test]
    fn liouville_reduction_is_stable_for_all_ramps() {
        let sol = solve_toda(&liouville_config(1.0, 0.1, 1e4)).unwrap();
        let mut last = 0.0;
        for big in [10.0, 100.0, 1000.0, 5000.0] {
            let st = toda_stability_test(&sol, &RadialCutoff::LinearRamp { inner: 0.5, outer: big }, 1.0).unwrap();
            assert!(st[0].satisfied, "{st:?}");
            assert!(st[0].lhs < 8.0 * std::f64::consts::PI + 1e-6);
            assert!(st[0].lhs >= last - 1e-9);
            last = st[0].lhs;
        }
        let far = toda_stability_test(&sol, &RadialCutoff::Smooth { inner: 1000.0, outer: 2500.0 }, 1.0).unwrap();
        assert!(far[0].lhs < 1e-3 * far[0].rhs);
    }

    #[test]
    fn farina_saturates_for_fast_decay() {
        let grid = LogGrid::new(1.0, 1e4, 64).unwrap();
        let v: Vec<f64> = grid.radii().iter().map(|r| (1.0 + r * r).powi(-2)).collect();
        let rep = farina_sweep(&grid, &v, 4, 0.5, 1.0).unwrap();
        assert_eq!(rep.exponent, 0.0);
        assert!(rep.measured_exponent.abs() < 1e-6, "{}", rep.measured_exponent);
        assert!(rep.saturated);
        let critical: Vec<f64> = grid.radii().iter().map(|r| r.powi(-2)).collect();
        let rep = farina_sweep(&grid, &critical, 4, 0.5, 1.0).unwrap();
        assert!(!rep.saturated);
        let growth: Vec<f64> = rep.lhs.windows(2).map(|w| w[1] - w[0]).collect();
        let spread = growth[2..].iter().fold(0.0f64, |m, g| m.max((g / growth[2] - 1.0).abs()));
        assert!(spread < 0.05, "increments {growth:?}");
        let zero = vec![0.0; grid.n];
        let rep = farina_sweep(&grid, &zero, 4, 0.5, 1.0).unwrap();
        assert!(rep.lhs.iter().all(|x| *x == 0.0));
        assert!(farina_sweep(&grid, &v, 4, 2.5, 1.0).is_err());
    }

    #[test]
    fn farina_exponent_table() {
        let grid = LogGrid::new(1.0, 1e4, 32).unwrap();
        let v: Vec<f64> = grid.radii().iter().map(|r| (1.0 + r * r).powi(-2)).collect();
        for n in 4..=7 {
            let q = ((n as f64 - 1.0) / 2.0 - 1.0) / 2.0;
            assert_eq!(farina_exponent(n, q), 0.0);
            let rep = farina_sweep(&grid, &v, n - 1, q, 1.0).unwrap();
            assert!((rep.measured_exponent - rep.exponent).abs() < 1e-6);
            for qq in [0.25, 0.75, 1.5] {
                let rep = farina_sweep(&grid, &v, n - 1, qq, 1.0).unwrap();
                assert!((rep.measured_exponent - farina_exponent(n, qq)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn renormalized_potential_of_a_bump() {
        let bump = |x: f64| {
            let t = (x - 1.0) / 0.5;
            if t.abs() < 1.0 {
                (1.0 - t * t).powi(2)
            } else {
                0.0
            }
        };
        let raw = integrate_adaptive(|x| bump(x) * x, 0.5, 1.5, 1e-15, 1e-13).0;
        let h = move |x: f64| bump(x) / raw;
        let radii = [2.0, 10.0, 100.0, 1000.0];
        let pot = renormalized_potential(&h, 0.5, 1.5, &radii).unwrap();
        assert!((pot.mass - 1.0).abs() < 1e-12);
        let k = integrate_adaptive(|x| h(x) * x * x.ln(), 0.5, 1.5, 1e-15, 1e-13).0;
        for (r, v) in radii.iter().zip(&pot.values) {
            assert!((v - (r.ln() - k)).abs() < 1e-10);
        }
        assert!((pot.values[3] / 1000f64.ln() - 1.0).abs() < 0.01);
        let zero = renormalized_potential(&|_| 0.0, 0.5, 10.0, &radii).unwrap();
        assert!(zero.values.iter().all(|v| *v == 0.0) && zero.mass == 0.0);
        assert!(renormalized_potential(&|x| 1.0 / (x * x), 1.0, 1e6, &radii).is_err());
    }

    #[test]
    fn interaction_mass_matches_renormalized_mass() {
        let sol = solve_toda(&liouville_config(1.0, 1.0, 1000.0)).unwrap();
        let v = sol.interaction(0);
        let g = sol.grid.clone();
        let h = move |r: f64| DEFAULT_KAPPA * interpolate_uniform(&v, g.s0, g.h, r.ln(), 6);
        let pot = renormalized_potential(&h, 1.0, 1000.0, &[1000.0]).unwrap();
        let total = DEFAULT_KAPPA * interaction_integrals(&sol)[0].total;
        assert!((pot.mass - total / (2.0 * std::f64::consts::PI)).abs() < 0.01 * pot.mass);
    }

    #[test]
    fn harmonic_remainder_cases() {
        let grid = LogGrid::new(1.0, 1000.0, 64).unwrap();
        let radii = grid.radii();
        let (b, c) = (0.3, -1.7);
        let f: Vec<f64> = radii.iter().map(|r| b + c * r.ln()).collect();
        let rem = harmonic_remainder(&grid, &f, &vec![0.0; grid.n], 1e-8).unwrap();
        assert!((rem.fit.b - b).abs() < 1e-10 && (rem.fit.c - c).abs() < 1e-10);
        // f = v^a + b + c log r for the Liouville upper layer's own Laplacian.
        let mu = 1.0;
        let h = |r: f64| {
            let x = mu * mu * r * r;
            8.0 * mu * mu / (1.0 + x).powi(2) / SQRT2 * 0.5
        };
        let pot = renormalized_potential(&h, 1.0, 1000.0, &radii).unwrap();
        let f: Vec<f64> = pot.values.iter().zip(&radii).map(|(v, r)| v + b + c * r.ln()).collect();
        let rem = harmonic_remainder(&grid, &f, &pot.values, 1e-6).unwrap();
        assert!((rem.fit.b - b).abs() < 1e-6 && (rem.fit.c - c).abs() < 1e-6);
        let bad: Vec<f64> = radii.iter().map(|r| r * r).collect();
        assert!(harmonic_remainder(&grid, &bad, &vec![0.0; grid.n], 1e-6).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn residual_invariances(shift in -5.0f64..5.0, b1 in -2.0f64..2.0, c1 in -2.0f64..2.0, b2 in 2.0f64..4.0, c2 in -1.0f64..3.0) {
            let grid = LogGrid::new(1.0, 100.0, 32).unwrap();
            let mk = |b: f64, c: f64| -> Vec<f64> { (0..grid.n).map(|j| b + c * grid.s(j) + 0.1 * (grid.s(j)).sin()).collect() };
            let h = vec![mk(b1, c1), mk(b2, c2), mk(b2 + 3.0, c2 + 1.0)];
            let base = toda_residual(&h, &grid, 2, DEFAULT_KAPPA, None).unwrap();
            let shifted: Vec<Vec<f64>> = h.iter().map(|v| v.iter().map(|x| x + shift).collect()).collect();
            let moved = toda_residual(&shifted, &grid, 2, DEFAULT_KAPPA, None).unwrap();
            for (a, b) in base.iter().flatten().zip(moved.iter().flatten()) {
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
            }
            let reflected: Vec<Vec<f64>> = h.iter().rev().map(|v| v.iter().map(|x| -x).collect()).collect();
            let flipped = toda_residual(&reflected, &grid, 2, DEFAULT_KAPPA, None).unwrap();
            for (i, row) in flipped.iter().enumerate() {
                for (a, b) in row.iter().zip(&base[2 - i]) {
                    prop_assert!((a + b).abs() <= 1e-9 * (1.0 + a.abs()));
                }
            }
            for j in 0..grid.n {
                let f: Vec<f64> = h.iter().map(|v| v[j]).collect();
                let rhs = toda_rhs(&f, grid.r(j), DEFAULT_KAPPA, None);
                let s: f64 = rhs.iter().sum();
                prop_assert!(s.abs() <= 1e-12 * (1.0 + rhs.iter().map(|x| x.abs()).sum::<f64>()));
            }
        }

        #[test]
        fn gap_is_independent_of_kappa(kappa in 0.1f64..20.0, mu in 0.5f64..2.0) {
            let grid = LogGrid::new(1.0, 1000.0, 64).unwrap();
            let (f1, f2): (Vec<f64>, Vec<f64>) = grid.radii().iter().map(|r| liouville_two_layer(*r, mu, kappa)).unzip();
            let sol = TodaSolution { grid, dim: 2, kappa, forcing: None, heights: vec![f1, f2], residual: 0.0, newton_steps: 0, ordered: true };
            let fits = fit_log_asymptotics(&sol).unwrap();
            let gap = check_gap(&fits, 1e-2);
            prop_assert!((gap.gaps[0] - 2.0 * SQRT2).abs() < 1e-3);
        }
    }
}
