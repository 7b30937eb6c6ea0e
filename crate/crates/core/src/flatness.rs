//! Improvement of flatness on dyadic annuli: best directions and excess,
//! the scale-advancing iteration, harmonic fits on annuli (linear, and
//! linear + constant + log in the plane) and the decomposition of ends into
//! ordered graphs.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, GateReason, Result};
use crate::levelset::LayerSet;
use crate::linalg::{dot, least_squares, minimax_fit, norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleSource {
    Synthetic,
    LayerSet,
}

/// Points of a hypersurface in R^n, indexed by the overlapping dyadic annuli
/// A_k = {2^{k-1} <= |x| < 2^{k+1}}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnularSample {
    pub dim: usize,
    pub points: Vec<Vec<f64>>,
    #[serde(default)]
    pub normals: Option<Vec<Vec<f64>>>,
    pub source: SampleSource,
    #[serde(skip)]
    by_scale: BTreeMap<i32, Vec<usize>>,
}

fn scales_of(r: f64) -> [i32; 2] {
    let mut j = r.log2().floor() as i32;
    // Exact powers of two decide membership, not the rounded logarithm.
    while 2f64.powi(j) > r {
        j -= 1;
    }
    while 2f64.powi(j + 1) <= r {
        j += 1;
    }
    [j, j + 1]
}

impl AnnularSample {
    pub fn new(points: Vec<Vec<f64>>, source: SampleSource) -> Result<Self> {
        let dim = points.first().map_or(0, |p| p.len());
        if dim < 2 {
            return invalid("sample points need at least two coordinates");
        }
        if points.iter().any(|p| p.len() != dim || p.iter().any(|x| !x.is_finite())) {
            return invalid("sample points must share one dimension and be finite");
        }
        let mut by_scale: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for (i, p) in points.iter().enumerate() {
            let r = norm(p);
            if r > 0.0 {
                for k in scales_of(r) {
                    by_scale.entry(k).or_default().push(i);
                }
            }
        }
        Ok(Self { dim, points, normals: None, source, by_scale })
    }

    /// Layer points relative to `center`.
    pub fn from_layers(layers: &LayerSet, center: &[f64]) -> Result<Self> {
        let d = layers.base.dim() + 1;
        if center.len() != d {
            return invalid(format!("center has {} coordinates, layers live in R^{d}", center.len()));
        }
        let pts = (0..layers.count())
            .flat_map(|i| (0..layers.base.len()).map(move |k| (i, k)))
            .map(|(i, k)| layers.point(i, k).iter().zip(center).map(|(a, b)| a - b).collect())
            .collect();
        Self::new(pts, SampleSource::LayerSet)
    }

    pub fn annulus(&self, k: i32) -> Vec<&[f64]> {
        self.annulus_indices(k).iter().map(|&i| self.points[i].as_slice()).collect()
    }

    pub fn annulus_indices(&self, k: i32) -> &[usize] {
        self.by_scale.get(&k).map_or(&[], |v| v.as_slice())
    }

    /// Scales whose annulus holds at least `min_points` samples.
    pub fn populated_scales(&self, min_points: usize) -> Vec<i32> {
        self.by_scale.iter().filter(|(_, v)| v.len() >= min_points).map(|(k, _)| *k).collect()
    }

    pub fn transformed(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        Self::new(self.points.iter().map(|p| f(p)).collect(), self.source)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExcessNorm {
    Sup,
    /// Quantile of |e.x| in (0, 1], for noisy samples.
    Percentile(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionFit {
    pub scale: i32,
    pub direction: Vec<f64>,
    /// sup |e.x| / 2^k (or the configured quantile).
    pub excess: f64,
    pub points: usize,
}

fn smallest_principal(pts: &[&[f64]], scale: f64) -> Vec<f64> {
    let n = pts[0].len();
    let mut m = DMatrix::<f64>::zeros(n, n);
    for p in pts {
        for a in 0..n {
            for b in 0..n {
                m[(a, b)] += p[a] * p[b] / (scale * scale);
            }
        }
    }
    let eig = SymmetricEigen::new(m);
    let imin = (0..n).min_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b])).unwrap();
    eig.eigenvectors.column(imin).iter().copied().collect()
}

/// Orthonormal basis of e^perp by Gram-Schmidt on the coordinate axes.
fn tangent_basis(e: &[f64]) -> Vec<Vec<f64>> {
    let n = e.len();
    let skip = (0..n).max_by(|&a, &b| e[a].abs().total_cmp(&e[b].abs())).unwrap();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n - 1);
    for j in (0..n).filter(|&j| j != skip) {
        let mut v: Vec<f64> = (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect();
        for _ in 0..2 {
            for q in std::iter::once(e).chain(basis.iter().map(|b| b.as_slice())) {
                let c = dot(&v, q);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
            }
        }
        let l = norm(&v);
        basis.push(v.iter().map(|x| x / l).collect());
    }
    basis
}

fn sup_abs(pts: &[&[f64]], e: &[f64]) -> f64 {
    pts.iter().fold(0.0f64, |m, p| m.max(dot(p, e).abs()))
}

fn canonical_sign(e: &mut [f64]) {
    let imax = (0..e.len()).max_by(|&a, &b| e[a].abs().total_cmp(&e[b].abs())).unwrap();
    if e[imax] < 0.0 {
        e.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Unit e minimising sup |e.x| over the points: smallest principal axis,
/// then repeated exact minimax solves on the tangent plane at the current e.
pub fn minimax_direction(pts: &[&[f64]], scale: f64) -> Result<Vec<f64>> {
    let n = pts[0].len();
    let mut e = smallest_principal(pts, scale);
    let mut best = sup_abs(pts, &e);
    for _ in 0..50 {
        if best == 0.0 {
            break;
        }
        let basis = tangent_basis(&e);
        let rows: Vec<Vec<f64>> = pts.iter().map(|p| basis.iter().map(|b| dot(p, b) / scale).collect()).collect();
        let y: Vec<f64> = pts.iter().map(|p| -dot(p, &e) / scale).collect();
        let (t, _) = minimax_fit(&rows, &y)?;
        let mut cand = e.clone();
        for (tj, b) in t.iter().zip(&basis) {
            cand.iter_mut().zip(b).for_each(|(c, bi)| *c += tj * bi);
        }
        let l = norm(&cand);
        cand.iter_mut().for_each(|c| *c /= l);
        let val = sup_abs(pts, &cand);
        let step = (0..n).map(|i| (cand[i] - e[i]).powi(2)).sum::<f64>().sqrt();
        if !(val < best) {
            break;
        }
        e = cand;
        best = val;
        if step < 1e-14 {
            break;
        }
    }
    canonical_sign(&mut e);
    Ok(e)
}

fn excess_of(pts: &[&[f64]], e: &[f64], scale: f64, norm_kind: ExcessNorm) -> f64 {
    match norm_kind {
        ExcessNorm::Sup => sup_abs(pts, e) / scale,
        ExcessNorm::Percentile(q) => {
            let mut v: Vec<f64> = pts.iter().map(|p| dot(p, e).abs()).collect();
            v.sort_by(f64::total_cmp);
            let idx = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
            v[idx] / scale
        }
    }
}

/// Best direction and excess on annulus k.
pub fn best_direction(sample: &AnnularSample, k: i32, min_points: usize, norm_kind: ExcessNorm) -> Result<DirectionFit> {
    let pts = sample.annulus(k);
    if pts.len() < min_points.max(sample.dim + 1) {
        return Err(Error::InsufficientData(format!("annulus 2^{k} holds {} points, need {min_points}", pts.len())));
    }
    let scale = 2f64.powi(k);
    let direction = minimax_direction(&pts, scale)?;
    let excess = excess_of(&pts, &direction, scale, norm_kind);
    Ok(DirectionFit { scale: k, direction, excess, points: pts.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlatnessOptions {
    pub alpha: f64,
    /// Smallness gate on every populated scale.
    pub epsilon0: f64,
    /// Window length k0.
    pub window: usize,
    /// Lower bound K on the base scale.
    pub min_base_scale: i32,
    pub min_points: usize,
    pub norm: ExcessNorm,
    /// Excess values at or below this are treated as noise.
    pub noise_floor: f64,
    /// Relative slack in the decay checks.
    pub tol: f64,
}

impl Default for FlatnessOptions {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            epsilon0: 0.05,
            window: 4,
            min_base_scale: 0,
            min_points: 50,
            norm: ExcessNorm::Sup,
            noise_floor: 1e-12,
            tol: 1e-9,
        }
    }
}

impl FlatnessOptions {
    pub fn delta(&self) -> f64 {
        2f64.powf(self.alpha - 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return invalid(format!("alpha = {} outside (0, 1)", self.alpha));
        }
        if !(self.epsilon0 > 0.0) || self.window == 0 || self.min_points == 0 {
            return invalid("epsilon0, window and min_points must be positive");
        }
        if let ExcessNorm::Percentile(q) = self.norm {
            if !(q > 0.0 && q <= 1.0) {
                return invalid("percentile must lie in (0, 1]");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStep {
    pub base_scale: i32,
    pub best_flatness: f64,
    /// max over the window of excess_k / (delta^{k - k1} eps).
    pub window_ratio: f64,
    /// max over k > k1 of excess_k / eps.
    pub tail_ratio: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessTrace {
    pub alpha: f64,
    pub delta: f64,
    pub window: usize,
    pub epsilon0: f64,
    pub initial_base_scale: i32,
    pub scales: Vec<DirectionFit>,
    /// excess_{k+1} / excess_k, None at the noise floor.
    pub decay_factors: Vec<Option<f64>>,
    /// |e_{k+1} - e_k|.
    pub direction_steps: Vec<f64>,
    pub steps: Vec<IterationStep>,
    pub best_flatness: f64,
    /// Base scale at which two consecutive steps failed.
    pub stalled: Option<i32>,
    pub noise_floor_scale: Option<i32>,
    /// Fitted per-scale factor 2^{slope} of log2 excess, and 1 + slope.
    pub fitted_factor: Option<f64>,
    pub fitted_alpha: Option<f64>,
}

impl FlatnessTrace {
    pub fn limit_direction(&self) -> &[f64] {
        &self.scales.last().expect("trace has scales").direction
    }

    pub fn excess(&self, k: i32) -> Option<f64> {
        self.scales.iter().find(|s| s.scale == k).map(|s| s.excess)
    }
}

fn fit_all_scales(sample: &AnnularSample, opts: &FlatnessOptions) -> Result<Vec<DirectionFit>> {
    let scales = sample.populated_scales(opts.min_points);
    if scales.is_empty() {
        return Err(Error::ScopeGate { scale: 0, reason: GateReason::TooFewSamples(sample.points.len()) });
    }
    if scales.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(Error::InsufficientData("populated scales are not contiguous".into()));
    }
    let mut fits: Vec<DirectionFit> =
        scales.par_iter().map(|&k| best_direction(sample, k, opts.min_points, opts.norm)).collect::<Result<_>>()?;
    for i in 1..fits.len() {
        let prev = fits[i - 1].direction.clone();
        if dot(&fits[i].direction, &prev) < 0.0 {
            fits[i].direction.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(fits)
}

/// Run the scale-advancing iteration: from base scale k1 and best flatness
/// eps = epsilon0, check excess decay delta^{k-k1} eps on [k1 - k0, k1] and
/// eps on k > k1, then advance k1 -> k1 + 1, eps -> delta eps.
pub fn run_iteration(sample: &AnnularSample, opts: &FlatnessOptions) -> Result<FlatnessTrace> {
    opts.validate()?;
    let fits = fit_all_scales(sample, opts)?;
    if let Some(bad) = fits.iter().find(|f| f.excess > opts.epsilon0) {
        return Err(Error::ScopeGate {
            scale: bad.scale,
            reason: GateReason::ExcessTooLarge { excess: bad.excess, threshold: opts.epsilon0 },
        });
    }
    let delta = opts.delta();
    let first = fits[0].scale;
    let last = fits[fits.len() - 1].scale;
    let mut k1 = opts.min_base_scale.max(first + opts.window as i32);
    // The best flatness may not drop below 2^{(alpha - 1) k1}.
    while delta.powi(k1) > opts.epsilon0 {
        k1 += 1;
    }
    if k1 > last {
        return Err(Error::InsufficientData(format!("base scale {k1} lies beyond the last populated scale {last}")));
    }
    let excess = |k: i32| fits[(k - first) as usize].excess;
    let floor = |k: i32| excess(k) <= opts.noise_floor;

    let mut steps = Vec::new();
    let mut stalled = None;
    let mut noise_floor_scale = None;
    let mut failures = 0;
    let mut eps = opts.epsilon0;
    let initial_base_scale = k1;
    let mut base = k1;
    loop {
        let lo = base - opts.window as i32;
        if (lo..=base).all(floor) {
            noise_floor_scale = Some(base);
            break;
        }
        let window_ratio = (lo..=base).map(|k| excess(k) / (delta.powi(k - base) * eps)).fold(0.0, f64::max);
        let tail_ratio = (base + 1..=last).map(|k| excess(k) / eps).fold(0.0, f64::max);
        let pass = window_ratio <= 1.0 + opts.tol && tail_ratio <= 1.0 + opts.tol;
        steps.push(IterationStep { base_scale: base, best_flatness: eps, window_ratio, tail_ratio, pass });
        failures = if pass { 0 } else { failures + 1 };
        if failures >= 2 {
            stalled = Some(base);
            break;
        }
        if base == last {
            break;
        }
        base += 1;
        eps *= delta;
    }

    let decay_factors = fits
        .windows(2)
        .map(|w| if w[0].excess > opts.noise_floor && w[1].excess > opts.noise_floor { Some(w[1].excess / w[0].excess) } else { None })
        .collect();
    let direction_steps =
        fits.windows(2).map(|w| w[0].direction.iter().zip(&w[1].direction).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()).collect();
    let live: Vec<(f64, f64)> = fits.iter().filter(|f| f.excess > opts.noise_floor).map(|f| (f.scale as f64, f.excess.log2())).collect();
    let slope = if live.len() >= 2 {
        least_squares(&live.iter().map(|(k, _)| vec![1.0, *k]).collect::<Vec<_>>(), &live.iter().map(|p| p.1).collect::<Vec<_>>())
            .ok()
            .map(|f| f.coefficients[1])
    } else {
        None
    };
    let best_flatness = steps.iter().rev().find(|s| s.pass).map_or(opts.epsilon0, |s| s.best_flatness);
    Ok(FlatnessTrace {
        alpha: opts.alpha,
        delta,
        window: opts.window,
        epsilon0: opts.epsilon0,
        initial_base_scale,
        scales: fits,
        decay_factors,
        direction_steps,
        steps,
        best_flatness,
        stalled,
        noise_floor_scale,
        fitted_factor: slope.map(|s| 2f64.powf(s)),
        fitted_alpha: slope.map(|s| 1.0 + s),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonicFit {
    /// Linear part a.
    pub linear: Vec<f64>,
    /// Constant and log coefficients (zero for the linear basis).
    pub constant: f64,
    pub log: f64,
    pub residual_sup: f64,
    pub points: usize,
}

fn in_annulus(p: &[f64], lambda: f64) -> bool {
    let r = norm(p);
    r >= lambda * (1.0 - 1e-12) && r <= (1.0 + 1e-12) / lambda
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return invalid(format!("lambda = {lambda} outside (0, 1)"));
    }
    Ok(())
}

/// Least-squares v ~ a.x on B_{1/lambda} minus B_lambda, with the sup residual there.
pub fn harmonic_fit_linear(points: &[Vec<f64>], values: &[f64], lambda: f64) -> Result<HarmonicFit> {
    check_lambda(lambda)?;
    if points.len() != values.len() {
        return invalid("one value per point is required");
    }
    let sel: Vec<usize> = (0..points.len()).filter(|&i| in_annulus(&points[i], lambda)).collect();
    let rows: Vec<Vec<f64>> = sel.iter().map(|&i| points[i].clone()).collect();
    let y: Vec<f64> = sel.iter().map(|&i| values[i]).collect();
    let fit = least_squares(&rows, &y)?;
    Ok(HarmonicFit { linear: fit.coefficients, constant: 0.0, log: 0.0, residual_sup: fit.residual_sup, points: sel.len() })
}

/// Least-squares v ~ a.x + b + c log|x| in the plane on B_{1/lambda} minus B_lambda.
pub fn harmonic_fit_log(points: &[Vec<f64>], values: &[f64], lambda: f64) -> Result<HarmonicFit> {
    check_lambda(lambda)?;
    if points.len() != values.len() || points.iter().any(|p| p.len() != 2) {
        return invalid("log fits need planar points with one value each");
    }
    let sel: Vec<usize> = (0..points.len()).filter(|&i| in_annulus(&points[i], lambda)).collect();
    fit_log_basis(points, values, &sel).map(|(fit, sup)| HarmonicFit {
        linear: fit[..2].to_vec(),
        constant: fit[2],
        log: fit[3],
        residual_sup: sup,
        points: sel.len(),
    })
}

fn fit_log_basis(points: &[Vec<f64>], values: &[f64], sel: &[usize]) -> Result<(Vec<f64>, f64)> {
    let rows: Vec<Vec<f64>> = sel.iter().map(|&i| vec![points[i][0], points[i][1], 1.0, norm(&points[i]).ln()]).collect();
    let y: Vec<f64> = sel.iter().map(|&i| values[i]).collect();
    let fit = least_squares(&rows, &y)?;
    Ok((fit.coefficients, fit.residual_sup))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogIterationOptions {
    pub alpha: f64,
    /// Gate on sup |v| / |x|.
    pub sublinearity: f64,
    pub min_points: usize,
    /// Residuals below this multiple of sup |v| count as exact.
    pub residual_floor: f64,
}

impl Default for LogIterationOptions {
    fn default() -> Self {
        Self { alpha: 0.6, sublinearity: 0.05, min_points: 50, residual_floor: 1e-11 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleLogFit {
    pub scale: i32,
    pub linear: Vec<f64>,
    pub constant: f64,
    pub log: f64,
    pub residual_sup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogFitTrace {
    pub alpha: f64,
    pub delta: f64,
    pub scales: Vec<ScaleLogFit>,
    /// max(|a_{k+1}-a_k|, |b_{k+1}-b_k|, |c_{k+1}-c_k|) 2^{alpha k}.
    pub difference_constants: Vec<f64>,
    /// Each scaled difference stays within 10x the first one.
    pub differences_bounded: bool,
    pub limit_linear: Vec<f64>,
    pub limit_constant: f64,
    pub limit_log: f64,
    /// Geometric tail of the remaining differences.
    pub limit_bound: f64,
    /// Decay exponent of the residuals, None at the residual floor.
    pub residual_exponent: Option<f64>,
}

/// Per-scale fits v ~ a.x + b + c log|x| on the dyadic annuli of a planar
/// exterior sample, with the coefficient-difference bookkeeping.
pub fn run_log_iteration(points: &[Vec<f64>], values: &[f64], opts: &LogIterationOptions) -> Result<LogFitTrace> {
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return invalid(format!("alpha = {} outside (0, 1)", opts.alpha));
    }
    let sample = AnnularSample::new(points.to_vec(), SampleSource::Synthetic)?;
    if sample.dim != 2 || values.len() != points.len() {
        return invalid("log iteration needs planar points with one value each");
    }
    if let Some((i, ratio)) = points.iter().zip(values).map(|(p, v)| v.abs() / norm(p)).enumerate().max_by(|a, b| a.1.total_cmp(&b.1)) {
        if ratio > opts.sublinearity {
            return Err(Error::ScopeGate {
                scale: scales_of(norm(&points[i]))[0],
                reason: GateReason::ExcessTooLarge { excess: ratio, threshold: opts.sublinearity },
            });
        }
    }
    let scales = sample.populated_scales(opts.min_points);
    if scales.len() < 3 {
        return Err(Error::InsufficientData(format!("{} populated annuli, need 3", scales.len())));
    }
    let fits: Vec<ScaleLogFit> = scales
        .par_iter()
        .map(|&k| {
            let (c, sup) = fit_log_basis(points, values, sample.annulus_indices(k))?;
            Ok(ScaleLogFit { scale: k, linear: c[..2].to_vec(), constant: c[2], log: c[3], residual_sup: sup })
        })
        .collect::<Result<_>>()?;
    let vmax = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let difference_constants: Vec<f64> = fits
        .windows(2)
        .map(|w| {
            let da = w[0].linear.iter().zip(&w[1].linear).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let d = da.max((w[1].constant - w[0].constant).abs()).max((w[1].log - w[0].log).abs());
            d * 2f64.powf(opts.alpha * w[0].scale as f64)
        })
        .collect();
    let c0 = difference_constants[0].max(opts.residual_floor * vmax);
    let differences_bounded = difference_constants.iter().all(|c| *c <= 10.0 * c0);
    let last = fits.last().unwrap();
    let cmax = difference_constants.iter().cloned().fold(0.0, f64::max);
    let q = 2f64.powf(-opts.alpha);
    let limit_bound = cmax * q.powi(last.scale) / (1.0 - q);
    let live: Vec<(f64, f64)> =
        fits.iter().filter(|f| f.residual_sup > opts.residual_floor * vmax).map(|f| (f.scale as f64, f.residual_sup.log2())).collect();
    let residual_exponent = if live.len() >= 3 {
        least_squares(&live.iter().map(|(k, _)| vec![1.0, *k]).collect::<Vec<_>>(), &live.iter().map(|p| p.1).collect::<Vec<_>>())
            .ok()
            .map(|f| -f.coefficients[1])
    } else {
        None
    };
    Ok(LogFitTrace {
        alpha: opts.alpha,
        delta: 2f64.powf(-opts.alpha - 1.0),
        limit_linear: last.linear.clone(),
        limit_constant: last.constant,
        limit_log: last.log,
        scales: fits,
        difference_constants,
        differences_bounded,
        limit_bound,
        residual_exponent,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecomposeOptions {
    pub alpha: f64,
    pub min_points: usize,
    pub radial_bins: usize,
    pub angular_bins: usize,
    /// Height gaps above this multiple of the median positive gap in a bin
    /// (largest gap excluded) separate sheets.
    pub gap_factor: f64,
    /// Only annuli with inner radius at least this enter the certificate.
    pub certificate_radius: f64,
}

impl Default for DecomposeOptions {
    fn default() -> Self {
        Self { alpha: 0.1, min_points: 50, radial_bins: 8, angular_bins: 8, gap_factor: 20.0, certificate_radius: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sheet {
    /// Base coordinates x' in e^perp.
    pub base: Vec<Vec<f64>>,
    pub height: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndDecomposition {
    pub direction: Vec<f64>,
    pub sheets: Vec<Sheet>,
    pub scales: Vec<i32>,
    /// growth[i][j] = sup (|f_i| + |x'| |grad f_i|) / |x'|^alpha on annulus scales[j].
    pub growth: Vec<Vec<f64>>,
    pub alpha: f64,
    /// Per sheet: growth ratios do not increase over the outermost annuli.
    pub certified: Vec<bool>,
}

impl EndDecomposition {
    pub fn count(&self) -> usize {
        self.sheets.len()
    }
}

fn bin_of(xp: &[f64], k: i32, opts: &DecomposeOptions) -> Option<usize> {
    let r = norm(xp);
    let (lo, hi) = (1.1 * 2f64.powi(k - 1), 0.9 * 2f64.powi(k + 1));
    if r < lo || r >= hi {
        return None;
    }
    let rb = (((r / lo).ln() / (hi / lo).ln()) * opts.radial_bins as f64) as usize;
    let ab = match xp.len() {
        1 => usize::from(xp[0] >= 0.0),
        _ => {
            let t = xp[1].atan2(xp[0]) + std::f64::consts::PI;
            ((t / (2.0 * std::f64::consts::PI) * opts.angular_bins as f64) as usize).min(opts.angular_bins - 1)
        }
    };
    let nab = if xp.len() == 1 { 2 } else { opts.angular_bins };
    Some(rb.min(opts.radial_bins - 1) * nab + ab)
}

/// Split the sample into ordered graphs over e^perp, matching sheets across
/// overlapping annuli, with the growth certificate
/// |f_i(x')| + |x'| |grad f_i| <= C |x'|^alpha.
pub fn decompose_ends(sample: &AnnularSample, direction: &[f64], opts: &DecomposeOptions) -> Result<EndDecomposition> {
    if direction.len() != sample.dim || (norm(direction) - 1.0).abs() > 1e-9 {
        return invalid("direction must be a unit vector of the sample dimension");
    }
    if opts.radial_bins == 0 || opts.angular_bins == 0 {
        return invalid("bin counts must be positive");
    }
    let basis = tangent_basis(direction);
    let xp: Vec<Vec<f64>> = sample.points.iter().map(|p| basis.iter().map(|b| dot(p, b)).collect()).collect();
    let fh: Vec<f64> = sample.points.iter().map(|p| dot(p, direction)).collect();
    let scales = sample.populated_scales(opts.min_points);
    let mut label: Vec<Option<usize>> = vec![None; sample.points.len()];
    let mut count: Option<usize> = None;
    let mut growth_by_scale: Vec<Vec<f64>> = Vec::new();
    for &k in &scales {
        let scale = 2f64.powi(k);
        let mut bins: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in sample.annulus_indices(k) {
            if let Some(b) = bin_of(&xp[i], k, opts) {
                bins.entry(b).or_default().push(i);
            }
        }
        let mut per_sheet_growth: Vec<f64> = Vec::new();
        for members in bins.values_mut() {
            members.sort_by(|&a, &b| fh[a].total_cmp(&fh[b]));
            let mut positive: Vec<f64> = members.windows(2).map(|w| fh[w[1]] - fh[w[0]]).filter(|g| *g > 0.0).collect();
            positive.sort_by(f64::total_cmp);
            // The largest gap may be the sheet separation itself.
            positive.pop();
            let typical = positive.get(positive.len() / 2).copied().unwrap_or(0.0);
            let threshold = (opts.gap_factor * typical).max(1e-9 * scale);
            let mut clusters: Vec<Vec<usize>> = vec![vec![members[0]]];
            for w in members.windows(2) {
                if fh[w[1]] - fh[w[0]] > threshold {
                    clusters.push(Vec::new());
                }
                clusters.last_mut().unwrap().push(w[1]);
            }
            let expected = *count.get_or_insert(clusters.len());
            if clusters.len() != expected {
                return Err(Error::ScopeGate { scale: k, reason: GateReason::SheetCountMismatch { expected, found: clusters.len() } });
            }
            per_sheet_growth.resize(expected, 0.0);
            for (s, cl) in clusters.iter().enumerate() {
                for &i in cl {
                    match label[i] {
                        Some(prev) if prev != s => {
                            return Err(Error::ScopeGate {
                                scale: k,
                                reason: GateReason::NotGraphical(format!("sample {i} changes sheet {prev} -> {s} across annuli")),
                            });
                        }
                        _ => label[i] = Some(s),
                    }
                }
                // Local gradient by a least-squares plane through the cluster.
                let grad = if cl.len() > xp[cl[0]].len() + 1 {
                    let rows: Vec<Vec<f64>> = cl.iter().map(|&i| std::iter::once(1.0).chain(xp[i].iter().copied()).collect()).collect();
                    let y: Vec<f64> = cl.iter().map(|&i| fh[i]).collect();
                    least_squares(&rows, &y).map(|f| norm(&f.coefficients[1..])).unwrap_or(0.0)
                } else {
                    0.0
                };
                for &i in cl {
                    let r = norm(&xp[i]);
                    let g = (fh[i].abs() + r * grad) / r.powf(opts.alpha);
                    per_sheet_growth[s] = per_sheet_growth[s].max(g);
                }
            }
        }
        growth_by_scale.push(per_sheet_growth);
    }
    let n = count.ok_or_else(|| Error::InsufficientData("no populated annuli to decompose".into()))?;
    let mut sheets: Vec<Sheet> = vec![Sheet { base: Vec::new(), height: Vec::new() }; n];
    for (i, l) in label.iter().enumerate() {
        if let Some(s) = l {
            sheets[*s].base.push(xp[i].clone());
            sheets[*s].height.push(fh[i]);
        }
    }
    let growth: Vec<Vec<f64>> = (0..n).map(|s| growth_by_scale.iter().map(|g| g[s]).collect()).collect();
    let cert_idx: Vec<usize> = (0..scales.len()).filter(|&j| 2f64.powi(scales[j] - 1) >= opts.certificate_radius).collect();
    let certified = growth
        .iter()
        .map(|g| {
            let tail: Vec<f64> = cert_idx.iter().rev().take(3).rev().map(|&j| g[j]).collect();
            tail.len() >= 2 && tail.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9))
        })
        .collect();
    Ok(EndDecomposition { direction: direction.to_vec(), sheets, scales, growth, alpha: opts.alpha, certified })
}

/// Fit b + c log|x'| to a sheet over |x'| >= r_min.
pub fn fit_sheet_log(sheet: &Sheet, r_min: f64) -> Result<(f64, f64, f64)> {
    let sel: Vec<usize> = (0..sheet.base.len()).filter(|&i| norm(&sheet.base[i]) >= r_min).collect();
    let rows: Vec<Vec<f64>> = sel.iter().map(|&i| vec![1.0, norm(&sheet.base[i]).ln()]).collect();
    let y: Vec<f64> = sel.iter().map(|&i| sheet.height[i]).collect();
    let fit = least_squares(&rows, &y)?;
    Ok((fit.coefficients[0], fit.coefficients[1], fit.residual_sup))
}

fn unit_directions(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let l = norm(&v);
            if l > 0.1 && l <= 1.0 {
                break v.iter().map(|x| x / l).collect();
            }
        })
        .collect()
}

/// Self-similar graph sample in R^n: at ambient radii R = 2^{(i+1/2)/m} for
/// i in [m k_lo, m k_hi], points (sqrt(R^2 - h^2) w, h) with h = height(R, w)
/// and base directions w (and -w) depending only on i mod m.
pub fn graph_sample(
    n: usize,
    scales: (i32, i32),
    per_octave: usize,
    height: &dyn Fn(f64, &[f64]) -> f64,
    seed: u64,
) -> Result<AnnularSample> {
    if n < 2 || per_octave == 0 || scales.1 < scales.0 {
        return invalid("graph sample needs n >= 2, per_octave > 0 and an ordered scale range");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs = unit_directions(n - 1, per_octave, &mut rng);
    let m = per_octave as i64;
    let mut pts = Vec::new();
    for i in (scales.0 as i64 * m)..=(scales.1 as i64 * m) {
        // Half-step offset keeps every radius off the annulus boundaries.
        let r = 2f64.powf((i as f64 + 0.5) / m as f64);
        let w = &dirs[i.rem_euclid(m) as usize];
        for sgn in [1.0, -1.0] {
            let ws: Vec<f64> = w.iter().map(|x| sgn * x).collect();
            let h = height(r, &ws);
            if !(h.abs() < r) {
                return invalid(format!("height {h} at radius {r} leaves the sphere"));
            }
            let rho = (r * r - h * h).sqrt();
            let mut p: Vec<f64> = ws.iter().map(|x| rho * x).collect();
            p.push(h);
            pts.push(p);
        }
    }
    AnnularSample::new(pts, SampleSource::Synthetic)
}

/// Both ends of the catenoid |x'| = cosh x_3 in R^3 for |x'| in [2^{k_lo}, 2^{k_hi}].
pub fn catenoid_sample(scales: (i32, i32), per_octave: usize, angles: usize) -> Result<AnnularSample> {
    if scales.0 < 0 || per_octave == 0 || angles == 0 {
        return invalid("catenoid sample needs k_lo >= 0 and positive counts");
    }
    let mut pts = Vec::new();
    let m = per_octave as i64;
    for i in (scales.0 as i64 * m)..=(scales.1 as i64 * m) {
        let rho = 2f64.powf(i as f64 / m as f64);
        let z = rho.acosh();
        for a in 0..angles {
            let t = 2.0 * std::f64::consts::PI * (a as f64 + 0.5 * (i.rem_euclid(2)) as f64) / angles as f64;
            for s in [-1.0, 1.0] {
                pts.push(vec![rho * t.cos(), rho * t.sin(), s * z]);
            }
        }
    }
    AnnularSample::new(pts, SampleSource::Synthetic)
}

/// Helicoid (s cos t, s sin t, pitch t) with |pitch t| <= z_max and
/// |s| in [2^{k_lo}, 2^{k_hi}].
pub fn helicoid_sample(scales: (i32, i32), per_octave: usize, pitch: f64, z_max: f64, turns_resolution: usize) -> Result<AnnularSample> {
    if !(pitch > 0.0 && z_max > 0.0) || per_octave == 0 || turns_resolution == 0 {
        return invalid("helicoid sample needs positive pitch, height and counts");
    }
    let t_max = z_max / pitch;
    let nt = (2.0 * t_max / (2.0 * std::f64::consts::PI) * turns_resolution as f64).ceil() as usize;
    let m = per_octave as i64;
    let mut pts = Vec::new();
    for i in (scales.0 as i64 * m)..=(scales.1 as i64 * m) {
        let s = 2f64.powf(i as f64 / m as f64);
        for j in 0..=nt {
            let t = -t_max + 2.0 * t_max * j as f64 / nt as f64;
            for sg in [-1.0, 1.0] {
                pts.push(vec![sg * s * t.cos(), sg * s * t.sin(), pitch * t]);
            }
        }
    }
    AnnularSample::new(pts, SampleSource::Synthetic)
}
