//! Level sets as ordered graphs over a coordinate hyperplane, with graph
//! curvature, layer separation and curvature decay diagnostics.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::ScalarField;
use crate::linalg::least_squares;
use crate::potential::SQRT2;

/// Axis-aligned grid on the base hyperplane, row-major with the last base
/// axis fastest. A one-dimensional field has an empty base with one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseGrid {
    /// Field axes spanning the base, in increasing order.
    pub axes: Vec<usize>,
    pub lower: Vec<f64>,
    pub spacing: Vec<f64>,
    pub counts: Vec<usize>,
}

impl BaseGrid {
    pub fn new(axes: Vec<usize>, lower: Vec<f64>, spacing: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        if axes.len() != lower.len() || axes.len() != spacing.len() || axes.len() != counts.len() {
            return invalid("base grid arrays differ in length");
        }
        if spacing.iter().any(|h| !(*h > 0.0)) || counts.contains(&0) {
            return invalid("base grid needs positive spacing and counts");
        }
        Ok(Self { axes, lower, spacing, counts })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn unravel(&self, mut k: usize) -> Vec<usize> {
        let mut m = vec![0; self.dim()];
        for a in (0..self.dim()).rev() {
            m[a] = k % self.counts[a];
            k /= self.counts[a];
        }
        m
    }

    pub fn ravel(&self, m: &[usize]) -> usize {
        m.iter().zip(&self.counts).fold(0, |acc, (i, n)| acc * n + i)
    }

    pub fn point(&self, k: usize) -> Vec<f64> {
        self.unravel(k).iter().enumerate().map(|(a, i)| self.lower[a] + *i as f64 * self.spacing[a]).collect()
    }
}

/// Ordered graphs f_1 < ... < f_N of the level set {u = t} over a base
/// hyperplane orthogonal to `axis`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSet {
    pub level: f64,
    pub axis: usize,
    pub base: BaseGrid,
    /// heights[i][k]: layer i at base point k.
    pub heights: Vec<Vec<f64>>,
}

impl LayerSet {
    /// Build from sampled graphs, checking strict ordering.
    pub fn from_graphs(level: f64, axis: usize, base: BaseGrid, heights: Vec<Vec<f64>>) -> Result<Self> {
        if heights.iter().any(|h| h.len() != base.len()) {
            return invalid("graph sample count does not match the base grid");
        }
        for i in 1..heights.len() {
            if let Some(k) = (0..base.len()).find(|&k| !(heights[i][k] > heights[i - 1][k])) {
                return Err(Error::NotGraphical(format!("layers {i} and {} cross at base point {:?}", i + 1, base.point(k))));
            }
        }
        Ok(Self { level, axis, base, heights })
    }

    pub fn count(&self) -> usize {
        self.heights.len()
    }

    /// Full coordinates of layer `i` over base point `k`.
    pub fn point(&self, i: usize, k: usize) -> Vec<f64> {
        let b = self.base.point(k);
        let d = self.base.dim() + 1;
        let mut p = vec![0.0; d];
        let mut j = 0;
        for (a, slot) in p.iter_mut().enumerate() {
            if a == self.axis {
                *slot = self.heights[i][k];
            } else {
                *slot = b[j];
                j += 1;
            }
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LevelOptions {
    /// Graph direction; chosen from the mean gradient when absent.
    pub axis: Option<usize>,
    /// Restrict base points to this box in base coordinates.
    pub base_lower: Option<Vec<f64>>,
    pub base_upper: Option<Vec<f64>>,
    /// Lower bound for eps |d_e u| at crossings.
    pub min_gradient: f64,
}

impl Default for LevelOptions {
    fn default() -> Self {
        Self { axis: None, base_lower: None, base_upper: None, min_gradient: 1e-2 }
    }
}

/// Values of u along a grid column and a C^0 piecewise-cubic interpolant.
struct Column {
    x0: f64,
    h: f64,
    v: Vec<f64>,
}

impl Column {
    fn window(&self, j: usize) -> usize {
        let n = self.v.len();
        if n < 4 {
            0
        } else {
            j.saturating_sub(1).min(n - 4)
        }
    }

    /// Value and derivative at x of the Lagrange cubic through the nodes
    /// around cell j.
    fn eval(&self, j: usize, x: f64) -> (f64, f64) {
        let n = self.v.len();
        let m = n.min(4);
        let j0 = self.window(j);
        let xs: Vec<f64> = (0..m).map(|i| self.x0 + (j0 + i) as f64 * self.h).collect();
        let mut val = 0.0;
        let mut der = 0.0;
        for i in 0..m {
            let mut li = 1.0;
            let mut dli = 0.0;
            for k in 0..m {
                if k == i {
                    continue;
                }
                let denom = xs[i] - xs[k];
                let mut prod = 1.0 / denom;
                for l in 0..m {
                    if l != i && l != k {
                        prod *= (x - xs[l]) / (xs[i] - xs[l]);
                    }
                }
                dli += prod;
                li *= (x - xs[k]) / denom;
            }
            val += li * self.v[j0 + i];
            der += dli * self.v[j0 + i];
        }
        (val, der)
    }

    /// Root of the interpolant minus t in cell j, by safeguarded Newton.
    fn root(&self, j: usize, t: f64) -> f64 {
        let mut a = self.x0 + j as f64 * self.h;
        let mut b = a + self.h;
        let fa = self.v[j] - t;
        if fa == 0.0 {
            return a;
        }
        if self.v[j + 1] - t == 0.0 {
            return b;
        }
        let up = fa < 0.0;
        let frac = fa / (fa - (self.v[j + 1] - t));
        let mut x = a + frac * self.h;
        for _ in 0..100 {
            let (f, df) = self.eval(j, x);
            let f = f - t;
            if f == 0.0 {
                return x;
            }
            if (f < 0.0) == up {
                a = x;
            } else {
                b = x;
            }
            let newton = x - f / df;
            let next = if df != 0.0 && newton > a && newton < b { newton } else { 0.5 * (a + b) };
            if (next - x).abs() <= 1e-15 * (1.0 + x.abs()) || b - a <= 1e-15 * (1.0 + x.abs()) {
                return next;
            }
            x = next;
        }
        x
    }
}

fn choose_axis(field: &ScalarField, t: f64) -> usize {
    let grad = field.gradient();
    let u = field.values();
    let mut best = (0, f64::NEG_INFINITY);
    for (a, g) in grad.iter().enumerate() {
        let s: f64 = u.iter().zip(g).filter(|(v, _)| (*v - t).abs() < 0.5).map(|(_, g)| g.abs()).sum();
        if s > best.1 {
            best = (a, s);
        }
    }
    best.0
}

/// Per-column root finding of u = t along the orientation axis.
pub fn extract_layers(field: &ScalarField, t: f64, opts: &LevelOptions) -> Result<LayerSet> {
    if !(t.abs() <= 0.9) {
        return invalid(format!("level {t} outside [-0.9, 0.9]"));
    }
    if !(opts.min_gradient >= 0.0) {
        return invalid("min_gradient must be non-negative");
    }
    let grid = field.grid();
    let d = grid.dim();
    let axis = opts.axis.unwrap_or_else(|| choose_axis(field, t));
    if axis >= d {
        return invalid(format!("axis {axis} out of range for a {d}-dimensional field"));
    }
    let axes: Vec<usize> = (0..d).filter(|a| *a != axis).collect();
    let mut ranges = Vec::new();
    for (j, &a) in axes.iter().enumerate() {
        let n = grid.counts()[a];
        let lo = opts.base_lower.as_ref().map(|v| v[j]).unwrap_or(f64::NEG_INFINITY);
        let hi = opts.base_upper.as_ref().map(|v| v[j]).unwrap_or(f64::INFINITY);
        let idx: Vec<usize> = (0..n)
            .filter(|&i| {
                let x = grid.coord(a, i);
                x >= lo - 1e-12 && x <= hi + 1e-12
            })
            .collect();
        if idx.is_empty() {
            return invalid("base box contains no grid nodes");
        }
        ranges.push((idx[0], idx.len()));
    }
    if opts.base_lower.as_ref().is_some_and(|v| v.len() != axes.len()) || opts.base_upper.as_ref().is_some_and(|v| v.len() != axes.len()) {
        return invalid("base box has the wrong dimension");
    }
    let base = BaseGrid::new(
        axes.clone(),
        axes.iter().zip(&ranges).map(|(&a, r)| grid.coord(a, r.0)).collect(),
        axes.iter().map(|&a| grid.spacing()[a]).collect(),
        ranges.iter().map(|r| r.1).collect(),
    )?;
    let n = grid.counts()[axis];
    let stride = grid.stride(axis);
    let eps = field.epsilon();
    let u = field.values();
    let columns: Vec<Result<Vec<f64>>> = (0..base.len())
        .into_par_iter()
        .map(|k| {
            let bm = base.unravel(k);
            let mut multi = vec![0usize; d];
            for (j, &a) in axes.iter().enumerate() {
                multi[a] = ranges[j].0 + bm[j];
            }
            let start = grid.ravel(&multi);
            let col = Column { x0: grid.lower()[axis], h: grid.spacing()[axis], v: (0..n).map(|i| u[start + i * stride]).collect() };
            let mut roots = Vec::new();
            for j in 0..n - 1 {
                if (col.v[j] - t >= 0.0) != (col.v[j + 1] - t >= 0.0) {
                    let r = col.root(j, t);
                    let slope = col.eval(j, r).1;
                    if eps * slope.abs() < opts.min_gradient {
                        multi[axis] = j;
                        return Err(Error::Degenerate { gradient: slope.abs(), node: multi[..d].to_vec() });
                    }
                    roots.push(r);
                }
            }
            Ok(roots)
        })
        .collect();
    let columns: Vec<Vec<f64>> = columns.into_iter().collect::<Result<_>>()?;
    let count = columns.first().map_or(0, |c| c.len());
    if let Some(k) = columns.iter().position(|c| c.len() != count) {
        return Err(Error::NotGraphical(format!(
            "crossing count changes from {count} to {} at base point {:?}",
            columns[k].len(),
            base.point(k)
        )));
    }
    let heights: Vec<Vec<f64>> = (0..count).map(|i| columns.iter().map(|c| c[i]).collect()).collect();
    LayerSet::from_graphs(t, axis, base, heights)
}

/// Value of the column interpolant used by `extract_layers` at a layer
/// point, for checking the root contract.
pub fn column_value(field: &ScalarField, layers: &LayerSet, i: usize, k: usize) -> Result<f64> {
    let grid = field.grid();
    let axis = layers.axis;
    let p = layers.point(i, k);
    let mut multi = vec![0usize; grid.dim()];
    for a in 0..grid.dim() {
        if a != axis {
            multi[a] = ((p[a] - grid.lower()[a]) / grid.spacing()[a]).round() as usize;
        }
    }
    let n = grid.counts()[axis];
    let start = grid.ravel(&multi);
    let stride = grid.stride(axis);
    let col = Column { x0: grid.lower()[axis], h: grid.spacing()[axis], v: (0..n).map(|j| field.values()[start + j * stride]).collect() };
    let j = (((p[axis] - col.x0) / col.h).floor().max(0.0) as usize).min(n - 2);
    Ok(col.eval(j, p[axis]).0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGeometry {
    pub mean_curvature: Vec<Vec<f64>>,
    /// |II| per layer and base point.
    pub second_fundamental: Vec<Vec<f64>>,
    /// Principal curvatures, ascending, per layer and base point.
    pub principal: Vec<Vec<Vec<f64>>>,
    /// f_{i+1} - f_i per adjacent pair.
    pub separation: Vec<Vec<f64>>,
}

/// Derivative of samples along base axis `a` (central inside, second-order
/// one-sided at the ends).
fn base_derivative(base: &BaseGrid, f: &[f64], a: usize) -> Vec<f64> {
    let h = base.spacing[a];
    let n = base.counts[a];
    (0..f.len())
        .map(|k| {
            let m = base.unravel(k);
            let at = |i: usize| {
                let mut mm = m.clone();
                mm[a] = i;
                f[base.ravel(&mm)]
            };
            let i = m[a];
            if i == 0 {
                (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
            } else if i == n - 1 {
                (3.0 * at(n - 1) - 4.0 * at(n - 2) + at(n - 3)) / (2.0 * h)
            } else {
                (at(i + 1) - at(i - 1)) / (2.0 * h)
            }
        })
        .collect()
}

fn base_second(base: &BaseGrid, f: &[f64], a: usize) -> Vec<f64> {
    let h2 = base.spacing[a].powi(2);
    let n = base.counts[a];
    (0..f.len())
        .map(|k| {
            let m = base.unravel(k);
            let at = |i: usize| {
                let mut mm = m.clone();
                mm[a] = i;
                f[base.ravel(&mm)]
            };
            let i = m[a];
            let i = i.clamp(1, n - 2);
            if n >= 4 && (m[a] == 0 || m[a] == n - 1) {
                let (s, j) = if m[a] == 0 { (1isize, 0usize) } else { (-1, n - 1) };
                let step = |o: isize| at((j as isize + s * o) as usize);
                (2.0 * step(0) - 5.0 * step(1) + 4.0 * step(2) - step(3)) / h2
            } else {
                (at(i + 1) - 2.0 * at(i) + at(i - 1)) / h2
            }
        })
        .collect()
}

/// Mean curvature div(grad f / sqrt(1 + |grad f|^2)), |II| and the principal
/// curvatures of each graph, by finite differences on the base grid.
pub fn layer_geometry(layers: &LayerSet) -> Result<LayerGeometry> {
    let base = &layers.base;
    let m = base.dim();
    if base.counts.iter().any(|c| *c < 3) {
        return invalid("graphs need at least 3 base points per axis");
    }
    let mut mean = Vec::new();
    let mut second = Vec::new();
    let mut principal = Vec::new();
    for f in &layers.heights {
        let grad: Vec<Vec<f64>> = (0..m).map(|a| base_derivative(base, f, a)).collect();
        let mut hess = vec![vec![Vec::new(); m]; m];
        for a in 0..m {
            hess[a][a] = base_second(base, f, a);
            for b in a + 1..m {
                let mixed = base_derivative(base, &grad[a], b);
                let other = base_derivative(base, &grad[b], a);
                let avg: Vec<f64> = mixed.iter().zip(&other).map(|(x, y)| 0.5 * (x + y)).collect();
                hess[a][b] = avg.clone();
                hess[b][a] = avg;
            }
        }
        let mut hm = Vec::with_capacity(f.len());
        let mut ii = Vec::with_capacity(f.len());
        let mut pc = Vec::with_capacity(f.len());
        for k in 0..f.len() {
            if m == 0 {
                hm.push(0.0);
                ii.push(0.0);
                pc.push(Vec::new());
                continue;
            }
            let g: Vec<f64> = (0..m).map(|a| grad[a][k]).collect();
            let q = 1.0 + g.iter().map(|x| x * x).sum::<f64>();
            let w = q.sqrt();
            // Shape operator g^{-1} h with h = D^2 f / w and
            // g^{-1} = I - grad f grad f^T / q; its eigenvalues are those of the
            // symmetric g^{-1/2} h g^{-1/2}.
            let ginv = DMatrix::from_fn(m, m, |i, j| (if i == j { 1.0 } else { 0.0 }) - g[i] * g[j] / q);
            let h = DMatrix::from_fn(m, m, |i, j| hess[i][j][k] / w);
            let gs = SymmetricEigen::new(ginv.clone());
            let root = &gs.eigenvectors * DMatrix::from_diagonal(&gs.eigenvalues.map(|l| l.max(0.0).sqrt())) * gs.eigenvectors.transpose();
            let sym = &root * &h * &root;
            let sym = (&sym + sym.transpose()) * 0.5;
            let mut ev: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
            ev.sort_by(|a, b| a.total_cmp(b));
            hm.push(ev.iter().sum());
            ii.push(ev.iter().map(|x| x * x).sum::<f64>().sqrt());
            pc.push(ev);
        }
        mean.push(hm);
        second.push(ii);
        principal.push(pc);
    }
    let separation = layers.heights.windows(2).map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect()).collect();
    Ok(LayerGeometry { mean_curvature: mean, second_fundamental: second, principal, separation })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationCheck {
    /// None for a single layer.
    pub min_separation: Option<f64>,
    pub bound: f64,
    pub pass: bool,
}

/// Compare min (f_{i+1} - f_i) against ((1 + theta)/2) sqrt(2) eps log(R/eps).
/// The bound is meaningful for fields stable on B_R; callers check that.
pub fn check_separation_bound(layers: &LayerSet, eps: f64, radius: f64, theta: f64) -> Result<SeparationCheck> {
    if !(eps > 0.0 && radius > eps) {
        return invalid("need eps > 0 and R > eps");
    }
    if !(theta > 0.0 && theta < 1.0) {
        return invalid(format!("theta must lie in (0, 1), got {theta}"));
    }
    let bound = 0.5 * (1.0 + theta) * SQRT2 * eps * (radius / eps).ln();
    let min = layers
        .heights
        .windows(2)
        .flat_map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect::<Vec<_>>())
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))));
    Ok(SeparationCheck { min_separation: min, bound, pass: min.map_or(true, |m| m >= bound) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureDecay {
    pub annuli: Vec<(f64, f64)>,
    /// Per annulus: sup |x| |II| and sup |x|^2 |H| over all layers.
    pub scaled_second: Vec<f64>,
    pub scaled_mean: Vec<f64>,
    pub sup_second: Vec<f64>,
    /// Log-log slope of sup |II| against the annulus midpoint.
    pub slope: Option<f64>,
}

/// Dyadic annuli from `r_min` out to the edge of the base, measured by the
/// base distance to `center`.
pub fn curvature_decay_profile(layers: &LayerSet, geometry: &LayerGeometry, center: &[f64], r_min: f64) -> Result<CurvatureDecay> {
    let base = &layers.base;
    if center.len() != base.dim() || !(r_min > 0.0) {
        return invalid("centre must be a base point and r_min positive");
    }
    if base.dim() == 0 {
        return Err(Error::InsufficientData("curvature decay needs a base of dimension at least 1".into()));
    }
    let radii: Vec<f64> =
        (0..base.len()).map(|k| base.point(k).iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()).collect();
    let rmax = radii.iter().cloned().fold(0.0, f64::max);
    let mut annuli = Vec::new();
    let mut scaled_second = Vec::new();
    let mut scaled_mean = Vec::new();
    let mut sup_second = Vec::new();
    let mut lo = r_min;
    while lo * 2.0 <= rmax + 1e-12 {
        let hi = 2.0 * lo;
        let mut s2: f64 = 0.0;
        let mut sm: f64 = 0.0;
        let mut sup: f64 = 0.0;
        let mut hits = 0;
        for (k, r) in radii.iter().enumerate() {
            if *r >= lo && *r < hi {
                hits += 1;
                for i in 0..layers.count() {
                    let ii = geometry.second_fundamental[i][k];
                    s2 = s2.max(r * ii);
                    sm = sm.max(r * r * geometry.mean_curvature[i][k].abs());
                    sup = sup.max(ii);
                }
            }
        }
        if hits > 0 {
            annuli.push((lo, hi));
            scaled_second.push(s2);
            scaled_mean.push(sm);
            sup_second.push(sup);
        }
        lo = hi;
    }
    let pts: Vec<(f64, f64)> =
        annuli.iter().zip(&sup_second).filter(|(_, s)| **s > 0.0).map(|((a, b), s)| ((0.5 * (a + b)).ln(), s.ln())).collect();
    let slope = if pts.len() >= 2 {
        let rows: Vec<Vec<f64>> = pts.iter().map(|(x, _)| vec![1.0, *x]).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        Some(least_squares(&rows, &ys)?.coefficients[1])
    } else {
        None
    };
    Ok(CurvatureDecay { annuli, scaled_second, scaled_mean, sup_second, slope })
}
