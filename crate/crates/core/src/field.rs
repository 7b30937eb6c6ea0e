//! Node-centred grids in one to three dimensions, boundary handling and the
//! finite-difference operators everything else is built on.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 3;
pub const DEFAULT_NODE_CAP: usize = 20_000_000;
const SUM_CHUNK: usize = 4096;

/// Box [lower, upper] sampled at `counts` nodes per axis, endpoints included.
/// Axis 0 varies slowest in the flat layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    lower: Vec<f64>,
    spacing: Vec<f64>,
    counts: Vec<usize>,
}

impl GridSpec {
    pub fn new(lower: &[f64], upper: &[f64], counts: &[usize]) -> Result<Self> {
        Self::with_cap(lower, upper, counts, DEFAULT_NODE_CAP)
    }

    pub fn with_cap(lower: &[f64], upper: &[f64], counts: &[usize], cap: usize) -> Result<Self> {
        let d = lower.len();
        if d == 0 || d > MAX_DIM {
            return Err(Error::InvalidGrid(format!("dimension must be 1..=3, got {d}")));
        }
        if upper.len() != d || counts.len() != d {
            return Err(Error::InvalidGrid("lower, upper and counts differ in length".into()));
        }
        let mut spacing = Vec::with_capacity(d);
        let mut total: usize = 1;
        for a in 0..d {
            if !(lower[a].is_finite() && upper[a].is_finite() && upper[a] > lower[a]) {
                return Err(Error::InvalidGrid(format!("axis {a}: need finite lower < upper, got [{}, {}]", lower[a], upper[a])));
            }
            if counts[a] < 3 {
                return Err(Error::InvalidGrid(format!("axis {a}: need at least 3 nodes, got {}", counts[a])));
            }
            spacing.push((upper[a] - lower[a]) / (counts[a] - 1) as f64);
            total = total.checked_mul(counts[a]).ok_or_else(|| Error::InvalidGrid("node count overflows".into()))?;
        }
        if total > cap {
            return Err(Error::InvalidGrid(format!("{total} nodes exceeds the cap of {cap}")));
        }
        Ok(Self { lower: lower.to_vec(), spacing, counts: counts.to_vec() })
    }

    /// Grid from stored parts, keeping the spacing bit-exact.
    pub fn from_parts(lower: &[f64], spacing: &[f64], counts: &[usize]) -> Result<Self> {
        if spacing.len() != lower.len() || spacing.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            return Err(Error::InvalidGrid("spacing must be one positive value per axis".into()));
        }
        let upper: Vec<f64> =
            (0..lower.len()).map(|a| lower[a] + spacing[a] * (counts.get(a).copied().unwrap_or(0) as f64 - 1.0)).collect();
        let mut g = Self::new(lower, &upper, counts)?;
        g.spacing = spacing.to_vec();
        Ok(g)
    }

    /// Grid on [lower, upper] with spacing as close as possible to `h`.
    pub fn with_spacing(lower: &[f64], upper: &[f64], h: f64) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::InvalidGrid(format!("spacing must be positive, got {h}")));
        }
        let counts: Vec<usize> = lower.iter().zip(upper).map(|(a, b)| ((b - a) / h).round().max(2.0) as usize + 1).collect();
        Self::new(lower, upper, &counts)
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> Vec<f64> {
        (0..self.dim()).map(|a| self.coord(a, self.counts[a] - 1)).collect()
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(0.0, f64::max)
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.counts[axis + 1..].iter().product()
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        self.lower[axis] + i as f64 * self.spacing[axis]
    }

    pub fn unravel(&self, mut idx: usize) -> [usize; MAX_DIM] {
        let mut out = [0; MAX_DIM];
        for a in (0..self.dim()).rev() {
            out[a] = idx % self.counts[a];
            idx /= self.counts[a];
        }
        out
    }

    pub fn ravel(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.counts).fold(0, |acc, (i, n)| acc * n + i)
    }

    /// Coordinates of a node; unused entries are zero.
    pub fn point(&self, idx: usize) -> [f64; MAX_DIM] {
        let m = self.unravel(idx);
        let mut p = [0.0; MAX_DIM];
        for a in 0..self.dim() {
            p[a] = self.coord(a, m[a]);
        }
        p
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }
}

/// Condition on one face of the box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Face {
    /// Boundary node values are data and stay fixed.
    Dirichlet,
    /// Zero normal derivative, by even reflection.
    Neumann,
    /// Last node along the axis is identified with the first.
    Periodic,
}

/// Faces per axis as [low, high].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryConditions {
    faces: Vec<[Face; 2]>,
}

impl BoundaryConditions {
    pub fn new(faces: Vec<[Face; 2]>) -> Result<Self> {
        if faces.is_empty() || faces.len() > MAX_DIM {
            return Err(Error::InvalidGrid("boundary conditions need 1..=3 axes".into()));
        }
        for (a, f) in faces.iter().enumerate() {
            if (f[0] == Face::Periodic) != (f[1] == Face::Periodic) {
                return Err(Error::InvalidGrid(format!("axis {a}: periodic faces must come in pairs")));
            }
        }
        Ok(Self { faces })
    }

    pub fn uniform(dim: usize, face: Face) -> Self {
        Self { faces: vec![[face; 2]; dim] }
    }

    pub fn axis(&self, a: usize) -> [Face; 2] {
        self.faces[a]
    }

    pub fn dim(&self) -> usize {
        self.faces.len()
    }

    pub fn is_periodic(&self, a: usize) -> bool {
        self.faces[a][0] == Face::Periodic
    }
}

/// Role of a node in the discrete problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Free,
    Fixed,
    /// Periodic image of the given node.
    Image(usize),
}

/// Node roles and trapezoid weights for a grid with boundary conditions.
#[derive(Debug, Clone)]
pub struct Topology {
    pub kinds: Vec<NodeKind>,
    pub weights: Vec<f64>,
}

impl Topology {
    pub fn new(grid: &GridSpec, bc: &BoundaryConditions) -> Self {
        let n = grid.len();
        let d = grid.dim();
        let mut kinds = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for idx in 0..n {
            let m = grid.unravel(idx);
            let mut fixed = false;
            let mut image = false;
            let mut master = m;
            let mut w = 1.0;
            for a in 0..d {
                let last = grid.counts[a] - 1;
                let h = grid.spacing[a];
                let faces = bc.axis(a);
                if faces[0] == Face::Periodic {
                    if m[a] == last {
                        image = true;
                        master[a] = 0;
                    }
                    w *= h;
                } else {
                    if (m[a] == 0 && faces[0] == Face::Dirichlet) || (m[a] == last && faces[1] == Face::Dirichlet) {
                        fixed = true;
                    }
                    w *= if m[a] == 0 || m[a] == last { 0.5 * h } else { h };
                }
            }
            if image {
                kinds.push(NodeKind::Image(grid.ravel(&master[..d])));
                weights.push(0.0);
            } else {
                kinds.push(if fixed { NodeKind::Fixed } else { NodeKind::Free });
                weights.push(w);
            }
        }
        Self { kinds, weights }
    }

    pub fn free_mask(&self) -> Vec<bool> {
        self.kinds.iter().map(|k| *k == NodeKind::Free).collect()
    }

    /// Copy masters onto their periodic images.
    pub fn sync_images(&self, x: &mut [f64]) {
        for i in 0..x.len() {
            if let NodeKind::Image(m) = self.kinds[i] {
                x[i] = x[m];
            }
        }
    }
}

#[inline]
fn d2_axis(x: &[f64], idx: usize, i: usize, n: usize, s: usize, faces: [Face; 2], inv_h2: f64) -> f64 {
    let c = x[idx];
    let v = if faces[0] == Face::Periodic {
        let m = n - 1;
        let ii = if i == m { 0 } else { i };
        let base = idx - i * s;
        let l = if ii == 0 { m - 1 } else { ii - 1 };
        let r = if ii + 1 == m { 0 } else { ii + 1 };
        x[base + l * s] - 2.0 * x[base + ii * s] + x[base + r * s]
    } else if i == 0 {
        match faces[0] {
            Face::Neumann => 2.0 * (x[idx + s] - c),
            _ => one_sided_d2(c, x[idx + s], x[idx + 2 * s], (n >= 4).then(|| x[idx + 3 * s])),
        }
    } else if i == n - 1 {
        match faces[1] {
            Face::Neumann => 2.0 * (x[idx - s] - c),
            _ => one_sided_d2(c, x[idx - s], x[idx - 2 * s], (n >= 4).then(|| x[idx - 3 * s])),
        }
    } else {
        x[idx - s] - 2.0 * c + x[idx + s]
    };
    v * inv_h2
}

#[inline]
fn one_sided_d2(u0: f64, u1: f64, u2: f64, u3: Option<f64>) -> f64 {
    match u3 {
        Some(u3) => 2.0 * u0 - 5.0 * u1 + 4.0 * u2 - u3,
        None => u0 - 2.0 * u1 + u2,
    }
}

#[inline]
fn d1_axis(x: &[f64], idx: usize, i: usize, n: usize, s: usize, periodic: bool, inv_2h: f64) -> f64 {
    let v = if periodic {
        let m = n - 1;
        let ii = if i == m { 0 } else { i };
        let base = idx - i * s;
        let l = if ii == 0 { m - 1 } else { ii - 1 };
        let r = if ii + 1 == m { 0 } else { ii + 1 };
        x[base + r * s] - x[base + l * s]
    } else if i == 0 {
        -3.0 * x[idx] + 4.0 * x[idx + s] - x[idx + 2 * s]
    } else if i == n - 1 {
        3.0 * x[idx] - 4.0 * x[idx - s] + x[idx - 2 * s]
    } else {
        x[idx + s] - x[idx - s]
    };
    v * inv_2h
}

/// y = Delta_h x at every node, honouring the boundary conditions: Neumann
/// by reflection, periodic by wrap-around, Dirichlet nodes one-sided.
pub fn laplacian(grid: &GridSpec, bc: &BoundaryConditions, x: &[f64], y: &mut [f64]) {
    assert_eq!(x.len(), grid.len());
    assert_eq!(y.len(), grid.len());
    let d = grid.dim();
    let row = grid.counts[d - 1];
    let strides: Vec<usize> = (0..d).map(|a| grid.stride(a)).collect();
    let inv: Vec<f64> = grid.spacing.iter().map(|h| 1.0 / (h * h)).collect();
    y.par_chunks_mut(row).enumerate().for_each(|(r, out)| {
        let start = r * row;
        let m = grid.unravel(start);
        for (j, o) in out.iter_mut().enumerate() {
            let idx = start + j;
            let mut acc = 0.0;
            for a in 0..d {
                let i = if a == d - 1 { j } else { m[a] };
                acc += d2_axis(x, idx, i, grid.counts[a], strides[a], bc.axis(a), inv[a]);
            }
            *o = acc;
        }
    });
}

/// Partial derivative along `axis`: centred, second-order one-sided at
/// non-periodic boundaries.
pub fn partial(grid: &GridSpec, bc: &BoundaryConditions, x: &[f64], axis: usize) -> Vec<f64> {
    let d = grid.dim();
    let row = grid.counts[d - 1];
    let s = grid.stride(axis);
    let n = grid.counts[axis];
    let periodic = bc.is_periodic(axis);
    let inv = 0.5 / grid.spacing[axis];
    let mut y = vec![0.0; grid.len()];
    y.par_chunks_mut(row).enumerate().for_each(|(r, out)| {
        let start = r * row;
        let m = grid.unravel(start);
        for (j, o) in out.iter_mut().enumerate() {
            let i = if axis == d - 1 { j } else { m[axis] };
            *o = d1_axis(x, start + j, i, n, s, periodic, inv);
        }
    });
    y
}

/// Second derivative along `axis` using one-sided stencils at every
/// non-periodic boundary, independent of the face type.
pub fn second_partial(grid: &GridSpec, bc: &BoundaryConditions, x: &[f64], axis: usize) -> Vec<f64> {
    let d = grid.dim();
    let row = grid.counts[d - 1];
    let s = grid.stride(axis);
    let n = grid.counts[axis];
    let faces = if bc.is_periodic(axis) { [Face::Periodic; 2] } else { [Face::Dirichlet; 2] };
    let inv = 1.0 / (grid.spacing[axis] * grid.spacing[axis]);
    let mut y = vec![0.0; grid.len()];
    y.par_chunks_mut(row).enumerate().for_each(|(r, out)| {
        let start = r * row;
        let m = grid.unravel(start);
        for (j, o) in out.iter_mut().enumerate() {
            let i = if axis == d - 1 { j } else { m[axis] };
            *o = d2_axis(x, start + j, i, n, s, faces, inv);
        }
    });
    y
}

/// Deterministic sum: fixed chunks, partial sums combined in order.
pub fn stable_sum(x: &[f64]) -> f64 {
    let parts: Vec<f64> = x.par_chunks(SUM_CHUNK).map(|c| c.iter().sum::<f64>()).collect();
    parts.iter().sum()
}

/// Deterministic weighted inner product.
pub fn weighted_dot(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let parts: Vec<f64> = w
        .par_chunks(SUM_CHUNK)
        .zip(a.par_chunks(SUM_CHUNK))
        .zip(b.par_chunks(SUM_CHUNK))
        .map(|((w, a), b)| w.iter().zip(a).zip(b).map(|((w, a), b)| w * a * b).sum::<f64>())
        .collect();
    parts.iter().sum()
}

/// A scalar function sampled on a grid, with boundary conditions and the
/// interface width epsilon it is meant to be read at.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: GridSpec,
    bc: BoundaryConditions,
    epsilon: f64,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: GridSpec, bc: BoundaryConditions, epsilon: f64, values: Vec<f64>) -> Result<Self> {
        if bc.dim() != grid.dim() {
            return Err(Error::InvalidGrid(format!("boundary conditions for {} axes on a {}-dimensional grid", bc.dim(), grid.dim())));
        }
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
        }
        if values.len() != grid.len() {
            return Err(Error::InvalidGrid(format!("{} values for {} nodes", values.len(), grid.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite value at node {:?}", &grid.unravel(i)[..grid.dim()])));
        }
        let mut f = Self { grid, bc, epsilon, values };
        let topo = Topology::new(&f.grid, &f.bc);
        topo.sync_images(&mut f.values);
        Ok(f)
    }

    pub fn from_fn<F>(grid: GridSpec, bc: BoundaryConditions, epsilon: f64, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let d = grid.dim();
        let values: Vec<f64> = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let p = grid.point(i);
                f(&p[..d])
            })
            .collect();
        Self::new(grid, bc, epsilon, values)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn bc(&self) -> &BoundaryConditions {
        &self.bc
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn topology(&self) -> Topology {
        Topology::new(&self.grid, &self.bc)
    }

    /// Replace values, keeping grid and conditions.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.grid.clone(), self.bc.clone(), self.epsilon, values)
    }

    /// Replace values without validation or image sync.
    pub(crate) fn with_values_unchecked(&self, values: Vec<f64>) -> Self {
        Self { grid: self.grid.clone(), bc: self.bc.clone(), epsilon: self.epsilon, values }
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, multi: &[usize]) -> f64 {
        self.values[self.grid.ravel(multi)]
    }

    pub fn laplacian(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.values.len()];
        laplacian(&self.grid, &self.bc, &self.values, &mut y);
        y
    }

    pub fn gradient(&self) -> Vec<Vec<f64>> {
        (0..self.dim()).map(|a| partial(&self.grid, &self.bc, &self.values, a)).collect()
    }

    pub fn gradient_sq(&self) -> Vec<f64> {
        let g = self.gradient();
        (0..self.values.len()).map(|i| g.iter().map(|c| c[i] * c[i]).sum()).collect()
    }

    /// Hessian entries (i <= j) in row-major upper-triangle order.
    pub fn hessian(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        let grad = self.gradient();
        let mut out = Vec::new();
        for i in 0..d {
            for j in i..d {
                if i == j {
                    out.push(second_partial(&self.grid, &self.bc, &self.values, i));
                } else {
                    let a = partial(&self.grid, &self.bc, &grad[i], j);
                    let b = partial(&self.grid, &self.bc, &grad[j], i);
                    out.push(a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect());
                }
            }
        }
        out
    }

    /// Multilinear interpolation; None outside the box.
    pub fn sample(&self, p: &[f64]) -> Option<f64> {
        let d = self.dim();
        let mut base = [0usize; MAX_DIM];
        let mut frac = [0.0; MAX_DIM];
        for a in 0..d {
            let t = (p[a] - self.grid.lower[a]) / self.grid.spacing[a];
            let n = self.grid.counts[a];
            if !(t >= -1e-12 && t <= (n - 1) as f64 + 1e-12) {
                return None;
            }
            let i = (t.floor().max(0.0) as usize).min(n - 2);
            base[a] = i;
            frac[a] = (t - i as f64).clamp(0.0, 1.0);
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut m = [0usize; MAX_DIM];
            for a in 0..d {
                let bit = (corner >> a) & 1;
                m[a] = base[a] + bit;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if w != 0.0 {
                acc += w * self.get(&m[..d]);
            }
        }
        Some(acc)
    }

    /// Trapezoid integral of per-node values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        weighted_dot(&self.topology().weights, values, &vec![1.0; values.len()])
    }
}

/// Fraction of each node's dual cell (clipped to the box) inside a ball.
#[derive(Debug, Clone)]
pub struct BallRestriction {
    pub fraction: Vec<f64>,
}

impl BallRestriction {
    /// Node quadrature weights for integrals over the ball.
    pub fn weights(&self, topo: &Topology) -> Vec<f64> {
        self.fraction.iter().zip(&topo.weights).map(|(f, w)| f * w).collect()
    }
}

const BALL_SUBSAMPLES: usize = 8;

/// Volume fractions of dual cells inside B_radius(center); cut cells are
/// subsampled on a regular 8^d lattice.
pub fn restrict_to_ball(grid: &GridSpec, center: &[f64], radius: f64) -> Result<BallRestriction> {
    let d = grid.dim();
    if center.len() != d {
        return Err(Error::InvalidArgument(format!("center has {} coordinates, grid has {d}", center.len())));
    }
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(Error::InvalidArgument(format!("radius must be non-negative, got {radius}")));
    }
    let upper = grid.upper();
    let fraction: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let p = grid.point(idx);
            let mut lo = [0.0; MAX_DIM];
            let mut hi = [0.0; MAX_DIM];
            let mut near = 0.0;
            let mut far = 0.0;
            for a in 0..d {
                let h = grid.spacing[a];
                lo[a] = (p[a] - 0.5 * h).max(grid.lower[a]);
                hi[a] = (p[a] + 0.5 * h).min(upper[a]);
                let c = center[a];
                let dn = if c < lo[a] {
                    lo[a] - c
                } else if c > hi[a] {
                    c - hi[a]
                } else {
                    0.0
                };
                let df = (c - lo[a]).abs().max((c - hi[a]).abs());
                near += dn * dn;
                far += df * df;
            }
            let r2 = radius * radius;
            if far <= r2 {
                return 1.0;
            }
            if near >= r2 {
                return 0.0;
            }
            let k = BALL_SUBSAMPLES;
            let total = k.pow(d as u32);
            let mut inside = 0usize;
            for s in 0..total {
                let mut rem = s;
                let mut dist2 = 0.0;
                for a in 0..d {
                    let j = rem % k;
                    rem /= k;
                    let x = lo[a] + (hi[a] - lo[a]) * (j as f64 + 0.5) / k as f64;
                    dist2 += (x - center[a]) * (x - center[a]);
                }
                if dist2 <= r2 {
                    inside += 1;
                }
            }
            inside as f64 / total as f64
        })
        .collect();
    Ok(BallRestriction { fraction })
}

/// A radial profile u(r) in R^dim on strictly increasing samples. In one
/// dimension r is a plain coordinate and may be negative.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialField {
    pub r: Vec<f64>,
    pub values: Vec<f64>,
    pub dim: usize,
}

impl RadialField {
    pub fn new(r: Vec<f64>, values: Vec<f64>, dim: usize) -> Result<Self> {
        if r.len() < 4 || r.len() != values.len() {
            return Err(Error::InvalidGrid("radial field needs at least 4 matching samples".into()));
        }
        if dim == 0 || r.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidGrid("radii must be strictly increasing".into()));
        }
        if dim > 1 && r[0] < 0.0 {
            return Err(Error::InvalidGrid("radii must be non-negative for dim > 1".into()));
        }
        Ok(Self { r, values, dim })
    }

    pub fn from_fn<F: Fn(f64) -> f64>(r: Vec<f64>, dim: usize, f: F) -> Result<Self> {
        let v = r.iter().map(|&x| f(x)).collect();
        Self::new(r, v, dim)
    }

    /// u'' + (dim - 1) u' / r. At r = 0 the even extension gives dim u''(0).
    pub fn operator(&self) -> Vec<f64> {
        radial_operator(&self.r, &self.values, self.dim)
    }
}

/// Three-point weights (left, centre, right) for u'' and u' on a
/// non-uniform stencil.
pub(crate) fn three_point(hl: f64, hr: f64) -> ([f64; 3], [f64; 3]) {
    let d2 = [2.0 / (hl * (hl + hr)), -2.0 / (hl * hr), 2.0 / (hr * (hl + hr))];
    let d1 = [-hr / (hl * (hl + hr)), (hr - hl) / (hl * hr), hl / (hr * (hl + hr))];
    (d2, d1)
}

pub(crate) fn radial_operator(r: &[f64], u: &[f64], dim: usize) -> Vec<f64> {
    let n = r.len();
    let k = (dim - 1) as f64;
    let mut out = vec![0.0; n];
    for j in 1..n - 1 {
        let (d2, d1) = three_point(r[j] - r[j - 1], r[j + 1] - r[j]);
        let upp = d2[0] * u[j - 1] + d2[1] * u[j] + d2[2] * u[j + 1];
        let up = d1[0] * u[j - 1] + d1[1] * u[j] + d1[2] * u[j + 1];
        out[j] = upp + if dim > 1 { k * up / r[j] } else { 0.0 };
    }
    for &(j, s) in &[(0usize, 1isize), (n - 1, -1)] {
        let idx = |m: isize| (j as isize + s * m) as usize;
        let xs: Vec<f64> = (0..4).map(|m| r[idx(m)]).collect();
        let w = crate::radial::fornberg_weights(r[j], &xs, 2);
        let val = |row: usize| (0..4).map(|m| w[row][m] * u[idx(m as isize)]).sum::<f64>();
        if dim > 1 && r[j] == 0.0 {
            out[j] = dim as f64 * 2.0 * (u[1] - u[0]) / (r[1] * r[1]);
        } else {
            out[j] = val(2) + if dim > 1 { k * val(1) / r[j] } else { 0.0 };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(n: usize, l: f64) -> GridSpec {
        GridSpec::new(&[-l, -l], &[l, l], &[n, n]).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec::new(&[0.0], &[1.0], &[2]).is_err());
        assert!(GridSpec::new(&[1.0], &[0.0], &[5]).is_err());
        assert!(GridSpec::new(&[0.0, 0.0], &[1.0], &[5, 5]).is_err());
        assert!(GridSpec::with_cap(&[0.0, 0.0], &[1.0, 1.0], &[100, 100], 9999).is_err());
        assert!(BoundaryConditions::new(vec![[Face::Periodic, Face::Neumann]]).is_err());
        let g = GridSpec::new(&[0.0], &[1.0], &[5]).unwrap();
        assert!(ScalarField::new(g.clone(), BoundaryConditions::uniform(1, Face::Neumann), 1.0, vec![0.0; 4]).is_err());
        assert!(ScalarField::new(g, BoundaryConditions::uniform(1, Face::Neumann), 1.0, vec![f64::NAN; 5]).is_err());
    }

    #[test]
    fn ravel_roundtrip() {
        let g = GridSpec::new(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0], &[4, 5, 6]).unwrap();
        for i in 0..g.len() {
            let m = g.unravel(i);
            assert_eq!(g.ravel(&m[..3]), i);
        }
        assert_eq!(g.stride(0), 30);
        assert_eq!(g.stride(2), 1);
    }

    #[test]
    fn laplacian_exact_on_quadratics() {
        let g = square(41, 2.0);
        let bc = BoundaryConditions::uniform(2, Face::Dirichlet);
        let f = ScalarField::from_fn(g, bc, 1.0, |p| p[0] * p[0] + 3.0 * p[1] * p[1] - p[0] * p[1]).unwrap();
        let lap = f.laplacian();
        for v in lap {
            assert!((v - 8.0).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn neumann_reflection_on_cosine() {
        let n = 201;
        let g = GridSpec::new(&[0.0], &[std::f64::consts::PI], &[n]).unwrap();
        let bc = BoundaryConditions::uniform(1, Face::Neumann);
        let f = ScalarField::from_fn(g, bc, 1.0, |p| p[0].cos()).unwrap();
        let lap = f.laplacian();
        for (i, v) in lap.iter().enumerate() {
            let x = f.grid().coord(0, i);
            assert!((v + x.cos()).abs() < 1e-4);
        }
    }

    #[test]
    fn periodic_wrap_and_images() {
        let n = 129;
        let l = 2.0 * std::f64::consts::PI;
        let g = GridSpec::new(&[0.0, 0.0], &[l, l], &[n, n]).unwrap();
        let bc = BoundaryConditions::uniform(2, Face::Periodic);
        let f = ScalarField::from_fn(g, bc, 1.0, |p| p[0].sin() * (2.0 * p[1]).cos()).unwrap();
        let lap = f.laplacian();
        for (i, v) in lap.iter().enumerate() {
            assert!((v + 5.0 * f.values()[i]).abs() < 5e-3);
        }
        let topo = f.topology();
        let images = topo.kinds.iter().filter(|k| matches!(k, NodeKind::Image(_))).count();
        assert_eq!(images, 2 * n - 1);
        let area: f64 = topo.weights.iter().sum();
        assert!((area - l * l).abs() < 1e-10);
    }

    #[test]
    fn ball_quadrature() {
        let g = GridSpec::with_spacing(&[-1.5, -1.5], &[1.5, 1.5], 1.0 / 50.0).unwrap();
        let b = restrict_to_ball(&g, &[0.0, 0.0], 1.0).unwrap();
        let topo = Topology::new(&g, &BoundaryConditions::uniform(2, Face::Neumann));
        let area: f64 = b.weights(&topo).iter().sum();
        assert!((area / std::f64::consts::PI - 1.0).abs() < 0.01);
        let all = restrict_to_ball(&g, &[0.0, 0.0], 10.0).unwrap();
        assert!(all.fraction.iter().all(|&f| f == 1.0));
        let none = restrict_to_ball(&g, &[0.0, 0.0], 0.0).unwrap();
        assert!(none.fraction.iter().all(|&f| f <= 1.0 / 64.0));
    }

    #[test]
    fn radial_laplacian_matches_grid_laplacian() {
        let g = square(201, 4.0);
        let bc = BoundaryConditions::uniform(2, Face::Dirichlet);
        let prof = |r: f64| (-r * r / 2.0).exp();
        let f = ScalarField::from_fn(g.clone(), bc, 1.0, |p| prof((p[0] * p[0] + p[1] * p[1]).sqrt())).unwrap();
        let lap = f.laplacian();
        let rs: Vec<f64> = (0..400).map(|i| i as f64 * 0.01).collect();
        let rf = RadialField::from_fn(rs.clone(), 2, prof).unwrap();
        let op = rf.operator();
        // Compare along the x axis, away from the origin and the edge.
        for i in 110..180 {
            let x = g.coord(0, i);
            let j = (x / 0.01).round() as usize;
            let node = g.ravel(&[i, 100]);
            assert!((lap[node] - op[j]).abs() < 2e-3, "x={x}: {} vs {}", lap[node], op[j]);
        }
        // Origin uses the even extension.
        assert!((op[0] + 2.0).abs() < 1e-3);
    }

    #[test]
    fn sample_interpolates_linear_exactly() {
        let g = square(11, 1.0);
        let f = ScalarField::from_fn(g, BoundaryConditions::uniform(2, Face::Neumann), 1.0, |p| 2.0 * p[0] - p[1] + 0.5).unwrap();
        let v = f.sample(&[0.123, -0.77]).unwrap();
        assert!((v - (2.0 * 0.123 + 0.77 + 0.5)).abs() < 1e-12);
        assert!(f.sample(&[1.5, 0.0]).is_none());
    }

    proptest! {
        #[test]
        fn neumann_laplacian_is_weight_symmetric(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = GridSpec::new(&[0.0, 0.0], &[1.0, 1.3], &[9, 7]).unwrap();
            let bc = BoundaryConditions::new(vec![[Face::Neumann; 2], [Face::Periodic; 2]]).unwrap();
            let topo = Topology::new(&g, &bc);
            let mut a: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut b: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            topo.sync_images(&mut a);
            topo.sync_images(&mut b);
            let mut la = vec![0.0; g.len()];
            let mut lb = vec![0.0; g.len()];
            laplacian(&g, &bc, &a, &mut la);
            laplacian(&g, &bc, &b, &mut lb);
            let x = weighted_dot(&topo.weights, &la, &b);
            let y = weighted_dot(&topo.weights, &a, &lb);
            prop_assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()));
            // Constants are in the kernel.
            let one = vec![1.0; g.len()];
            let mut l1 = vec![0.0; g.len()];
            laplacian(&g, &bc, &one, &mut l1);
            prop_assert!(l1.iter().all(|v| v.abs() < 1e-12));
        }

        #[test]
        fn ball_fraction_monotone_in_radius(r in 0.1f64..1.4) {
            let g = square(31, 1.5);
            let a = restrict_to_ball(&g, &[0.1, -0.2], r).unwrap();
            let b = restrict_to_ball(&g, &[0.1, -0.2], r + 0.05).unwrap();
            prop_assert!(a.fraction.iter().zip(&b.fraction).all(|(x, y)| x <= y));
        }
    }
}
