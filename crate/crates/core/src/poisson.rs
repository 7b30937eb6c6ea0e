//! Direct solver for (c - eps Delta_h) x = b on the free nodes of a box,
//! by sine/cosine/Fourier transforms along all axes but one and tridiagonal
//! solves along the remaining one.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::{num_complex::Complex64, Fft, FftPlanner};

use crate::field::{Face, GridSpec, MAX_DIM};
use crate::linalg::Preconditioner;

#[derive(Debug, Clone, Copy, PartialEq)]
enum AxisKind {
    Sine,
    Cosine,
    Fourier,
    Line([Face; 2]),
}

struct Axis {
    kind: AxisKind,
    offset: usize,
    size: usize,
    nodes: usize,
    inv_h2: f64,
    eig: Vec<f64>,
    fft: Option<Arc<dyn Fft<f64>>>,
    ifft: Option<Arc<dyn Fft<f64>>>,
}

/// Shifted Poisson solver. Unknowns are the free nodes for the given face
/// conditions; other entries of the output are zero.
pub struct ShiftedPoisson {
    axes: Vec<Axis>,
    shift: f64,
    eps: f64,
    mask: Option<Vec<bool>>,
}

impl ShiftedPoisson {
    /// None when more than one axis has mixed face types.
    pub fn new(grid: &GridSpec, faces: &[[Face; 2]], shift: f64, eps: f64) -> Option<Self> {
        let d = grid.dim();
        let mut planner = FftPlanner::<f64>::new();
        let mut axes = Vec::with_capacity(d);
        let mut line_axis = None;
        for a in 0..d {
            let n = grid.counts()[a];
            let h = grid.spacing()[a];
            let inv_h2 = 1.0 / (h * h);
            let f = faces[a];
            let (kind, offset, size, fft_len) = match (f[0], f[1]) {
                (Face::Dirichlet, Face::Dirichlet) => (AxisKind::Sine, 1, n - 2, 2 * (n - 1)),
                (Face::Neumann, Face::Neumann) => (AxisKind::Cosine, 0, n, 2 * (n - 1)),
                (Face::Periodic, Face::Periodic) => (AxisKind::Fourier, 0, n - 1, n - 1),
                (lo, hi) => {
                    if line_axis.is_some() {
                        return None;
                    }
                    line_axis = Some(a);
                    let offset = usize::from(lo == Face::Dirichlet);
                    let size = n - offset - usize::from(hi == Face::Dirichlet);
                    (AxisKind::Line([lo, hi]), offset, size, 0)
                }
            };
            let eig: Vec<f64> = (0..size)
                .map(|k| {
                    let theta = match kind {
                        AxisKind::Sine => std::f64::consts::PI * (k + 1) as f64 / (n - 1) as f64,
                        AxisKind::Cosine => std::f64::consts::PI * k as f64 / (n - 1) as f64,
                        AxisKind::Fourier => 2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64,
                        AxisKind::Line(_) => 0.0,
                    };
                    (2.0 - 2.0 * theta.cos()) * inv_h2
                })
                .collect();
            let (fft, ifft) =
                if fft_len > 0 { (Some(planner.plan_fft_forward(fft_len)), Some(planner.plan_fft_inverse(fft_len))) } else { (None, None) };
            axes.push(Axis { kind, offset, size, nodes: n, inv_h2, eig, fft, ifft });
        }
        // Prefer a non-periodic axis for the line solves when every axis transforms.
        if line_axis.is_none() {
            if let Some(a) = (0..d).find(|&a| axes[a].kind != AxisKind::Fourier) {
                axes[a].kind = AxisKind::Line(faces[a]);
                axes[a].fft = None;
                axes[a].ifft = None;
            }
        }
        Some(Self { axes, shift, eps, mask: None })
    }

    /// Restrict to a subset of nodes: z = R P^{-1} R^T r.
    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        self.mask = Some(mask);
        self
    }

    fn compact_len(&self) -> usize {
        self.axes.iter().map(|a| a.size).product()
    }

    fn compact_strides(&self) -> [usize; MAX_DIM] {
        let mut s = [1usize; MAX_DIM];
        let d = self.axes.len();
        for a in (0..d.saturating_sub(1)).rev() {
            s[a] = s[a + 1] * self.axes[a + 1].size;
        }
        s
    }

    fn grid_index(&self, k: usize, cs: &[usize; MAX_DIM]) -> usize {
        let mut rem = k;
        let mut idx = 0;
        for a in 0..self.axes.len() {
            let ka = rem / cs[a];
            rem %= cs[a];
            idx = idx * self.axes[a].nodes + ka + self.axes[a].offset;
        }
        idx
    }

    fn line_starts(&self, axis: usize, cs: &[usize; MAX_DIM]) -> Vec<usize> {
        let total = self.compact_len();
        let m = self.axes[axis].size;
        (0..total).filter(|k| (k / cs[axis]) % m == 0).collect()
    }

    fn transform(&self, data: &mut [Complex64], axis: usize, inverse: bool, cs: &[usize; MAX_DIM]) {
        let ax = &self.axes[axis];
        let m = ax.size;
        let stride = cs[axis];
        let starts = self.line_starts(axis, cs);
        let plan = if inverse { ax.ifft.clone().unwrap() } else { ax.fft.clone().unwrap() };
        let len = plan.len();
        let results: Vec<(usize, Vec<Complex64>)> = starts
            .par_iter()
            .map_init(
                || (vec![Complex64::new(0.0, 0.0); len], vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()]),
                |(buf, scratch), &s| {
                    let line: Vec<Complex64> = (0..m).map(|j| data[s + j * stride]).collect();
                    let out = match ax.kind {
                        AxisKind::Sine => {
                            buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
                            for j in 0..m {
                                buf[j + 1] = line[j];
                                buf[len - 1 - j] = -line[j];
                            }
                            plan.process_with_scratch(buf, scratch);
                            let scale = if inverse { 2.0 / (m + 1) as f64 } else { 1.0 };
                            let rot = if inverse { Complex64::new(0.0, -0.5) } else { Complex64::new(0.0, 0.5) };
                            (0..m).map(|k| buf[k + 1] * rot * scale).collect()
                        }
                        AxisKind::Cosine => {
                            buf[..m].copy_from_slice(&line[..m]);
                            for j in 1..m - 1 {
                                buf[len - j] = line[j];
                            }
                            plan.process_with_scratch(buf, scratch);
                            let scale = if inverse { 2.0 / (m - 1) as f64 } else { 1.0 };
                            (0..m).map(|k| buf[k] * 0.5 * scale).collect()
                        }
                        AxisKind::Fourier => {
                            buf.copy_from_slice(&line);
                            plan.process_with_scratch(buf, scratch);
                            let scale = if inverse { 1.0 / m as f64 } else { 1.0 };
                            buf.iter().map(|v| v * scale).collect()
                        }
                        AxisKind::Line(_) => unreachable!(),
                    };
                    (s, out)
                },
            )
            .collect();
        for (s, out) in results {
            for (j, v) in out.into_iter().enumerate() {
                data[s + j * stride] = v;
            }
        }
    }

    fn solve_compact(&self, data: &mut [Complex64]) {
        let d = self.axes.len();
        let cs = self.compact_strides();
        for a in 0..d {
            if !matches!(self.axes[a].kind, AxisKind::Line(_)) {
                self.transform(data, a, false, &cs);
            }
        }
        let mode_sum = |k: usize, skip: Option<usize>| -> f64 {
            let mut rem = k;
            let mut acc = 0.0;
            for a in 0..d {
                let ka = rem / cs[a];
                rem %= cs[a];
                if Some(a) != skip {
                    acc += self.axes[a].eig[ka];
                }
            }
            acc
        };
        let line = (0..d).find(|&a| matches!(self.axes[a].kind, AxisKind::Line(_)));
        match line {
            None => {
                data.par_iter_mut().enumerate().for_each(|(k, v)| *v /= self.shift + self.eps * mode_sum(k, None));
            }
            Some(la) => {
                let ax = &self.axes[la];
                let AxisKind::Line(faces) = ax.kind else { unreachable!() };
                let m = ax.size;
                let stride = cs[la];
                let starts = self.line_starts(la, &cs);
                let e = self.eps * ax.inv_h2;
                let results: Vec<(usize, Vec<Complex64>)> = starts
                    .par_iter()
                    .map(|&s| {
                        let lam = self.shift + self.eps * mode_sum(s, Some(la));
                        let mut sub = vec![-e; m];
                        let mut sup = vec![-e; m];
                        let diag = vec![lam + 2.0 * e; m];
                        if faces[0] == Face::Neumann {
                            sup[0] = -2.0 * e;
                        }
                        if faces[1] == Face::Neumann {
                            sub[m - 1] = -2.0 * e;
                        }
                        let rhs: Vec<Complex64> = (0..m).map(|j| data[s + j * stride]).collect();
                        (s, thomas_complex(&sub, &diag, &sup, &rhs))
                    })
                    .collect();
                for (s, out) in results {
                    for (j, v) in out.into_iter().enumerate() {
                        data[s + j * stride] = v;
                    }
                }
            }
        }
        for a in (0..d).rev() {
            if !matches!(self.axes[a].kind, AxisKind::Line(_)) {
                self.transform(data, a, true, &cs);
            }
        }
    }

    /// Solve on the full grid layout.
    pub fn solve(&self, b: &[f64], x: &mut [f64]) {
        let cs = self.compact_strides();
        let total = self.compact_len();
        let map: Vec<usize> = (0..total).map(|k| self.grid_index(k, &cs)).collect();
        let mut data: Vec<Complex64> = map
            .iter()
            .map(|&i| {
                let keep = self.mask.as_ref().map_or(true, |m| m[i]);
                Complex64::new(if keep { b[i] } else { 0.0 }, 0.0)
            })
            .collect();
        self.solve_compact(&mut data);
        x.iter_mut().for_each(|v| *v = 0.0);
        for (k, &i) in map.iter().enumerate() {
            let keep = self.mask.as_ref().map_or(true, |m| m[i]);
            if keep {
                x[i] = data[k].re;
            }
        }
    }
}

impl Preconditioner for ShiftedPoisson {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        self.solve(r, z);
    }
}

fn thomas_complex(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[Complex64]) -> Vec<Complex64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![Complex64::new(0.0, 0.0); n];
    c[0] = if n > 1 { sup[0] / diag[0] } else { 0.0 };
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let piv = diag[i] - sub[i] * c[i - 1];
        c[i] = if i + 1 < n { sup[i] / piv } else { 0.0 };
        d[i] = (rhs[i] - d[i - 1] * sub[i]) / piv;
    }
    for i in (0..n - 1).rev() {
        let t = d[i + 1] * c[i];
        d[i] -= t;
    }
    d
}
