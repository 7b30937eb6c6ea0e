//! Uniform grids in s = log r and finite-difference utilities on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fornberg's algorithm: weights[k][j] approximate the k-th derivative at
/// `x0` from samples at `xs[j]`, for k = 0..=order.
pub fn fornberg_weights(x0: f64, xs: &[f64], order: usize) -> Vec<Vec<f64>> {
    let n = xs.len();
    let mut c = vec![vec![0.0; n]; order + 1];
    c[0][0] = 1.0;
    let mut c1 = 1.0;
    let mut c4 = xs[0] - x0;
    for i in 1..n {
        let mn = i.min(order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - x0;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c
}

/// Uniform grid s_j = s_0 + j h in s = log r.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogGrid {
    pub s0: f64,
    pub h: f64,
    pub n: usize,
}

impl LogGrid {
    pub fn new(r_min: f64, r_max: f64, points_per_decade: usize) -> Result<Self> {
        if !(r_min > 0.0 && r_max > r_min && r_max.is_finite()) {
            return Err(Error::InvalidGrid(format!("need 0 < r_min < r_max, got [{r_min}, {r_max}]")));
        }
        if points_per_decade < 4 {
            return Err(Error::InvalidGrid("need at least 4 points per decade".into()));
        }
        let decades = (r_max / r_min).log10();
        let intervals = ((decades * points_per_decade as f64).ceil() as usize).max(8);
        let s0 = r_min.ln();
        let h = (r_max.ln() - s0) / intervals as f64;
        Ok(Self { s0, h, n: intervals + 1 })
    }

    pub fn s(&self, j: usize) -> f64 {
        self.s0 + j as f64 * self.h
    }

    pub fn r(&self, j: usize) -> f64 {
        self.s(j).exp()
    }

    pub fn radii(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.r(j)).collect()
    }

    pub fn s_max(&self) -> f64 {
        self.s(self.n - 1)
    }
}

/// Centred derivative weights on a uniform grid with `half` points each side
/// (order 2 half), one-sided near the ends. Returns (f_s, f_ss).
pub fn derivatives_uniform(values: &[f64], h: f64, half: usize) -> (Vec<f64>, Vec<f64>) {
    let n = values.len();
    let width = 2 * half + 1;
    assert!(n >= width, "need at least {width} samples");
    let mut d1 = vec![0.0; n];
    let mut d2 = vec![0.0; n];
    let offsets: Vec<f64> = (0..width).map(|k| k as f64).collect();
    let mut cache: Vec<Option<Vec<Vec<f64>>>> = vec![None; width];
    for j in 0..n {
        let start = j.saturating_sub(half).min(n - width);
        let pos = j - start;
        let w = cache[pos].get_or_insert_with(|| fornberg_weights(pos as f64, &offsets, 2));
        let mut a = 0.0;
        let mut b = 0.0;
        for k in 0..width {
            a += w[1][k] * values[start + k];
            b += w[2][k] * values[start + k];
        }
        d1[j] = a / h;
        d2[j] = b / (h * h);
    }
    (d1, d2)
}

/// Lagrange interpolation of uniform samples with `points` nodes around s.
pub fn interpolate_uniform(values: &[f64], s0: f64, h: f64, s: f64, points: usize) -> f64 {
    let n = values.len();
    let t = (s - s0) / h;
    let p = points.min(n);
    let start = ((t - (p as f64 - 1.0) / 2.0).floor().max(0.0) as usize).min(n - p);
    let mut acc = 0.0;
    for i in 0..p {
        let xi = (start + i) as f64;
        let mut l = 1.0;
        for k in 0..p {
            if k != i {
                let xk = (start + k) as f64;
                l *= (t - xk) / (xi - xk);
            }
        }
        acc += l * values[start + i];
    }
    acc
}

/// r^{-2} (f_ss + (m - 2) f_s) on a log grid: the radial Laplacian in R^m.
pub fn radial_laplacian(values: &[f64], grid: &LogGrid, m: usize, half: usize) -> Vec<f64> {
    let (d1, d2) = derivatives_uniform(values, grid.h, half);
    (0..values.len()).map(|j| (d2[j] + (m as f64 - 2.0) * d1[j]) * (-2.0 * grid.s(j)).exp()).collect()
}

/// Integral over the annulus a <= r <= b in R^m of a radial function given
/// on the log grid, |S^{m-1}| int f r^m ds, by per-cell Gauss-Legendre with
/// local interpolation.
pub fn integrate_annulus(values: &[f64], grid: &LogGrid, m: usize, a: f64, b: f64) -> f64 {
    let (sa, sb) = (a.ln().max(grid.s0), b.ln().min(grid.s_max()));
    if sb <= sa {
        return 0.0;
    }
    let (x, w) = crate::quadrature::gauss_legendre(6);
    let cells = (((sb - sa) / grid.h).ceil() as usize).max(1);
    let step = (sb - sa) / cells as f64;
    let mut acc = 0.0;
    for c in 0..cells {
        let lo = sa + c as f64 * step;
        let mid = lo + 0.5 * step;
        for (xi, wi) in x.iter().zip(&w) {
            let s = mid + 0.5 * step * xi;
            let f = interpolate_uniform(values, grid.s0, grid.h, s, 6);
            acc += wi * 0.5 * step * f * (m as f64 * s).exp();
        }
    }
    acc * crate::potential::unit_sphere_area(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fornberg_reproduces_centered_stencils() {
        let w = fornberg_weights(0.0, &[-1.0, 0.0, 1.0], 2);
        assert!((w[1][0] + 0.5).abs() < 1e-14 && (w[1][2] - 0.5).abs() < 1e-14);
        assert!((w[2][0] - 1.0).abs() < 1e-14 && (w[2][1] + 2.0).abs() < 1e-14);
    }

    #[test]
    fn derivatives_sixth_order() {
        let h = 0.05;
        let v: Vec<f64> = (0..100).map(|j| (j as f64 * h).sin()).collect();
        let (d1, d2) = derivatives_uniform(&v, h, 3);
        for j in 0..100 {
            let x = j as f64 * h;
            assert!((d1[j] - x.cos()).abs() < 1e-7, "{j}");
            assert!((d2[j] + x.sin()).abs() < 1e-5, "{j}");
        }
    }

    #[test]
    fn radial_laplacian_of_log_vanishes_in_2d() {
        let g = LogGrid::new(0.1, 100.0, 64).unwrap();
        let v: Vec<f64> = g.radii().iter().map(|r| 3.0 - 2.0 * r.ln()).collect();
        let worst = radial_laplacian(&v, &g, 2, 3).iter().fold(0.0f64, |a, x| a.max(x.abs()));
        assert!(worst < 1e-7, "{worst}");
        let v3: Vec<f64> = g.radii().iter().map(|r| 1.0 / r).collect();
        assert!(radial_laplacian(&v3, &g, 3, 3).iter().zip(g.radii()).all(|(x, r)| (x * r * r * r).abs() < 1e-6));
    }

    #[test]
    fn annulus_integral() {
        let g = LogGrid::new(0.5, 50.0, 64).unwrap();
        let v: Vec<f64> = g.radii().iter().map(|r| r.powi(-4)).collect();
        // int_1^10 r^{-4} 2 pi r dr = pi (1 - 10^{-2})
        let got = integrate_annulus(&v, &g, 2, 1.0, 10.0);
        assert!((got - std::f64::consts::PI * 0.99).abs() < 1e-7, "{got}");
    }
}
