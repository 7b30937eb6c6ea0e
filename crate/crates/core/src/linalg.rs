//! Krylov solvers, banded direct solvers, a tridiagonal eigenvalue oracle,
//! least squares and minimax fitting.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

const CHUNK: usize = 4096;

/// y = A x for a symmetric operator.
pub trait LinearOperator: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let parts: Vec<f64> =
        a.par_chunks(CHUNK).zip(b.par_chunks(CHUNK)).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()).collect();
    parts.iter().sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.par_iter_mut().zip(x.par_iter()).for_each(|(y, x)| *y += alpha * x);
}

/// z = M^{-1} r for a symmetric positive definite M.
pub trait Preconditioner: Sync {
    fn apply(&self, r: &[f64], z: &mut [f64]);
}

/// Diagonal scaling.
pub struct Jacobi(pub Vec<f64>);

impl Preconditioner for Jacobi {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        z.par_iter_mut().zip(r.par_iter().zip(self.0.par_iter())).for_each(|(z, (r, d))| *z = if *d != 0.0 { r / d } else { *r });
    }
}

/// Settings shared by the Krylov solvers. With `weights` the operator is
/// taken to be self-adjoint for the inner product sum_i w_i a_i b_i.
#[derive(Clone, Copy)]
pub struct KrylovOptions<'a> {
    pub tol: f64,
    pub max_it: usize,
    pub weights: Option<&'a [f64]>,
    pub precond: Option<&'a dyn Preconditioner>,
}

impl<'a> KrylovOptions<'a> {
    pub fn new(tol: f64, max_it: usize) -> Self {
        Self { tol, max_it, weights: None, precond: None }
    }

    fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.weights {
            Some(w) => crate::field::weighted_dot(w, a, b),
            None => dot(a, b),
        }
    }

    fn psolve(&self, r: &[f64], z: &mut [f64]) {
        match self.precond {
            Some(p) => p.apply(r, z),
            None => z.copy_from_slice(r),
        }
    }
}

/// Outcome of an iterative linear solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KrylovOutcome {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
    /// CG met a direction of non-positive curvature.
    pub breakdown: bool,
}

/// Preconditioned conjugate gradients. `x` holds the initial guess and
/// receives the result.
pub fn cg(op: &dyn LinearOperator, b: &[f64], x: &mut [f64], opts: &KrylovOptions) -> KrylovOutcome {
    let n = op.len();
    let bnorm = opts.dot(b, b).sqrt().max(1e-300);
    let mut r = vec![0.0; n];
    op.apply(x, &mut r);
    r.par_iter_mut().zip(b.par_iter()).for_each(|(r, b)| *r = b - *r);
    let mut z = vec![0.0; n];
    opts.psolve(&r, &mut z);
    let mut p = z.clone();
    let mut rz = opts.dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut rel = opts.dot(&r, &r).sqrt() / bnorm;
    if rel <= opts.tol {
        return KrylovOutcome { iterations: 0, relative_residual: rel, converged: true, breakdown: false };
    }
    for it in 1..=opts.max_it {
        op.apply(&p, &mut ap);
        let pap = opts.dot(&p, &ap);
        if !(pap > 0.0) {
            return KrylovOutcome { iterations: it, relative_residual: rel, converged: false, breakdown: true };
        }
        let alpha = rz / pap;
        axpy(alpha, &p, x);
        axpy(-alpha, &ap, &mut r);
        rel = opts.dot(&r, &r).sqrt() / bnorm;
        if rel <= opts.tol {
            return KrylovOutcome { iterations: it, relative_residual: rel, converged: true, breakdown: false };
        }
        opts.psolve(&r, &mut z);
        let rz_new = opts.dot(&r, &z);
        if !(rz_new > 0.0) {
            return KrylovOutcome { iterations: it, relative_residual: rel, converged: false, breakdown: true };
        }
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_iter_mut().zip(z.par_iter()).for_each(|(p, z)| *p = z + beta * *p);
    }
    KrylovOutcome { iterations: opts.max_it, relative_residual: rel, converged: false, breakdown: false }
}

/// Preconditioned MINRES for self-adjoint, possibly indefinite systems.
pub fn minres(op: &dyn LinearOperator, b: &[f64], x: &mut [f64], opts: &KrylovOptions) -> KrylovOutcome {
    let n = op.len();
    let mut r1 = vec![0.0; n];
    op.apply(x, &mut r1);
    for i in 0..n {
        r1[i] = b[i] - r1[i];
    }
    let mut y = vec![0.0; n];
    opts.psolve(&r1, &mut y);
    let beta1 = opts.dot(&r1, &y).max(0.0).sqrt();
    let mut zb = vec![0.0; n];
    opts.psolve(b, &mut zb);
    let bnorm = opts.dot(b, &zb).max(0.0).sqrt().max(1e-300);
    if beta1 / bnorm <= opts.tol {
        return KrylovOutcome { iterations: 0, relative_residual: beta1 / bnorm, converged: true, breakdown: false };
    }
    let mut r2 = r1.clone();
    let (mut oldb, mut beta) = (0.0, beta1);
    let (mut dbar, mut epsln, mut phibar) = (0.0, 0.0, beta1);
    let (mut cs, mut sn) = (-1.0f64, 0.0f64);
    let mut w = vec![0.0; n];
    let mut w2 = vec![0.0; n];
    let mut v = vec![0.0; n];
    for it in 1..=opts.max_it {
        let s = 1.0 / beta;
        for i in 0..n {
            v[i] = s * y[i];
        }
        op.apply(&v, &mut y);
        if it >= 2 {
            axpy(-beta / oldb, &r1, &mut y);
        }
        let alfa = opts.dot(&v, &y);
        axpy(-alfa / beta, &r2, &mut y);
        std::mem::swap(&mut r1, &mut r2);
        r2.copy_from_slice(&y);
        opts.psolve(&r2, &mut y);
        oldb = beta;
        beta = opts.dot(&r2, &y).max(0.0).sqrt();
        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = (gbar * gbar + beta * beta).sqrt().max(f64::EPSILON);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;
        let denom = 1.0 / gamma;
        for i in 0..n {
            let w1 = w2[i];
            w2[i] = w[i];
            w[i] = (v[i] - oldeps * w1 - delta * w2[i]) * denom;
            x[i] += phi * w[i];
        }
        let rel = phibar / bnorm;
        if rel <= opts.tol || beta == 0.0 {
            return KrylovOutcome { iterations: it, relative_residual: rel, converged: true, breakdown: false };
        }
    }
    KrylovOutcome { iterations: opts.max_it, relative_residual: phibar / bnorm, converged: false, breakdown: false }
}

/// Thomas algorithm. `sub[i]` multiplies x[i-1] in row i (sub[0] unused),
/// `sup[i]` multiplies x[i+1] (last unused).
pub fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut piv = diag[0];
    if piv == 0.0 || !piv.is_finite() {
        return Err(Error::Eigen("zero pivot in tridiagonal solve".into()));
    }
    c[0] = sup[0] / piv;
    d[0] = rhs[0] / piv;
    for i in 1..n {
        piv = diag[i] - sub[i] * c[i - 1];
        if piv == 0.0 || !piv.is_finite() {
            return Err(Error::Eigen(format!("zero pivot in tridiagonal solve at row {i}")));
        }
        c[i] = if i + 1 < n { sup[i] / piv } else { 0.0 };
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / piv;
    }
    let mut x = d;
    for i in (0..n - 1).rev() {
        x[i] -= c[i] * x[i + 1];
    }
    Ok(x)
}

/// Number of eigenvalues of the symmetric tridiagonal (diag, off) below x.
pub fn sturm_count(diag: &[f64], off: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut q = 1.0;
    for i in 0..diag.len() {
        let b2 = if i == 0 { 0.0 } else { off[i - 1] * off[i - 1] };
        q = diag[i] - x - if i == 0 { 0.0 } else { b2 / q };
        if q == 0.0 {
            q = -f64::EPSILON * (diag[i].abs() + x.abs() + 1.0);
        }
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// The k smallest eigenvalues of a symmetric tridiagonal matrix by Sturm
/// bisection.
pub fn tridiagonal_eigenvalues(diag: &[f64], off: &[f64], k: usize) -> Vec<f64> {
    let n = diag.len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let r = if i > 0 { off[i - 1].abs() } else { 0.0 } + if i + 1 < n { off[i].abs() } else { 0.0 };
        lo = lo.min(diag[i] - r);
        hi = hi.max(diag[i] + r);
    }
    let scale = lo.abs().max(hi.abs()).max(1.0);
    (0..k.min(n))
        .map(|j| {
            let (mut a, mut b) = (lo - 1e-12 * scale, hi + 1e-12 * scale);
            while b - a > 1e-15 * scale {
                let m = 0.5 * (a + b);
                if m <= a || m >= b {
                    break;
                }
                if sturm_count(diag, off, m) > j {
                    b = m;
                } else {
                    a = m;
                }
            }
            0.5 * (a + b)
        })
        .collect()
}

/// Block-tridiagonal solve by block elimination. `lower[j]` couples block
/// j to j-1 (lower[0] ignored), `upper[j]` couples j to j+1.
pub fn solve_block_tridiagonal(
    lower: &[DMatrix<f64>],
    diag: &[DMatrix<f64>],
    upper: &[DMatrix<f64>],
    rhs: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    let n = diag.len();
    let mut dprime: Vec<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> = Vec::with_capacity(n);
    let mut cprime: Vec<DMatrix<f64>> = Vec::with_capacity(n);
    let mut yprime: Vec<DVector<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let (dj, rj) = if j == 0 {
            (diag[0].clone(), rhs[0].clone())
        } else {
            (&diag[j] - &lower[j] * &cprime[j - 1], &rhs[j] - &lower[j] * &yprime[j - 1])
        };
        let lu = dj.lu();
        let c = if j + 1 < n {
            lu.solve(&upper[j]).ok_or_else(|| Error::Eigen(format!("singular block at {j}")))?
        } else {
            DMatrix::zeros(0, 0)
        };
        let y = lu.solve(&rj).ok_or_else(|| Error::Eigen(format!("singular block at {j}")))?;
        dprime.push(lu);
        cprime.push(c);
        yprime.push(y);
    }
    let mut x = yprime;
    for j in (0..n - 1).rev() {
        let corr = &cprime[j] * &x[j + 1];
        x[j] -= corr;
    }
    Ok(x)
}

/// Least-squares solution with fit diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LsFit {
    pub coefficients: Vec<f64>,
    pub residual_sup: f64,
    pub residual_rms: f64,
    /// Ratio of extreme singular values of the column-scaled design.
    pub condition: f64,
}

/// Solve min |A c - y|_2 by SVD on column-normalised A.
pub fn least_squares(rows: &[Vec<f64>], y: &[f64]) -> Result<LsFit> {
    let m = rows.len();
    if m == 0 {
        return Err(Error::InsufficientData("no rows in least-squares problem".into()));
    }
    let p = rows[0].len();
    if m < p {
        return Err(Error::RankDeficient(format!("{m} rows for {p} unknowns")));
    }
    let a = DMatrix::from_fn(m, p, |i, j| rows[i][j]);
    let scale: Vec<f64> = (0..p).map(|j| a.column(j).norm().max(1e-300)).collect();
    let an = DMatrix::from_fn(m, p, |i, j| a[(i, j)] / scale[j]);
    let svd = an.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = smax / smin.max(1e-300);
    if !(smin > 1e-12 * smax) {
        return Err(Error::RankDeficient(format!("condition number {condition:.3e}")));
    }
    let yv = DVector::from_column_slice(y);
    let c = svd.solve(&yv, 0.0).map_err(|e| Error::RankDeficient(e.to_string()))?;
    let coefficients: Vec<f64> = (0..p).map(|j| c[j] / scale[j]).collect();
    let (sup, ss) = residual_stats(rows, y, &coefficients);
    Ok(LsFit { coefficients, residual_sup: sup, residual_rms: (ss / m as f64).sqrt(), condition })
}

fn residual_stats(rows: &[Vec<f64>], y: &[f64], c: &[f64]) -> (f64, f64) {
    let mut sup: f64 = 0.0;
    let mut ss = 0.0;
    for (row, yi) in rows.iter().zip(y) {
        let r = yi - row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
        sup = sup.max(r.abs());
        ss += r * r;
    }
    (sup, ss)
}

/// Best uniform (L-infinity) fit min_c max_i |y_i - (A c)_i| by the simplex
/// method on the dual problem. Returns coefficients and the attained sup.
pub fn minimax_fit(rows: &[Vec<f64>], y: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::InsufficientData("no samples for minimax fit".into()));
    }
    let p = rows[0].len();
    if n <= p {
        return Err(Error::InsufficientData(format!("{n} samples for {p} coefficients")));
    }
    let scale: Vec<f64> = (0..p).map(|j| rows.iter().map(|r| r[j].abs()).fold(0.0, f64::max).max(1e-300)).collect();
    let yscale = y.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    // Columns: u_i then v_i; rows: p orthogonality rows and the simplex row.
    let m = p + 1;
    let ncol = 2 * n;
    let column = |k: usize| -> DVector<f64> {
        let (i, sgn) = if k < n { (k, 1.0) } else { (k - n, -1.0) };
        DVector::from_fn(m, |r, _| if r < p { sgn * rows[i][r] / scale[r] } else { 1.0 })
    };
    let cost = |k: usize| -> f64 {
        if k < n {
            -y[k] / yscale
        } else {
            y[k - n] / yscale
        }
    };
    let mut b = DVector::zeros(m);
    b[p] = 1.0;
    let pi = simplex_multipliers(m, ncol, &column, &cost, &b)?;
    let coefficients: Vec<f64> = (0..p).map(|j| -pi[j] / scale[j] * yscale).collect();
    let (sup, _) = residual_stats(rows, y, &coefficients);
    Ok((coefficients, sup))
}

/// Two-phase revised simplex for min c.z, M z = b, z >= 0 with b >= 0.
/// Returns the optimal multipliers pi = c_B B^{-1}.
fn simplex_multipliers(
    m: usize,
    ncol: usize,
    column: &dyn Fn(usize) -> DVector<f64>,
    cost: &dyn Fn(usize) -> f64,
    b: &DVector<f64>,
) -> Result<DVector<f64>> {
    // Basis entries >= ncol are artificials.
    let mut basis: Vec<usize> = (0..m).map(|i| ncol + i).collect();
    let cols: Vec<DVector<f64>> = (0..ncol).map(column).collect();
    let mut xb = b.clone();
    let mut binv = DMatrix::<f64>::identity(m, m);
    for phase in 0..2 {
        let phase_cost = |k: usize| -> f64 {
            if phase == 0 {
                if k >= ncol {
                    1.0
                } else {
                    0.0
                }
            } else if k >= ncol {
                0.0
            } else {
                cost(k)
            }
        };
        let mut degenerate_run = 0usize;
        for _iter in 0..(50 * (ncol + m)).max(1000) {
            let cb = DVector::from_fn(m, |i, _| phase_cost(basis[i]));
            let pi = binv.transpose() * &cb;
            let bland = degenerate_run > 50;
            let mut entering = None;
            let mut best = -1e-11;
            for (k, a) in cols.iter().enumerate() {
                if basis.contains(&k) {
                    continue;
                }
                let rc = phase_cost(k) - pi.dot(a);
                if rc < best {
                    entering = Some(k);
                    if bland {
                        break;
                    }
                    best = rc;
                }
            }
            let Some(q) = entering else { break };
            let d = &binv * &cols[q];
            let mut leave = None;
            let mut ratio = f64::INFINITY;
            for i in 0..m {
                if d[i] > 1e-12 {
                    let t = xb[i] / d[i];
                    if t < ratio - 1e-14 || (bland && (t - ratio).abs() <= 1e-14 && leave.map_or(true, |l: usize| basis[i] < basis[l])) {
                        ratio = t;
                        leave = Some(i);
                    }
                }
            }
            let Some(l) = leave else {
                return Err(Error::InvalidArgument("unbounded linear program".into()));
            };
            degenerate_run = if ratio <= 1e-14 { degenerate_run + 1 } else { 0 };
            let piv = d[l];
            for i in 0..m {
                if i != l {
                    let f = d[i] / piv;
                    xb[i] -= f * xb[l];
                    for j in 0..m {
                        binv[(i, j)] -= f * binv[(l, j)];
                    }
                }
            }
            xb[l] /= piv;
            for j in 0..m {
                binv[(l, j)] /= piv;
            }
            basis[l] = q;
        }
        if phase == 0 {
            let infeas: f64 = (0..m).filter(|&i| basis[i] >= ncol).map(|i| xb[i]).sum();
            if infeas > 1e-9 {
                return Err(Error::InvalidArgument("infeasible linear program".into()));
            }
            // Drive remaining zero-level artificials out of the basis.
            for i in 0..m {
                if basis[i] < ncol {
                    continue;
                }
                let row = binv.row(i).clone_owned();
                if let Some(q) = (0..ncol).find(|k| !basis.contains(k) && (&row * &cols[*k])[(0, 0)].abs() > 1e-9) {
                    let d = &binv * &cols[q];
                    let piv = d[i];
                    for r in 0..m {
                        if r != i {
                            let f = d[r] / piv;
                            xb[r] -= f * xb[i];
                            for j in 0..m {
                                binv[(r, j)] -= f * binv[(i, j)];
                            }
                        }
                    }
                    xb[i] /= piv;
                    for j in 0..m {
                        binv[(i, j)] /= piv;
                    }
                    basis[i] = q;
                }
            }
        }
    }
    let cb = DVector::from_fn(m, |i, _| if basis[i] >= ncol { 0.0 } else { cost(basis[i]) });
    Ok(binv.transpose() * cb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    struct Dense(DMatrix<f64>);
    impl LinearOperator for Dense {
        fn len(&self) -> usize {
            self.0.nrows()
        }
        fn apply(&self, x: &[f64], y: &mut [f64]) {
            let r = &self.0 * DVector::from_column_slice(x);
            y.copy_from_slice(r.as_slice());
        }
    }

    fn random_spd(n: usize, shift: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * shift
    }

    #[test]
    fn cg_and_minres_agree_with_lu() {
        let a = random_spd(30, 1.0, 1);
        let b: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let exact = a.clone().lu().solve(&DVector::from_column_slice(&b)).unwrap();
        let op = Dense(a.clone());
        let mut x = vec![0.0; 30];
        let out = cg(&op, &b, &mut x, &KrylovOptions::new(1e-12, 500));
        assert!(out.converged);
        assert!((DVector::from_column_slice(&x) - &exact).amax() < 1e-8);
        // Indefinite: shift the spectrum through zero.
        let ind = &a - DMatrix::identity(30, 30) * 5.0;
        let exact = ind.clone().lu().solve(&DVector::from_column_slice(&b)).unwrap();
        let mut x = vec![0.0; 30];
        let out = minres(&Dense(ind.clone()), &b, &mut x, &KrylovOptions::new(1e-12, 2000));
        assert!(out.converged);
        assert!((DVector::from_column_slice(&x) - &exact).amax() < 1e-6);
        // Same system with a diagonal preconditioner.
        let diag: Vec<f64> = (0..30).map(|i| a[(i, i)]).collect();
        let pre = Jacobi(diag);
        let mut opts = KrylovOptions::new(1e-12, 2000);
        opts.precond = Some(&pre);
        let mut x = vec![0.0; 30];
        assert!(minres(&Dense(ind), &b, &mut x, &opts).converged);
        assert!((DVector::from_column_slice(&x) - &exact).amax() < 1e-6);
    }

    #[test]
    fn thomas_matches_dense() {
        let n = 12;
        let sub: Vec<f64> = (0..n).map(|i| -1.0 - 0.1 * i as f64).collect();
        let sup: Vec<f64> = (0..n).map(|i| -0.5 + 0.05 * i as f64).collect();
        let diag = vec![4.0; n];
        let rhs: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let x = solve_tridiagonal(&sub, &diag, &sup, &rhs).unwrap();
        for i in 0..n {
            let mut r = diag[i] * x[i] - rhs[i];
            if i > 0 {
                r += sub[i] * x[i - 1];
            }
            if i + 1 < n {
                r += sup[i] * x[i + 1];
            }
            assert!(r.abs() < 1e-12);
        }
    }

    #[test]
    fn sturm_matches_symmetric_eigen() {
        let n = 40;
        let diag: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).cos() * 3.0).collect();
        let off: Vec<f64> = (0..n - 1).map(|i| 1.0 + 0.1 * i as f64).collect();
        let m = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                diag[i]
            } else if i + 1 == j {
                off[i]
            } else if j + 1 == i {
                off[j]
            } else {
                0.0
            }
        });
        let mut ev: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().cloned().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let got = tridiagonal_eigenvalues(&diag, &off, 10);
        for k in 0..10 {
            assert!((got[k] - ev[k]).abs() < 1e-11);
        }
    }

    #[test]
    fn block_tridiagonal_matches_dense() {
        let nb = 6;
        let k = 3;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut g = |s: f64| DMatrix::from_fn(k, k, |_, _| rng.gen_range(-1.0..1.0) * s);
        let lower: Vec<_> = (0..nb).map(|_| g(0.3)).collect();
        let upper: Vec<_> = (0..nb).map(|_| g(0.3)).collect();
        let diag: Vec<_> = (0..nb).map(|_| g(0.2) + DMatrix::identity(k, k) * 3.0).collect();
        let rhs: Vec<_> = (0..nb).map(|j| DVector::from_fn(k, |i, _| (i + j) as f64)).collect();
        let x = solve_block_tridiagonal(&lower, &diag, &upper, &rhs).unwrap();
        for j in 0..nb {
            let mut r = &diag[j] * &x[j] - &rhs[j];
            if j > 0 {
                r += &lower[j] * &x[j - 1];
            }
            if j + 1 < nb {
                r += &upper[j] * &x[j + 1];
            }
            assert!(r.amax() < 1e-10);
        }
    }

    #[test]
    fn minimax_line_fit() {
        // Best uniform line to x^2 on [0,1] is x - 1/8 with error 1/8.
        let xs: Vec<f64> = (0..201).map(|i| i as f64 / 200.0).collect();
        let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![1.0, x]).collect();
        let y: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let (c, t) = minimax_fit(&rows, &y).unwrap();
        assert!((c[1] - 1.0).abs() < 1e-9, "{c:?}");
        assert!((c[0] + 0.125).abs() < 1e-9);
        assert!((t - 0.125).abs() < 1e-9);
    }

    #[test]
    fn least_squares_detects_rank_deficiency() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let y = vec![1.0; 10];
        assert!(matches!(least_squares(&rows, &y), Err(Error::RankDeficient(_))));
    }
}
