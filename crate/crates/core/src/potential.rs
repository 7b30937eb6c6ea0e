//! The double-well potential, its one-dimensional kink and the truncated kink.

use crate::error::{invalid, Result};
use crate::quadrature::integrate_fixed;

pub const SQRT2: f64 = std::f64::consts::SQRT_2;

/// W(u) = (1 - u^2)^2 / 4.
#[inline]
pub fn well(u: f64) -> f64 {
    let a = 1.0 - u * u;
    0.25 * a * a
}

/// W'(u) = u^3 - u.
#[inline]
pub fn well_d1(u: f64) -> f64 {
    u * u * u - u
}

/// W''(u) = 3u^2 - 1.
#[inline]
pub fn well_d2(u: f64) -> f64 {
    3.0 * u * u - 1.0
}

/// (W, W', W'') in one call.
#[inline]
pub fn well_eval(u: f64) -> (f64, f64, f64) {
    (well(u), well_d1(u), well_d2(u))
}

/// Volume of the unit ball in R^k (omega_0 = 1).
pub fn unit_ball_volume(k: usize) -> f64 {
    match k {
        0 => 1.0,
        1 => 2.0,
        _ => unit_ball_volume(k - 2) * 2.0 * std::f64::consts::PI / k as f64,
    }
}

/// Surface area of the unit sphere S^{m-1} in R^m.
pub fn unit_sphere_area(m: usize) -> f64 {
    assert!(m >= 1);
    m as f64 * unit_ball_volume(m)
}

/// Energy of the one-dimensional transition, int_{-1}^{1} sqrt(2 W(s)) ds,
/// by Gauss-Legendre quadrature of the integrand.
pub fn heteroclinic_mass() -> f64 {
    integrate_fixed(|s| (2.0 * well(s)).sqrt(), -1.0, 1.0, 8)
}

/// Closed form of [`heteroclinic_mass`].
pub fn heteroclinic_mass_exact() -> f64 {
    2.0 * SQRT2 / 3.0
}

/// Energy of a flat layer through the unit ball in R^n, so that the
/// normalised energy of a flat layer tends to 1.
pub fn sigma(n: usize) -> f64 {
    assert!(n >= 1, "dimension must be positive");
    unit_ball_volume(n - 1) * heteroclinic_mass_exact()
}

/// Value and first two derivatives of a profile at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileValue {
    pub g: f64,
    pub dg: f64,
    pub d2g: f64,
}

/// g(x) = tanh(o (x - s0) / sqrt 2) with orientation o = +-1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kink {
    pub shift: f64,
    pub orientation: f64,
}

impl Default for Kink {
    fn default() -> Self {
        Self { shift: 0.0, orientation: 1.0 }
    }
}

impl Kink {
    pub fn new(shift: f64, orientation: f64) -> Result<Self> {
        if !shift.is_finite() {
            return invalid("kink shift must be finite");
        }
        if orientation != 1.0 && orientation != -1.0 {
            return invalid(format!("kink orientation must be +1 or -1, got {orientation}"));
        }
        Ok(Self { shift, orientation })
    }

    pub fn value(&self, x: f64) -> f64 {
        (self.orientation * (x - self.shift) / SQRT2).tanh()
    }

    pub fn eval(&self, x: f64) -> ProfileValue {
        let g = self.value(x);
        let s = 1.0 - g * g;
        ProfileValue { g, dg: self.orientation * s / SQRT2, d2g: -g * s }
    }
}

/// C^2 cutoff: 1 on [-1, 1], 0 outside (-2, 2), quintic smoothstep between.
/// Returns (zeta, zeta', zeta'').
pub fn cutoff(s: f64) -> (f64, f64, f64) {
    let a = s.abs();
    if a <= 1.0 {
        return (1.0, 0.0, 0.0);
    }
    if a >= 2.0 {
        return (0.0, 0.0, 0.0);
    }
    let x = a - 1.0;
    let p = x * x * x * (10.0 + x * (-15.0 + 6.0 * x));
    let dp = 30.0 * x * x * (1.0 - x) * (1.0 - x);
    let d2p = 60.0 * x * (1.0 - x) * (1.0 - 2.0 * x);
    let sgn = s.signum();
    (1.0 - p, -sgn * dp, -d2p)
}

/// Value of the truncated kink and its defect g'' - W'(g) at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedValue {
    pub value: f64,
    pub derivative: f64,
    pub defect: f64,
}

/// Kink glued to sgn(t) across window < |t| < 2 window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedKink {
    window: f64,
}

impl TruncatedKink {
    pub fn new(window: f64) -> Result<Self> {
        if !(window.is_finite() && window > 0.0) {
            return invalid(format!("truncation window must be positive, got {window}"));
        }
        Ok(Self { window })
    }

    /// Window 8 log|y| used at base point y; needs |y| > 1.
    pub fn at_scale(y_norm: f64) -> Result<Self> {
        if !(y_norm > 1.0) {
            return invalid(format!("|y| must exceed 1 to set a truncation window, got {y_norm}"));
        }
        Self::new(8.0 * y_norm.ln())
    }

    pub fn window(&self) -> f64 {
        self.window
    }

    pub fn eval(&self, t: f64) -> TruncatedValue {
        let w = self.window;
        let (z, dz, d2z) = cutoff(t / w);
        let k = Kink::default().eval(t);
        let sgn = if t > 0.0 {
            1.0
        } else if t < 0.0 {
            -1.0
        } else {
            0.0
        };
        let rest = k.g - sgn;
        let value = z * k.g + (1.0 - z) * sgn;
        let derivative = dz / w * rest + z * k.dg;
        let second = d2z / (w * w) * rest + 2.0 * dz / w * k.dg + z * k.d2g;
        TruncatedValue { value, derivative, defect: second - well_d1(value) }
    }

    /// sup |defect| on a uniform sample of [-3 window, 3 window].
    pub fn max_defect(&self, samples: usize) -> f64 {
        let a = 3.0 * self.window;
        (0..samples).map(|i| -a + 2.0 * a * i as f64 / (samples - 1) as f64).map(|t| self.eval(t).defect.abs()).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn mass_matches_closed_form() {
        assert_relative_eq!(heteroclinic_mass(), heteroclinic_mass_exact(), epsilon = 1e-14);
    }

    #[test]
    fn kink_energy_equals_mass() {
        // int (g'^2/2 + W(g)) dx for the kink; both terms are equal pointwise.
        let k = Kink::default();
        let (v, _) = crate::quadrature::integrate_adaptive(
            |x| {
                let p = k.eval(x);
                0.5 * p.dg * p.dg + well(p.g)
            },
            -40.0,
            40.0,
            1e-14,
            1e-14,
        );
        assert_relative_eq!(v, heteroclinic_mass_exact(), epsilon = 1e-12);
    }

    #[test]
    fn ball_volumes() {
        assert_eq!(unit_ball_volume(0), 1.0);
        assert_eq!(unit_ball_volume(1), 2.0);
        assert_relative_eq!(unit_ball_volume(2), std::f64::consts::PI);
        assert_relative_eq!(unit_ball_volume(3), 4.0 * std::f64::consts::PI / 3.0);
        assert_relative_eq!(unit_sphere_area(2), 2.0 * std::f64::consts::PI);
        assert_relative_eq!(sigma(1), heteroclinic_mass_exact());
    }

    #[test]
    fn rejects_bad_orientation() {
        assert!(Kink::new(0.0, 0.5).is_err());
        assert!(TruncatedKink::new(-1.0).is_err());
        assert!(TruncatedKink::at_scale(0.5).is_err());
    }

    #[test]
    fn cutoff_derivative_bound() {
        let mut worst: f64 = 0.0;
        for i in 0..=40_000 {
            let s = -2.5 + 5.0 * i as f64 / 40_000.0;
            let (_, d1, d2) = cutoff(s);
            worst = worst.max(d1.abs() + d2.abs());
        }
        assert!(worst <= 16.0, "{worst}");
    }

    #[test]
    fn cutoff_is_c2_by_finite_differences() {
        let h = 1e-6;
        for &s in &[1.0, 1.3, 1.5, 1.9, 2.0, -1.2, -1.7] {
            let (_, d1, d2) = cutoff(s);
            let fd1 = (cutoff(s + h).0 - cutoff(s - h).0) / (2.0 * h);
            let fd2 = (cutoff(s + h).1 - cutoff(s - h).1) / (2.0 * h);
            assert!((d1 - fd1).abs() < 1e-6, "s={s}");
            assert!((d2 - fd2).abs() < 1e-4, "s={s}");
        }
    }

    #[test]
    fn truncated_kink_defect_decays() {
        for y in [std::f64::consts::E.powi(2), 20.0, 100.0, 1e3] {
            let tk = TruncatedKink::at_scale(y).unwrap();
            let d = tk.max_defect(20001);
            assert!(d <= y.powi(-4), "|y|={y} defect {d}");
        }
    }

    #[test]
    fn truncated_kink_converges_to_kink() {
        let mut last = f64::INFINITY;
        for w in [5.0, 10.0, 20.0] {
            let tk = TruncatedKink::new(w).unwrap();
            let err = (0..4001)
                .map(|i| -60.0 + 120.0 * i as f64 / 4000.0)
                .map(|t| (tk.eval(t).value - Kink::default().value(t)).abs())
                .fold(0.0, f64::max);
            assert!(err < last);
            last = err;
        }
    }

    proptest! {
        #[test]
        fn kink_solves_profile_equation(x in -30.0f64..30.0, s0 in -5.0f64..5.0, o in prop::bool::ANY) {
            let k = Kink::new(s0, if o { 1.0 } else { -1.0 }).unwrap();
            let p = k.eval(x);
            prop_assert!((p.d2g - well_d1(p.g)).abs() < 1e-12);
            prop_assert!(p.g.abs() <= 1.0);
            // Equipartition, the 1D form of the Modica bound.
            prop_assert!((0.5 * p.dg * p.dg - well(p.g)).abs() < 1e-14);
        }

        #[test]
        fn potential_derivatives_consistent(u in -2.0f64..2.0) {
            let h = 1e-6;
            let fd = (well(u + h) - well(u - h)) / (2.0 * h);
            prop_assert!((fd - well_d1(u)).abs() < 1e-8);
            let fd2 = (well_d1(u + h) - well_d1(u - h)) / (2.0 * h);
            prop_assert!((fd2 - well_d2(u)).abs() < 1e-8);
            prop_assert!(well(u) >= 0.0);
        }

        #[test]
        fn truncated_matches_kink_inside_window(t in -4.9f64..4.9) {
            let tk = TruncatedKink::new(5.0).unwrap();
            prop_assert_eq!(tk.eval(t).value, Kink::default().value(t));
        }
    }
}
