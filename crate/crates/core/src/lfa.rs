//! Local Fourier analysis of the 2D isotropic elasticity operator and the
//! weighted block Jacobi error propagator.

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::fem::lame;
use crate::scalar::Real;

pub type Mat2<T> = [[T; 2]; 2];

/// Symbol `L̃_h(θ)` of the homogeneous operator with `s_k = sin(θ_k/2)`, `c_k = cos(θ_k/2)`.
pub fn symbol_matrix<T: Real>(theta: [T; 2], lambda: T, mu: T, h: T) -> Mat2<T> {
    let half = T::lit(0.5);
    let (s1, c1) = ((theta[0] * half).sin(), (theta[0] * half).cos());
    let (s2, c2) = ((theta[1] * half).sin(), (theta[1] * half).cos());
    let scale = T::lit(4.0) / (h * h);
    let two = T::lit(2.0);
    let a11 = (lambda + two * mu) * s1 * s1 + mu * s2 * s2;
    let a22 = mu * s1 * s1 + (lambda + two * mu) * s2 * s2;
    let a12 = (lambda + mu) * s1 * s2 * c1 * c2;
    [[scale * a11, scale * a12], [scale * a12, scale * a22]]
}

/// θ-independent block diagonal symbol: the θ-average of the diagonal of
/// `L̃_h`, equal to `(2/h²)(λ+3μ)` on both components.
pub fn diagonal_symbol<T: Real>(lambda: T, mu: T, h: T) -> Mat2<T> {
    let d = T::lit(2.0) * (lambda + T::lit(3.0) * mu) / (h * h);
    [[d, T::zero()], [T::zero(), d]]
}

fn inverse2<T: Real>(m: Mat2<T>) -> Option<Mat2<T>> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det == T::zero() || !det.is_finite() {
        return None;
    }
    Some([[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]])
}

/// `M̃(θ) = I − ω D̃⁻¹ L̃_h(θ)`.
pub fn jacobi_symbol<T: Real>(theta: [T; 2], lambda: T, mu: T, h: T, omega: T, d_tilde: Mat2<T>) -> Result<Mat2<T>> {
    let dinv = inverse2(d_tilde).ok_or_else(|| Error::InvalidArgument("singular diagonal symbol".into()))?;
    let l = symbol_matrix(theta, lambda, mu, h);
    let mut m = [[T::zero(); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let prod = dinv[i][0] * l[0][j] + dinv[i][1] * l[1][j];
            let id = if i == j { T::one() } else { T::zero() };
            m[i][j] = id - omega * prod;
        }
    }
    Ok(m)
}

/// Eigenvalues of a 2×2 matrix as `(re, im)` pairs from the trace and determinant.
pub fn eigenvalues2<T: Real>(m: Mat2<T>) -> [(T, T); 2] {
    let half = T::lit(0.5);
    let tr = m[0][0] + m[1][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let disc = tr * tr * T::lit(0.25) - det;
    if disc >= T::zero() {
        let r = disc.sqrt();
        [(tr * half - r, T::zero()), (tr * half + r, T::zero())]
    } else {
        let r = (-disc).sqrt();
        [(tr * half, -r), (tr * half, r)]
    }
}

pub fn spectral_radius2<T: Real>(m: Mat2<T>) -> T {
    let [a, b] = eigenvalues2(m);
    a.0.hypot(a.1).max(b.0.hypot(b.1))
}

/// Shear-mode damping approximation `|1 − ω μ/(λ+2μ)|`.
pub fn shear_stagnation_factor(nu: f64, omega: f64) -> f64 {
    let (l, m) = lame(1.0, nu);
    (1.0 - omega * m / (l + 2.0 * m)).abs()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LfaConfig {
    pub nu: f64,
    pub youngs: f64,
    pub h: f64,
    pub omega: f64,
    pub resolution: usize,
}

impl Default for LfaConfig {
    fn default() -> Self {
        Self { nu: 0.4, youngs: 1.0, h: 1.0, omega: 2.0 / 3.0, resolution: 64 }
    }
}

impl LfaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.nu) {
            return Err(Error::InvalidArgument(format!("Poisson ratio {} outside [0, 0.5)", self.nu)));
        }
        if self.resolution < 16 {
            return Err(Error::InvalidArgument(format!("θ resolution {} below 16", self.resolution)));
        }
        if !(self.h > 0.0 && self.youngs > 0.0) {
            return Err(Error::InvalidArgument("mesh size and Young's modulus must be positive".into()));
        }
        if !(self.omega >= 0.0) {
            return Err(Error::InvalidArgument("relaxation factor must be non-negative".into()));
        }
        Ok(())
    }
}

/// Spectral radius heatmap over `θ_j = −π + 2πj/r` on both axes.
#[derive(Debug, Clone, PartialEq)]
pub struct LfaSweep {
    pub thetas: Vec<f64>,
    /// `rho[j1 * r + j2]` at `(θ_{j1}, θ_{j2})`.
    pub rho: Vec<f64>,
    /// Maximum of ρ over the high-frequency region `max_k |θ_k| ≥ π/2`.
    pub mu_smooth: f64,
    /// Largest damping factor of the shear (smaller) eigenmode over the high-frequency region.
    pub shear_damping: f64,
}

fn is_high_frequency(t: [f64; 2]) -> bool {
    t[0].abs().max(t[1].abs()) >= PI / 2.0 - 1e-12
}

pub fn smoothing_factor_sweep(config: &LfaConfig) -> Result<LfaSweep> {
    config.validate()?;
    let (lam, mu) = lame(config.youngs, config.nu);
    let d_tilde = diagonal_symbol(lam, mu, config.h);
    let r = config.resolution;
    let thetas: Vec<f64> = (0..r).map(|j| -PI + 2.0 * PI * j as f64 / r as f64).collect();
    let mut rho = Vec::with_capacity(r * r);
    let (mut mu_smooth, mut shear_damping) = (0.0f64, 0.0f64);
    for &t1 in &thetas {
        for &t2 in &thetas {
            let theta = [t1, t2];
            let m = jacobi_symbol(theta, lam, mu, config.h, config.omega, d_tilde)?;
            let p = spectral_radius2(m);
            rho.push(p);
            if is_high_frequency(theta) {
                mu_smooth = mu_smooth.max(p);
                let [small, _] = eigenvalues2(symbol_matrix(theta, lam, mu, config.h));
                shear_damping = shear_damping.max((1.0 - config.omega * small.0 / d_tilde[0][0]).abs());
            }
        }
    }
    Ok(LfaSweep { thetas, rho, mu_smooth, shear_damping })
}

impl LfaSweep {
    pub fn to_csv(&self) -> String {
        let r = self.thetas.len();
        let mut out = String::from("theta1,theta2,rho\n");
        for (j1, t1) in self.thetas.iter().enumerate() {
            for (j2, t2) in self.thetas.iter().enumerate() {
                let _ = writeln!(out, "{t1},{t2},{}", self.rho[j1 * r + j2]);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symbol_vanishes_at_origin() {
        let m = symbol_matrix([0.0, 0.0], 1.0, 1.0, 1.0);
        assert_eq!(m, [[0.0, 0.0], [0.0, 0.0]]);
    }

    #[test]
    fn symbol_at_pi_zero() {
        let m = symbol_matrix([PI, 0.0], 1.0, 1.0, 1.0);
        assert!((m[0][0] - 12.0).abs() < 1e-12);
        assert!((m[1][1] - 4.0).abs() < 1e-12);
        assert!(m[0][1].abs() < 1e-12);
    }

    #[test]
    fn small_frequency_scaling() {
        let (lam, mu, h) = (1.5f64, 1.0, 0.1);
        for dir in [[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]] {
            let t = [0.1 * dir[0], 0.1 * dir[1]];
            let [a, b] = eigenvalues2(symbol_matrix(t, lam, mu, h));
            let base = 0.01 / (h * h);
            assert!((a.0 / (base * mu) - 1.0).abs() < 0.1);
            assert!((b.0 / (base * (lam + 2.0 * mu)) - 1.0).abs() < 0.1);
        }
    }

    #[test]
    fn even_in_theta() {
        for t in [[0.3, -1.2], [2.0, 2.5], [-3.0, 0.1]] {
            let a = symbol_matrix::<f64>(t, 2.0, 0.7, 0.5);
            let b = symbol_matrix([-t[0], -t[1]], 2.0, 0.7, 0.5);
            for i in 0..2 {
                for j in 0..2 {
                    assert!((a[i][j] - b[i][j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_relaxation_is_identity() {
        let d = diagonal_symbol(1.0, 1.0, 1.0);
        let m = jacobi_symbol([1.0, 2.0], 1.0, 1.0, 1.0, 0.0, d).unwrap();
        assert_eq!(m, [[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(spectral_radius2(m), 1.0);
    }

    #[test]
    fn exact_diagonal_annihilates() {
        let t = [0.7, -0.4];
        let l = symbol_matrix(t, 1.0, 1.0, 1.0);
        let m = jacobi_symbol(t, 1.0, 1.0, 1.0, 1.0, l).unwrap();
        assert!(spectral_radius2(m) < 1e-12);
    }

    #[test]
    fn shear_factor_values() {
        assert!((shear_stagnation_factor(0.3, 2.0 / 3.0) - 0.809524).abs() < 1e-6);
        assert!((shear_stagnation_factor(0.4, 2.0 / 3.0) - 0.888889).abs() < 1e-6);
        assert!((shear_stagnation_factor(0.45, 2.0 / 3.0) - 0.939394).abs() < 1e-6);
    }

    #[test]
    fn complex_eigenvalues() {
        let [a, b] = eigenvalues2([[0.0f64, -1.0], [1.0, 0.0]]);
        assert_eq!((a.1.abs(), b.1.abs()), (1.0, 1.0));
        assert_eq!(spectral_radius2([[0.0, -2.0], [2.0, 0.0]]), 2.0);
    }

    #[test]
    fn sweep_trend_and_bounds() {
        let mut prev = 0.0;
        for (nu, approx) in [(0.3, 0.809524), (0.4, 0.888889), (0.45, 0.939394)] {
            let s = smoothing_factor_sweep(&LfaConfig { nu, resolution: 32, ..Default::default() }).unwrap();
            assert!(s.mu_smooth > prev);
            assert!(s.mu_smooth >= approx - 1e-2);
            prev = s.mu_smooth;
        }
    }

    #[test]
    fn radius_bounded_for_unit_relaxation() {
        let s = smoothing_factor_sweep(&LfaConfig { omega: 1.0, resolution: 32, ..Default::default() }).unwrap();
        assert!(s.rho.iter().all(|&r| r <= 1.0 + 1e-12));
    }

    #[test]
    fn csv_layout() {
        let s = smoothing_factor_sweep(&LfaConfig { resolution: 16, ..Default::default() }).unwrap();
        let csv = s.to_csv();
        assert!(csv.starts_with("theta1,theta2,rho\n"));
        assert_eq!(csv.lines().count(), 1 + 256);
        assert!(smoothing_factor_sweep(&LfaConfig { resolution: 8, ..Default::default() }).is_err());
    }

    #[test]
    fn single_precision_symbol() {
        let m = symbol_matrix([std::f32::consts::PI, 0.0f32], 1.0, 1.0, 1.0);
        assert!((m[0][0] - 12.0).abs() < 1e-5);
    }
}
