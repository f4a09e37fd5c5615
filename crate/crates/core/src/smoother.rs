//! Weighted block Jacobi smoothing `u ← u + ω D⁻¹ (f − A u)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{block_diag_inverse, spmv_into, BlockCsrMatrix, BlockDiagInverse};
use crate::scalar::Real;

/// Relaxation factor and number of sweeps per smoothing application.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JacobiConfig {
    pub omega: f64,
    pub sweeps: usize,
}

impl JacobiConfig {
    pub fn new(omega: f64, sweeps: usize) -> Result<Self> {
        let c = Self { omega, sweeps };
        c.validate()?;
        Ok(c)
    }

    /// ω = 2/3 with 10 sweeps in 2D and 50 in 3D.
    pub fn default_for_dim(dim: usize) -> Self {
        Self { omega: 2.0 / 3.0, sweeps: if dim == 3 { 50 } else { 10 } }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega < 2.0) {
            return Err(Error::InvalidArgument(format!("relaxation factor {} outside (0, 2)", self.omega)));
        }
        if self.sweeps == 0 {
            return Err(Error::InvalidArgument("at least one smoothing sweep is required".into()));
        }
        Ok(())
    }
}

impl Default for JacobiConfig {
    fn default() -> Self {
        Self::default_for_dim(2)
    }
}

fn check_dims<T: Real>(a: &BlockCsrMatrix<T>, d_inv: &BlockDiagInverse<T>, f: &[T], u: &[T]) -> Result<()> {
    let n = a.num_dofs();
    if d_inv.num_nodes() != a.num_nodes() || d_inv.block_dim() != a.block_dim() || f.len() != n || u.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "Jacobi sweep: matrix has {n} DOFs, f has {}, u has {}, D⁻¹ covers {} nodes",
            f.len(),
            u.len(),
            d_inv.num_nodes()
        )));
    }
    Ok(())
}

/// One sweep in place. `scratch` must hold `A.num_dofs()` entries.
fn sweep_in_place<T: Real>(a: &BlockCsrMatrix<T>, d_inv: &BlockDiagInverse<T>, omega: T, f: &[T], u: &mut [T], scratch: &mut [T]) -> Result<()> {
    spmv_into(a, u, scratch)?;
    for (s, &fi) in scratch.iter_mut().zip(f) {
        *s = fi - *s;
    }
    let d = a.block_dim();
    for i in 0..a.num_nodes() {
        let b = d_inv.block(i);
        let r = &scratch[i * d..(i + 1) * d];
        for row in 0..d {
            let mut acc = T::zero();
            for c in 0..d {
                acc += b[row * d + c] * r[c];
            }
            u[i * d + row] += omega * acc;
        }
    }
    Ok(())
}

/// `u' = u + ω D⁻¹ (f − A u)`.
pub fn jacobi_sweep<T: Real>(a: &BlockCsrMatrix<T>, d_inv: &BlockDiagInverse<T>, omega: T, f: &[T], u: &[T]) -> Result<Vec<T>> {
    check_dims(a, d_inv, f, u)?;
    let mut out = u.to_vec();
    let mut scratch = vec![T::zero(); u.len()];
    sweep_in_place(a, d_inv, omega, f, &mut out, &mut scratch)?;
    Ok(out)
}

/// `config.sweeps` Jacobi sweeps starting from `u`.
pub fn smooth<T: Real>(a: &BlockCsrMatrix<T>, d_inv: &BlockDiagInverse<T>, f: &[T], u: &[T], config: &JacobiConfig) -> Result<Vec<T>> {
    config.validate()?;
    check_dims(a, d_inv, f, u)?;
    let omega = T::lit(config.omega);
    let mut out = u.to_vec();
    let mut scratch = vec![T::zero(); u.len()];
    for _ in 0..config.sweeps {
        sweep_in_place(a, d_inv, omega, f, &mut out, &mut scratch)?;
    }
    Ok(out)
}

/// Matrix with its block-diagonal inverse cached, for repeated smoothing.
#[derive(Debug, Clone)]
pub struct JacobiSmoother<T> {
    pub d_inv: BlockDiagInverse<T>,
    pub config: JacobiConfig,
}

impl<T: Real> JacobiSmoother<T> {
    pub fn new(a: &BlockCsrMatrix<T>, config: JacobiConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { d_inv: block_diag_inverse(a)?, config })
    }

    pub fn smooth(&self, a: &BlockCsrMatrix<T>, f: &[T], u: &[T]) -> Result<Vec<T>> {
        smooth(a, &self.d_inv, f, u, &self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{direct_solve, energy, DenseMatrix};

    fn chain() -> BlockCsrMatrix<f64> {
        let dense = DenseMatrix { rows: 4, cols: 4, data: vec![4.0, 1.0, -1.0, 0.0, 1.0, 3.0, 0.0, -1.0, -1.0, 0.0, 5.0, 1.0, 0.0, -1.0, 1.0, 2.0] };
        BlockCsrMatrix::from_dense(2, &dense).unwrap()
    }

    #[test]
    fn block_diagonal_solved_in_one_sweep() {
        let a: BlockCsrMatrix<f64> = BlockCsrMatrix::block_diagonal(2, vec![2.0, 1.0, 1.0, 3.0, 5.0, 0.0, 0.0, 4.0]).unwrap();
        let d_inv = block_diag_inverse(&a).unwrap();
        let f = [1.0, 2.0, 3.0, 4.0];
        let u = jacobi_sweep(&a, &d_inv, 1.0, &f, &[0.0; 4]).unwrap();
        let exact = direct_solve(&a, &f).unwrap();
        for (x, y) in u.iter().zip(exact) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn exact_solution_is_fixed_point() {
        let a = chain();
        let d_inv = block_diag_inverse(&a).unwrap();
        let u = [0.5, -1.0, 2.0, 0.25];
        let f = crate::linalg::spmv_direct(&a, &u).unwrap();
        let next = jacobi_sweep(&a, &d_inv, 2.0 / 3.0, &f, &u).unwrap();
        for (x, y) in next.iter().zip(u) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn two_node_chain_scalar_oracle() {
        let a = chain();
        let d_inv = block_diag_inverse(&a).unwrap();
        let f = [1.0, -2.0, 0.5, 3.0];
        let u = [0.1, 0.2, -0.3, 0.4];
        let got = jacobi_sweep(&a, &d_inv, 2.0 / 3.0, &f, &u).unwrap();
        // residual by hand
        let r = [
            1.0 - (4.0 * 0.1 + 1.0 * 0.2 - 1.0 * -0.3),
            -2.0 - (1.0 * 0.1 + 3.0 * 0.2 - 1.0 * 0.4),
            0.5 - (-1.0 * 0.1 + 5.0 * -0.3 + 1.0 * 0.4),
            3.0 - (-1.0 * 0.2 + 1.0 * -0.3 + 2.0 * 0.4),
        ];
        // inverse of [[4,1],[1,3]] and [[5,1],[1,2]]
        let c0 = [r[0] * 3.0 / 11.0 - r[1] / 11.0, -r[0] / 11.0 + r[1] * 4.0 / 11.0];
        let c1 = [r[2] * 2.0 / 9.0 - r[3] / 9.0, -r[2] / 9.0 + r[3] * 5.0 / 9.0];
        let w = 2.0 / 3.0;
        let expect = [0.1 + w * c0[0], 0.2 + w * c0[1], -0.3 + w * c1[0], 0.4 + w * c1[1]];
        for (x, y) in got.iter().zip(expect) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn m_one_equals_single_sweep() {
        let a = chain();
        let d_inv = block_diag_inverse(&a).unwrap();
        let f = [1.0, 2.0, 3.0, 4.0];
        let u = [0.0; 4];
        let cfg = JacobiConfig::new(0.5, 1).unwrap();
        assert_eq!(smooth(&a, &d_inv, &f, &u, &cfg).unwrap(), jacobi_sweep(&a, &d_inv, 0.5, &f, &u).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(JacobiConfig::new(2.0 / 3.0, 0).is_err());
        assert!(JacobiConfig::new(0.0, 3).is_err());
        assert!(JacobiConfig::new(2.0, 3).is_err());
        assert_eq!(JacobiConfig::default_for_dim(3).sweeps, 50);
    }

    #[test]
    fn energy_error_non_increasing() {
        let a = chain();
        let d_inv = block_diag_inverse(&a).unwrap();
        let f = [1.0, -1.0, 2.0, 0.5];
        let exact = direct_solve(&a, &f).unwrap();
        let mut u = vec![0.0; 4];
        let err = |u: &[f64]| energy(&a, &exact.iter().zip(u).map(|(x, y)| x - y).collect::<Vec<_>>()).unwrap();
        let mut prev = err(&u);
        for _ in 0..10 {
            u = jacobi_sweep(&a, &d_inv, 2.0 / 3.0, &f, &u).unwrap();
            let e = err(&u);
            assert!(e <= prev + 1e-12);
            prev = e;
        }
    }

    #[test]
    fn dimension_mismatch_reported() {
        let a = chain();
        let d_inv = block_diag_inverse(&a).unwrap();
        assert!(matches!(jacobi_sweep(&a, &d_inv, 1.0, &[1.0; 3], &[0.0; 4]), Err(Error::DimensionMismatch(_))));
    }
}
