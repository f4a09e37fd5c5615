//! Graph Fourier neural solvers for linear elasticity.
//!
//! The crate covers meshing, P1 finite elements, block-sparse linear algebra,
//! block Jacobi smoothing, local Fourier analysis, the graph spectral
//! transform with learned spectrum and kernels, the hybrid iterative solver,
//! FGMRES, dataset generation and training.

pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod experiments;
pub mod fem;
pub mod lfa;
pub mod linalg;
pub mod mesh;
pub mod nn;
pub mod scalar;
pub mod smoother;
pub mod solver;
pub mod spectral;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double precision block matrix.
pub type BlockCsr = linalg::BlockCsrMatrix<f64>;
/// Single precision block matrix.
pub type BlockCsr32 = linalg::BlockCsrMatrix<f32>;
pub type BlockVec = linalg::BlockVector<f64>;
pub type BlockVec32 = linalg::BlockVector<f32>;
pub type System = fem::AssembledSystem<f64>;
pub type System32 = fem::AssembledSystem<f32>;
