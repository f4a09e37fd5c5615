//! Hybrid smoother + spectral correction iteration, stand-alone solves,
//! flexible GMRES and the differentiable unrolled cycle used in training.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::linalg::{energy, l2, residual, spmv_direct, BlockCsrMatrix, BlockDiagInverse, LuFactors};
use crate::nn::{ConcreteLevels, FnsModel, LevelVars, SampleContext};
use crate::smoother::{smooth, JacobiConfig};

/// Coarse correction applied to a level residual.
pub trait Corrector {
    fn num_levels(&self) -> usize;
    fn apply(&self, level: usize, r: &[f64]) -> Result<Vec<f64>>;
}

/// Learned spectral levels evaluated for one system.
#[derive(Debug, Clone)]
pub struct SpectralCorrector {
    pub d: usize,
    pub levels: ConcreteLevels,
}

impl Corrector for SpectralCorrector {
    fn num_levels(&self) -> usize {
        self.levels.levels.len()
    }

    fn apply(&self, level: usize, r: &[f64]) -> Result<Vec<f64>> {
        self.levels.levels[level].apply(r, self.d, &self.levels.tables[level])
    }
}

/// `A⁻¹` through a dense LU factorization.
#[derive(Debug, Clone)]
pub struct ExactCorrector {
    pub lu: LuFactors<f64>,
}

impl ExactCorrector {
    pub fn new(a: &BlockCsrMatrix<f64>) -> Result<Self> {
        Ok(Self { lu: a.to_dense().lu()? })
    }
}

impl Corrector for ExactCorrector {
    fn num_levels(&self) -> usize {
        1
    }

    fn apply(&self, _level: usize, r: &[f64]) -> Result<Vec<f64>> {
        Ok(self.lu.solve(r))
    }
}

/// No correction levels: the cycle reduces to smoothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoCorrection;

impl Corrector for NoCorrection {
    fn num_levels(&self) -> usize {
        0
    }

    fn apply(&self, _level: usize, r: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; r.len()])
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged(format!("non-finite values in {what}")))
    }
}

/// One hybrid cycle: `M` smoothing sweeps, then for each level the correction
/// of the current residual followed by one smoothing sweep on the level
/// equation `A e = r_i`. Each level sees the residual left by the previous ones.
pub fn hybrid_cycle(a: &BlockCsrMatrix<f64>, d_inv: &BlockDiagInverse<f64>, f: &[f64], u: &[f64], corrector: &dyn Corrector, smoother: &JacobiConfig) -> Result<Vec<f64>> {
    Ok(hybrid_cycle_stages(a, d_inv, f, u, corrector, smoother)?.1)
}

/// [`hybrid_cycle`] returning the smoothed iterate alongside the corrected one.
pub fn hybrid_cycle_stages(
    a: &BlockCsrMatrix<f64>,
    d_inv: &BlockDiagInverse<f64>,
    f: &[f64],
    u: &[f64],
    corrector: &dyn Corrector,
    smoother: &JacobiConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let smoothed = smooth(a, d_inv, f, u, smoother)?;
    let mut acc = smoothed.clone();
    let post = JacobiConfig { omega: smoother.omega, sweeps: 1 };
    for level in 0..corrector.num_levels() {
        let r = residual(a, &acc, f)?;
        let e = corrector.apply(level, &r)?;
        let e = smooth(a, d_inv, &r, &e, &post)?;
        acc.iter_mut().zip(&e).for_each(|(x, y)| *x += y);
    }
    check_finite(&acc, "hybrid cycle")?;
    Ok((smoothed, acc))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Relative residual above which a solve is aborted as divergent.
    pub divergence: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: 1e-6, max_iters: 200, divergence: 1e6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// Relative residuals, starting with 1 for the zero initial guess.
    pub residual_history: Vec<f64>,
    pub converged: bool,
    pub diverged: bool,
    /// Geometric-mean energy-norm error reduction, when a reference solution was given.
    pub contraction: Option<f64>,
    /// Relative residual recomputed from the returned solution.
    pub final_residual: f64,
    pub wall_seconds: f64,
}

/// Stationary iteration `u ← cycle(u)` from zero until the relative residual reaches `tol`.
pub fn solve_stationary(
    a: &BlockCsrMatrix<f64>,
    f: &[f64],
    cycle: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    opts: &SolveOptions,
    reference: Option<&[f64]>,
) -> Result<(Vec<f64>, SolveReport)> {
    let start = Instant::now();
    let n = a.num_dofs();
    if f.len() != n {
        return Err(Error::DimensionMismatch(format!("rhs of length {} for {n} DOFs", f.len())));
    }
    let fnorm = l2(f);
    let mut u = vec![0.0; n];
    let mut history = vec![1.0];
    let mut report = SolveReport { iterations: 0, residual_history: Vec::new(), converged: false, diverged: false, contraction: None, final_residual: 0.0, wall_seconds: 0.0 };
    if fnorm == 0.0 {
        report.converged = true;
        report.residual_history = history;
        report.wall_seconds = start.elapsed().as_secs_f64();
        return Ok((u, report));
    }
    let err_energy = |u: &[f64]| -> Result<Option<f64>> {
        match reference {
            Some(r) => {
                let e: Vec<f64> = r.iter().zip(u).map(|(x, y)| x - y).collect();
                Ok(Some(energy(a, &e)?))
            }
            None => Ok(None),
        }
    };
    let e0 = err_energy(&u)?;
    while report.iterations < opts.max_iters {
        match cycle(&u) {
            Ok(next) => u = next,
            Err(Error::Diverged(msg)) => {
                log::warn!("solve aborted: {msg}");
                report.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
        report.iterations += 1;
        let rel = l2(&residual(a, &u, f)?) / fnorm;
        history.push(rel);
        if !rel.is_finite() || rel > opts.divergence {
            report.diverged = true;
            break;
        }
        if rel <= opts.tol {
            report.converged = true;
            break;
        }
    }
    if let (Some(e0), Some(ek)) = (e0, err_energy(&u)?) {
        if e0 > 0.0 && report.iterations > 0 {
            report.contraction = Some((ek / e0).powf(1.0 / report.iterations as f64));
        }
    }
    report.final_residual = l2(&residual(a, &u, f)?) / fnorm;
    report.residual_history = history;
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok((u, report))
}

/// Hybrid solve from a zero initial guess.
pub fn solve(
    a: &BlockCsrMatrix<f64>,
    d_inv: &BlockDiagInverse<f64>,
    f: &[f64],
    corrector: &dyn Corrector,
    smoother: &JacobiConfig,
    opts: &SolveOptions,
    reference: Option<&[f64]>,
) -> Result<(Vec<f64>, SolveReport)> {
    let mut cycle = |u: &[f64]| hybrid_cycle(a, d_inv, f, u, corrector, smoother);
    solve_stationary(a, f, &mut cycle, opts, reference)
}

/// Flexible right-preconditioned GMRES without restart (modified Gram–Schmidt
/// Arnoldi, Givens rotations). The Krylov dimension is bounded by `max_iters`.
pub fn fgmres(a: &BlockCsrMatrix<f64>, f: &[f64], precond: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>, opts: &SolveOptions) -> Result<(Vec<f64>, SolveReport)> {
    let start = Instant::now();
    let n = a.num_dofs();
    if f.len() != n {
        return Err(Error::DimensionMismatch(format!("rhs of length {} for {n} DOFs", f.len())));
    }
    let beta = l2(f);
    let mut report = SolveReport { iterations: 0, residual_history: vec![1.0], converged: false, diverged: false, contraction: None, final_residual: 0.0, wall_seconds: 0.0 };
    if beta == 0.0 {
        report.converged = true;
        return Ok((vec![0.0; n], report));
    }
    let mut v: Vec<Vec<f64>> = vec![f.iter().map(|x| x / beta).collect()];
    let mut z: Vec<Vec<f64>> = Vec::new();
    let mut h: Vec<Vec<f64>> = Vec::new(); // column j has j+2 entries
    let (mut cs, mut sn) = (Vec::<f64>::new(), Vec::<f64>::new());
    let mut g = vec![beta];
    for j in 0..opts.max_iters {
        let zj = precond(&v[j])?;
        if zj.len() != n || zj.iter().any(|x| !x.is_finite()) {
            report.diverged = true;
            break;
        }
        let mut w = spmv_direct(a, &zj)?;
        z.push(zj);
        let mut col = vec![0.0; j + 2];
        for (i, vi) in v.iter().enumerate() {
            let hij: f64 = w.iter().zip(vi).map(|(x, y)| x * y).sum();
            col[i] = hij;
            w.iter_mut().zip(vi).for_each(|(x, y)| *x -= hij * y);
        }
        let hnext = l2(&w);
        col[j + 1] = hnext;
        for i in 0..j {
            let (a1, a2) = (col[i], col[i + 1]);
            col[i] = cs[i] * a1 + sn[i] * a2;
            col[i + 1] = -sn[i] * a1 + cs[i] * a2;
        }
        let denom = col[j].hypot(col[j + 1]);
        let (c, s) = if denom == 0.0 { (1.0, 0.0) } else { (col[j] / denom, col[j + 1] / denom) };
        col[j] = denom;
        col[j + 1] = 0.0;
        cs.push(c);
        sn.push(s);
        let gj = g[j];
        g[j] = c * gj;
        g.push(-s * gj);
        h.push(col);
        report.iterations = j + 1;
        let rel = g[j + 1].abs() / beta;
        report.residual_history.push(rel);
        let breakdown = hnext <= 1e-14 * beta.max(1e-300) || denom == 0.0;
        if rel <= opts.tol || breakdown {
            report.converged = rel <= opts.tol || breakdown;
            break;
        }
        if !rel.is_finite() || rel > opts.divergence {
            report.diverged = true;
            break;
        }
        v.push(w.iter().map(|x| x / hnext).collect());
    }
    // back substitution on the triangular factor
    let k = z.len().min(h.len());
    let mut y = vec![0.0; k];
    for i in (0..k).rev() {
        let mut s = g[i];
        for (jj, yj) in y.iter().enumerate().skip(i + 1) {
            s -= h[jj][i] * yj;
        }
        y[i] = if h[i][i] != 0.0 { s / h[i][i] } else { 0.0 };
    }
    let mut u = vec![0.0; n];
    for (yi, zi) in y.iter().zip(&z) {
        u.iter_mut().zip(zi).for_each(|(x, w)| *x += yi * w);
    }
    report.final_residual = l2(&residual(a, &u, f)?) / beta;
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok((u, report))
}

/// `γ̂ = (‖e_k‖_A / ‖e_0‖_A)^{1/k}` over `k` cycles started from zero.
pub fn estimate_contraction(a: &BlockCsrMatrix<f64>, u_ref: &[f64], cycle: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>, k: usize) -> Result<f64> {
    let e0 = energy(a, u_ref)?;
    if e0 == 0.0 || k == 0 {
        return Err(Error::InvalidArgument("contraction needs a nonzero initial error and at least one cycle".into()));
    }
    let mut u = vec![0.0; u_ref.len()];
    for _ in 0..k {
        u = cycle(&u)?;
    }
    let e: Vec<f64> = u_ref.iter().zip(&u).map(|(x, y)| x - y).collect();
    Ok((energy(a, &e)? / e0).powf(1.0 / k as f64))
}

/// Differentiable spectral correction `F⁻¹ C* Λ̃ C F r` of level `i`.
pub fn apply_level_graph(g: &mut Graph, lv: &LevelVars, i: usize, r: Var, d: usize) -> Result<Var> {
    let s = g.nudft_forward(r, lv.tables[i], d)?;
    let c = g.lattice_conv(s, lv.kernels[i], lv.lattices[i].clone(), d, false)?;
    let l = g.spectrum_scale(c, lv.lambdas[i])?;
    let ca = g.lattice_conv(l, lv.kernels[i], lv.lattices[i].clone(), d, true)?;
    g.nudft_inverse(ca, lv.tables[i], d)
}

/// Differentiable hybrid cycle matching [`hybrid_cycle`].
pub fn hybrid_cycle_graph(g: &mut Graph, ctx: &SampleContext, lv: &LevelVars, f: Var, u: Var, smoother: &JacobiConfig) -> Result<Var> {
    let mut acc = g.jacobi_smooth(u, f, ctx.smooth.clone(), smoother.sweeps)?;
    for i in 0..lv.lambdas.len() {
        let au = g.block_spmv(ctx.a.clone(), acc)?;
        let r = g.sub(f, au)?;
        let e = apply_level_graph(g, lv, i, r, ctx.dim)?;
        let e = g.jacobi_smooth(e, r, ctx.smooth.clone(), 1)?;
        acc = g.add(acc, e)?;
    }
    Ok(acc)
}

/// Relative residual `‖f − A u_K‖ / ‖f‖` after `k` cycles from zero, recorded on `g`.
pub fn unrolled_loss(g: &mut Graph, model: &FnsModel, vars: &[Var], ctx: &SampleContext, k: usize) -> Result<Var> {
    let lv = model.build_levels(g, vars, ctx)?;
    let n = ctx.f.len();
    let f = g.constant(ctx.f.clone(), n, 1)?;
    let mut u = g.constant(vec![0.0; n], n, 1)?;
    for _ in 0..k {
        u = hybrid_cycle_graph(g, ctx, &lv, f, u, &model.config.smoother)?;
    }
    let au = g.block_spmv(ctx.a.clone(), u)?;
    let r = g.sub(f, au)?;
    let rn = g.norm2(r);
    let fnorm = l2(&ctx.f);
    if fnorm == 0.0 {
        return Err(Error::InvalidArgument("loss undefined for a zero right-hand side".into()));
    }
    Ok(g.scale(rn, 1.0 / fnorm))
}

/// Spectral corrector of a trained model for one system.
pub fn corrector_for(model: &FnsModel, ctx: &SampleContext) -> Result<SpectralCorrector> {
    Ok(SpectralCorrector { d: ctx.dim, levels: model.levels(ctx)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{assemble, MaterialModel, ProblemDefinition};
    use crate::linalg::{block_diag_inverse, direct_solve, DenseMatrix};
    use crate::mesh::build_structured_square;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cantilever(n: usize, nu: f64) -> crate::fem::AssembledSystem<f64> {
        let mesh = build_structured_square(n).unwrap();
        let youngs = vec![1e3; mesh.num_nodes()];
        let problem = ProblemDefinition {
            mesh,
            material: MaterialModel::Isotropic2D { youngs, poisson: nu },
            body_force: vec![0.0, -1.0],
            tractions: vec![("right".into(), vec![1.0, 0.0])],
            dirichlet: vec!["left".into()],
        };
        assemble(&problem).unwrap()
    }

    #[test]
    fn exact_corrector_converges_in_one_cycle() {
        let sys = cantilever(2, 0.3);
        let a = &sys.matrix;
        let d_inv = block_diag_inverse(a).unwrap();
        let exact = ExactCorrector::new(a).unwrap();
        let (u, rep) = solve(a, &d_inv, sys.rhs.as_slice(), &exact, &JacobiConfig::new(2.0 / 3.0, 10).unwrap(), &SolveOptions::default(), None).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.iterations, 1);
        let u_ref = direct_solve(a, sys.rhs.as_slice()).unwrap();
        for (x, y) in u.iter().zip(&u_ref) {
            assert!((x - y).abs() < 1e-9 * u_ref.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
        }
    }

    #[test]
    fn zero_rhs_converges_immediately() {
        let sys = cantilever(2, 0.3);
        let d_inv = block_diag_inverse(&sys.matrix).unwrap();
        let f = vec![0.0; sys.matrix.num_dofs()];
        let (u, rep) = solve(&sys.matrix, &d_inv, &f, &NoCorrection, &JacobiConfig::default_for_dim(2), &SolveOptions::default(), None).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.iterations, 0);
        assert!(u.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn smoother_only_cycle_does_not_increase_energy_error() {
        let sys = cantilever(4, 0.4);
        let a = &sys.matrix;
        let f = sys.rhs.as_slice();
        let d_inv = block_diag_inverse(a).unwrap();
        let u_ref = direct_solve(a, f).unwrap();
        let sm = JacobiConfig::default_for_dim(2);
        let mut u = vec![0.0; f.len()];
        let mut prev = f64::INFINITY;
        for _ in 0..20 {
            u = hybrid_cycle(a, &d_inv, f, &u, &NoCorrection, &sm).unwrap();
            let e: Vec<f64> = u_ref.iter().zip(&u).map(|(x, y)| x - y).collect();
            let en = energy(a, &e).unwrap();
            assert!(en <= prev * (1.0 + 1e-12));
            prev = en;
        }
    }

    #[test]
    fn cycle_is_linear_in_rhs_and_iterate() {
        let sys = cantilever(3, 0.3);
        let a = &sys.matrix;
        let d_inv = block_diag_inverse(a).unwrap();
        let exact = ExactCorrector::new(a).unwrap();
        let sm = JacobiConfig::default_for_dim(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = a.num_dofs();
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let alpha = -2.5;
        let fs: Vec<f64> = f.iter().map(|x| alpha * x).collect();
        let us: Vec<f64> = u.iter().map(|x| alpha * x).collect();
        for corrector in [&NoCorrection as &dyn Corrector, &exact] {
            let base = hybrid_cycle(a, &d_inv, &f, &u, corrector, &sm).unwrap();
            let scaled = hybrid_cycle(a, &d_inv, &fs, &us, corrector, &sm).unwrap();
            for (x, y) in base.iter().zip(&scaled) {
                assert!((alpha * x - y).abs() < 1e-10 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn contraction_is_zero_for_exact_corrector_and_below_one_for_smoothing() {
        let sys = cantilever(3, 0.45);
        let a = &sys.matrix;
        let f = sys.rhs.as_slice();
        let d_inv = block_diag_inverse(a).unwrap();
        let u_ref = direct_solve(a, f).unwrap();
        let sm = JacobiConfig::default_for_dim(2);
        let exact = ExactCorrector::new(a).unwrap();
        let g0 = estimate_contraction(a, &u_ref, &mut |u: &[f64]| hybrid_cycle(a, &d_inv, f, u, &exact, &sm), 2).unwrap();
        assert!(g0 < 1e-6);
        let g1 = estimate_contraction(a, &u_ref, &mut |u: &[f64]| hybrid_cycle(a, &d_inv, f, u, &NoCorrection, &sm), 5).unwrap();
        assert!(g1 > 0.9 && g1 < 1.0, "smoother-only contraction {g1}");
        assert!(estimate_contraction(a, &vec![0.0; f.len()], &mut |u: &[f64]| Ok(u.to_vec()), 1).is_err());
    }

    fn diag(values: &[f64]) -> BlockCsrMatrix<f64> {
        let n = values.len();
        let mut m = DenseMatrix::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        BlockCsrMatrix::from_dense(1, &m).unwrap()
    }

    #[test]
    fn fgmres_on_two_by_two_diagonal() {
        let a = diag(&[1.0, 2.0]);
        let opts = SolveOptions { tol: 1e-12, ..Default::default() };
        let (u, rep) = fgmres(&a, &[1.0, 1.0], &mut |v: &[f64]| Ok(v.to_vec()), &opts).unwrap();
        assert!(rep.converged);
        assert!(rep.iterations <= 2);
        assert!((u[0] - 1.0).abs() < 1e-12 && (u[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fgmres_with_exact_preconditioner_takes_one_step() {
        let sys = cantilever(3, 0.3);
        let exact = ExactCorrector::new(&sys.matrix).unwrap();
        let (_, rep) = fgmres(&sys.matrix, sys.rhs.as_slice(), &mut |v: &[f64]| exact.apply(0, v), &SolveOptions::default()).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.iterations, 1);
        assert!(rep.final_residual < 1e-9);
    }

    #[test]
    fn fgmres_history_is_monotone_and_matches_true_residual() {
        let sys = cantilever(4, 0.3);
        let a = &sys.matrix;
        let d_inv = block_diag_inverse(a).unwrap();
        let sm = JacobiConfig::default_for_dim(2);
        let mut pc = |v: &[f64]| hybrid_cycle(a, &d_inv, v, &vec![0.0; v.len()], &NoCorrection, &sm);
        let (_, rep) = fgmres(a, sys.rhs.as_slice(), &mut pc, &SolveOptions::default()).unwrap();
        assert!(rep.converged);
        assert!(rep.residual_history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        let last = *rep.residual_history.last().unwrap();
        assert!((rep.final_residual - last).abs() <= 1e-8 + 1e-8 * last.max(rep.final_residual) / 1e-6);
    }

    #[test]
    fn stationary_and_krylov_agree_with_direct_solve() {
        let sys = cantilever(2, 0.3);
        let a = &sys.matrix;
        let f = sys.rhs.as_slice();
        let d_inv = block_diag_inverse(a).unwrap();
        let sm = JacobiConfig::default_for_dim(2);
        let opts = SolveOptions { max_iters: 5000, ..Default::default() };
        let (u1, r1) = solve(a, &d_inv, f, &NoCorrection, &sm, &opts, None).unwrap();
        let mut pc = |v: &[f64]| hybrid_cycle(a, &d_inv, v, &vec![0.0; v.len()], &NoCorrection, &sm);
        let (u2, r2) = fgmres(a, f, &mut pc, &opts).unwrap();
        assert!(r1.converged && r2.converged);
        let u_ref = direct_solve(a, f).unwrap();
        let nref = l2(&u_ref);
        for u in [&u1, &u2] {
            let d: Vec<f64> = u.iter().zip(&u_ref).map(|(x, y)| x - y).collect();
            assert!(l2(&d) / nref < 1e-5);
        }
    }
}
