//! P1 finite element discretization of linear elasticity: Voigt stiffness
//! matrices for the supported material models, element matrices, global
//! block assembly, loads and Dirichlet elimination.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{invert_small, BlockCsrMatrix, BlockVector};
use crate::mesh::{BoundaryFacet, MeshTopology};
use crate::scalar::Real;

/// Constitutive model. Isotropic variants carry a nodal Young's modulus field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MaterialModel {
    Isotropic2D { youngs: Vec<f64>, poisson: f64 },
    Isotropic3D { youngs: Vec<f64>, poisson: f64 },
    Anisotropic2D { e1: f64, e2: f64, g12: f64, nu12: f64, theta: f64 },
    Orthotropic3D { e1: f64, e2: f64, e3: f64, g12: f64, g23: f64, g31: f64, nu12: f64, nu13: f64, nu23: f64 },
}

impl MaterialModel {
    pub fn dim(&self) -> usize {
        match self {
            Self::Isotropic2D { .. } | Self::Anisotropic2D { .. } => 2,
            Self::Isotropic3D { .. } | Self::Orthotropic3D { .. } => 3,
        }
    }

    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Material(format!("{name} must be positive, got {v}")))
            }
        };
        match self {
            Self::Isotropic2D { youngs, poisson } | Self::Isotropic3D { youngs, poisson } => {
                if !(0.0..0.5).contains(poisson) {
                    return Err(Error::Material(format!("Poisson ratio {poisson} outside [0, 0.5)")));
                }
                if youngs.len() != num_nodes {
                    return Err(Error::Material(format!("{} nodal moduli for {num_nodes} nodes", youngs.len())));
                }
                youngs.iter().try_for_each(|&e| positive("Young's modulus", e))
            }
            Self::Anisotropic2D { e1, e2, g12, nu12, .. } => {
                positive("E1", *e1)?;
                positive("E2", *e2)?;
                positive("G12", *g12)?;
                let nu21 = nu12 * e2 / e1;
                if nu12 * nu21 >= 1.0 || *nu12 < 0.0 {
                    return Err(Error::Material(format!("ν12 = {nu12} violates 1 − ν12ν21 > 0")));
                }
                Ok(())
            }
            Self::Orthotropic3D { e1, e2, e3, g12, g23, g31, .. } => {
                for (n, v) in [("E1", e1), ("E2", e2), ("E3", e3), ("G12", g12), ("G23", g23), ("G31", g31)] {
                    positive(n, *v)?;
                }
                Ok(())
            }
        }
    }
}

/// Lamé constants `(λ, μ)` from Young's modulus and Poisson ratio.
pub fn lame(e: f64, nu: f64) -> (f64, f64) {
    (e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)), e / (2.0 * (1.0 + nu)))
}

/// Isotropic Voigt matrix (3×3 in 2D, 6×6 in 3D), row-major.
pub fn isotropic_voigt<T: Real>(dim: usize, e: f64, nu: f64) -> Vec<T> {
    let (l, m) = lame(e, nu);
    let k = voigt_size(dim);
    let mut c = vec![0.0; k * k];
    for a in 0..dim {
        for b in 0..dim {
            c[a * k + b] = l;
        }
        c[a * k + a] = l + 2.0 * m;
    }
    for s in dim..k {
        c[s * k + s] = m;
    }
    c.into_iter().map(T::lit).collect()
}

fn voigt_size(dim: usize) -> usize {
    if dim == 2 {
        3
    } else {
        6
    }
}

/// Rotated orthotropic plane stiffness `C = Tᵀ Ĉ T`; `ν21` is derived from reciprocity.
pub fn anisotropic_2d_voigt(e1: f64, e2: f64, g12: f64, nu12: f64, theta: f64) -> [[f64; 3]; 3] {
    let nu21 = nu12 * e2 / e1;
    let den = 1.0 - nu12 * nu21;
    let ch = [[e1 / den, nu21 * e1 / den, 0.0], [nu12 * e2 / den, e2 / den, 0.0], [0.0, 0.0, g12]];
    let (c, s) = (theta.cos(), theta.sin());
    let t = [[c * c, s * s, c * s], [s * s, c * c, -c * s], [-2.0 * c * s, 2.0 * c * s, c * c - s * s]];
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|a| (0..3).map(|b| t[a][i] * ch[a][b] * t[b][j]).sum::<f64>()).sum();
        }
    }
    out
}

/// 3D orthotropic stiffness as the inverse of the compliance matrix.
#[allow(clippy::too_many_arguments)]
pub fn orthotropic_3d_voigt(e1: f64, e2: f64, e3: f64, g12: f64, g23: f64, g31: f64, nu12: f64, nu13: f64, nu23: f64) -> Result<[[f64; 6]; 6]> {
    let nu21 = nu12 * e2 / e1;
    let nu31 = nu13 * e3 / e1;
    let nu32 = nu23 * e3 / e2;
    let s = [
        1.0 / e1,
        -nu21 / e2,
        -nu31 / e3,
        -nu12 / e1,
        1.0 / e2,
        -nu32 / e3,
        -nu13 / e1,
        -nu23 / e2,
        1.0 / e3,
    ];
    // admissible iff the normal compliance block is positive definite
    let emax = e1.max(e2).max(e3);
    let scaled = crate::linalg::DenseMatrix { rows: 3, cols: 3, data: s.iter().map(|x| x * emax).collect() };
    if scaled.cholesky().is_err() {
        return Err(Error::Material("compliance matrix is singular or indefinite".into()));
    }
    let inv = invert_small(&s, 3).ok_or_else(|| Error::Material("singular compliance matrix".into()))?;
    let mut c = [[0.0; 6]; 6];
    for i in 0..3 {
        for j in 0..3 {
            // symmetrize round-off
            c[i][j] = 0.5 * (inv[i * 3 + j] + inv[j * 3 + i]);
        }
    }
    c[3][3] = g23;
    c[4][4] = g31;
    c[5][5] = g12;
    Ok(c)
}

/// Voigt stiffness of `material` on element `e` (nodal moduli averaged over its vertices).
pub fn voigt_stiffness<T: Real>(material: &MaterialModel, mesh: &MeshTopology, e: usize) -> Result<Vec<T>> {
    match material {
        MaterialModel::Isotropic2D { youngs, poisson } | MaterialModel::Isotropic3D { youngs, poisson } => {
            let el = mesh.element(e);
            let emean = el.iter().map(|&v| youngs[v]).sum::<f64>() / el.len() as f64;
            Ok(isotropic_voigt(material.dim(), emean, *poisson))
        }
        MaterialModel::Anisotropic2D { e1, e2, g12, nu12, theta } => {
            Ok(anisotropic_2d_voigt(*e1, *e2, *g12, *nu12, *theta).iter().flatten().map(|&x| T::lit(x)).collect())
        }
        MaterialModel::Orthotropic3D { e1, e2, e3, g12, g23, g31, nu12, nu13, nu23 } => {
            Ok(orthotropic_3d_voigt(*e1, *e2, *e3, *g12, *g23, *g31, *nu12, *nu13, *nu23)?.iter().flatten().map(|&x| T::lit(x)).collect())
        }
    }
}

/// Gradients of the P1 barycentric functions of element `e` (row `a` = ∇φ_a) and its measure.
pub fn p1_gradients(mesh: &MeshTopology, e: usize) -> Result<(Vec<[f64; 3]>, f64)> {
    let d = mesh.dim();
    let el = mesh.element(e);
    let measure = mesh.signed_measure(e);
    let p0 = mesh.node(el[0]);
    let scale: f64 = (1..=d).map(|k| (0..d).map(|r| (mesh.node(el[k])[r] - p0[r]).powi(2)).sum::<f64>()).fold(0.0, f64::max);
    if !(measure.abs() > 1e-14 * scale.powf(d as f64 / 2.0)) {
        return Err(Error::DegenerateElement { element: e, measure });
    }
    let mut jac = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            jac[r * d + c] = mesh.node(el[c + 1])[r] - p0[r];
        }
    }
    let inv = invert_small(&jac, d).ok_or(Error::DegenerateElement { element: e, measure })?;
    let mut grads = vec![[0.0; 3]; d + 1];
    for a in 1..=d {
        for r in 0..d {
            grads[a][r] = inv[(a - 1) * d + r];
        }
    }
    for r in 0..d {
        grads[0][r] = -(1..=d).map(|a| grads[a][r]).sum::<f64>();
    }
    Ok((grads, measure.abs()))
}

/// Strain-displacement matrix `B` (Voigt rows × d(d+1) columns, node-major DOFs).
fn strain_displacement(d: usize, grads: &[[f64; 3]]) -> Vec<f64> {
    let k = voigt_size(d);
    let cols = d * (d + 1);
    let mut b = vec![0.0; k * cols];
    for (a, g) in grads.iter().enumerate() {
        let c0 = a * d;
        if d == 2 {
            b[c0] = g[0];
            b[cols + c0 + 1] = g[1];
            b[2 * cols + c0] = g[1];
            b[2 * cols + c0 + 1] = g[0];
        } else {
            b[c0] = g[0];
            b[cols + c0 + 1] = g[1];
            b[2 * cols + c0 + 2] = g[2];
            b[3 * cols + c0 + 1] = g[2];
            b[3 * cols + c0 + 2] = g[1];
            b[4 * cols + c0] = g[2];
            b[4 * cols + c0 + 2] = g[0];
            b[5 * cols + c0] = g[1];
            b[5 * cols + c0 + 1] = g[0];
        }
    }
    b
}

/// Element stiffness `K_e = |K| Bᵀ C B` (row-major, size d(d+1) squared).
pub fn element_stiffness<T: Real>(material: &MaterialModel, mesh: &MeshTopology, e: usize) -> Result<Vec<T>> {
    let d = mesh.dim();
    let (grads, measure) = p1_gradients(mesh, e)?;
    let c: Vec<f64> = voigt_stiffness::<f64>(material, mesh, e)?;
    let b = strain_displacement(d, &grads);
    let k = voigt_size(d);
    let n = d * (d + 1);
    let mut cb = vec![0.0; k * n];
    for r in 0..k {
        for j in 0..n {
            cb[r * n + j] = (0..k).map(|s| c[r * k + s] * b[s * n + j]).sum();
        }
    }
    let mut ke = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let v: f64 = (0..k).map(|r| b[r * n + i] * cb[r * n + j]).sum();
            ke[i * n + j] = T::lit(measure * v);
        }
    }
    Ok(ke)
}

/// Boundary value problem on a mesh. All listed Dirichlet tags clamp every component.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemDefinition {
    pub mesh: MeshTopology,
    pub material: MaterialModel,
    pub body_force: Vec<f64>,
    pub tractions: Vec<(String, Vec<f64>)>,
    pub dirichlet: Vec<String>,
}

impl ProblemDefinition {
    pub fn validate(&self) -> Result<()> {
        let d = self.mesh.dim();
        if self.material.dim() != d {
            return Err(Error::DimensionMismatch(format!("{}D material on a {d}D mesh", self.material.dim())));
        }
        self.material.validate(self.mesh.num_nodes())?;
        if self.body_force.len() != d {
            return Err(Error::DimensionMismatch("body force length".into()));
        }
        for (tag, t) in &self.tractions {
            if !self.mesh.has_tag(tag) {
                return Err(Error::UnknownTag(tag.clone()));
            }
            if t.len() != d {
                return Err(Error::DimensionMismatch(format!("traction on `{tag}` has {} components", t.len())));
            }
        }
        for tag in &self.dirichlet {
            if !self.mesh.has_tag(tag) {
                return Err(Error::UnknownTag(tag.clone()));
            }
        }
        Ok(())
    }

    pub fn dirichlet_nodes(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.dirichlet.iter().flat_map(|t| self.mesh.nodes_with_tag(t)).collect();
        set.into_iter().collect()
    }
}

/// Assembled block system with Dirichlet conditions eliminated.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledSystem<T> {
    pub matrix: BlockCsrMatrix<T>,
    pub rhs: BlockVector<T>,
    pub dirichlet_nodes: Vec<usize>,
    /// Set when no Dirichlet DOF exists, so the matrix is singular.
    pub singular_warning: bool,
}

/// Global stiffness without boundary conditions. Elements are accumulated in
/// index order, so the result is bitwise reproducible.
pub fn assemble_stiffness<T: Real>(mesh: &MeshTopology, material: &MaterialModel) -> Result<BlockCsrMatrix<T>> {
    let d = mesh.dim();
    let mut a = BlockCsrMatrix::from_pattern(d, &mesh.adjacency())?;
    let nloc = d + 1;
    let ndof = d * nloc;
    let mut block = vec![T::zero(); d * d];
    for e in 0..mesh.num_elements() {
        let ke = element_stiffness::<T>(material, mesh, e)?;
        let el = mesh.element(e);
        for (li, &gi) in el.iter().enumerate() {
            for (lj, &gj) in el.iter().enumerate() {
                for r in 0..d {
                    for c in 0..d {
                        block[r * d + c] = ke[(li * d + r) * ndof + lj * d + c];
                    }
                }
                a.add_block(gi, gj, &block)?;
            }
        }
    }
    Ok(a)
}

fn facet_load<T: Real>(mesh: &MeshTopology, facet: &BoundaryFacet, t: &[f64], out: &mut [T]) {
    let d = mesh.dim();
    let share = mesh.facet_measure(facet) / facet.nodes.len() as f64;
    for &v in &facet.nodes {
        for c in 0..d {
            out[v * d + c] += T::lit(t[c] * share);
        }
    }
}

/// Lumped P1 traction load on facets with `tag`: each facet node receives `t·|facet|/#nodes`.
pub fn apply_traction<T: Real>(problem: &ProblemDefinition, tag: &str) -> Result<BlockVector<T>> {
    let mesh = &problem.mesh;
    if !mesh.has_tag(tag) {
        return Err(Error::UnknownTag(tag.to_string()));
    }
    let t = problem
        .tractions
        .iter()
        .find(|(name, _)| name == tag)
        .map(|(_, t)| t.clone())
        .unwrap_or_else(|| vec![0.0; mesh.dim()]);
    traction_load(mesh, tag, &t)
}

/// Lumped traction load for an explicit traction vector.
pub fn traction_load<T: Real>(mesh: &MeshTopology, tag: &str, t: &[f64]) -> Result<BlockVector<T>> {
    if !mesh.has_tag(tag) {
        return Err(Error::UnknownTag(tag.to_string()));
    }
    let mut out = vec![T::zero(); mesh.num_nodes() * mesh.dim()];
    for f in mesh.facets().iter().filter(|f| f.tag == tag) {
        facet_load(mesh, f, t, &mut out);
    }
    BlockVector::new(mesh.dim(), out)
}

/// Body force plus traction loads.
pub fn assemble_load<T: Real>(problem: &ProblemDefinition) -> Result<BlockVector<T>> {
    let mesh = &problem.mesh;
    let d = mesh.dim();
    let mut f = vec![T::zero(); mesh.num_nodes() * d];
    if problem.body_force.iter().any(|&b| b != 0.0) {
        for e in 0..mesh.num_elements() {
            let share = mesh.signed_measure(e).abs() / (d + 1) as f64;
            for &v in mesh.element(e) {
                for c in 0..d {
                    f[v * d + c] += T::lit(problem.body_force[c] * share);
                }
            }
        }
    }
    for (tag, t) in &problem.tractions {
        let load = traction_load::<T>(mesh, tag, t)?;
        for (dst, &v) in f.iter_mut().zip(load.as_slice()) {
            *dst += v;
        }
    }
    BlockVector::new(d, f)
}

/// Symmetric elimination of fully clamped nodes with prescribed values
/// (`None` means zero): the lifting `A[:,D] g` is moved to the right-hand
/// side, constrained rows and columns are zeroed, the diagonal block becomes
/// the identity and the right-hand side carries the prescribed value.
pub fn apply_dirichlet<T: Real>(a: &mut BlockCsrMatrix<T>, f: &mut BlockVector<T>, nodes: &[usize], values: Option<&[T]>) -> Result<()> {
    let d = a.block_dim();
    let n = a.num_nodes();
    let mut fixed = vec![false; n];
    for &v in nodes {
        if v >= n {
            return Err(Error::InvalidArgument(format!("Dirichlet node {v} out of range")));
        }
        fixed[v] = true;
    }
    let value = |i: usize| -> Vec<T> {
        match values {
            Some(g) => g[i * d..(i + 1) * d].to_vec(),
            None => vec![T::zero(); d],
        }
    };
    if values.is_some() {
        for i in 0..n {
            if fixed[i] {
                continue;
            }
            for k in a.row_ptr()[i]..a.row_ptr()[i + 1] {
                let j = a.col_idx()[k];
                if fixed[j] {
                    let g = value(j);
                    let b = a.block(k).to_vec();
                    let fi = f.node_mut(i);
                    for r in 0..d {
                        for c in 0..d {
                            fi[r] -= b[r * d + c] * g[c];
                        }
                    }
                }
            }
        }
    }
    for i in 0..n {
        for k in a.row_ptr()[i]..a.row_ptr()[i + 1] {
            let j = a.col_idx()[k];
            if fixed[i] || fixed[j] {
                let blk = a.block_mut(k);
                blk.iter_mut().for_each(|x| *x = T::zero());
                if i == j {
                    for r in 0..d {
                        blk[r * d + r] = T::one();
                    }
                }
            }
        }
        if fixed[i] {
            f.node_mut(i).copy_from_slice(&value(i));
        }
    }
    Ok(())
}

/// Assembles `A u = f` for a problem and eliminates the homogeneous Dirichlet nodes.
pub fn assemble<T: Real>(problem: &ProblemDefinition) -> Result<AssembledSystem<T>> {
    problem.validate()?;
    let mut matrix = assemble_stiffness::<T>(&problem.mesh, &problem.material)?;
    let mut rhs = assemble_load::<T>(problem)?;
    let dirichlet_nodes = problem.dirichlet_nodes();
    let singular_warning = dirichlet_nodes.is_empty();
    if singular_warning {
        log::warn!("no Dirichlet nodes: the assembled system is singular");
    }
    apply_dirichlet(&mut matrix, &mut rhs, &dirichlet_nodes, None)?;
    Ok(AssembledSystem { matrix, rhs, dirichlet_nodes, singular_warning })
}

/// Rigid body modes as node-major vectors: 3 in 2D, 6 in 3D.
pub fn rigid_body_modes(mesh: &MeshTopology) -> Vec<Vec<f64>> {
    let d = mesh.dim();
    let n = mesh.num_nodes();
    let mut modes = Vec::new();
    for c in 0..d {
        let mut v = vec![0.0; n * d];
        (0..n).for_each(|i| v[i * d + c] = 1.0);
        modes.push(v);
    }
    let rotations: Vec<(usize, usize)> = if d == 2 { vec![(0, 1)] } else { vec![(1, 2), (2, 0), (0, 1)] };
    for (p, q) in rotations {
        let mut v = vec![0.0; n * d];
        for i in 0..n {
            let x = mesh.node(i);
            v[i * d + p] = -x[q];
            v[i * d + q] = x[p];
        }
        modes.push(v);
    }
    modes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{direct_solve, l2, spmv_direct};
    use crate::mesh::{build_structured_box, build_structured_square, build_unstructured_2d};

    fn iso2(mesh: &MeshTopology, e: f64, nu: f64) -> MaterialModel {
        MaterialModel::Isotropic2D { youngs: vec![e; mesh.num_nodes()], poisson: nu }
    }

    #[test]
    fn isotropic_example_values() {
        let c: Vec<f64> = isotropic_voigt(2, 2.5, 0.25);
        let expect = [3.0, 1.0, 0.0, 1.0, 3.0, 0.0, 0.0, 0.0, 1.0];
        for (a, b) in c.iter().zip(expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_rotation_gives_principal_stiffness() {
        let (e1, e2, g12, nu12) = (200e9, 50e6, 2e9, 0.3);
        let c = anisotropic_2d_voigt(e1, e2, g12, nu12, 0.0);
        let nu21 = nu12 * e2 / e1;
        let den = 1.0 - nu12 * nu21;
        assert!((c[0][0] - e1 / den).abs() < 1e-6 * e1);
        assert!((c[1][1] - e2 / den).abs() < 1e-9 * e1);
        assert!((c[0][1] - nu21 * e1 / den).abs() < 1e-9 * e1);
        assert!((c[2][2] - g12).abs() < 1e-9 * e1);
        assert!(c[0][2].abs() < 1e-9 * e1);
    }

    #[test]
    fn rotated_anisotropic_is_symmetric_positive() {
        let c = anisotropic_2d_voigt(200e9, 50e6, 2e9, 0.3, std::f64::consts::FRAC_PI_4);
        let m = crate::linalg::DenseMatrix { rows: 3, cols: 3, data: c.iter().flatten().map(|x| x / 1e9).collect() };
        for i in 0..3 {
            for j in 0..3 {
                assert!((c[i][j] - c[j][i]).abs() < 1e-6 * c[0][0].abs());
            }
        }
        assert!(m.cholesky().is_ok());
    }

    #[test]
    fn orthotropic_reduces_to_isotropic() {
        let (e, nu) = (3.0e9, 0.3);
        let g = e / (2.0 * (1.0 + nu));
        let c = orthotropic_3d_voigt(e, e, e, g, g, g, nu, nu, nu).unwrap();
        let iso: Vec<f64> = isotropic_voigt(3, e, nu);
        for i in 0..6 {
            for j in 0..6 {
                assert!((c[i][j] - iso[i * 6 + j]).abs() <= 1e-10 * iso[0]);
            }
        }
    }

    #[test]
    fn inadmissible_orthotropic_rejected() {
        assert!(orthotropic_3d_voigt(1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.9, 0.9, 0.9).is_err());
    }

    #[test]
    fn element_annihilates_translations() {
        let mesh = build_unstructured_2d(4, 3).unwrap();
        let mat = iso2(&mesh, 7.0, 0.3);
        for e in 0..mesh.num_elements() {
            let ke: Vec<f64> = element_stiffness(&mat, &mesh, e).unwrap();
            for c in 0..2 {
                for i in 0..6 {
                    let s: f64 = (0..3).map(|a| ke[i * 6 + a * 2 + c]).sum();
                    assert!(s.abs() < 1e-12);
                }
            }
        }
    }

    /// Independent route: tensor-form σ(u):ε(v) with gradients from the
    /// coefficients of the linear interpolant, integrated with a 3-point rule.
    #[test]
    fn element_matches_quadrature_oracle() {
        let coords = vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let mesh = MeshTopology::new(2, coords.clone(), vec![0, 1, 2], vec![]).unwrap();
        let (lam, mu) = (1.0, 1.0);
        let e = mu * (3.0 * lam + 2.0 * mu) / (lam + mu);
        let nu = lam / (2.0 * (lam + mu));
        let ke: Vec<f64> = element_stiffness(&iso2(&mesh, e, nu), &mesh, 0).unwrap();

        // φ_a(x, y) = α + βx + γy through the three vertices
        let m = crate::linalg::DenseMatrix { rows: 3, cols: 3, data: vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0] };
        let lu = m.lu().unwrap();
        let grads: Vec<[f64; 2]> = (0..3)
            .map(|a| {
                let mut rhs = [0.0; 3];
                rhs[a] = 1.0;
                let coef = lu.solve(&rhs);
                [coef[1], coef[2]]
            })
            .collect();
        let strain = |a: usize, comp: usize| {
            let mut eps = [[0.0; 2]; 2];
            for p in 0..2 {
                for q in 0..2 {
                    let dpa = if p == comp { grads[a][q] } else { 0.0 };
                    let dqa = if q == comp { grads[a][p] } else { 0.0 };
                    eps[p][q] = 0.5 * (dpa + dqa);
                }
            }
            eps
        };
        let weights = [1.0 / 6.0; 3];
        for i in 0..6 {
            for j in 0..6 {
                let (ei, ej) = (strain(i / 2, i % 2), strain(j / 2, j % 2));
                let tr = ei[0][0] + ei[1][1];
                let mut integrand = 0.0;
                for p in 0..2 {
                    for q in 0..2 {
                        let sigma = lam * tr * if p == q { 1.0 } else { 0.0 } + 2.0 * mu * ei[p][q];
                        integrand += sigma * ej[p][q];
                    }
                }
                let quad: f64 = weights.iter().map(|w| w * integrand).sum();
                assert!((ke[i * 6 + j] - quad).abs() < 1e-12, "entry ({i},{j}): {} vs {quad}", ke[i * 6 + j]);
            }
        }
        let trace: f64 = (0..6).map(|i| ke[i * 6 + i]).sum();
        assert!(trace > 0.0);
    }

    #[test]
    fn element_scale_invariant_in_2d() {
        let base = vec![0.1, 0.2, 0.9, 0.3, 0.4, 0.8];
        let m1 = MeshTopology::new(2, base.clone(), vec![0, 1, 2], vec![]).unwrap();
        let m2 = MeshTopology::new(2, base.iter().map(|x| x * 3.7).collect(), vec![0, 1, 2], vec![]).unwrap();
        let k1: Vec<f64> = element_stiffness(&iso2(&m1, 5.0, 0.3), &m1, 0).unwrap();
        let k2: Vec<f64> = element_stiffness(&iso2(&m2, 5.0, 0.3), &m2, 0).unwrap();
        for (a, b) in k1.iter().zip(&k2) {
            assert!((a - b).abs() < 1e-12 * k1[0].abs());
        }
    }

    #[test]
    fn degenerate_element_rejected() {
        let mesh = MeshTopology::new(2, vec![0.0, 0.0, 1.0, 0.0, 2.0, 1e-30], vec![0, 1, 2], vec![]).unwrap();
        assert!(matches!(element_stiffness::<f64>(&iso2(&mesh, 1.0, 0.3), &mesh, 0), Err(Error::DegenerateElement { .. })));
    }

    fn data1_like(n: usize) -> ProblemDefinition {
        let mesh = build_structured_square(n).unwrap();
        let material = iso2(&mesh, 1e8, 0.4);
        ProblemDefinition { mesh, material, body_force: vec![0.0, 0.0], tractions: vec![("right".into(), vec![1e6, 0.0])], dirichlet: vec!["left".into()] }
    }

    #[test]
    fn paper_scale_dof_count() {
        let sys = assemble::<f64>(&data1_like(32)).unwrap();
        assert_eq!(sys.matrix.num_nodes(), 1089);
        assert_eq!(sys.matrix.num_dofs(), 2178);
    }

    #[test]
    fn zero_loads_give_zero_solution() {
        let mut p = data1_like(3);
        p.tractions[0].1 = vec![0.0, 0.0];
        let sys = assemble::<f64>(&p).unwrap();
        assert!(sys.rhs.as_slice().iter().all(|&x| x == 0.0));
        let u = direct_solve(&sys.matrix, sys.rhs.as_slice()).unwrap();
        assert!(u.iter().all(|&x| x.abs() < 1e-300));
    }

    #[test]
    fn traction_edge_example() {
        let p = data1_like(2);
        let load: BlockVector<f64> = apply_traction(&p, "right").unwrap();
        let f = &p.mesh.facets().iter().find(|f| f.tag == "right").unwrap();
        assert!((p.mesh.facet_measure(f) - 0.5).abs() < 1e-15);
        // middle node of the right edge touches two facets, corners one
        let right = p.mesh.nodes_with_tag("right");
        let xs: Vec<f64> = right.iter().map(|&v| load.node(v)[0]).collect();
        assert_eq!(xs, vec![2.5e5, 5.0e5, 2.5e5]);
        assert!(apply_traction::<f64>(&p, "nowhere").is_err());
    }

    #[test]
    fn total_traction_load() {
        let p = data1_like(8);
        let f = assemble_load::<f64>(&p).unwrap();
        let sx: f64 = (0..f.num_nodes()).map(|i| f.node(i)[0]).sum();
        let sy: f64 = (0..f.num_nodes()).map(|i| f.node(i)[1]).sum();
        assert!((sx - 1e6).abs() < 1e-6);
        assert!(sy.abs() < 1e-9);
        let mut zero = p.clone();
        zero.tractions[0].1 = vec![0.0, 0.0];
        assert!(apply_traction::<f64>(&zero, "right").unwrap().as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn patch_test_reproduces_linear_field() {
        let mesh = build_unstructured_2d(6, 11).unwrap();
        let n = mesh.num_nodes();
        let material = iso2(&mesh, 3.0, 0.3);
        let mut a = assemble_stiffness::<f64>(&mesh, &material).unwrap();
        let mut f = BlockVector::zeros(2, n);
        let boundary: Vec<usize> = (0..n).filter(|&i| !mesh.node_tags(i).is_empty()).collect();
        let exact: Vec<f64> = (0..n).flat_map(|i| [mesh.node(i)[0], 0.0]).collect();
        apply_dirichlet(&mut a, &mut f, &boundary, Some(&exact)).unwrap();
        let u = direct_solve(&a, f.as_slice()).unwrap();
        for k in 0..2 * n {
            assert!((u[k] - exact[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn rigid_modes_in_kernel() {
        let mesh = build_unstructured_2d(5, 2).unwrap();
        let a = assemble_stiffness::<f64>(&mesh, &iso2(&mesh, 2e8, 0.4)).unwrap();
        for m in rigid_body_modes(&mesh) {
            assert!(l2(&spmv_direct(&a, &m).unwrap()) < 1e-8 * a.frobenius());
        }
        let mesh = build_structured_box(3, 2, 2, [3.0, 1.0, 1.0]).unwrap();
        let mat = MaterialModel::Orthotropic3D { e1: 1e11, e2: 1e10, e3: 1e8, g12: 5e9, g23: 5e6, g31: 5e8, nu12: 0.3, nu13: 0.3, nu23: 0.3 };
        let a = assemble_stiffness::<f64>(&mesh, &mat).unwrap();
        let modes = rigid_body_modes(&mesh);
        assert_eq!(modes.len(), 6);
        for m in modes {
            assert!(l2(&spmv_direct(&a, &m).unwrap()) < 1e-8 * a.frobenius());
        }
    }

    #[test]
    fn assembled_matrix_symmetric_and_spd() {
        let sys = assemble::<f64>(&data1_like(4)).unwrap();
        assert!(sys.matrix.is_symmetric(0.0));
        let mut dense = sys.matrix.to_dense();
        dense.data.iter_mut().for_each(|x| *x /= 1e8);
        assert!(dense.cholesky().is_ok());
        assert!(!sys.singular_warning);
    }

    #[test]
    fn missing_dirichlet_sets_warning() {
        let mut p = data1_like(2);
        p.dirichlet.clear();
        assert!(assemble::<f64>(&p).unwrap().singular_warning);
    }

    #[test]
    fn linear_in_youngs_modulus() {
        let p = data1_like(3);
        let mut p2 = p.clone();
        if let MaterialModel::Isotropic2D { youngs, .. } = &mut p2.material {
            youngs.iter_mut().for_each(|e| *e *= 2.0);
        }
        let a1 = assemble_stiffness::<f64>(&p.mesh, &p.material).unwrap();
        let a2 = assemble_stiffness::<f64>(&p2.mesh, &p2.material).unwrap();
        for (x, y) in a1.blocks().iter().zip(a2.blocks()) {
            assert!((2.0 * x - y).abs() <= 1e-15 * y.abs().max(1.0));
        }
    }

    #[test]
    fn single_precision_assembly() {
        let p = data1_like(2);
        let s32 = assemble::<f32>(&p).unwrap();
        let s64 = assemble::<f64>(&p).unwrap();
        for (a, b) in s32.matrix.blocks().iter().zip(s64.matrix.blocks()) {
            assert!((*a as f64 - b).abs() <= 1e-6 * b.abs().max(1e8));
        }
    }

    #[test]
    fn unknown_tags_rejected() {
        let mut p = data1_like(2);
        p.dirichlet = vec!["nowhere".into()];
        assert!(matches!(assemble::<f64>(&p), Err(Error::UnknownTag(_))));
    }
}
