//! Adaptive frequency-domain machinery of the correction operator: integer
//! frequency lattices, coordinate normalization, non-uniform forward and
//! inverse Fourier sums, the 3^d lattice convolution and diagonal scaling.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::mesh::MeshTopology;

/// All integer frequency vectors `k ∈ [−m, m]^dim` in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyLattice {
    dim: usize,
    m: usize,
    freqs: Vec<[i64; 3]>,
}

impl FrequencyLattice {
    pub fn new(dim: usize, m: usize) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidArgument(format!("lattice dimension {dim} not in 1..=3")));
        }
        let side = 2 * m + 1;
        let total = side.pow(dim as u32);
        let freqs = (0..total)
            .map(|mut idx| {
                let mut k = [0i64; 3];
                for a in (0..dim).rev() {
                    k[a] = (idx % side) as i64 - m as i64;
                    idx /= side;
                }
                k
            })
            .collect();
        Ok(Self { dim, m, freqs })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn freq(&self, idx: usize) -> &[i64] {
        &self.freqs[idx][..self.dim]
    }

    pub fn index_of(&self, k: &[i64]) -> Option<usize> {
        let side = 2 * self.m as i64 + 1;
        let mut idx = 0i64;
        for a in 0..self.dim {
            let shifted = k[a] + self.m as i64;
            if !(0..side).contains(&shifted) {
                return None;
            }
            idx = idx * side + shifted;
        }
        Some(idx as usize)
    }

    /// Index of `k + sign·o` where `o` is the `offset`-th vector of `{−1,0,1}^dim`.
    pub fn shifted(&self, idx: usize, offset: usize, sign: i64) -> Option<usize> {
        let o = stencil_offset(self.dim, offset);
        let mut k = self.freqs[idx];
        for a in 0..self.dim {
            k[a] += sign * o[a];
        }
        self.index_of(&k[..self.dim])
    }
}

/// Number of entries of a 3^dim stencil.
pub fn stencil_size(dim: usize) -> usize {
    3usize.pow(dim as u32)
}

/// Index of the zero offset in the lexicographic 3^dim stencil.
pub fn stencil_center(dim: usize) -> usize {
    (stencil_size(dim) - 1) / 2
}

/// Offset vector in `{−1,0,1}^dim` of stencil entry `idx` (lexicographic).
pub fn stencil_offset(dim: usize, mut idx: usize) -> [i64; 3] {
    let mut o = [0i64; 3];
    for a in (0..dim).rev() {
        o[a] = (idx % 3) as i64 - 1;
        idx /= 3;
    }
    o
}

/// Per-axis padding for coordinate normalization. A tensor-product grid
/// with `n_a` distinct positions on axis `a` gets `1/(n_a − 1)`, which makes
/// the identity map an exact DFT; other meshes use `N^{1/d}` points per axis.
pub fn default_gaps(mesh: &MeshTopology) -> Vec<f64> {
    let d = mesh.dim();
    let n = mesh.num_nodes();
    let bbox = mesh.bounding_box();
    let counts: Vec<usize> = (0..d)
        .map(|a| {
            let tol = 1e-9 * (bbox[a].1 - bbox[a].0).max(1e-300);
            let mut xs: Vec<f64> = (0..n).map(|i| mesh.node(i)[a]).collect();
            xs.sort_by(f64::total_cmp);
            xs.dedup_by(|x, y| (*x - *y).abs() <= tol);
            xs.len()
        })
        .collect();
    if counts.iter().product::<usize>() == n {
        counts.iter().map(|&c| if c > 1 { 1.0 / (c - 1) as f64 } else { 0.0 }).collect()
    } else {
        let per_axis = (n as f64).powf(1.0 / d as f64).round().max(2.0);
        vec![1.0 / (per_axis - 1.0); d]
    }
}

/// Affine map of each coordinate axis from its bounding box onto
/// `[0, 2π/(1+gap_a)]`. Degenerate axes map to angle 0.
pub fn normalize_coordinates(xi: &[f64], dim: usize, gaps: &[f64]) -> Result<Vec<f64>> {
    if xi.len() % dim != 0 || gaps.len() != dim {
        return Err(Error::DimensionMismatch("coordinate array does not match dimension".into()));
    }
    let n = xi.len() / dim;
    let mut out = vec![0.0; xi.len()];
    for a in 0..dim {
        let (lo, hi) = (0..n).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), l| (lo.min(xi[l * dim + a]), hi.max(xi[l * dim + a])));
        let width = hi - lo;
        if !(width > 1e-300) {
            continue;
        }
        let c = 2.0 * PI / (width * (1.0 + gaps[a]));
        for l in 0..n {
            out[l * dim + a] = c * (xi[l * dim + a] - lo);
        }
    }
    Ok(out)
}

/// Precomputed `e^{i k·θ_l}` for every lattice frequency and node.
#[derive(Debug, Clone)]
pub struct PhaseTable {
    pub num_nodes: usize,
    pub num_freqs: usize,
    /// `cos[k * N + l]`
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl PhaseTable {
    pub fn new(lattice: &FrequencyLattice, angles: &[f64]) -> Result<Self> {
        let d = lattice.dim();
        if angles.len() % d != 0 {
            return Err(Error::DimensionMismatch("angle array does not match lattice dimension".into()));
        }
        let n = angles.len() / d;
        let p = lattice.len();
        let mut cos = vec![0.0; p * n];
        let mut sin = vec![0.0; p * n];
        for k in 0..p {
            let kv = lattice.freq(k);
            for l in 0..n {
                let phase: f64 = (0..d).map(|a| kv[a] as f64 * angles[l * d + a]).sum();
                let (s, c) = phase.sin_cos();
                cos[k * n + l] = c;
                sin[k * n + l] = s;
            }
        }
        Ok(Self { num_nodes: n, num_freqs: p, cos, sin })
    }
}

/// `S(k, c) = Σ_l r(l, c) e^{i k·θ_l}`; `r` is node-major with `d` components.
pub fn forward_nudft(r: &[f64], d: usize, table: &PhaseTable) -> Result<Vec<Complex64>> {
    let n = table.num_nodes;
    if r.len() != n * d {
        return Err(Error::DimensionMismatch(format!("vector of length {} for {n} nodes × {d}", r.len())));
    }
    let mut out = vec![Complex64::new(0.0, 0.0); table.num_freqs * d];
    for k in 0..table.num_freqs {
        let (cs, sn) = (&table.cos[k * n..(k + 1) * n], &table.sin[k * n..(k + 1) * n]);
        for c in 0..d {
            let (mut re, mut im) = (0.0, 0.0);
            for l in 0..n {
                let v = r[l * d + c];
                re += v * cs[l];
                im += v * sn[l];
            }
            out[k * d + c] = Complex64::new(re, im);
        }
    }
    Ok(out)
}

/// `e(l, c) = (1/P) Re Σ_k S(k, c) e^{−i k·θ_l}`.
pub fn inverse_nudft(spectrum: &[Complex64], d: usize, table: &PhaseTable) -> Result<Vec<f64>> {
    let (n, p) = (table.num_nodes, table.num_freqs);
    if spectrum.len() != p * d {
        return Err(Error::DimensionMismatch(format!("spectrum of length {} for {p} frequencies × {d}", spectrum.len())));
    }
    let mut out = vec![0.0; n * d];
    let inv = 1.0 / p as f64;
    for k in 0..p {
        let (cs, sn) = (&table.cos[k * n..(k + 1) * n], &table.sin[k * n..(k + 1) * n]);
        for c in 0..d {
            let s = spectrum[k * d + c] * inv;
            for l in 0..n {
                out[l * d + c] += s.re * cs[l] + s.im * sn[l];
            }
        }
    }
    Ok(out)
}

/// Zero-padded per-channel convolution over the lattice with a 3^dim complex
/// stencil per channel (`kernel[c * 3^dim + o]`). The adjoint uses the
/// conjugated, reflected stencil.
pub fn lattice_convolution(spectrum: &[Complex64], d: usize, lattice: &FrequencyLattice, kernel: &[Complex64], adjoint: bool) -> Result<Vec<Complex64>> {
    let ks = stencil_size(lattice.dim());
    if kernel.len() != d * ks {
        return Err(Error::DimensionMismatch(format!("kernel has {} entries, expected {}", kernel.len(), d * ks)));
    }
    if spectrum.len() != lattice.len() * d {
        return Err(Error::DimensionMismatch("spectrum does not match lattice".into()));
    }
    let mut out = vec![Complex64::new(0.0, 0.0); spectrum.len()];
    let sign = if adjoint { 1 } else { -1 };
    for k in 0..lattice.len() {
        for o in 0..ks {
            if let Some(src) = lattice.shifted(k, o, sign) {
                for c in 0..d {
                    let w = kernel[c * ks + o];
                    let w = if adjoint { w.conj() } else { w };
                    out[k * d + c] += w * spectrum[src * d + c];
                }
            }
        }
    }
    Ok(out)
}

/// Identity stencil for `d` channels.
pub fn identity_kernel(dim: usize, d: usize) -> Vec<Complex64> {
    let ks = stencil_size(dim);
    let mut k = vec![Complex64::new(0.0, 0.0); d * ks];
    for c in 0..d {
        k[c * ks + stencil_center(dim)] = Complex64::new(1.0, 0.0);
    }
    k
}

/// One correction level with fixed weights.
#[derive(Debug, Clone)]
pub struct SpectralLevel {
    pub lattice: FrequencyLattice,
    /// Real scaling per (frequency, component): `lambda[k * d + c]`.
    pub lambda: Vec<f64>,
    pub kernel: Vec<Complex64>,
}

impl SpectralLevel {
    pub fn new(lattice: FrequencyLattice, d: usize, lambda: Vec<f64>, kernel: Vec<Complex64>) -> Result<Self> {
        if lambda.len() != lattice.len() * d {
            return Err(Error::DimensionMismatch(format!("Λ̃ has {} entries, expected {}", lambda.len(), lattice.len() * d)));
        }
        if kernel.len() != d * stencil_size(lattice.dim()) {
            return Err(Error::DimensionMismatch("kernel size does not match dimension".into()));
        }
        if lambda.iter().any(|x| !x.is_finite()) || kernel.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidArgument("non-finite spectral weights".into()));
        }
        Ok(Self { lattice, lambda, kernel })
    }

    /// `F⁻¹ C* Λ̃ C F r`.
    pub fn apply(&self, r: &[f64], d: usize, table: &PhaseTable) -> Result<Vec<f64>> {
        let s = forward_nudft(r, d, table)?;
        let mut s = lattice_convolution(&s, d, &self.lattice, &self.kernel, false)?;
        for (z, &l) in s.iter_mut().zip(&self.lambda) {
            *z *= l;
        }
        let s = lattice_convolution(&s, d, &self.lattice, &self.kernel, true)?;
        inverse_nudft(&s, d, table)
    }
}

/// Applies a level at node angles `angles` (already normalized).
pub fn apply_level(r: &[f64], d: usize, angles: &[f64], level: &SpectralLevel) -> Result<Vec<f64>> {
    let table = PhaseTable::new(&level.lattice, angles)?;
    level.apply(r, d, &table)
}
