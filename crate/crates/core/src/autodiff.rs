//! Tape-based reverse-mode automatic differentiation over dense `f64`
//! arrays, with the fused sparse, spectral and smoothing operations needed to
//! differentiate the unrolled hybrid iteration.
//!
//! Values are computed eagerly when a node is recorded. Complex arrays are
//! stored interleaved as `[re, im, re, im, ...]`.

use std::rc::Rc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{spmv_direct, spmv_transpose, BlockCsrMatrix, BlockDiagInverse};
use crate::smoother::{smooth, JacobiConfig};
use crate::spectral::{stencil_size, FrequencyLattice};

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Scalar CSR matrix used as a constant operator (graph propagation).
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    /// `self · X` where `X` is `cols × width` row-major.
    pub fn matmul(&self, x: &[f64], width: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * width];
        for i in 0..self.rows {
            let dst = &mut out[i * width..(i + 1) * width];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let v = self.vals[k];
                let src = &x[self.col_idx[k] * width..(self.col_idx[k] + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        out
    }

    /// `selfᵀ · G` where `G` is `rows × width`.
    pub fn matmul_transpose(&self, g: &[f64], width: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.cols * width];
        for i in 0..self.rows {
            let src = &g[i * width..(i + 1) * width];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let v = self.vals[k];
                let dst = &mut out[self.col_idx[k] * width..(self.col_idx[k] + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        out
    }
}

/// Constant data of a fused smoothing node.
#[derive(Debug, Clone)]
pub struct SmoothContext {
    pub a: Rc<BlockCsrMatrix<f64>>,
    pub d_inv: Rc<BlockDiagInverse<f64>>,
    pub omega: f64,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softplus(Var),
    MeanRows(Var),
    BroadcastRows(Var),
    Gather(Var, Rc<[usize]>),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    SparseMul(Rc<CsrMatrix>, Var),
    BlockSpmv(Rc<BlockCsrMatrix<f64>>, Var),
    Sum(Var),
    Norm2(Var),
    Div(Var, Var),
    NormalizeCoords { xi: Var, dim: usize, coef: Vec<f64>, lo: Vec<usize>, hi: Vec<usize> },
    PhaseExp { angles: Var, lattice: Rc<FrequencyLattice> },
    NudftForward { r: Var, table: Var, d: usize },
    NudftInverse { spec: Var, table: Var, d: usize },
    LatticeConv { spec: Var, kernel: Var, lattice: Rc<FrequencyLattice>, d: usize, adjoint: bool },
    SpectrumScale { spec: Var, lambda: Var },
    JacobiSmooth { u: Var, f: Var, ctx: Rc<SmoothContext>, sweeps: usize },
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    requires_grad: bool,
    op: Op,
}

/// Recording of a computation.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Autodiff(format!("{op}: {detail}"))
}

fn cplx(v: &[f64], i: usize) -> Complex64 {
    Complex64::new(v[2 * i], v[2 * i + 1])
}

fn add_cplx(v: &mut [f64], i: usize, z: Complex64) {
    v[2 * i] += z.re;
    v[2 * i + 1] += z.im;
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, rows, cols, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Vec<f64>, rows: usize, cols: usize, requires_grad: bool) -> Result<Var> {
        if value.len() != rows * cols {
            return Err(shape_err("leaf", format!("{} values for shape {rows}×{cols}", value.len())));
        }
        self.nodes.push(Node { value, rows, cols, requires_grad, op: Op::Leaf });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable input.
    pub fn param(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Result<Var> {
        self.leaf(value, rows, cols, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Result<Var> {
        self.leaf(value, rows, cols, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}×{k} · {k2}×{n}")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let row = &bv[p * n..(p + 1) * n];
                for (o, y) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *o += x * y;
                }
            }
        }
        Ok(self.push(out, m, n, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(out, r, c, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(out, r, c, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("hadamard", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(out, r, c, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let ((r, c), (br, bc)) = (self.shape(a), self.shape(bias));
        if br != 1 || bc != c {
            return Err(shape_err("add_row", format!("{r}×{c} + {br}×{bc}")));
        }
        let bv = self.value(bias);
        let out = self.value(a).iter().enumerate().map(|(i, x)| x + bv[i % c]).collect();
        Ok(self.push(out, r, c, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push(out, r, c, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        self.push(out, r, c, Op::Relu(a), &[a])
    }

    /// `ln(1 + eˣ)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p()).collect();
        self.push(out, r, c, Op::Softplus(a), &[a])
    }

    /// Column means, `rows × cols → 1 × cols`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += av[i * c + j];
            }
        }
        out.iter_mut().for_each(|x| *x /= r as f64);
        self.push(out, 1, c, Op::MeanRows(a), &[a])
    }

    /// Repeats a `1 × cols` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r != 1 {
            return Err(shape_err("broadcast_rows", format!("expected one row, got {r}")));
        }
        let out = self.value(a).repeat(n);
        Ok(self.push(out, n, c, Op::BroadcastRows(a), &[a]))
    }

    /// `out[i] = a[idx[i]]` over the flattened array, shaped `rows × cols`.
    pub fn gather(&mut self, a: Var, idx: Rc<[usize]>, rows: usize, cols: usize) -> Result<Var> {
        let len = self.value(a).len();
        if idx.len() != rows * cols || idx.iter().any(|&i| i >= len) {
            return Err(shape_err("gather", "index list does not fit".into()));
        }
        let av = self.value(a);
        let out = idx.iter().map(|&i| av[i]).collect();
        Ok(self.push(out, rows, cols, Op::Gather(a, idx), &[a]))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        if self.value(a).len() != rows * cols {
            return Err(shape_err("reshape", format!("{} values into {rows}×{cols}", self.value(a).len())));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(out, rows, cols, Op::Reshape(a), &[a]))
    }

    /// Flattened concatenation as a column.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let out: Vec<f64> = parts.iter().flat_map(|p| self.value(*p).iter().copied()).collect();
        let n = out.len();
        self.push(out, n, 1, Op::Concat(parts.to_vec()), parts)
    }

    /// Contiguous flattened slice `[start, start + len)` as a column.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > self.value(a).len() {
            return Err(shape_err("slice", format!("[{start}, {}) out of {}", start + len, self.value(a).len())));
        }
        let out = self.value(a)[start..start + len].to_vec();
        Ok(self.push(out, len, 1, Op::Slice(a, start), &[a]))
    }

    /// Constant sparse matrix times `a` (`cols × width`).
    pub fn sparse_matmul(&mut self, s: Rc<CsrMatrix>, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r != s.cols {
            return Err(shape_err("sparse_matmul", format!("{}×{} · {r}×{c}", s.rows, s.cols)));
        }
        let out = s.matmul(self.value(a), c);
        let rows = s.rows;
        Ok(self.push(out, rows, c, Op::SparseMul(s, a), &[a]))
    }

    /// Constant block matrix times a node-major vector.
    pub fn block_spmv(&mut self, m: Rc<BlockCsrMatrix<f64>>, a: Var) -> Result<Var> {
        let out = spmv_direct(&m, self.value(a)).map_err(|e| shape_err("block_spmv", e.to_string()))?;
        let n = out.len();
        Ok(self.push(out, n, 1, Op::BlockSpmv(m, a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![s], 1, 1, Op::Sum(a), &[a])
    }

    /// Euclidean norm of the flattened array.
    pub fn norm2(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push(vec![s], 1, 1, Op::Norm2(a), &[a])
    }

    /// Quotient of two scalars.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != 1 || self.value(b).len() != 1 {
            return Err(shape_err("div", "operands must be scalars".into()));
        }
        let q = self.scalar(a) / self.scalar(b);
        Ok(self.push(vec![q], 1, 1, Op::Div(a, b), &[a, b]))
    }

    /// Per-axis affine map of `xi` (`N × dim`) from its bounding box onto
    /// `[0, 2π/(1+gap)]`; degenerate axes map to zero.
    pub fn normalize_coords(&mut self, xi: Var, dim: usize, gaps: &[f64]) -> Result<Var> {
        let (n, c) = self.shape(xi);
        if c != dim || gaps.len() != dim || n == 0 {
            return Err(shape_err("normalize_coords", format!("{n}×{c} with dim {dim}")));
        }
        let v = self.value(xi);
        let mut lo = vec![0usize; dim];
        let mut hi = vec![0usize; dim];
        let mut coef = vec![0.0; dim];
        let mut out = vec![0.0; n * dim];
        for a in 0..dim {
            for l in 1..n {
                if v[l * dim + a] < v[lo[a] * dim + a] {
                    lo[a] = l;
                }
                if v[l * dim + a] > v[hi[a] * dim + a] {
                    hi[a] = l;
                }
            }
            let (vlo, vhi) = (v[lo[a] * dim + a], v[hi[a] * dim + a]);
            if vhi - vlo > 1e-300 {
                coef[a] = 2.0 * std::f64::consts::PI / (1.0 + gaps[a]);
                for l in 0..n {
                    out[l * dim + a] = coef[a] * (v[l * dim + a] - vlo) / (vhi - vlo);
                }
            }
        }
        Ok(self.push(out, n, dim, Op::NormalizeCoords { xi, dim, coef, lo, hi }, &[xi]))
    }

    /// Table of `cos(k·θ_l)` then `sin(k·θ_l)`, each `P × N`.
    pub fn phase_exp(&mut self, angles: Var, lattice: Rc<FrequencyLattice>) -> Result<Var> {
        let (n, d) = self.shape(angles);
        if d != lattice.dim() {
            return Err(shape_err("phase_exp", format!("angles have {d} columns, lattice dimension {}", lattice.dim())));
        }
        let p = lattice.len();
        let av = self.value(angles);
        let mut out = vec![0.0; 2 * p * n];
        for k in 0..p {
            let kv = lattice.freq(k);
            for l in 0..n {
                let phase: f64 = (0..d).map(|a| kv[a] as f64 * av[l * d + a]).sum();
                let (s, c) = phase.sin_cos();
                out[k * n + l] = c;
                out[p * n + k * n + l] = s;
            }
        }
        Ok(self.push(out, 2 * p, n, Op::PhaseExp { angles, lattice }, &[angles]))
    }

    /// `S(k,c) = Σ_l r(l,c) e^{i k·θ_l}` from a phase table.
    pub fn nudft_forward(&mut self, r: Var, table: Var, d: usize) -> Result<Var> {
        let (two_p, n) = self.shape(table);
        let p = two_p / 2;
        if self.value(r).len() != n * d {
            return Err(shape_err("nudft_forward", format!("vector of {} entries for {n} nodes × {d}", self.value(r).len())));
        }
        let (rv, tv) = (self.value(r), self.value(table));
        let mut out = vec![0.0; 2 * p * d];
        for k in 0..p {
            let (cs, sn) = (&tv[k * n..(k + 1) * n], &tv[p * n + k * n..p * n + (k + 1) * n]);
            for c in 0..d {
                let (mut re, mut im) = (0.0, 0.0);
                for l in 0..n {
                    re += rv[l * d + c] * cs[l];
                    im += rv[l * d + c] * sn[l];
                }
                out[2 * (k * d + c)] = re;
                out[2 * (k * d + c) + 1] = im;
            }
        }
        Ok(self.push(out, p * d, 2, Op::NudftForward { r, table, d }, &[r, table]))
    }

    /// `e(l,c) = (1/P) Re Σ_k S(k,c) e^{−i k·θ_l}`.
    pub fn nudft_inverse(&mut self, spec: Var, table: Var, d: usize) -> Result<Var> {
        let (two_p, n) = self.shape(table);
        let p = two_p / 2;
        if self.value(spec).len() != 2 * p * d {
            return Err(shape_err("nudft_inverse", "spectrum does not match the phase table".into()));
        }
        let (sv, tv) = (self.value(spec), self.value(table));
        let inv = 1.0 / p as f64;
        let mut out = vec![0.0; n * d];
        for k in 0..p {
            let (cs, sn) = (&tv[k * n..(k + 1) * n], &tv[p * n + k * n..p * n + (k + 1) * n]);
            for c in 0..d {
                let (re, im) = (sv[2 * (k * d + c)] * inv, sv[2 * (k * d + c) + 1] * inv);
                for l in 0..n {
                    out[l * d + c] += re * cs[l] + im * sn[l];
                }
            }
        }
        Ok(self.push(out, n * d, 1, Op::NudftInverse { spec, table, d }, &[spec, table]))
    }

    /// Per-channel 3^dim lattice convolution (or its adjoint) of an interleaved spectrum.
    pub fn lattice_conv(&mut self, spec: Var, kernel: Var, lattice: Rc<FrequencyLattice>, d: usize, adjoint: bool) -> Result<Var> {
        let ks = stencil_size(lattice.dim());
        let p = lattice.len();
        if self.value(kernel).len() != 2 * d * ks || self.value(spec).len() != 2 * p * d {
            return Err(shape_err("lattice_conv", "kernel or spectrum size mismatch".into()));
        }
        let (sv, kv) = (self.value(spec), self.value(kernel));
        let mut out = vec![0.0; 2 * p * d];
        let sign = if adjoint { 1 } else { -1 };
        for k in 0..p {
            for o in 0..ks {
                if let Some(src) = lattice.shifted(k, o, sign) {
                    for c in 0..d {
                        let w = cplx(kv, c * ks + o);
                        let w = if adjoint { w.conj() } else { w };
                        add_cplx(&mut out, k * d + c, w * cplx(sv, src * d + c));
                    }
                }
            }
        }
        Ok(self.push(out, p * d, 2, Op::LatticeConv { spec, kernel, lattice, d, adjoint }, &[spec, kernel]))
    }

    /// Multiplies each complex entry by a real factor.
    pub fn spectrum_scale(&mut self, spec: Var, lambda: Var) -> Result<Var> {
        let n = self.value(lambda).len();
        if self.value(spec).len() != 2 * n {
            return Err(shape_err("spectrum_scale", format!("{} complex entries, {n} factors", self.value(spec).len() / 2)));
        }
        let (sv, lv) = (self.value(spec), self.value(lambda));
        let out = sv.iter().enumerate().map(|(i, x)| x * lv[i / 2]).collect();
        Ok(self.push(out, n, 2, Op::SpectrumScale { spec, lambda }, &[spec, lambda]))
    }

    /// `sweeps` weighted block Jacobi sweeps on `A x = f` starting at `u`.
    pub fn jacobi_smooth(&mut self, u: Var, f: Var, ctx: Rc<SmoothContext>, sweeps: usize) -> Result<Var> {
        let cfg = JacobiConfig { omega: ctx.omega, sweeps };
        let out = smooth(&ctx.a, &ctx.d_inv, self.value(f), self.value(u), &cfg).map_err(|e| shape_err("jacobi_smooth", e.to_string()))?;
        let n = out.len();
        Ok(self.push(out, n, 1, Op::JacobiSmooth { u, f, ctx, sweeps }, &[u, f]))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Autodiff("backward requires a scalar output".into()));
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); loss.0 + 1];
        grads[loss.0] = vec![1.0];
        for i in (0..=loss.0).rev() {
            if grads[i].is_empty() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            self.propagate(i, &g, &mut grads);
            grads[i] = g;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, self.nodes[$v.0].value.len(), $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = node.cols;
                let (av, bv) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let ga = acc!(*a);
                    for r in 0..m {
                        for p in 0..k {
                            let row = &bv[p * n..(p + 1) * n];
                            ga[r * k + p] += g[r * n..(r + 1) * n].iter().zip(row).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if needs(*b) {
                    let gb = acc!(*b);
                    for r in 0..m {
                        for p in 0..k {
                            let x = av[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, y) in gb[p * n..(p + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *o += x * y;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, s) in [(*a, 1.0), (*b, 1.0)] {
                    if needs(v) {
                        acc!(v).iter_mut().zip(g).for_each(|(o, x)| *o += s * x);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, s) in [(*a, 1.0), (*b, -1.0)] {
                    if needs(v) {
                        acc!(v).iter_mut().zip(g).for_each(|(o, x)| *o += s * x);
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = self.value(*b);
                    acc!(*a).iter_mut().zip(g.iter().zip(bv)).for_each(|(o, (x, y))| *o += x * y);
                }
                if needs(*b) {
                    let av = self.value(*a);
                    acc!(*b).iter_mut().zip(g.iter().zip(av)).for_each(|(o, (x, y))| *o += x * y);
                }
            }
            Op::AddRow(a, bias) => {
                if needs(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                if needs(*bias) {
                    let c = node.cols;
                    let gb = acc!(*bias);
                    g.iter().enumerate().for_each(|(k, x)| gb[k % c] += x);
                }
            }
            Op::Scale(a, s) => {
                acc!(*a).iter_mut().zip(g).for_each(|(o, x)| *o += s * x);
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                acc!(*a).iter_mut().zip(g.iter().zip(av)).for_each(|(o, (x, y))| {
                    if *y > 0.0 {
                        *o += x
                    }
                });
            }
            Op::Softplus(a) => {
                let av = self.value(*a);
                acc!(*a).iter_mut().zip(g.iter().zip(av)).for_each(|(o, (x, y))| *o += x / (1.0 + (-y).exp()));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                let ga = acc!(*a);
                for k in 0..r * c {
                    ga[k] += g[k % c] / r as f64;
                }
            }
            Op::BroadcastRows(a) => {
                let c = node.cols;
                let ga = acc!(*a);
                g.iter().enumerate().for_each(|(k, x)| ga[k % c] += x);
            }
            Op::Gather(a, idx) => {
                let ga = acc!(*a);
                idx.iter().zip(g).for_each(|(&j, x)| ga[j] += x);
            }
            Op::Reshape(a) => {
                acc!(*a).iter_mut().zip(g).for_each(|(o, x)| *o += x);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if needs(p) {
                        acc!(p).iter_mut().zip(&g[off..off + len]).for_each(|(o, x)| *o += x);
                    }
                    off += len;
                }
            }
            Op::Slice(a, start) => {
                acc!(*a)[*start..*start + g.len()].iter_mut().zip(g).for_each(|(o, x)| *o += x);
            }
            Op::SparseMul(s, a) => {
                let back = s.matmul_transpose(g, node.cols);
                acc!(*a).iter_mut().zip(back).for_each(|(o, x)| *o += x);
            }
            Op::BlockSpmv(m, a) => {
                let back = spmv_transpose(m, g).expect("shape checked on record");
                acc!(*a).iter_mut().zip(back).for_each(|(o, x)| *o += x);
            }
            Op::Sum(a) => {
                acc!(*a).iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Norm2(a) => {
                let y = node.value[0];
                if y > 0.0 {
                    let av = self.value(*a);
                    acc!(*a).iter_mut().zip(av).for_each(|(o, x)| *o += g[0] * x / y);
                }
            }
            Op::Div(a, b) => {
                let (x, y) = (self.scalar(*a), self.scalar(*b));
                if needs(*a) {
                    acc!(*a)[0] += g[0] / y;
                }
                if needs(*b) {
                    acc!(*b)[0] -= g[0] * x / (y * y);
                }
            }
            Op::NormalizeCoords { xi, dim, coef, lo, hi } => {
                let v = self.value(*xi);
                let n = v.len() / dim;
                let gx = acc!(*xi);
                for a in 0..*dim {
                    if coef[a] == 0.0 {
                        continue;
                    }
                    let (vlo, vhi) = (v[lo[a] * dim + a], v[hi[a] * dim + a]);
                    let w = vhi - vlo;
                    let c = coef[a];
                    for l in 0..n {
                        let gl = g[l * dim + a];
                        let x = v[l * dim + a];
                        gx[l * dim + a] += gl * c / w;
                        gx[lo[a] * dim + a] += gl * c * (x - vhi) / (w * w);
                        gx[hi[a] * dim + a] -= gl * c * (x - vlo) / (w * w);
                    }
                }
            }
            Op::PhaseExp { angles, lattice } => {
                let (n, d) = self.shape(*angles);
                let p = lattice.len();
                let t = &node.value;
                let ga = acc!(*angles);
                for k in 0..p {
                    let kv = lattice.freq(k);
                    for l in 0..n {
                        let (c, s) = (t[k * n + l], t[p * n + k * n + l]);
                        let dphase = -s * g[k * n + l] + c * g[p * n + k * n + l];
                        for a in 0..d {
                            ga[l * d + a] += kv[a] as f64 * dphase;
                        }
                    }
                }
            }
            Op::NudftForward { r, table, d } => {
                let (two_p, n) = self.shape(*table);
                let p = two_p / 2;
                let (rv, tv) = (self.value(*r), self.value(*table));
                if needs(*r) {
                    let gr = acc!(*r);
                    for k in 0..p {
                        for c in 0..*d {
                            let (gre, gim) = (g[2 * (k * d + c)], g[2 * (k * d + c) + 1]);
                            for l in 0..n {
                                gr[l * d + c] += tv[k * n + l] * gre + tv[p * n + k * n + l] * gim;
                            }
                        }
                    }
                }
                if needs(*table) {
                    let gt = acc!(*table);
                    for k in 0..p {
                        for l in 0..n {
                            let (mut gc, mut gs) = (0.0, 0.0);
                            for c in 0..*d {
                                gc += rv[l * d + c] * g[2 * (k * d + c)];
                                gs += rv[l * d + c] * g[2 * (k * d + c) + 1];
                            }
                            gt[k * n + l] += gc;
                            gt[p * n + k * n + l] += gs;
                        }
                    }
                }
            }
            Op::NudftInverse { spec, table, d } => {
                let (two_p, n) = self.shape(*table);
                let p = two_p / 2;
                let inv = 1.0 / p as f64;
                let (sv, tv) = (self.value(*spec), self.value(*table));
                if needs(*spec) {
                    let gs = acc!(*spec);
                    for k in 0..p {
                        for c in 0..*d {
                            let (mut re, mut im) = (0.0, 0.0);
                            for l in 0..n {
                                re += tv[k * n + l] * g[l * d + c];
                                im += tv[p * n + k * n + l] * g[l * d + c];
                            }
                            gs[2 * (k * d + c)] += inv * re;
                            gs[2 * (k * d + c) + 1] += inv * im;
                        }
                    }
                }
                if needs(*table) {
                    let gt = acc!(*table);
                    for k in 0..p {
                        for l in 0..n {
                            let (mut gc, mut gsn) = (0.0, 0.0);
                            for c in 0..*d {
                                gc += sv[2 * (k * d + c)] * g[l * d + c];
                                gsn += sv[2 * (k * d + c) + 1] * g[l * d + c];
                            }
                            gt[k * n + l] += inv * gc;
                            gt[p * n + k * n + l] += inv * gsn;
                        }
                    }
                }
            }
            Op::LatticeConv { spec, kernel, lattice, d, adjoint } => {
                let ks = stencil_size(lattice.dim());
                let (sv, kv) = (self.value(*spec), self.value(*kernel));
                let sign = if *adjoint { 1 } else { -1 };
                let (need_s, need_k) = (needs(*spec), needs(*kernel));
                let mut gs = if need_s { vec![0.0; sv.len()] } else { Vec::new() };
                let mut gk = if need_k { vec![0.0; kv.len()] } else { Vec::new() };
                for k in 0..lattice.len() {
                    for o in 0..ks {
                        if let Some(src) = lattice.shifted(k, o, sign) {
                            for c in 0..*d {
                                let gy = cplx(g, k * d + c);
                                let w = cplx(kv, c * ks + o);
                                let x = cplx(sv, src * d + c);
                                if *adjoint {
                                    if need_s {
                                        add_cplx(&mut gs, src * d + c, w * gy);
                                    }
                                    if need_k {
                                        add_cplx(&mut gk, c * ks + o, x * gy.conj());
                                    }
                                } else {
                                    if need_s {
                                        add_cplx(&mut gs, src * d + c, w.conj() * gy);
                                    }
                                    if need_k {
                                        add_cplx(&mut gk, c * ks + o, x.conj() * gy);
                                    }
                                }
                            }
                        }
                    }
                }
                if need_s {
                    acc!(*spec).iter_mut().zip(gs).for_each(|(o, x)| *o += x);
                }
                if need_k {
                    acc!(*kernel).iter_mut().zip(gk).for_each(|(o, x)| *o += x);
                }
            }
            Op::SpectrumScale { spec, lambda } => {
                let (sv, lv) = (self.value(*spec), self.value(*lambda));
                if needs(*spec) {
                    acc!(*spec).iter_mut().enumerate().for_each(|(k, o)| *o += lv[k / 2] * g[k]);
                }
                if needs(*lambda) {
                    let gl = acc!(*lambda);
                    for j in 0..lv.len() {
                        gl[j] += sv[2 * j] * g[2 * j] + sv[2 * j + 1] * g[2 * j + 1];
                    }
                }
            }
            Op::JacobiSmooth { u, f, ctx, sweeps } => {
                // u_{t+1} = u_t + ω D⁻¹ (f − A u_t), so g_t = g_{t+1} − Aᵀ h and g_f += h with h = ω D⁻ᵀ g_{t+1}
                let bd = ctx.d_inv.block_dim();
                let mut gt = g.to_vec();
                let mut gf = vec![0.0; g.len()];
                for _ in 0..*sweeps {
                    let mut h = vec![0.0; g.len()];
                    for node_i in 0..ctx.d_inv.num_nodes() {
                        let b = ctx.d_inv.block(node_i);
                        for c in 0..bd {
                            let mut s = 0.0;
                            for r in 0..bd {
                                s += b[r * bd + c] * gt[node_i * bd + r];
                            }
                            h[node_i * bd + c] = ctx.omega * s;
                        }
                    }
                    let ath = spmv_transpose(&ctx.a, &h).expect("shape checked on record");
                    for k in 0..gt.len() {
                        gt[k] -= ath[k];
                        gf[k] += h[k];
                    }
                }
                if needs(*u) {
                    acc!(*u).iter_mut().zip(gt).for_each(|(o, x)| *o += x);
                }
                if needs(*f) {
                    acc!(*f).iter_mut().zip(gf).for_each(|(o, x)| *o += x);
                }
            }
        }
    }
}

fn slot(grads: &mut [Vec<f64>], len: usize, v: Var) -> &mut [f64] {
    if grads[v.0].is_empty() {
        grads[v.0] = vec![0.0; len];
    }
    &mut grads[v.0]
}

/// Result of a reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).filter(|g| !g.is_empty()).map(|g| g.as_slice())
    }

    /// Gradient with respect to `v`, zero-filled when `v` does not influence the output.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Vec<f64> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; graph.value(v).len()])
    }
}
