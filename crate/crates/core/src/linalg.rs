//! Block-sparse matrices and vectors with `d×d` blocks in node-major order,
//! the graph encoding of a block system and message-passing SpMV.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Node-major block vector: the `d` components of node `i` are adjacent.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockVector<T> {
    d: usize,
    values: Vec<T>,
}

impl<T: Real> BlockVector<T> {
    pub fn new(d: usize, values: Vec<T>) -> Result<Self> {
        if d == 0 || values.len() % d != 0 {
            return Err(Error::DimensionMismatch(format!("length {} is not a multiple of block size {d}", values.len())));
        }
        Ok(Self { d, values })
    }

    pub fn zeros(d: usize, n: usize) -> Self {
        Self { d, values: vec![T::zero(); d * n] }
    }

    pub fn block_dim(&self) -> usize {
        self.d
    }

    pub fn num_nodes(&self) -> usize {
        self.values.len() / self.d
    }

    pub fn node(&self, i: usize) -> &[T] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn node_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    pub fn l2(&self) -> T {
        l2(&self.values)
    }

    /// One node per line, `d` values each.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for i in 0..self.num_nodes() {
            let row: Vec<String> = self.node(i).iter().map(|x| format!("{x}")).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }
}

/// Block compressed sparse row matrix with dense row-major `d×d` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCsrMatrix<T> {
    d: usize,
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    blocks: Vec<T>,
}

impl<T: Real> BlockCsrMatrix<T> {
    /// Builds a matrix from raw CSR arrays, checking structure, sorted
    /// columns and presence of every diagonal block.
    pub fn from_raw(d: usize, n: usize, row_ptr: Vec<usize>, col_idx: Vec<usize>, blocks: Vec<T>) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("block dimension must be positive".into()));
        }
        if row_ptr.len() != n + 1 || row_ptr[0] != 0 || *row_ptr.last().unwrap() != col_idx.len() {
            return Err(Error::InvalidArgument("invalid row pointer array".into()));
        }
        if blocks.len() != col_idx.len() * d * d {
            return Err(Error::DimensionMismatch(format!("{} block values for {} blocks of size {d}", blocks.len(), col_idx.len())));
        }
        for i in 0..n {
            if row_ptr[i] > row_ptr[i + 1] {
                return Err(Error::InvalidArgument(format!("row pointer decreases at row {i}")));
            }
            let cols = &col_idx[row_ptr[i]..row_ptr[i + 1]];
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(format!("columns of row {i} are not strictly increasing")));
            }
            if cols.iter().any(|&c| c >= n) {
                return Err(Error::InvalidArgument(format!("column index out of range in row {i}")));
            }
            if cols.binary_search(&i).is_err() {
                return Err(Error::InvalidArgument(format!("missing diagonal block in row {i}")));
            }
        }
        Ok(Self { d, n, row_ptr, col_idx, blocks })
    }

    /// Zero matrix with the given sparsity (neighbour lists; the diagonal is always added).
    pub fn from_pattern(d: usize, neighbours: &[Vec<usize>]) -> Result<Self> {
        let n = neighbours.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for (i, nb) in neighbours.iter().enumerate() {
            let mut cols: Vec<usize> = nb.iter().copied().chain(std::iter::once(i)).collect();
            cols.sort_unstable();
            cols.dedup();
            col_idx.extend(cols);
            row_ptr.push(col_idx.len());
        }
        let blocks = vec![T::zero(); col_idx.len() * d * d];
        Self::from_raw(d, n, row_ptr, col_idx, blocks)
    }

    /// Block-diagonal matrix from `n` dense blocks.
    pub fn block_diagonal(d: usize, blocks: Vec<T>) -> Result<Self> {
        let n = blocks.len() / (d * d);
        Self::from_raw(d, n, (0..=n).collect(), (0..n).collect(), blocks)
    }

    pub fn from_dense(d: usize, dense: &DenseMatrix<T>) -> Result<Self> {
        if dense.rows != dense.cols || dense.rows % d != 0 {
            return Err(Error::DimensionMismatch("dense matrix not square or not divisible by block size".into()));
        }
        let n = dense.rows / d;
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut blocks = Vec::new();
        for bi in 0..n {
            for bj in 0..n {
                let nonzero = (0..d).any(|a| (0..d).any(|b| dense.get(bi * d + a, bj * d + b) != T::zero()));
                if nonzero || bi == bj {
                    col_idx.push(bj);
                    for a in 0..d {
                        for b in 0..d {
                            blocks.push(dense.get(bi * d + a, bj * d + b));
                        }
                    }
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self::from_raw(d, n, row_ptr, col_idx, blocks)
    }

    pub fn block_dim(&self) -> usize {
        self.d
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn num_dofs(&self) -> usize {
        self.n * self.d
    }

    pub fn num_blocks(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn blocks(&self) -> &[T] {
        &self.blocks
    }

    /// Position of block `(i, j)` in the block arrays.
    pub fn find(&self, i: usize, j: usize) -> Option<usize> {
        let cols = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        cols.binary_search(&j).ok().map(|k| self.row_ptr[i] + k)
    }

    pub fn block(&self, k: usize) -> &[T] {
        let s = self.d * self.d;
        &self.blocks[k * s..(k + 1) * s]
    }

    pub fn block_mut(&mut self, k: usize) -> &mut [T] {
        let s = self.d * self.d;
        &mut self.blocks[k * s..(k + 1) * s]
    }

    pub fn get_block(&self, i: usize, j: usize) -> Option<&[T]> {
        self.find(i, j).map(|k| self.block(k))
    }

    /// Adds a dense row-major block into position `(i, j)`, which must be in the pattern.
    pub fn add_block(&mut self, i: usize, j: usize, values: &[T]) -> Result<()> {
        let k = self.find(i, j).ok_or_else(|| Error::InvalidArgument(format!("block ({i}, {j}) not in sparsity pattern")))?;
        for (dst, &v) in self.block_mut(k).iter_mut().zip(values) {
            *dst += v;
        }
        Ok(())
    }

    /// Scalar entry `(r, c)` in DOF numbering.
    pub fn entry(&self, r: usize, c: usize) -> T {
        let d = self.d;
        self.get_block(r / d, c / d).map_or(T::zero(), |b| b[(r % d) * d + c % d])
    }

    pub fn scale(&mut self, s: T) {
        self.blocks.iter_mut().for_each(|x| *x *= s);
    }

    pub fn frobenius(&self) -> T {
        l2(&self.blocks)
    }

    /// Exact structural and numerical symmetry check with absolute tolerance.
    pub fn is_symmetric(&self, tol: T) -> bool {
        let d = self.d;
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                let Some(t) = self.get_block(j, i) else { return false };
                let b = self.block(k);
                for a in 0..d {
                    for c in 0..d {
                        if (b[a * d + c] - t[c * d + a]).abs() > tol {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }

    pub fn to_dense(&self) -> DenseMatrix<T> {
        let m = self.num_dofs();
        let d = self.d;
        let mut out = DenseMatrix::zeros(m, m);
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                let b = self.block(k);
                for a in 0..d {
                    for c in 0..d {
                        out.set(i * d + a, j * d + c, b[a * d + c]);
                    }
                }
            }
        }
        out
    }

    /// Block coordinate text: `i j d b00 b01 ...` per stored block.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let vals: Vec<String> = self.block(k).iter().map(|x| format!("{x}")).collect();
                s.push_str(&format!("{} {} {} {}\n", i, self.col_idx[k], self.d, vals.join(" ")));
            }
        }
        s
    }

    /// Parses the block coordinate text format for a matrix with `n` block rows.
    pub fn from_text(text: &str, n: usize) -> Result<Self> {
        let mut entries: Vec<(usize, usize, Vec<T>)> = Vec::new();
        let mut d = 0;
        for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let toks: Vec<&str> = line.split_whitespace().collect();
            let bad = |msg: String| Error::Parse { line: ln + 1, msg };
            if toks.len() < 3 {
                return Err(bad("expected `i j d values...`".into()));
            }
            let i: usize = toks[0].parse().map_err(|e| bad(format!("{e}")))?;
            let j: usize = toks[1].parse().map_err(|e| bad(format!("{e}")))?;
            let bd: usize = toks[2].parse().map_err(|e| bad(format!("{e}")))?;
            if d == 0 {
                d = bd;
            }
            if bd != d || toks.len() != 3 + d * d {
                return Err(bad(format!("block size mismatch (expected {d})")));
            }
            if i >= n || j >= n {
                return Err(bad(format!("block ({i}, {j}) out of range")));
            }
            let vals = toks[3..]
                .iter()
                .map(|t| t.parse::<f64>().map(T::lit))
                .collect::<std::result::Result<Vec<T>, _>>()
                .map_err(|e| bad(format!("{e}")))?;
            entries.push((i, j, vals));
        }
        entries.sort_by_key(|e| (e.0, e.1));
        let mut row_ptr = vec![0; n + 1];
        for e in &entries {
            row_ptr[e.0 + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let col_idx = entries.iter().map(|e| e.1).collect();
        let blocks = entries.into_iter().flat_map(|e| e.2).collect();
        Self::from_raw(d.max(1), n, row_ptr, col_idx, blocks)
    }
}

/// Direct block SpMV `w = A v`.
pub fn spmv_direct<T: Real>(a: &BlockCsrMatrix<T>, v: &[T]) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); a.num_dofs()];
    spmv_into(a, v, &mut out)?;
    Ok(out)
}

pub fn spmv_into<T: Real>(a: &BlockCsrMatrix<T>, v: &[T], out: &mut [T]) -> Result<()> {
    let d = a.d;
    if v.len() != a.num_dofs() || out.len() != a.num_dofs() {
        return Err(Error::DimensionMismatch(format!("matrix has {} DOFs, vector {}", a.num_dofs(), v.len())));
    }
    for i in 0..a.n {
        let w = &mut out[i * d..(i + 1) * d];
        w.iter_mut().for_each(|x| *x = T::zero());
        for k in a.row_ptr[i]..a.row_ptr[i + 1] {
            let j = a.col_idx[k];
            let b = &a.blocks[k * d * d..(k + 1) * d * d];
            let vj = &v[j * d..(j + 1) * d];
            for r in 0..d {
                let mut acc = T::zero();
                for c in 0..d {
                    acc += b[r * d + c] * vj[c];
                }
                w[r] += acc;
            }
        }
    }
    Ok(())
}

/// Transposed product `Aᵀ v`.
pub fn spmv_transpose<T: Real>(a: &BlockCsrMatrix<T>, v: &[T]) -> Result<Vec<T>> {
    let d = a.d;
    if v.len() != a.num_dofs() {
        return Err(Error::DimensionMismatch(format!("matrix has {} DOFs, vector {}", a.num_dofs(), v.len())));
    }
    let mut out = vec![T::zero(); a.num_dofs()];
    for i in 0..a.n {
        let vi = &v[i * d..(i + 1) * d];
        for k in a.row_ptr[i]..a.row_ptr[i + 1] {
            let j = a.col_idx[k];
            let b = &a.blocks[k * d * d..(k + 1) * d * d];
            for r in 0..d {
                for c in 0..d {
                    out[j * d + c] += b[r * d + c] * vi[r];
                }
            }
        }
    }
    Ok(out)
}

/// Residual `f − A u`.
pub fn residual<T: Real>(a: &BlockCsrMatrix<T>, u: &[T], f: &[T]) -> Result<Vec<T>> {
    if f.len() != a.num_dofs() {
        return Err(Error::DimensionMismatch("right-hand side length".into()));
    }
    let mut r = spmv_direct(a, u)?;
    for (ri, &fi) in r.iter_mut().zip(f) {
        *ri = fi - *ri;
    }
    Ok(r)
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn l2<T: Real>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// Energy norm `√(vᵀAv)`; fails when the quadratic form is clearly negative.
pub fn energy<T: Real>(a: &BlockCsrMatrix<T>, v: &[T]) -> Result<T> {
    let q = dot(v, &spmv_direct(a, v)?);
    let vv = dot(v, v);
    if q < -T::lit(1e-10) * vv {
        return Err(Error::NotPositiveDefinite(format!("vᵀAv = {q} for ‖v‖² = {vv}")));
    }
    Ok(q.max(T::zero()).sqrt())
}

/// Inverses of the diagonal blocks, used by block Jacobi.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiagInverse<T> {
    d: usize,
    blocks: Vec<T>,
}

impl<T: Real> BlockDiagInverse<T> {
    pub fn block_dim(&self) -> usize {
        self.d
    }

    pub fn num_nodes(&self) -> usize {
        self.blocks.len() / (self.d * self.d)
    }

    pub fn block(&self, i: usize) -> &[T] {
        let s = self.d * self.d;
        &self.blocks[i * s..(i + 1) * s]
    }

    pub fn blocks(&self) -> &[T] {
        &self.blocks
    }

    /// `D⁻¹ r`.
    pub fn apply(&self, r: &[T]) -> Vec<T> {
        let d = self.d;
        let mut out = vec![T::zero(); r.len()];
        for i in 0..self.num_nodes() {
            let b = self.block(i);
            for a in 0..d {
                out[i * d + a] = (0..d).map(|c| b[a * d + c] * r[i * d + c]).sum();
            }
        }
        out
    }

    pub fn as_matrix(&self) -> BlockCsrMatrix<T> {
        BlockCsrMatrix::block_diagonal(self.d, self.blocks.clone()).expect("valid block diagonal")
    }
}

/// Inverts every diagonal block; a block whose 1-norm condition estimate
/// exceeds 1e14 is reported as singular.
pub fn block_diag_inverse<T: Real>(a: &BlockCsrMatrix<T>) -> Result<BlockDiagInverse<T>> {
    let d = a.d;
    let mut blocks = Vec::with_capacity(a.n * d * d);
    for i in 0..a.n {
        let b = a.get_block(i, i).expect("diagonal present by construction");
        let inv = invert_small(b, d).ok_or(Error::SingularBlock { node: i, condition: f64::INFINITY })?;
        let cond = norm1(b, d) * norm1(&inv, d);
        if !(cond.to_f64_lossy() <= 1e14) {
            return Err(Error::SingularBlock { node: i, condition: cond.to_f64_lossy() });
        }
        blocks.extend(inv);
    }
    Ok(BlockDiagInverse { d, blocks })
}

fn norm1<T: Real>(b: &[T], d: usize) -> T {
    (0..d).map(|c| (0..d).map(|r| b[r * d + c].abs()).sum::<T>()).fold(T::zero(), T::max)
}

/// Gauss–Jordan inverse of a small dense row-major matrix with partial pivoting.
pub fn invert_small<T: Real>(b: &[T], d: usize) -> Option<Vec<T>> {
    let mut m = b.to_vec();
    let mut inv = vec![T::zero(); d * d];
    for i in 0..d {
        inv[i * d + i] = T::one();
    }
    for col in 0..d {
        let piv = (col..d).max_by(|&x, &y| m[x * d + col].abs().partial_cmp(&m[y * d + col].abs()).unwrap())?;
        if m[piv * d + col] == T::zero() || !m[piv * d + col].is_finite() {
            return None;
        }
        for k in 0..d {
            m.swap(col * d + k, piv * d + k);
            inv.swap(col * d + k, piv * d + k);
        }
        let p = m[col * d + col];
        for k in 0..d {
            m[col * d + k] /= p;
            inv[col * d + k] /= p;
        }
        for r in 0..d {
            if r != col {
                let f = m[r * d + col];
                if f != T::zero() {
                    for k in 0..d {
                        let (mv, iv) = (m[col * d + k], inv[col * d + k]);
                        m[r * d + k] -= f * mv;
                        inv[r * d + k] -= f * iv;
                    }
                }
            }
        }
    }
    Some(inv)
}

/// Graph encoding of a block system: node features are right-hand side
/// blocks, edge features are row-major flattened matrix blocks. Edges are
/// `(target i, source j)` pairs mirroring the block sparsity, self-loops included.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSystem<T> {
    pub d: usize,
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub node_features: Vec<T>,
    pub edge_features: Vec<T>,
}

pub fn to_graph<T: Real>(a: &BlockCsrMatrix<T>, f: &BlockVector<T>) -> Result<GraphSystem<T>> {
    if f.block_dim() != a.d || f.num_nodes() != a.n {
        return Err(Error::DimensionMismatch("right-hand side does not match matrix".into()));
    }
    let mut edges = Vec::with_capacity(a.num_blocks());
    for i in 0..a.n {
        for k in a.row_ptr[i]..a.row_ptr[i + 1] {
            edges.push((i, a.col_idx[k]));
        }
    }
    Ok(GraphSystem { d: a.d, num_nodes: a.n, edges, node_features: f.as_slice().to_vec(), edge_features: a.blocks.clone() })
}

pub fn from_graph<T: Real>(g: &GraphSystem<T>) -> Result<(BlockCsrMatrix<T>, BlockVector<T>)> {
    let d = g.d;
    if g.edge_features.len() != g.edges.len() * d * d {
        return Err(Error::DimensionMismatch("edge feature count".into()));
    }
    let mut order: Vec<usize> = (0..g.edges.len()).collect();
    order.sort_by_key(|&e| g.edges[e]);
    let mut row_ptr = vec![0; g.num_nodes + 1];
    for &(i, _) in &g.edges {
        if i >= g.num_nodes {
            return Err(Error::InvalidArgument(format!("edge target {i} out of range")));
        }
        row_ptr[i + 1] += 1;
    }
    for i in 0..g.num_nodes {
        row_ptr[i + 1] += row_ptr[i];
    }
    let col_idx = order.iter().map(|&e| g.edges[e].1).collect();
    let blocks = order.iter().flat_map(|&e| g.edge_features[e * d * d..(e + 1) * d * d].iter().copied()).collect();
    let a = BlockCsrMatrix::from_raw(d, g.num_nodes, row_ptr, col_idx, blocks)?;
    let f = BlockVector::new(d, g.node_features.clone())?;
    if f.num_nodes() != g.num_nodes {
        return Err(Error::DimensionMismatch("node feature count".into()));
    }
    Ok((a, f))
}

/// `w = A v` by message passing: replicate the source feature `d` times,
/// multiply elementwise with the flattened edge block, sum messages at the
/// target and reduce each length-`d` segment.
pub fn spmv_message_passing<T: Real>(g: &GraphSystem<T>, v: &BlockVector<T>) -> Result<BlockVector<T>> {
    let d = g.d;
    if v.block_dim() != d || v.num_nodes() != g.num_nodes {
        return Err(Error::DimensionMismatch("vector does not match graph".into()));
    }
    let dd = d * d;
    let mut h = vec![T::zero(); g.num_nodes * dd];
    let mut expanded = vec![T::zero(); dd];
    for (e, &(i, j)) in g.edges.iter().enumerate() {
        let vj = v.node(j);
        for chunk in expanded.chunks_mut(d) {
            chunk.copy_from_slice(vj);
        }
        let ef = &g.edge_features[e * dd..(e + 1) * dd];
        let hi = &mut h[i * dd..(i + 1) * dd];
        for p in 0..dd {
            hi[p] += ef[p] * expanded[p];
        }
    }
    let mut w = vec![T::zero(); g.num_nodes * d];
    for i in 0..g.num_nodes {
        for k in 0..d {
            w[i * d + k] = h[i * dd + k * d..i * dd + (k + 1) * d].iter().copied().sum();
        }
    }
    BlockVector::new(d, w)
}

/// Dense row-major matrix for reference solves at desk scale.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, T::one());
        }
        m
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        (0..self.rows).map(|r| dot(&self.data[r * self.cols..(r + 1) * self.cols], v)).collect()
    }

    /// LU factorization with partial pivoting.
    pub fn lu(&self) -> Result<LuFactors<T>> {
        if self.rows != self.cols {
            return Err(Error::DimensionMismatch("LU needs a square matrix".into()));
        }
        let n = self.rows;
        let mut a = self.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let p = (k..n).max_by(|&x, &y| a[x * n + k].abs().partial_cmp(&a[y * n + k].abs()).unwrap()).unwrap();
            if a[p * n + k] == T::zero() {
                return Err(Error::NotPositiveDefinite(format!("singular matrix at pivot {k}")));
            }
            if p != k {
                for c in 0..n {
                    a.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
            }
            let pivot = a[k * n + k];
            for r in k + 1..n {
                let f = a[r * n + k] / pivot;
                a[r * n + k] = f;
                if f != T::zero() {
                    for c in k + 1..n {
                        let akc = a[k * n + c];
                        a[r * n + c] -= f * akc;
                    }
                }
            }
        }
        Ok(LuFactors { n, lu: a, perm })
    }

    /// Cholesky factor `L` (lower, row-major); fails if the matrix is not SPD.
    pub fn cholesky(&self) -> Result<Vec<T>> {
        let n = self.rows;
        let mut l = vec![T::zero(); n * n];
        for j in 0..n {
            let mut s = self.get(j, j);
            for k in 0..j {
                s -= l[j * n + k] * l[j * n + k];
            }
            if !(s > T::zero()) {
                return Err(Error::NotPositiveDefinite(format!("non-positive pivot {s} at column {j}")));
            }
            let ljj = s.sqrt();
            l[j * n + j] = ljj;
            for i in j + 1..n {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / ljj;
            }
        }
        Ok(l)
    }
}

#[derive(Debug, Clone)]
pub struct LuFactors<T> {
    n: usize,
    lu: Vec<T>,
    perm: Vec<usize>,
}

impl<T: Real> LuFactors<T> {
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.n;
        let mut x: Vec<T> = self.perm.iter().map(|&p| b[p]).collect();
        for r in 0..n {
            for c in 0..r {
                let v = x[c];
                x[r] -= self.lu[r * n + c] * v;
            }
        }
        for r in (0..n).rev() {
            for c in r + 1..n {
                let v = x[c];
                x[r] -= self.lu[r * n + c] * v;
            }
            x[r] /= self.lu[r * n + r];
        }
        x
    }
}

/// Solves `L Lᵀ x = b` with a row-major Cholesky factor.
pub fn cholesky_solve<T: Real>(l: &[T], b: &[T]) -> Vec<T> {
    let n = b.len();
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            let v = y[k];
            y[i] -= l[i * n + k] * v;
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            let v = y[k];
            y[i] -= l[k * n + i] * v;
        }
        y[i] /= l[i * n + i];
    }
    y
}

/// Dense direct solve of a block system (desk-scale reference solutions).
pub fn direct_solve<T: Real>(a: &BlockCsrMatrix<T>, f: &[T]) -> Result<Vec<T>> {
    Ok(a.to_dense().lu()?.solve(f))
}
