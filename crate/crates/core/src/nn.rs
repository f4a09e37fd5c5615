//! Network layers, the meta networks producing spectral weights, the
//! learnable coordinate map, the Adam optimizer and checkpoints.

use std::path::Path;
use std::rc::Rc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CsrMatrix, Graph, SmoothContext, Var};
use crate::error::{Error, Result};
use crate::fem::AssembledSystem;
use crate::linalg::{block_diag_inverse, BlockCsrMatrix};
use crate::mesh::MeshTopology;
use crate::smoother::JacobiConfig;
use crate::spectral::{default_gaps, stencil_center, stencil_size, FrequencyLattice, PhaseTable, SpectralLevel};

/// Named dense parameter array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// Ordered collection of parameters; indices are stable handles.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: String, rows: usize, cols: usize, values: Vec<f64>) -> usize {
        debug_assert_eq!(values.len(), rows * cols);
        self.params.push(Param { name, rows, cols, values });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Records every parameter on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.params.iter().map(|p| g.param(p.values.clone(), p.rows, p.cols)).collect()
    }
}

fn uniform_init(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Fully connected layer `x W + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add(format!("{name}.weight"), fan_in, fan_out, uniform_init(rng, fan_in, fan_in * fan_out));
        let b = store.add(format!("{name}.bias"), 1, fan_out, uniform_init(rng, fan_in, fan_out));
        Self { w, b }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.weight"), fan_in, fan_out, vec![0.0; fan_in * fan_out]);
        let b = store.add(format!("{name}.bias"), 1, fan_out, vec![0.0; fan_out]);
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, vars[self.w])?;
        g.add_row(y, vars[self.b])
    }
}

/// Graph convolution `D̂^{-1/2} Â D̂^{-1/2} X W` with `Â = A + I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GcnLayer {
    pub w: usize,
}

impl GcnLayer {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { w: store.add(format!("{name}.weight"), fan_in, fan_out, uniform_init(rng, fan_in, fan_in * fan_out)) }
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var, adj: &Rc<CsrMatrix>) -> Result<Var> {
        let xw = g.matmul(x, vars[self.w])?;
        g.sparse_matmul(adj.clone(), xw)
    }
}

/// Symmetrically normalized adjacency with self loops.
pub fn normalized_adjacency(neighbours: &[Vec<usize>]) -> Result<CsrMatrix> {
    let n = neighbours.len();
    let degree: Vec<f64> = neighbours.iter().enumerate().map(|(i, nb)| (nb.iter().filter(|&&j| j != i).count() + 1) as f64).collect();
    let mut row_ptr = vec![0];
    let mut col_idx = Vec::new();
    let mut vals = Vec::new();
    for (i, nb) in neighbours.iter().enumerate() {
        let mut cols: Vec<usize> = nb.iter().copied().filter(|&j| j != i).collect();
        if cols.iter().any(|&j| j >= n) {
            return Err(Error::DimensionMismatch(format!("neighbour index out of range in row {i}")));
        }
        cols.push(i);
        cols.sort_unstable();
        cols.dedup();
        for j in cols {
            col_idx.push(j);
            vals.push(1.0 / (degree[i] * degree[j]).sqrt());
        }
        row_ptr.push(col_idx.len());
    }
    Ok(CsrMatrix { rows: n, cols: n, row_ptr, col_idx, vals })
}

/// Widths of a meta network: hidden widths are `l·d1` for `l = 2, 3, 4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaNetConfig {
    pub in_dim: usize,
    pub d1: usize,
    pub d5: usize,
}

/// Left MLP, three (GCN + linear) blocks, mean pooling and a right MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaNet {
    pub config: MetaNetConfig,
    left: Linear,
    blocks: Vec<(GcnLayer, Linear)>,
    right: (Linear, Linear),
}

impl MetaNet {
    pub fn new(store: &mut ParamStore, name: &str, config: MetaNetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.d1 == 0 || config.in_dim == 0 || config.d5 == 0 {
            return Err(Error::InvalidArgument("meta network widths must be positive".into()));
        }
        let d1 = config.d1;
        let left = Linear::new(store, &format!("{name}.left"), config.in_dim, d1, rng);
        let mut blocks = Vec::new();
        let mut width = d1;
        for l in 2..=4 {
            let out = l * d1;
            let gcn = GcnLayer::new(store, &format!("{name}.block{l}.gcn"), width, out, rng);
            let lin = Linear::new(store, &format!("{name}.block{l}.linear"), width, out, rng);
            blocks.push((gcn, lin));
            width = out;
        }
        let r1 = Linear::new(store, &format!("{name}.right1"), width, width, rng);
        let r2 = Linear::new(store, &format!("{name}.right2"), width, config.d5, rng);
        Ok(Self { config, left, blocks, right: (r1, r2) })
    }

    /// Maps node inputs (`N × in_dim`) to a `1 × d5` output.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var, adj: &Rc<CsrMatrix>) -> Result<Var> {
        let (n, c) = g.shape(x);
        if c != self.config.in_dim || n != adj.rows {
            return Err(Error::DimensionMismatch(format!("meta input {n}×{c}, adjacency over {} nodes", adj.rows)));
        }
        let h = self.left.forward(g, vars, x)?;
        let mut h = g.relu(h);
        for (gcn, lin) in &self.blocks {
            let a = gcn.forward(g, vars, h, adj)?;
            let b = lin.forward(g, vars, h)?;
            let s = g.add(a, b)?;
            h = g.relu(s);
        }
        let pooled = g.mean_rows(h);
        let r = self.right.0.forward(g, vars, pooled)?;
        let r = g.relu(r);
        self.right.1.forward(g, vars, r)
    }
}

/// `ξ = x + x ⊙ f_θ(x)` with `f_θ` a two-hidden-layer ReLU network whose
/// output layer starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateMap {
    layers: [Linear; 3],
}

impl CoordinateMap {
    pub fn new(store: &mut ParamStore, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let l1 = Linear::new(store, "coord.hidden1", dim, hidden, rng);
        let l2 = Linear::new(store, "coord.hidden2", hidden, hidden, rng);
        let l3 = Linear::zeros(store, "coord.out", hidden, dim);
        Self { layers: [l1, l2, l3] }
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let h = self.layers[0].forward(g, vars, x)?;
        let h = g.relu(h);
        let h = self.layers[1].forward(g, vars, h)?;
        let h = g.relu(h);
        let f = self.layers[2].forward(g, vars, h)?;
        let xf = g.hadamard(x, f)?;
        g.add(x, xf)
    }
}

/// Which hybrid method a model implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Fixed physical coordinates, one level.
    GFns,
    /// Learned coordinate map, one level.
    AgFns,
    /// Learned coordinate map, several levels with decreasing bandwidth.
    MlAgFns,
}

impl Variant {
    pub fn uses_coordinate_map(self) -> bool {
        !matches!(self, Variant::GFns)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "gfns" => Ok(Self::GFns),
            "agfns" => Ok(Self::AgFns),
            "mlagfns" => Ok(Self::MlAgFns),
            _ => Err(Error::InvalidArgument(format!("unknown variant `{s}` (expected gfns, agfns or mlagfns)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::GFns => "gfns",
            Self::AgFns => "agfns",
            Self::MlAgFns => "mlagfns",
        }
    }
}

/// Architecture and solver settings stored with every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub dim: usize,
    /// Lattice bandwidth per level, strictly decreasing.
    pub bandwidths: Vec<usize>,
    pub d1: usize,
    pub coord_hidden: usize,
    pub meta_in: usize,
    pub smoother: JacobiConfig,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(variant: Variant, dim: usize, bandwidths: Vec<usize>, meta_in: usize) -> Self {
        Self { variant, dim, bandwidths, d1: 16, coord_hidden: 64, meta_in, smoother: JacobiConfig::default_for_dim(dim), seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.dim) {
            return Err(Error::InvalidArgument(format!("dimension {} not supported", self.dim)));
        }
        if self.bandwidths.is_empty() {
            return Err(Error::InvalidArgument("at least one correction level is required".into()));
        }
        if self.bandwidths.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidArgument(format!("bandwidths {:?} must strictly decrease", self.bandwidths)));
        }
        if self.variant != Variant::MlAgFns && self.bandwidths.len() != 1 {
            return Err(Error::InvalidArgument(format!("{} uses exactly one level", self.variant.name())));
        }
        if self.d1 == 0 || self.coord_hidden == 0 || self.meta_in == 0 {
            return Err(Error::InvalidArgument("network widths must be positive".into()));
        }
        self.smoother.validate()
    }

    pub fn num_levels(&self) -> usize {
        self.bandwidths.len()
    }
}

/// Constant per-system data consumed by a model.
#[derive(Debug, Clone)]
pub struct SampleContext {
    pub dim: usize,
    pub num_nodes: usize,
    pub a: Rc<BlockCsrMatrix<f64>>,
    pub smooth: Rc<SmoothContext>,
    pub f: Vec<f64>,
    pub coords: Vec<f64>,
    pub features: Vec<f64>,
    pub adjacency: Rc<CsrMatrix>,
    pub gaps: Vec<f64>,
    /// Mean diagonal entry of `A` over unconstrained nodes.
    pub diag_scale: f64,
}

impl SampleContext {
    /// `features` is `N × meta_in`, node-major.
    pub fn new(mesh: &MeshTopology, system: &AssembledSystem<f64>, features: Vec<f64>, omega: f64) -> Result<Self> {
        let n = mesh.num_nodes();
        let d = mesh.dim();
        if system.matrix.num_nodes() != n || features.is_empty() || features.len() % n != 0 {
            return Err(Error::DimensionMismatch("system, mesh and features disagree on node count".into()));
        }
        let a = Rc::new(system.matrix.clone());
        let d_inv = Rc::new(block_diag_inverse(&a)?);
        let mut fixed = vec![false; n];
        system.dirichlet_nodes.iter().for_each(|&i| fixed[i] = true);
        let (mut sum, mut count) = (0.0, 0usize);
        for i in (0..n).filter(|&i| !fixed[i]) {
            let b = a.get_block(i, i).expect("diagonal block present");
            for c in 0..d {
                sum += b[c * d + c];
                count += 1;
            }
        }
        let diag_scale = if count > 0 { sum / count as f64 } else { 1.0 };
        Ok(Self {
            dim: d,
            num_nodes: n,
            smooth: Rc::new(SmoothContext { a: a.clone(), d_inv, omega }),
            a,
            f: system.rhs.as_slice().to_vec(),
            coords: mesh.coords().to_vec(),
            features,
            adjacency: Rc::new(normalized_adjacency(&mesh.adjacency())?),
            gaps: default_gaps(mesh),
            diag_scale,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.features.len() / self.num_nodes
    }
}

/// Spectral weights of one system recorded on a graph.
#[derive(Debug, Clone)]
pub struct LevelVars {
    pub xi: Var,
    pub angles: Var,
    pub tables: Vec<Var>,
    pub lambdas: Vec<Var>,
    pub kernels: Vec<Var>,
    pub lattices: Vec<Rc<FrequencyLattice>>,
}

/// Spectral weights of one system as plain arrays, ready for inference.
#[derive(Debug, Clone)]
pub struct ConcreteLevels {
    pub xi: Vec<f64>,
    pub angles: Vec<f64>,
    pub levels: Vec<SpectralLevel>,
    pub tables: Vec<PhaseTable>,
}

/// Weights of a G-FNS / AG-FNS / ML-AG-FNS model.
#[derive(Debug, Clone)]
pub struct FnsModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    meta_lambda: MetaNet,
    meta_t: MetaNet,
    coord: Option<CoordinateMap>,
    lattices: Vec<FrequencyLattice>,
}

impl FnsModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::default();
        let d = config.dim;
        let lattices: Vec<FrequencyLattice> = config.bandwidths.iter().map(|&m| FrequencyLattice::new(d, m)).collect::<Result<_>>()?;
        let lambda_out: usize = lattices.iter().map(|l| l.len() * d).sum();
        let kernel_out = config.num_levels() * 2 * d * stencil_size(d);
        let meta_lambda = MetaNet::new(&mut params, "meta_lambda", MetaNetConfig { in_dim: config.meta_in, d1: config.d1, d5: lambda_out }, &mut rng)?;
        let meta_t = MetaNet::new(&mut params, "meta_t", MetaNetConfig { in_dim: config.meta_in, d1: config.d1, d5: kernel_out }, &mut rng)?;
        let coord = config.variant.uses_coordinate_map().then(|| CoordinateMap::new(&mut params, d, config.coord_hidden, &mut rng));
        Ok(Self { config, params, meta_lambda, meta_t, coord, lattices })
    }

    pub fn lattices(&self) -> &[FrequencyLattice] {
        &self.lattices
    }

    /// Records the spectral weights for `ctx` on `g` given bound parameters.
    pub fn build_levels(&self, g: &mut Graph, vars: &[Var], ctx: &SampleContext) -> Result<LevelVars> {
        let d = self.config.dim;
        if ctx.dim != d || ctx.feature_dim() != self.config.meta_in {
            return Err(Error::DimensionMismatch(format!(
                "model expects dimension {d} with {} meta inputs, system has dimension {} with {}",
                self.config.meta_in,
                ctx.dim,
                ctx.feature_dim()
            )));
        }
        let n = ctx.num_nodes;
        let x = g.constant(ctx.coords.clone(), n, d)?;
        let xi = match &self.coord {
            Some(map) => map.forward(g, vars, x)?,
            None => x,
        };
        let angles = g.normalize_coords(xi, d, &ctx.gaps)?;
        let lattices: Vec<Rc<FrequencyLattice>> = self.lattices.iter().cloned().map(Rc::new).collect();
        let tables = lattices.iter().map(|l| g.phase_exp(angles, l.clone())).collect::<Result<Vec<_>>>()?;
        let feats = g.constant(ctx.features.clone(), n, self.config.meta_in)?;
        let lam_out = self.meta_lambda.forward(g, vars, feats, &ctx.adjacency)?;
        let t_out = self.meta_t.forward(g, vars, feats, &ctx.adjacency)?;
        let ks = stencil_size(d);
        let mut delta = vec![0.0; 2 * d * ks];
        for c in 0..d {
            delta[2 * (c * ks + stencil_center(d))] = 1.0;
        }
        let delta = g.constant(delta, d * ks, 2)?;
        let (mut lambdas, mut kernels) = (Vec::new(), Vec::new());
        let mut offset = 0;
        for (i, lat) in lattices.iter().enumerate() {
            let len = lat.len() * d;
            let raw = g.slice(lam_out, offset, len)?;
            offset += len;
            let pos = g.softplus(raw);
            lambdas.push(g.scale(pos, 1.0 / ctx.diag_scale));
            let k = g.slice(t_out, i * 2 * d * ks, 2 * d * ks)?;
            let k = g.reshape(k, d * ks, 2)?;
            kernels.push(g.add(delta, k)?);
        }
        Ok(LevelVars { xi, angles, tables, lambdas, kernels, lattices })
    }

    /// Evaluates the spectral weights for `ctx` without recording gradients.
    pub fn levels(&self, ctx: &SampleContext) -> Result<ConcreteLevels> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.params.iter().map(|p| g.constant(p.values.clone(), p.rows, p.cols)).collect::<Result<_>>()?;
        let lv = self.build_levels(&mut g, &vars, ctx)?;
        let d = self.config.dim;
        let angles = g.value(lv.angles).to_vec();
        let mut levels = Vec::new();
        let mut tables = Vec::new();
        for (i, lat) in self.lattices.iter().enumerate() {
            let kernel = g.value(lv.kernels[i]).chunks(2).map(|p| Complex64::new(p[0], p[1])).collect();
            levels.push(SpectralLevel::new(lat.clone(), d, g.value(lv.lambdas[i]).to_vec(), kernel)?);
            tables.push(PhaseTable::new(lat, &angles)?);
        }
        Ok(ConcreteLevels { xi: g.value(lv.xi).to_vec(), angles, levels, tables })
    }

    pub fn to_checkpoint(&self, adam: Option<AdamState>, epoch: usize, best_loss: Option<f64>) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.params.params.clone(),
            adam,
            epoch,
            best_loss,
        }
    }

    /// Rebuilds a model from a checkpoint, checking names and shapes.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Self::new(ckpt.config.clone())?;
        if model.params.len() != ckpt.params.len() {
            return Err(Error::Checkpoint(format!("checkpoint has {} parameter arrays, model expects {}", ckpt.params.len(), model.params.len())));
        }
        for (dst, src) in model.params.params.iter_mut().zip(&ckpt.params) {
            if dst.name != src.name || dst.rows != src.rows || dst.cols != src.cols || src.values.len() != src.rows * src.cols {
                return Err(Error::Checkpoint(format!("parameter `{}` ({}×{}) does not match `{}` ({}×{})", src.name, src.rows, src.cols, dst.name, dst.rows, dst.cols)));
            }
            dst.values.clone_from(&src.values);
        }
        Ok(model)
    }
}

/// Adam moments for every parameter array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.params.iter().map(|p| vec![0.0; p.values.len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Bias-corrected Adam update. Fails without modifying anything if a gradient is not finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::DimensionMismatch("gradient list does not match parameters".into()));
        }
        for (p, g) in store.params.iter().zip(grads) {
            if g.len() != p.values.len() {
                return Err(Error::DimensionMismatch(format!("gradient of `{}` has {} entries", p.name, g.len())));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (k, (p, g)) in store.params.iter_mut().zip(grads).enumerate() {
            for j in 0..g.len() {
                let m = &mut self.m[k][j];
                let v = &mut self.v[k][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g[j];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                p.values[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales gradients so their global Euclidean norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|x| *x *= s);
    }
    norm
}

pub const CHECKPOINT_FORMAT: &str = "gfns-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized weights, optimizer state and configuration (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<Param>,
    pub adam: Option<AdamState>,
    pub epoch: usize,
    pub best_loss: Option<f64>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {} (expected {CHECKPOINT_VERSION})", ckpt.version)));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Fails unless the stored configuration equals `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.config != expected {
            return Err(Error::Checkpoint(format!("configuration mismatch: checkpoint has {:?}, expected {:?}", self.config, expected)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph_inputs(n: usize, c: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn ring(n: usize) -> Vec<Vec<usize>> {
        (0..n).map(|i| vec![(i + n - 1) % n, (i + 1) % n, (i + 3) % n]).map(|mut v| {
            v.sort_unstable();
            v.dedup();
            v
        }).collect()
    }

    fn symmetric(nb: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
        let n = nb.len();
        let mut out = vec![Vec::new(); n];
        for (i, row) in nb.iter().enumerate() {
            for &j in row {
                out[i].push(j);
                out[j].push(i);
            }
        }
        out.iter_mut().for_each(|r| {
            r.sort_unstable();
            r.dedup();
        });
        out
    }

    fn eval_meta(net: &MetaNet, store: &ParamStore, x: Vec<f64>, n: usize, adj: &Rc<CsrMatrix>) -> Vec<f64> {
        let mut g = Graph::new();
        let vars = store.bind(&mut g).unwrap();
        let xv = g.constant(x, n, net.config.in_dim).unwrap();
        let out = net.forward(&mut g, &vars, xv, adj).unwrap();
        g.value(out).to_vec()
    }

    #[test]
    fn normalized_adjacency_entries() {
        let a = normalized_adjacency(&[vec![1], vec![0, 2], vec![1]]).unwrap();
        // degrees with self loops: 2, 3, 2
        assert_eq!(a.col_idx, vec![0, 1, 0, 1, 2, 1, 2]);
        assert!((a.vals[1] - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert!((a.vals[3] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_node_meta_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::default();
        let cfg = MetaNetConfig { in_dim: 3, d1: 2, d5: 4 };
        let net = MetaNet::new(&mut store, "m", cfg, &mut rng).unwrap();
        let adj = Rc::new(normalized_adjacency(&[vec![]]).unwrap());
        let x = vec![0.3, -0.7, 1.1];
        let got = eval_meta(&net, &store, x.clone(), 1, &adj);

        let p = |name: &str| store.params[store.index_of(name).unwrap()].clone();
        let lin = |v: &[f64], name: &str| -> Vec<f64> {
            let (w, b) = (p(&format!("{name}.weight")), p(&format!("{name}.bias")));
            (0..w.cols).map(|j| b.values[j] + (0..w.rows).map(|i| v[i] * w.values[i * w.cols + j]).sum::<f64>()).collect()
        };
        let relu = |v: Vec<f64>| v.into_iter().map(|x: f64| x.max(0.0)).collect::<Vec<_>>();
        let mut h = relu(lin(&x, "m.left"));
        for l in 2..=4 {
            let w = p(&format!("m.block{l}.gcn.weight"));
            let gcn: Vec<f64> = (0..w.cols).map(|j| (0..w.rows).map(|i| h[i] * w.values[i * w.cols + j]).sum()).collect();
            let fc = lin(&h, &format!("m.block{l}.linear"));
            h = relu(gcn.iter().zip(fc).map(|(a, b)| a + b).collect());
        }
        let out = lin(&relu(lin(&h, "m.right1")), "m.right2");
        for (a, b) in got.iter().zip(out) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_input_zero_biases_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::default();
        let net = MetaNet::new(&mut store, "m", MetaNetConfig { in_dim: 2, d1: 3, d5: 5 }, &mut rng).unwrap();
        for p in store.params.iter_mut().filter(|p| p.name.ends_with(".bias")) {
            p.values.iter_mut().for_each(|x| *x = 0.0);
        }
        let adj = Rc::new(normalized_adjacency(&symmetric(ring(6))).unwrap());
        assert!(eval_meta(&net, &store, vec![0.0; 12], 6, &adj).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn meta_output_permutation_invariant() {
        let n = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::default();
        let net = MetaNet::new(&mut store, "m", MetaNetConfig { in_dim: 3, d1: 4, d5: 6 }, &mut rng).unwrap();
        let nb = symmetric(ring(n));
        let x = graph_inputs(n, 3, 6);
        let perm: Vec<usize> = vec![3, 7, 0, 9, 1, 4, 8, 2, 6, 5];
        let mut inv = vec![0; n];
        perm.iter().enumerate().for_each(|(new, &old)| inv[old] = new);
        let nb_p: Vec<Vec<usize>> = perm.iter().map(|&old| nb[old].iter().map(|&j| inv[j]).collect()).collect();
        let x_p: Vec<f64> = perm.iter().flat_map(|&old| x[old * 3..old * 3 + 3].to_vec()).collect();
        let a = eval_meta(&net, &store, x, n, &Rc::new(normalized_adjacency(&nb).unwrap()));
        let b = eval_meta(&net, &store, x_p, n, &Rc::new(normalized_adjacency(&nb_p).unwrap()));
        for (u, v) in a.iter().zip(b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn coordinate_map_starts_at_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::default();
        let map = CoordinateMap::new(&mut store, 2, 8, &mut rng);
        let mut g = Graph::new();
        let vars = store.bind(&mut g).unwrap();
        let x = g.constant(vec![0.0, 0.0, 0.5, 1.0, 2.0, -1.0], 3, 2).unwrap();
        let xi = map.forward(&mut g, &vars, x).unwrap();
        assert_eq!(g.value(xi), g.value(x));
        // multiplicative form keeps the origin fixed for any weights
        store.params.iter_mut().for_each(|p| p.values.iter_mut().for_each(|v| *v += 0.3));
        let mut g = Graph::new();
        let vars = store.bind(&mut g).unwrap();
        let x = g.constant(vec![0.0, 0.0, 0.5, 1.0], 2, 2).unwrap();
        let xi = map.forward(&mut g, &vars, x).unwrap();
        assert_eq!(&g.value(xi)[..2], &[0.0, 0.0]);
        assert_ne!(g.value(xi)[2], 0.5);
    }

    #[test]
    fn coordinate_map_output_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::default();
        let map = CoordinateMap::new(&mut store, 2, 8, &mut rng);
        let x = vec![0.1, 0.9, 0.4, 0.2, 0.7, 0.6];
        let w_idx = store.index_of("coord.out.weight").unwrap();
        let eval = |store: &ParamStore| {
            let mut g = Graph::new();
            let vars = store.bind(&mut g).unwrap();
            let xv = g.constant(x.clone(), 3, 2).unwrap();
            let xi = map.forward(&mut g, &vars, xv).unwrap();
            let sq = g.hadamard(xi, xi).unwrap();
            let s = g.sum(sq);
            let grads = g.backward(s).unwrap();
            (g.scalar(s), grads.wrt(&g, vars[w_idx]))
        };
        let (_, ad) = eval(&store);
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..ad.len() {
            let mut p = store.clone();
            p.params[w_idx].values[j] += 1e-6;
            let mut m = store.clone();
            m.params[w_idx].values[j] -= 1e-6;
            let fd = (eval(&p).0 - eval(&m).0) / 2e-6;
            num += (fd - ad[j]).powi(2);
            den += fd * fd;
        }
        assert!(num.sqrt() / den.sqrt() < 1e-4);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut store = ParamStore::default();
        store.add("a".into(), 1, 1, vec![0.0]);
        store.add("b".into(), 1, 2, vec![1.0, -1.0]);
        let mut adam = AdamState::new(&store, 0.1);
        adam.step(&mut store, &[vec![2.0], vec![0.0, -0.5]]).unwrap();
        assert!((store.params[0].values[0] + 0.1).abs() < 1e-8);
        assert_eq!(store.params[1].values[0], 1.0);
        assert!((store.params[1].values[1] + 0.9).abs() < 1e-8);
        // second step against a scalar recomputation
        let (g1, g2) = (2.0, -1.0);
        let first = store.params[0].values[0];
        adam.step(&mut store, &[vec![g2], vec![0.0, 0.0]]).unwrap();
        let m = 0.9 * (0.1 * g1) + 0.1 * g2;
        let v = 0.999 * (0.001 * g1 * g1) + 0.001 * g2 * g2;
        let upd = 0.1 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((store.params[0].values[0] - (first - upd)).abs() < 1e-12);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut store = ParamStore::default();
        store.add("meta.weight".into(), 1, 2, vec![0.0, 0.0]);
        let mut adam = AdamState::new(&store, 0.1);
        let err = adam.step(&mut store, &[vec![1.0, f64::NAN]]).unwrap_err();
        assert!(err.to_string().contains("meta.weight"));
        assert_eq!(store.params[0].values, vec![0.0, 0.0]);
    }

    #[test]
    fn gradient_clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g, vec![vec![3.0], vec![4.0]]);
        clip_global_norm(&mut g, 1.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(Variant::AgFns, 2, vec![4, 3], 3).validate().is_err());
        assert!(ModelConfig::new(Variant::MlAgFns, 3, vec![4, 4], 4).validate().is_err());
        assert!(ModelConfig::new(Variant::MlAgFns, 3, vec![4, 3, 2], 4).validate().is_ok());
        assert_eq!(Variant::parse("ML-AG-FNS").unwrap(), Variant::MlAgFns);
        assert!(Variant::parse("fno").is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let mut cfg = ModelConfig::new(Variant::AgFns, 2, vec![2], 3);
        cfg.d1 = 2;
        cfg.coord_hidden = 4;
        let model = FnsModel::new(cfg.clone()).unwrap();
        let adam = AdamState::new(&model.params, 1e-3);
        let ck = model.to_checkpoint(Some(adam), 3, Some(0.25));
        let text = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json().unwrap(), text);
        let rebuilt = FnsModel::from_checkpoint(&back).unwrap();
        assert_eq!(rebuilt.params, model.params);
        let mut other = cfg.clone();
        other.d1 = 3;
        assert!(matches!(back.check_config(&other), Err(Error::Checkpoint(_))));
        let mut wrong = back.clone();
        wrong.config.d1 = 3;
        assert!(FnsModel::from_checkpoint(&wrong).is_err());
        assert!(Checkpoint::from_json(&text.replace("\"version\": 1", "\"version\": 9")).is_err());
    }
}
