//! Problem families: log-normal random Young's modulus fields (2D/3D
//! isotropic) and randomized anisotropic parameter sets, with deterministic
//! per-sample streams, train/test splits and a directory format.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{p1_gradients, MaterialModel, ProblemDefinition};
use crate::linalg::DenseMatrix;
use crate::mesh::{build_structured_box, build_structured_square, build_unstructured_2d, MeshTopology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// 2D isotropic, random Young's modulus field.
    Data1,
    /// 3D isotropic, random Young's modulus field.
    Data2,
    /// 2D rotated orthotropic, random global parameters.
    Data3,
    /// 3D orthotropic, random global parameters.
    Data4,
}

impl Family {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "data1" | "1" => Ok(Self::Data1),
            "data2" | "2" => Ok(Self::Data2),
            "data3" | "3" => Ok(Self::Data3),
            "data4" | "4" => Ok(Self::Data4),
            _ => Err(Error::InvalidArgument(format!("unknown dataset family `{s}`"))),
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Self::Data1 | Self::Data3 => 2,
            Self::Data2 | Self::Data4 => 3,
        }
    }

    pub fn default_mesh(self) -> MeshSpec {
        match self.dim() {
            2 => MeshSpec::Square { n: 8 },
            _ => MeshSpec::Box { nx: 4, ny: 2, nz: 2, extent: [3.0, 1.0, 1.0] },
        }
    }

    /// Number of meta-network inputs per node.
    pub fn feature_dim(self) -> usize {
        match self {
            Self::Data1 => 3,
            Self::Data2 => 4,
            Self::Data3 => PARAMS_3.len() + 2,
            Self::Data4 => PARAMS_4.len() + 3,
        }
    }
}

/// `(name, low, high)` of the uniform parameter draws.
pub const PARAMS_3: [(&str, f64, f64); 5] =
    [("e1", 50e9, 200e9), ("e2", 50e6, 200e6), ("g12", 2e9, 20e9), ("nu12", 0.2, 0.35), ("theta", 0.0, std::f64::consts::FRAC_PI_2)];

pub const PARAMS_4: [(&str, f64, f64); 9] = [
    ("e1", 50e9, 200e9),
    ("e2", 50e8, 200e8),
    ("e3", 50e6, 200e6),
    ("g12", 2e9, 20e9),
    ("g23", 2e6, 20e6),
    ("g31", 2e8, 20e8),
    ("nu12", 0.25, 0.4),
    ("nu13", 0.25, 0.4),
    ("nu23", 0.25, 0.4),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MeshSpec {
    Square { n: usize },
    Box { nx: usize, ny: usize, nz: usize, extent: [f64; 3] },
    Unstructured { n: usize, seed: u64 },
}

impl MeshSpec {
    pub fn build(&self) -> Result<MeshTopology> {
        match self {
            Self::Square { n } => build_structured_square(*n),
            Self::Box { nx, ny, nz, extent } => build_structured_box(*nx, *ny, *nz, *extent),
            Self::Unstructured { n, seed } => build_unstructured_2d(*n, *seed),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Box { .. } => 3,
            _ => 2,
        }
    }
}

/// Log-normal field `E = α_m exp(w) + β_m` with `w ~ N(0, L⁻²)`, `L = −a∇·b∇ + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrfConfig {
    pub alpha_m: f64,
    pub beta_m: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for GrfConfig {
    fn default() -> Self {
        Self { alpha_m: 1e8, beta_m: 100.0, a: 0.005, b: 1.0, c: 0.2 }
    }
}

impl GrfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.c > 0.0 && self.b > 0.0) {
            return Err(Error::InvalidArgument("GRF operator coefficients a, b, c must be positive".into()));
        }
        Ok(())
    }
}

/// Sampler with the factorized discrete operator `L_h = a·b·K + c·M` of one mesh.
#[derive(Debug, Clone)]
pub struct GrfSampler {
    pub config: GrfConfig,
    chol: Vec<f64>,
    lumped_sqrt: Vec<f64>,
}

impl GrfSampler {
    pub fn new(mesh: &MeshTopology, config: GrfConfig) -> Result<Self> {
        config.validate()?;
        let n = mesh.num_nodes();
        let d = mesh.dim();
        let mut op = DenseMatrix::<f64>::zeros(n, n);
        let mut lumped = vec![0.0; n];
        for e in 0..mesh.num_elements() {
            let (grads, vol) = p1_gradients(mesh, e)?;
            let el = mesh.element(e);
            let mass_scale = vol / ((d + 1) * (d + 2)) as f64;
            for (i, &gi) in el.iter().enumerate() {
                lumped[gi] += vol / (d + 1) as f64;
                for (j, &gj) in el.iter().enumerate() {
                    let stiff: f64 = (0..d).map(|k| grads[i][k] * grads[j][k]).sum::<f64>() * vol;
                    let mass = mass_scale * if i == j { 2.0 } else { 1.0 };
                    let v = op.get(gi, gj) + config.a * config.b * stiff + config.c * mass;
                    op.set(gi, gj, v);
                }
            }
        }
        let chol = op.cholesky().map_err(|_| Error::NotPositiveDefinite("GRF operator is singular".into()))?;
        Ok(Self { config, chol, lumped_sqrt: lumped.iter().map(|m| m.sqrt()).collect() })
    }

    pub fn num_nodes(&self) -> usize {
        self.lumped_sqrt.len()
    }

    /// Draws `w = L_h⁻¹ M_lumped^{1/2} z` with `z ~ N(0, I)`.
    pub fn sample_w(&self, rng: &mut impl Rng) -> Vec<f64> {
        let rhs: Vec<f64> = self.lumped_sqrt.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect();
        crate::linalg::cholesky_solve(&self.chol, &rhs)
    }

    pub fn youngs_from_w(&self, w: &[f64]) -> Vec<f64> {
        w.iter().map(|x| self.config.alpha_m * x.exp() + self.config.beta_m).collect()
    }

    pub fn sample_youngs(&self, rng: &mut impl Rng) -> Vec<f64> {
        let w = self.sample_w(rng);
        self.youngs_from_w(&w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub family: Family,
    pub mesh: MeshSpec,
    pub samples: usize,
    pub seed: u64,
    /// Leading fraction of samples used for training; the rest are test samples.
    pub train_fraction: f64,
    #[serde(default)]
    pub grf: GrfConfig,
}

impl DatasetSpec {
    pub fn new(family: Family, samples: usize, seed: u64) -> Self {
        Self { family, mesh: family.default_mesh(), samples, seed, train_fraction: 0.8, grf: GrfConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Dataset("a dataset needs at least one sample".into()));
        }
        if self.mesh.dim() != self.family.dim() {
            return Err(Error::Dataset(format!("{:?} needs a {}D mesh", self.family, self.family.dim())));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::Dataset(format!("train fraction {} outside [0, 1]", self.train_fraction)));
        }
        self.grf.validate()
    }

    pub fn num_train(&self) -> usize {
        ((self.samples as f64) * self.train_fraction).floor() as usize
    }

    pub fn train_indices(&self) -> std::ops::Range<usize> {
        0..self.num_train()
    }

    pub fn test_indices(&self) -> std::ops::Range<usize> {
        self.num_train()..self.samples
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Dataset(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Dataset(format!("manifest: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Stream of sample `index` under `seed`.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// A generated problem with its meta-network inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub problem: ProblemDefinition,
    /// Node-major `N × feature_dim`.
    pub features: Vec<f64>,
}

/// Generator bound to one specification and mesh.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub mesh: MeshTopology,
    grf: Option<GrfSampler>,
}

impl Dataset {
    pub fn new(spec: DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let mesh = spec.mesh.build()?;
        let grf = match spec.family {
            Family::Data1 | Family::Data2 => Some(GrfSampler::new(&mesh, spec.grf)?),
            _ => None,
        };
        Ok(Self { spec, mesh, grf })
    }

    pub fn grf(&self) -> Option<&GrfSampler> {
        self.grf.as_ref()
    }

    /// Material of sample `index`, drawn from its own stream.
    pub fn material(&self, index: usize) -> Result<MaterialModel> {
        if index >= self.spec.samples {
            return Err(Error::Dataset(format!("sample {index} out of range (M = {})", self.spec.samples)));
        }
        let mut rng = sample_rng(self.spec.seed, index);
        let uniform = |rng: &mut ChaCha8Rng, table: &[(&str, f64, f64)]| -> Vec<f64> { table.iter().map(|(_, lo, hi)| rng.random_range(*lo..*hi)).collect() };
        Ok(match self.spec.family {
            Family::Data1 => MaterialModel::Isotropic2D { youngs: self.grf.as_ref().expect("GRF sampler").sample_youngs(&mut rng), poisson: 0.4 },
            Family::Data2 => MaterialModel::Isotropic3D { youngs: self.grf.as_ref().expect("GRF sampler").sample_youngs(&mut rng), poisson: 0.4 },
            Family::Data3 => {
                let p = uniform(&mut rng, &PARAMS_3);
                MaterialModel::Anisotropic2D { e1: p[0], e2: p[1], g12: p[2], nu12: p[3], theta: p[4] }
            }
            Family::Data4 => {
                let p = uniform(&mut rng, &PARAMS_4);
                MaterialModel::Orthotropic3D { e1: p[0], e2: p[1], e3: p[2], g12: p[3], g23: p[4], g31: p[5], nu12: p[6], nu13: p[7], nu23: p[8] }
            }
        })
    }

    pub fn sample(&self, index: usize) -> Result<Sample> {
        let material = self.material(index)?;
        self.sample_with_material(index, material)
    }

    pub fn sample_with_material(&self, index: usize, material: MaterialModel) -> Result<Sample> {
        let problem = make_problem(self.spec.family, &self.mesh, material)?;
        let features = meta_features(self.spec.family, &self.mesh, &problem.material, &self.spec.grf)?;
        Ok(Sample { index, problem, features })
    }

    pub fn samples(&self, indices: impl IntoIterator<Item = usize>) -> Result<Vec<Sample>> {
        indices.into_iter().map(|i| self.sample(i)).collect()
    }
}

/// Boundary conditions and loads of a family on `mesh`.
pub fn make_problem(family: Family, mesh: &MeshTopology, material: MaterialModel) -> Result<ProblemDefinition> {
    let d = family.dim();
    if mesh.dim() != d || material.dim() != d {
        return Err(Error::Dataset(format!("{family:?} needs {d}D mesh and material")));
    }
    let (dirichlet, tag, traction) = match family {
        Family::Data1 => (vec!["left"], "right", vec![1e6, 0.0]),
        Family::Data2 => (vec!["left"], "right", vec![1e6, 0.0, 0.0]),
        Family::Data3 => (vec!["left", "bottom"], "top", vec![1e8, 0.0]),
        Family::Data4 => (vec!["left"], "right", vec![0.0, 0.0, 1e8]),
    };
    let p = ProblemDefinition {
        mesh: mesh.clone(),
        material,
        body_force: vec![0.0; d],
        tractions: vec![(tag.to_string(), traction)],
        dirichlet: dirichlet.into_iter().map(String::from).collect(),
    };
    p.validate()?;
    Ok(p)
}

/// Meta-network inputs: `[ln(E/α_m), x]` for random fields, or the
/// parameters rescaled to `[0, 1]` broadcast to every node followed by `x`.
pub fn meta_features(family: Family, mesh: &MeshTopology, material: &MaterialModel, grf: &GrfConfig) -> Result<Vec<f64>> {
    let n = mesh.num_nodes();
    let d = mesh.dim();
    let global: Option<Vec<f64>> = match (family, material) {
        (Family::Data1, MaterialModel::Isotropic2D { .. }) | (Family::Data2, MaterialModel::Isotropic3D { .. }) => None,
        (Family::Data3, MaterialModel::Anisotropic2D { e1, e2, g12, nu12, theta }) => Some(rescale(&PARAMS_3, &[*e1, *e2, *g12, *nu12, *theta])),
        (Family::Data4, MaterialModel::Orthotropic3D { e1, e2, e3, g12, g23, g31, nu12, nu13, nu23 }) => {
            Some(rescale(&PARAMS_4, &[*e1, *e2, *e3, *g12, *g23, *g31, *nu12, *nu13, *nu23]))
        }
        _ => return Err(Error::Dataset(format!("material does not belong to {family:?}"))),
    };
    let mut out = Vec::with_capacity(n * family.feature_dim());
    for i in 0..n {
        match (&global, material) {
            (Some(p), _) => out.extend_from_slice(p),
            (None, MaterialModel::Isotropic2D { youngs, .. } | MaterialModel::Isotropic3D { youngs, .. }) => out.push((youngs[i] / grf.alpha_m).ln()),
            _ => unreachable!("checked above"),
        }
        out.extend_from_slice(&mesh.node(i)[..d]);
    }
    Ok(out)
}

fn rescale(table: &[(&str, f64, f64)], values: &[f64]) -> Vec<f64> {
    table.iter().zip(values).map(|((_, lo, hi), v)| (v - lo) / (hi - lo)).collect()
}

fn format_material(m: &MaterialModel) -> String {
    let mut s = String::new();
    match m {
        MaterialModel::Isotropic2D { youngs, poisson } | MaterialModel::Isotropic3D { youngs, poisson } => {
            let _ = writeln!(s, "isotropic {}", m.dim());
            let _ = writeln!(s, "poisson {poisson:e}");
            let _ = writeln!(s, "youngs {}", youngs.len());
            youngs.iter().for_each(|e| {
                let _ = writeln!(s, "{e:e}");
            });
        }
        MaterialModel::Anisotropic2D { e1, e2, g12, nu12, theta } => {
            s.push_str("anisotropic 2\n");
            for (name, v) in PARAMS_3.iter().map(|p| p.0).zip([e1, e2, g12, nu12, theta]) {
                let _ = writeln!(s, "{name} {v:e}");
            }
        }
        MaterialModel::Orthotropic3D { e1, e2, e3, g12, g23, g31, nu12, nu13, nu23 } => {
            s.push_str("orthotropic 3\n");
            for (name, v) in PARAMS_4.iter().map(|p| p.0).zip([e1, e2, e3, g12, g23, g31, nu12, nu13, nu23]) {
                let _ = writeln!(s, "{name} {v:e}");
            }
        }
    }
    s
}

fn parse_material(text: &str) -> Result<MaterialModel> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let bad = |line: usize, msg: &str| Error::Parse { line: line + 1, msg: msg.to_string() };
    let (ln, header) = lines.next().ok_or_else(|| bad(0, "empty material file"))?;
    let num = |ln: usize, s: &str| s.parse::<f64>().map_err(|_| bad(ln, &format!("bad number `{s}`")));
    let mut keyed = |expected: &str| -> Result<f64> {
        let (ln, l) = lines.next().ok_or_else(|| bad(ln, &format!("missing `{expected}`")))?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some(expected) {
            return Err(bad(ln, &format!("expected `{expected}`")));
        }
        num(ln, parts.next().unwrap_or(""))
    };
    match header.trim() {
        h @ ("isotropic 2" | "isotropic 3") => {
            let poisson = keyed("poisson")?;
            let count = keyed("youngs")? as usize;
            let youngs = (0..count)
                .map(|_| {
                    let (ln, l) = lines.next().ok_or_else(|| bad(ln, "missing modulus value"))?;
                    num(ln, l.trim())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(if h.ends_with('2') { MaterialModel::Isotropic2D { youngs, poisson } } else { MaterialModel::Isotropic3D { youngs, poisson } })
        }
        "anisotropic 2" => {
            let p: Vec<f64> = PARAMS_3.iter().map(|(n, _, _)| keyed(n)).collect::<Result<_>>()?;
            Ok(MaterialModel::Anisotropic2D { e1: p[0], e2: p[1], g12: p[2], nu12: p[3], theta: p[4] })
        }
        "orthotropic 3" => {
            let p: Vec<f64> = PARAMS_4.iter().map(|(n, _, _)| keyed(n)).collect::<Result<_>>()?;
            Ok(MaterialModel::Orthotropic3D { e1: p[0], e2: p[1], e3: p[2], g12: p[3], g23: p[4], g31: p[5], nu12: p[6], nu13: p[7], nu23: p[8] })
        }
        other => Err(bad(ln, &format!("unknown material kind `{other}`"))),
    }
}

pub const MANIFEST: &str = "manifest.toml";
pub const MESH_FILE: &str = "mesh.txt";

pub fn sample_dir_name(index: usize) -> String {
    format!("sample_{index:05}")
}

/// Writes the manifest, the mesh and one `material.txt` per sample.
pub fn export_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(MANIFEST), dataset.spec.to_toml()?)?;
    dataset.mesh.save(dir.join(MESH_FILE))?;
    for i in 0..dataset.spec.samples {
        let sub = dir.join(sample_dir_name(i));
        std::fs::create_dir_all(&sub)?;
        std::fs::write(sub.join("material.txt"), format_material(&dataset.material(i)?))?;
    }
    Ok(())
}

/// Dataset read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dataset: Dataset,
    pub materials: Vec<MaterialModel>,
}

impl LoadedDataset {
    pub fn sample(&self, index: usize) -> Result<Sample> {
        let m = self.materials.get(index).ok_or_else(|| Error::Dataset(format!("sample {index} out of range")))?;
        self.dataset.sample_with_material(index, m.clone())
    }
}

/// Reads an exported dataset, checking the stored mesh against the manifest.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<LoadedDataset> {
    let dir = dir.as_ref();
    let manifest = std::fs::read_to_string(dir.join(MANIFEST)).map_err(|e| Error::Dataset(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    let spec = DatasetSpec::from_toml(&manifest)?;
    let dataset = Dataset::new(spec)?;
    let stored = MeshTopology::load(dir.join(MESH_FILE))?;
    if stored != dataset.mesh {
        return Err(Error::Dataset("stored mesh does not match the manifest mesh parameters".into()));
    }
    let missing: Vec<String> = (0..dataset.spec.samples).map(sample_dir_name).filter(|s| !dir.join(s).join("material.txt").is_file()).collect();
    if !missing.is_empty() {
        return Err(Error::Dataset(format!("missing samples: {}", missing.join(", "))));
    }
    let materials = (0..dataset.spec.samples)
        .map(|i| {
            let text = std::fs::read_to_string(dir.join(sample_dir_name(i)).join("material.txt"))?;
            let m = parse_material(&text)?;
            m.validate(dataset.mesh.num_nodes())?;
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedDataset { dataset, materials })
}

/// Kolmogorov–Smirnov distance of draws from `U(lo, hi)`.
pub fn ks_uniform_distance(values: &[f64], lo: f64, hi: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|x| (x - lo) / (hi - lo)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter().enumerate().map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs())).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn material_text_round_trip() {
        let ds = Dataset::new(DatasetSpec::new(Family::Data1, 2, 3)).unwrap();
        let m = ds.material(1).unwrap();
        assert_eq!(parse_material(&format_material(&m)).unwrap(), m);
        let ds = Dataset::new(DatasetSpec::new(Family::Data4, 2, 3)).unwrap();
        let m = ds.material(0).unwrap();
        assert_eq!(parse_material(&format_material(&m)).unwrap(), m);
        assert!(matches!(parse_material("isotropic 2\npoisson x\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn family_parsing_and_dims() {
        assert_eq!(Family::parse("Data-3").unwrap(), Family::Data3);
        assert!(Family::parse("data5").is_err());
        assert_eq!(Family::Data4.feature_dim(), 12);
    }

    #[test]
    fn manifest_round_trip() {
        let spec = DatasetSpec::new(Family::Data2, 5, 9);
        let text = spec.to_toml().unwrap();
        assert_eq!(DatasetSpec::from_toml(&text).unwrap(), spec);
    }

    #[test]
    fn out_of_range_sample() {
        let ds = Dataset::new(DatasetSpec::new(Family::Data3, 2, 0)).unwrap();
        assert!(ds.sample(2).is_err());
    }

    #[test]
    fn ks_distance_of_grid() {
        let v: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert!(ks_uniform_distance(&v, 0.0, 1.0) <= 0.0051);
    }
}
