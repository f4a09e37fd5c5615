//! Benchmark tables, residual plots and error-spectrum dumps.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{assemble, AssembledSystem};
use crate::linalg::{block_diag_inverse, direct_solve, l2};
use crate::nn::{FnsModel, SampleContext};
use crate::datasets::Sample;
use crate::smoother::{smooth, JacobiConfig};
use crate::solver::{corrector_for, fgmres, hybrid_cycle, hybrid_cycle_stages, solve, Corrector, NoCorrection, SolveOptions, SolveReport};
use crate::spectral::{forward_nudft, FrequencyLattice, PhaseTable};

/// Command line, seed and crate version written at the top of every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub seed: Option<u64>,
    pub version: String,
}

impl Provenance {
    pub fn new(command: impl Into<String>, seed: Option<u64>) -> Self {
        Self { command: command.into(), seed, version: env!("CARGO_PKG_VERSION").to_string() }
    }

    /// `#`-prefixed comment lines for CSV output.
    pub fn csv_header(&self) -> String {
        let seed = self.seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        format!("# command: {}\n# seed: {seed}\n# version: gfns {}\n", self.command, self.version)
    }
}

/// Strips provenance comment lines from CSV text.
pub fn csv_body(text: &str) -> impl Iterator<Item = &str> {
    text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    HybridSolver,
    HybridPrecondFgmres,
    JacobiSolver,
    JacobiPrecondFgmres,
    UnpreconditionedFgmres,
}

impl Method {
    pub const ALL: [Method; 5] = [Self::HybridSolver, Self::HybridPrecondFgmres, Self::JacobiSolver, Self::JacobiPrecondFgmres, Self::UnpreconditionedFgmres];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownTag(format!("bench method `{s}`")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::HybridSolver => "hybrid-solver",
            Self::HybridPrecondFgmres => "hybrid-precond-fgmres",
            Self::JacobiSolver => "jacobi-solver",
            Self::JacobiPrecondFgmres => "jacobi-precond-fgmres",
            Self::UnpreconditionedFgmres => "unpreconditioned-fgmres",
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self, Self::HybridSolver | Self::HybridPrecondFgmres)
    }
}

/// Default iteration cap: 200 in 2D and 1000 in 3D.
pub fn default_cap(dim: usize) -> usize {
    if dim == 3 {
        1000
    } else {
        200
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub methods: Vec<Method>,
    pub tol: f64,
    pub max_iters: usize,
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidArgument("at least one bench method is required".into()));
        }
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidArgument("tolerance and iteration cap must be positive".into()));
        }
        Ok(())
    }
}

/// Runs one method on one assembled system from a zero initial guess.
pub fn run_method(method: Method, system: &AssembledSystem<f64>, corrector: Option<&dyn Corrector>, smoother: &JacobiConfig, opts: &SolveOptions) -> Result<SolveReport> {
    let a = &system.matrix;
    let f = system.rhs.as_slice();
    let d_inv = block_diag_inverse(a)?;
    let learned = || corrector.ok_or_else(|| Error::InvalidArgument(format!("method {} needs model weights", method.name())));
    let report = match method {
        Method::HybridSolver => solve(a, &d_inv, f, learned()?, smoother, opts, None)?.1,
        Method::JacobiSolver => solve(a, &d_inv, f, &NoCorrection, smoother, opts, None)?.1,
        Method::HybridPrecondFgmres => {
            let c = learned()?;
            let mut pc = |v: &[f64]| hybrid_cycle(a, &d_inv, v, &vec![0.0; v.len()], c, smoother);
            fgmres(a, f, &mut pc, opts)?.1
        }
        Method::JacobiPrecondFgmres => {
            let mut pc = |v: &[f64]| smooth(a, &d_inv, v, &vec![0.0; v.len()], smoother);
            fgmres(a, f, &mut pc, opts)?.1
        }
        Method::UnpreconditionedFgmres => fgmres(a, f, &mut |v: &[f64]| Ok(v.to_vec()), opts)?.1,
    };
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub sample: usize,
    pub method: Method,
    pub report: SolveReport,
}

impl BenchRecord {
    /// Iteration count, or `None` when the cap was hit or the run diverged.
    pub fn iterations(&self) -> Option<usize> {
        self.report.converged.then_some(self.report.iterations)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub converged: usize,
    pub total: usize,
    /// Mean and sample standard deviation, present only when every sample converged.
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl MethodSummary {
    pub fn display(&self) -> String {
        match (self.mean, self.std) {
            (Some(m), Some(s)) => format!("{m:.1} ± {s:.1}"),
            _ => "-".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub spec: BenchSpec,
    pub records: Vec<BenchRecord>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

impl BenchTable {
    pub fn summary(&self) -> Vec<MethodSummary> {
        self.spec
            .methods
            .iter()
            .map(|&method| {
                let recs: Vec<&BenchRecord> = self.records.iter().filter(|r| r.method == method).collect();
                let its: Vec<f64> = recs.iter().filter_map(|r| r.iterations()).map(|i| i as f64).collect();
                let all = !recs.is_empty() && its.len() == recs.len();
                let (mean, std) = if all { let (m, s) = mean_std(&its); (Some(m), Some(s)) } else { (None, None) };
                MethodSummary { method, converged: its.len(), total: recs.len(), mean, std }
            })
            .collect()
    }

    pub fn summary_csv(&self, prov: &Provenance) -> String {
        let mut out = prov.csv_header();
        out.push_str("method,iterations,mean,std,converged,samples\n");
        for s in self.summary() {
            let num = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
            let _ = writeln!(out, "{},{},{},{},{},{}", s.method.name(), s.display(), num(s.mean), num(s.std), s.converged, s.total);
        }
        out
    }

    pub fn samples_csv(&self, prov: &Provenance) -> String {
        let mut out = prov.csv_header();
        out.push_str("sample,method,iterations,converged,final_residual\n");
        for r in &self.records {
            let its = r.iterations().map_or_else(|| "-".to_string(), |i| i.to_string());
            let _ = writeln!(out, "{},{},{its},{},{:e}", r.sample, r.method.name(), r.report.converged, r.report.final_residual);
        }
        out
    }

    pub fn residuals_csv(&self, prov: &Provenance) -> String {
        let mut out = prov.csv_header();
        out.push_str(RESIDUAL_HEADER);
        out.push('\n');
        for r in &self.records {
            for (k, v) in r.report.residual_history.iter().enumerate() {
                let _ = writeln!(out, "{},{},{k},{v:e}", r.sample, r.method.name());
            }
        }
        out
    }
}

pub const RESIDUAL_HEADER: &str = "sample,method,iteration,relative_residual";

/// Runs every method of `spec` on every sample, in sample order.
pub fn bench(samples: &[Sample], model: Option<&FnsModel>, spec: &BenchSpec) -> Result<BenchTable> {
    spec.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("bench needs at least one sample".into()));
    }
    if model.is_none() {
        if let Some(m) = spec.methods.iter().find(|m| m.needs_model()) {
            return Err(Error::InvalidArgument(format!("method {} needs model weights", m.name())));
        }
    }
    let opts = SolveOptions { tol: spec.tol, max_iters: spec.max_iters, ..Default::default() };
    let mut records = Vec::new();
    for s in samples {
        let system = assemble::<f64>(&s.problem)?;
        let dim = s.problem.mesh.dim();
        let (corrector, smoother) = match model {
            Some(m) => {
                let ctx = SampleContext::new(&s.problem.mesh, &system, s.features.clone(), m.config.smoother.omega)?;
                (Some(corrector_for(m, &ctx)?), m.config.smoother)
            }
            None => (None, JacobiConfig::default_for_dim(dim)),
        };
        for &method in &spec.methods {
            let c = corrector.as_ref().map(|c| c as &dyn Corrector);
            let report = run_method(method, &system, c, &smoother, &opts)?;
            log::debug!("sample {} {}: {} iterations", s.index, method.name(), report.iterations);
            records.push(BenchRecord { sample: s.index, method, report });
        }
    }
    Ok(BenchTable { spec: spec.clone(), records })
}

/// Log-scale residual curves, one polyline per method, from a residual CSV.
/// `sample` selects the sample; by default the first one in the file.
pub fn plot_residuals(csv: &str, sample: Option<usize>) -> Result<String> {
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut chosen = sample;
    for (i, line) in csv_body(csv).enumerate() {
        if i == 0 {
            if line.trim() != RESIDUAL_HEADER {
                return Err(Error::Parse { line: 1, msg: format!("expected header `{RESIDUAL_HEADER}`") });
            }
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |msg: &str| Error::Parse { line: i + 1, msg: msg.to_string() };
        if cols.len() != 4 {
            return Err(bad("expected 4 columns"));
        }
        let s: usize = cols[0].parse().map_err(|_| bad("bad sample index"))?;
        let k: f64 = cols[2].parse().map_err(|_| bad("bad iteration"))?;
        let r: f64 = cols[3].parse().map_err(|_| bad("bad residual"))?;
        if *chosen.get_or_insert(s) != s {
            continue;
        }
        series.entry(cols[1].to_string()).or_default().push((k, r));
    }
    if series.is_empty() {
        return Err(Error::InvalidArgument("no residual rows to plot".into()));
    }
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let floor = 1e-300;
    let pts = series.values().flatten();
    let kmax = pts.clone().map(|p| p.0).fold(0.0_f64, f64::max).max(1.0);
    let ymin = pts.clone().map(|p| p.1.max(floor).log10()).fold(f64::INFINITY, f64::min);
    let ymax = pts.map(|p| p.1.max(floor).log10()).fold(f64::NEG_INFINITY, f64::max);
    let (ylo, yhi) = if ymax > ymin { (ymin.floor(), ymax.ceil()) } else { (ymin - 1.0, ymax + 1.0) };
    let px = |k: f64| pad + k / kmax * (w - 2.0 * pad);
    let py = |r: f64| pad + (yhi - r.max(floor).log10()) / (yhi - ylo) * (h - 2.0 * pad);
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="black"/>"#, w - 2.0 * pad, h - 2.0 * pad);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">iteration</text>"#, w / 2.0, h - 10.0);
    let _ = writeln!(svg, r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})" text-anchor="middle">log10 relative residual</text>"#, h / 2.0, h / 2.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{yhi}</text><text x="{}" y="{}" font-size="10" text-anchor="end">{ylo}</text>"#, pad - 4.0, pad + 4.0, pad - 4.0, h - pad);
    for (i, (name, p)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = p.iter().map(|&(k, r)| format!("{:.2},{:.2}", px(k), py(r))).collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"><title>{}</title></polyline>"#, points.join(" "), escape(name));
        let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#, w - pad - 150.0, pad + 15.0 * (i as f64 + 1.0), escape(name));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpectrumStage {
    Smoothed,
    Corrected,
}

impl SpectrumStage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Smoothed => "smoothed",
            Self::Corrected => "corrected",
        }
    }
}

/// Error spectrum magnitudes `|F e|` at one stage of one cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSnapshot {
    pub iteration: usize,
    pub stage: SpectrumStage,
    /// `[frequency][channel]` magnitudes in lattice order.
    pub magnitudes: Vec<Vec<f64>>,
}

impl SpectrumSnapshot {
    pub fn l2(&self) -> f64 {
        self.magnitudes.iter().flatten().map(|m| m * m).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumDump {
    pub lattice: FrequencyLattice,
    pub snapshots: Vec<SpectrumSnapshot>,
}

/// Spectrum of the current error `u* − u` for each stage of cycles `1..=iters`.
/// `u*` comes from a dense direct solve. The transform uses the first level's
/// coordinates and lattice.
pub fn spectrum_dump(model: &FnsModel, ctx: &SampleContext, system: &AssembledSystem<f64>, iters: usize) -> Result<SpectrumDump> {
    let a = &system.matrix;
    let f = system.rhs.as_slice();
    let u_ref = direct_solve(a, f)?;
    let corrector = corrector_for(model, ctx)?;
    let table: &PhaseTable = &corrector.levels.tables[0];
    let lattice = corrector.levels.levels[0].lattice.clone();
    let d = ctx.dim;
    let spectrum = |u: &[f64]| -> Result<Vec<Vec<f64>>> {
        let e: Vec<f64> = u_ref.iter().zip(u).map(|(x, y)| x - y).collect();
        let s = forward_nudft(&e, d, table)?;
        Ok(s.chunks(d).map(|c| c.iter().map(|z| z.norm()).collect()).collect())
    };
    let d_inv = block_diag_inverse(a)?;
    let mut u = vec![0.0; f.len()];
    let mut snapshots = Vec::with_capacity(2 * iters);
    for it in 1..=iters {
        let (smoothed, next) = hybrid_cycle_stages(a, &d_inv, f, &u, &corrector, &model.config.smoother)?;
        snapshots.push(SpectrumSnapshot { iteration: it, stage: SpectrumStage::Smoothed, magnitudes: spectrum(&smoothed)? });
        snapshots.push(SpectrumSnapshot { iteration: it, stage: SpectrumStage::Corrected, magnitudes: spectrum(&next)? });
        u = next;
    }
    Ok(SpectrumDump { lattice, snapshots })
}

impl SpectrumDump {
    /// One row per (iteration, stage, frequency, channel).
    pub fn to_csv(&self, prov: &Provenance) -> String {
        let dim = self.lattice.dim();
        let mut out = prov.csv_header();
        let ks: Vec<String> = (1..=dim).map(|i| format!("k{i}")).collect();
        let _ = writeln!(out, "iteration,stage,{},channel,magnitude", ks.join(","));
        for s in &self.snapshots {
            for (idx, chans) in s.magnitudes.iter().enumerate() {
                let k: Vec<String> = self.lattice.freq(idx).iter().map(|v| v.to_string()).collect();
                for (c, m) in chans.iter().enumerate() {
                    let _ = writeln!(out, "{},{},{},{c},{m:e}", s.iteration, s.stage.name(), k.join(","));
                }
            }
        }
        out
    }

    pub fn summary_csv(&self, prov: &Provenance) -> String {
        let mut out = prov.csv_header();
        out.push_str("iteration,stage,l2\n");
        for s in &self.snapshots {
            let _ = writeln!(out, "{},{},{:e}", s.iteration, s.stage.name(), s.l2());
        }
        out
    }

    pub fn l2_at(&self, iteration: usize, stage: SpectrumStage) -> Option<f64> {
        self.snapshots.iter().find(|s| s.iteration == iteration && s.stage == stage).map(SpectrumSnapshot::l2)
    }
}

/// Relative residual `‖f − A u‖ / ‖f‖`.
pub fn relative_residual(system: &AssembledSystem<f64>, u: &[f64]) -> Result<f64> {
    let r = crate::linalg::residual(&system.matrix, u, system.rhs.as_slice())?;
    Ok(l2(&r) / l2(system.rhs.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{Dataset, DatasetSpec, Family, MeshSpec};
    use crate::nn::{ModelConfig, Variant};

    fn tiny_samples() -> Vec<Sample> {
        let mut spec = DatasetSpec::new(Family::Data1, 3, 2);
        spec.mesh = MeshSpec::Square { n: 3 };
        Dataset::new(spec).unwrap().samples(0..3).unwrap()
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(Method::parse("sa-amg").is_err());
    }

    #[test]
    fn capped_method_renders_dash() {
        let samples = tiny_samples();
        let spec = BenchSpec { methods: vec![Method::JacobiSolver, Method::UnpreconditionedFgmres], tol: 1e-6, max_iters: 3 };
        let table = bench(&samples, None, &spec).unwrap();
        let s = table.summary();
        assert_eq!(s[0].display(), "-");
        assert_eq!(s[0].converged, 0);
        let csv = table.summary_csv(&Provenance::new("test", Some(1)));
        assert!(csv.lines().any(|l| l.starts_with("jacobi-solver,-,")));
    }

    #[test]
    fn bench_is_deterministic_and_requires_weights() {
        let samples = tiny_samples();
        let spec = BenchSpec { methods: vec![Method::JacobiPrecondFgmres, Method::UnpreconditionedFgmres], tol: 1e-6, max_iters: 200 };
        let p = Provenance::new("bench", Some(0));
        let a = bench(&samples, None, &spec).unwrap();
        let b = bench(&samples, None, &spec).unwrap();
        assert_eq!(a.summary_csv(&p), b.summary_csv(&p));
        assert_eq!(a.samples_csv(&p), b.samples_csv(&p));
        let hybrid = BenchSpec { methods: vec![Method::HybridSolver], ..spec };
        assert!(bench(&samples, None, &hybrid).is_err());
    }

    #[test]
    fn mean_std_uses_sample_deviation() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    fn svg_points(svg: &str) -> Vec<Vec<(f64, f64)>> {
        let doc = roxmltree::Document::parse(svg).unwrap();
        doc.descendants()
            .filter(|n| n.has_tag_name("polyline"))
            .map(|n| {
                n.attribute("points")
                    .unwrap()
                    .split_whitespace()
                    .map(|p| {
                        let (x, y) = p.split_once(',').unwrap();
                        (x.parse().unwrap(), y.parse().unwrap())
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_row_gives_single_point() {
        let csv = format!("{RESIDUAL_HEADER}\n0,jacobi-solver,0,1\n");
        let pts = svg_points(&plot_residuals(&csv, None).unwrap());
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].len(), 1);
    }

    #[test]
    fn monotone_history_gives_monotone_polyline() {
        let mut csv = format!("# command: x\n{RESIDUAL_HEADER}\n");
        for k in 0..10 {
            let _ = writeln!(csv, "4,a,{k},{}", 10f64.powi(-k));
            let _ = writeln!(csv, "4,b,{k},{}", 0.9f64.powi(k));
            let _ = writeln!(csv, "5,b,{k},1");
        }
        let pts = svg_points(&plot_residuals(&csv, None).unwrap());
        assert_eq!(pts.len(), 2);
        for line in pts {
            assert_eq!(line.len(), 10);
            assert!(line.windows(2).all(|w| w[1].1 >= w[0].1 && w[1].0 > w[0].0));
        }
    }

    #[test]
    fn empty_or_malformed_input_rejected() {
        assert!(plot_residuals(&format!("{RESIDUAL_HEADER}\n"), None).is_err());
        assert!(plot_residuals("a,b\n", None).is_err());
        assert!(plot_residuals(&format!("{RESIDUAL_HEADER}\n0,a,x,1\n"), None).is_err());
    }

    fn tiny_model_and_ctx() -> (FnsModel, SampleContext, AssembledSystem<f64>) {
        let s = tiny_samples().remove(0);
        let sys = assemble::<f64>(&s.problem).unwrap();
        let model = FnsModel::new(ModelConfig::new(Variant::GFns, 2, vec![1], 3)).unwrap();
        let ctx = SampleContext::new(&s.problem.mesh, &sys, s.features.clone(), 2.0 / 3.0).unwrap();
        (model, ctx, sys)
    }

    #[test]
    fn dump_has_two_snapshots_per_iteration() {
        let (model, ctx, sys) = tiny_model_and_ctx();
        let dump = spectrum_dump(&model, &ctx, &sys, 3).unwrap();
        assert_eq!(dump.snapshots.len(), 6);
        assert_eq!(dump.snapshots[0].magnitudes.len(), dump.lattice.len());
        assert!(dump.l2_at(3, SpectrumStage::Corrected).is_some());
        let csv = dump.to_csv(&Provenance::new("spectrum", None));
        assert_eq!(csv_body(&csv).count(), 1 + 6 * dump.lattice.len() * 2);
    }

    #[test]
    fn identity_map_dump_is_classical_dft_on_grid() {
        let (model, ctx, sys) = tiny_model_and_ctx();
        let dump = spectrum_dump(&model, &ctx, &sys, 1).unwrap();
        // oracle: direct 2D DFT of the error after the first smoothing pass on the 4×4 node grid
        let a = &sys.matrix;
        let f = sys.rhs.as_slice();
        let u_ref = direct_solve(a, f).unwrap();
        let d_inv = block_diag_inverse(a).unwrap();
        let u = smooth(a, &d_inv, f, &vec![0.0; f.len()], &model.config.smoother).unwrap();
        let coords = sys_coords(&ctx);
        for (idx, chans) in dump.snapshots[0].magnitudes.iter().enumerate() {
            let k = dump.lattice.freq(idx);
            for (c, got) in chans.iter().enumerate() {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &(i, j)) in coords.iter().enumerate() {
                    let phase = 2.0 * std::f64::consts::PI * (k[0] as f64 * i as f64 + k[1] as f64 * j as f64) / 4.0;
                    let e = u_ref[2 * n + c] - u[2 * n + c];
                    re += e * phase.cos();
                    im += e * phase.sin();
                }
                let want = re.hypot(im);
                assert!((got - want).abs() < 1e-9 * (1.0 + want), "k={k:?} c={c}: {got} vs {want}");
            }
        }
    }

    fn sys_coords(ctx: &SampleContext) -> Vec<(usize, usize)> {
        ctx.coords.chunks(2).map(|p| ((p[0] * 3.0).round() as usize, (p[1] * 3.0).round() as usize)).collect()
    }

    #[test]
    fn zero_error_gives_zero_spectrum() {
        let (model, ctx, mut sys) = tiny_model_and_ctx();
        sys.rhs.as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
        let dump = spectrum_dump(&model, &ctx, &sys, 2).unwrap();
        assert!(dump.snapshots.iter().all(|s| s.l2() == 0.0));
    }

    #[test]
    fn provenance_lines_are_comments() {
        let p = Provenance::new("gfns lfa --nu 0.4", Some(9));
        let h = p.csv_header();
        assert_eq!(h.lines().count(), 3);
        assert!(h.lines().all(|l| l.starts_with("# ")));
        assert!(h.contains("seed: 9"));
    }
}
