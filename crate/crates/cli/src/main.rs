use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gfns::datasets::{export_dataset, load_dataset, Dataset, DatasetSpec, Family, LoadedDataset, MeshSpec, Sample};
use gfns::experiments::{bench, default_cap, plot_residuals, run_method, spectrum_dump, BenchSpec, Method, Provenance};
use gfns::fem::assemble;
use gfns::lfa::{smoothing_factor_sweep, LfaConfig};
use gfns::mesh::{build_structured_box, build_structured_square, build_unstructured_2d};
use gfns::nn::{Checkpoint, FnsModel, ModelConfig, SampleContext, Variant};
use gfns::solver::{corrector_for, Corrector, SolveOptions};
use gfns::trainer::{create_log, prepare_contexts, TrainConfig, Trainer};

#[derive(Parser, Debug)]
#[command(name = "gfns", version, about = "Graph Fourier neural solvers for linear elasticity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MeshKind {
    Square,
    Box,
    Unstructured,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a mesh in the plain-text mesh format.
    GenMesh {
        #[arg(long, value_enum, default_value = "square")]
        kind: MeshKind,
        /// Cells per side (square, unstructured).
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        nx: usize,
        #[arg(long, default_value_t = 2)]
        ny: usize,
        #[arg(long, default_value_t = 2)]
        nz: usize,
        /// Box side lengths as `x,y,z`.
        #[arg(long, default_value = "3,1,1", value_delimiter = ',')]
        extent: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate and export a dataset directory.
    GenData {
        #[arg(long)]
        family: String,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides the square mesh resolution of 2D families.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the training split of a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "agfns")]
        variant: String,
        /// Lattice bandwidth per level, e.g. `4` or `4,3,2`.
        #[arg(long, value_delimiter = ',')]
        bandwidths: Option<Vec<usize>>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 10.0)]
        clip: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Solve one dataset sample and write a JSON report.
    Solve {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value = "hybrid-solver")]
        method: String,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Iteration-count table over the held-out samples.
    Bench {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "hybrid-solver,hybrid-precond-fgmres,jacobi-solver,jacobi-precond-fgmres,unpreconditioned-fgmres")]
        methods: Vec<String>,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long)]
        max_iters: Option<usize>,
        /// Limit on the number of held-out samples.
        #[arg(long)]
        limit: Option<usize>,
        /// Output directory for summary.csv, samples.csv, residuals.csv and report.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Local Fourier analysis of weighted block Jacobi.
    Lfa {
        #[arg(long, default_value_t = 0.4)]
        nu: f64,
        #[arg(long, default_value_t = 1.0)]
        youngs: f64,
        #[arg(long, default_value_t = 1.0)]
        h: f64,
        #[arg(long, default_value_t = 2.0 / 3.0)]
        omega: f64,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Error-spectrum dump per cycle for one sample.
    Spectrum {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 5)]
        iters: usize,
        #[arg(long)]
        out: PathBuf,
        /// Optional per-stage l2 summary.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Render a residual CSV as an SVG plot.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Expands `--config <file>` into `--key value` flags. Keys also given on the
/// command line are dropped so the explicit flag wins.
fn expand_config(args: Vec<String>) -> Result<Vec<String>> {
    let Some(pos) = args.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(args);
    };
    let mut args = args;
    let path = if let Some(p) = args[pos].strip_prefix("--config=") {
        let p = p.to_string();
        args.remove(pos);
        p
    } else {
        if pos + 1 >= args.len() {
            bail!("--config needs a file argument");
        }
        args.remove(pos);
        args.remove(pos)
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let mut extra = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{path}:{}: expected `key = value`", i + 1);
        };
        let key = key.trim().replace('_', "-");
        let flag = format!("--{key}");
        if args.iter().any(|a| *a == flag || a.starts_with(&format!("{flag}="))) {
            continue;
        }
        let value = value.trim().trim_matches('"');
        match value {
            "true" => extra.push(format!("--{key}")),
            "false" => {}
            v => {
                extra.push(format!("--{key}"));
                extra.push(v.to_string());
            }
        }
    }
    let at = args.iter().skip(1).position(|a| !a.starts_with('-')).map_or(args.len(), |p| p + 2);
    args.splice(at.min(args.len())..at.min(args.len()), extra);
    Ok(args)
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path, family: Family) -> Result<FnsModel> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading weights {}", path.display()))?;
    let model = FnsModel::from_checkpoint(&ckpt)?;
    if model.config.meta_in != family.feature_dim() || model.config.dim != family.dim() {
        bail!("weights {} were trained for a different problem family", path.display());
    }
    Ok(model)
}

fn held_out(data: &LoadedDataset, limit: Option<usize>) -> Result<Vec<Sample>> {
    let idx = data.dataset.spec.test_indices();
    let n = limit.unwrap_or(usize::MAX);
    let samples = idx.take(n).map(|i| data.sample(i)).collect::<gfns::Result<Vec<_>>>()?;
    if samples.is_empty() {
        bail!("dataset has no held-out samples");
    }
    Ok(samples)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenMesh { kind, n, nx, ny, nz, extent, seed, out } => {
            let mesh = match kind {
                MeshKind::Square => build_structured_square(n)?,
                MeshKind::Unstructured => build_unstructured_2d(n, seed)?,
                MeshKind::Box => {
                    let [x, y, z] = extent[..] else { bail!("--extent needs three values") };
                    build_structured_box(nx, ny, nz, [x, y, z])?
                }
            };
            mesh.save(&out)?;
            log::info!("wrote {} nodes, {} elements to {}", mesh.num_nodes(), mesh.num_elements(), out.display());
        }
        Command::GenData { family, samples, seed, n, train_fraction, out } => {
            let family = Family::parse(&family)?;
            let mut spec = DatasetSpec::new(family, samples, seed);
            spec.train_fraction = train_fraction;
            if let Some(n) = n {
                if family.dim() != 2 {
                    bail!("--n only applies to 2D families");
                }
                spec.mesh = MeshSpec::Square { n };
            }
            let dataset = Dataset::new(spec)?;
            export_dataset(&dataset, &out)?;
            log::info!("wrote {samples} samples to {}", out.display());
        }
        Command::Train { dataset, variant, bandwidths, k, batch, epochs, lr, clip, seed, resume, out, log } => {
            let data = load_dataset(&dataset)?;
            let family = data.dataset.spec.family;
            let variant = Variant::parse(&variant)?;
            let train = data.dataset.spec.train_indices().map(|i| data.sample(i)).collect::<gfns::Result<Vec<_>>>()?;
            let config = TrainConfig { epochs, batch_size: batch, lr, unroll: k, clip, seed };
            let mut trainer = match resume {
                Some(path) => {
                    let ckpt = Checkpoint::load(&path)?;
                    Trainer::from_checkpoint(&ckpt, config)?
                }
                None => {
                    let bw = bandwidths.unwrap_or_else(|| if variant == Variant::MlAgFns { vec![4, 3, 2] } else { vec![4] });
                    let mut mc = ModelConfig::new(variant, family.dim(), bw, family.feature_dim());
                    mc.seed = seed;
                    Trainer::new(FnsModel::new(mc)?, config)?
                }
            };
            let contexts = prepare_contexts(&train, trainer.model.config.smoother.omega)?;
            let mut log_file = match &log {
                Some(p) if trainer.epoch > 0 && p.exists() => Some(fs::OpenOptions::new().append(true).open(p)?),
                Some(p) => Some(create_log(p)?),
                None => None,
            };
            let result = trainer.fit(&contexts, log_file.as_mut().map(|f| f as &mut dyn std::io::Write));
            trainer.best_checkpoint().save(&out)?;
            result?;
            log::info!("best loss {:?}, checkpoint {}", trainer.best_loss, out.display());
        }
        Command::Solve { dataset, sample, weights, method, tol, max_iters, out } => {
            let data = load_dataset(&dataset)?;
            let family = data.dataset.spec.family;
            let s = data.sample(sample)?;
            let method = Method::parse(&method)?;
            let system = assemble::<f64>(&s.problem)?;
            let opts = SolveOptions { tol, max_iters: max_iters.unwrap_or_else(|| default_cap(family.dim())), ..Default::default() };
            let model = weights.map(|w| load_model(&w, family)).transpose()?;
            let (corrector, smoother) = match &model {
                Some(m) => {
                    let ctx = SampleContext::new(&s.problem.mesh, &system, s.features.clone(), m.config.smoother.omega)?;
                    (Some(corrector_for(m, &ctx)?), m.config.smoother)
                }
                None => (None, gfns::smoother::JacobiConfig::default_for_dim(family.dim())),
            };
            let report = run_method(method, &system, corrector.as_ref().map(|c| c as &dyn Corrector), &smoother, &opts)?;
            let json = serde_json::json!({
                "provenance": Provenance::new(command_line(), Some(data.dataset.spec.seed)),
                "sample": sample,
                "method": method.name(),
                "report": report,
            });
            let text = serde_json::to_string_pretty(&json)?;
            match out {
                Some(p) => write(&p, &text)?,
                None => println!("{text}"),
            }
        }
        Command::Bench { dataset, weights, methods, tol, max_iters, limit, out } => {
            let data = load_dataset(&dataset)?;
            let family = data.dataset.spec.family;
            let methods = methods.iter().map(|m| Method::parse(m)).collect::<gfns::Result<Vec<_>>>()?;
            let model = weights.map(|w| load_model(&w, family)).transpose()?;
            let spec = BenchSpec { methods, tol, max_iters: max_iters.unwrap_or_else(|| default_cap(family.dim())) };
            let samples = held_out(&data, limit)?;
            let table = bench(&samples, model.as_ref(), &spec)?;
            let prov = Provenance::new(command_line(), Some(data.dataset.spec.seed));
            fs::create_dir_all(&out)?;
            write(&out.join("summary.csv"), &table.summary_csv(&prov))?;
            write(&out.join("samples.csv"), &table.samples_csv(&prov))?;
            write(&out.join("residuals.csv"), &table.residuals_csv(&prov))?;
            let json = serde_json::json!({ "provenance": prov, "summary": table.summary(), "records": table.records });
            write(&out.join("report.json"), &serde_json::to_string_pretty(&json)?)?;
            for s in table.summary() {
                println!("{:<26} {}", s.method.name(), s.display());
            }
        }
        Command::Lfa { nu, youngs, h, omega, resolution, out } => {
            let sweep = smoothing_factor_sweep(&LfaConfig { nu, youngs, h, omega, resolution })?;
            let prov = Provenance::new(command_line(), None);
            write(&out, &format!("{}{}", prov.csv_header(), sweep.to_csv()))?;
            println!("smoothing factor {:.6}, shear damping {:.6}", sweep.mu_smooth, sweep.shear_damping);
        }
        Command::Spectrum { dataset, sample, weights, iters, out, summary } => {
            let data = load_dataset(&dataset)?;
            let family = data.dataset.spec.family;
            let model = load_model(&weights, family)?;
            let s = data.sample(sample)?;
            let system = assemble::<f64>(&s.problem)?;
            let ctx = SampleContext::new(&s.problem.mesh, &system, s.features.clone(), model.config.smoother.omega)?;
            let dump = spectrum_dump(&model, &ctx, &system, iters)?;
            let prov = Provenance::new(command_line(), Some(data.dataset.spec.seed));
            write(&out, &dump.to_csv(&prov))?;
            if let Some(p) = summary {
                write(&p, &dump.summary_csv(&prov))?;
            }
        }
        Command::Plot { input, sample, out } => {
            let csv = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            write(&out, &plot_residuals(&csv, sample)?)?;
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = expand_config(std::env::args().collect())?;
    run(Cli::parse_from(args))
}
