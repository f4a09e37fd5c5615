//! Unsupervised training on the unrolled relative-residual loss.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::datasets::{sample_rng, Sample};
use crate::error::{Error, Result};
use crate::fem::assemble;
use crate::linalg::l2;
use crate::nn::{clip_global_norm, AdamState, Checkpoint, FnsModel, ParamStore, SampleContext};
use crate::solver::unrolled_loss;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Hybrid cycles unrolled inside the loss.
    pub unroll: usize,
    /// Global gradient norm bound.
    pub clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 100, batch_size: 8, lr: 1e-3, unroll: 5, clip: 10.0, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.unroll == 0 {
            return Err(Error::InvalidArgument("batch size and unroll depth must be positive".into()));
        }
        if !(self.lr > 0.0 && self.clip > 0.0) {
            return Err(Error::InvalidArgument("learning rate and clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// Assembles training contexts, skipping samples with a zero right-hand side.
pub fn prepare_contexts(samples: &[Sample], omega: f64) -> Result<Vec<SampleContext>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let sys = assemble::<f64>(&s.problem)?;
        if l2(sys.rhs.as_slice()) == 0.0 {
            log::warn!("sample {} has a zero right-hand side and is excluded", s.index);
            continue;
        }
        out.push(SampleContext::new(&s.problem.mesh, &sys, s.features.clone(), omega)?);
    }
    Ok(out)
}

/// Loss and parameter gradients of one sample.
pub fn sample_loss_and_grad(model: &FnsModel, ctx: &SampleContext, unroll: usize) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let vars = model.params.bind(&mut g)?;
    let loss = unrolled_loss(&mut g, model, &vars, ctx, unroll)?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Diverged(format!("non-finite training loss {value}")));
    }
    let grads = g.backward(loss)?;
    Ok((value, vars.iter().map(|v| grads.wrt(&g, *v)).collect()))
}

/// Mean unrolled loss without gradients.
pub fn evaluate_loss(model: &FnsModel, contexts: &[SampleContext], unroll: usize) -> Result<f64> {
    if contexts.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let mut total = 0.0;
    for ctx in contexts {
        let mut g = Graph::new();
        let vars = model.params.params.iter().map(|p| g.constant(p.values.clone(), p.rows, p.cols)).collect::<Result<Vec<_>>>()?;
        let loss = unrolled_loss(&mut g, model, &vars, ctx, unroll)?;
        total += g.scalar(loss);
    }
    Ok(total / contexts.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_seconds: f64,
}

/// Model, optimizer and bookkeeping of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: FnsModel,
    pub adam: AdamState,
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub best_loss: Option<f64>,
    pub best_params: Option<ParamStore>,
    pub history: Vec<EpochStats>,
}

impl Trainer {
    pub fn new(model: FnsModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(&model.params, config.lr);
        Ok(Self { model, adam, config, epoch: 0, best_loss: None, best_params: None, history: Vec::new() })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = FnsModel::from_checkpoint(ckpt)?;
        let mut adam = ckpt.adam.clone().unwrap_or_else(|| AdamState::new(&model.params, config.lr));
        adam.lr = config.lr;
        Ok(Self { model, adam, config, epoch: ckpt.epoch, best_loss: ckpt.best_loss, best_params: None, history: Vec::new() })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.model.to_checkpoint(Some(self.adam.clone()), self.epoch, self.best_loss)
    }

    /// Checkpoint holding the parameters with the lowest epoch loss seen so far.
    pub fn best_checkpoint(&self) -> Checkpoint {
        let mut ck = self.checkpoint();
        if let Some(best) = &self.best_params {
            ck.params.clone_from(&best.params);
        }
        ck
    }

    /// One pass over `contexts` in a shuffled order derived from `(seed, epoch)`.
    pub fn train_epoch(&mut self, contexts: &[SampleContext]) -> Result<EpochStats> {
        if contexts.is_empty() {
            return Err(Error::InvalidArgument("no training samples".into()));
        }
        let start = Instant::now();
        let mut order: Vec<usize> = (0..contexts.len()).collect();
        order.shuffle(&mut sample_rng(self.config.seed, self.epoch));
        let mut total = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let mut acc: Vec<Vec<f64>> = self.model.params.params.iter().map(|p| vec![0.0; p.values.len()]).collect();
            for &i in batch {
                let (loss, grads) = sample_loss_and_grad(&self.model, &contexts[i], self.config.unroll)?;
                total += loss;
                for (a, g) in acc.iter_mut().zip(grads) {
                    a.iter_mut().zip(g).for_each(|(x, y)| *x += y / batch.len() as f64);
                }
            }
            clip_global_norm(&mut acc, self.config.clip);
            self.adam.step(&mut self.model.params, &acc)?;
        }
        self.epoch += 1;
        let stats = EpochStats { epoch: self.epoch, mean_loss: total / contexts.len() as f64, wall_seconds: start.elapsed().as_secs_f64() };
        if self.best_loss.is_none_or(|b| stats.mean_loss < b) {
            self.best_loss = Some(stats.mean_loss);
            self.best_params = Some(self.model.params.clone());
        }
        self.history.push(stats);
        Ok(stats)
    }

    /// Runs the remaining epochs up to `config.epochs`, appending to `log` as CSV.
    pub fn fit(&mut self, contexts: &[SampleContext], mut log: Option<&mut dyn std::io::Write>) -> Result<Vec<EpochStats>> {
        let mut out = Vec::new();
        while self.epoch < self.config.epochs {
            let s = self.train_epoch(contexts)?;
            log::info!("epoch {} loss {:.6e} ({:.2}s)", s.epoch, s.mean_loss, s.wall_seconds);
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{},{},{}", s.epoch, s.mean_loss, s.wall_seconds)?;
            }
            out.push(s);
        }
        Ok(out)
    }
}

pub const LOG_HEADER: &str = "epoch,mean_loss,wall_seconds";

/// Creates a training log with its header line.
pub fn create_log(path: impl AsRef<Path>) -> Result<std::fs::File> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{LOG_HEADER}")?;
    Ok(f)
}
