//! Mini-batch SGD over a graph corpus.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{differentiate, GradProgram};
use crate::engine::{Engine, EngineOptions};
use crate::error::TrainError;
use crate::graph::{parse_graphs, GraphBatch, InputGraph};
use crate::memory::{ExchangeBuffers, ParamSet, TensorTable};
use crate::models::{fnv1a, init_params, loss_and_seed, ModelPreset, Targets};
use crate::schedule::Scheduler;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub engine: EngineOptions,
    /// One vertex per task instead of one topological level per task, with
    /// lazy batching disabled.
    pub serial: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 1,
            lr: 0.05,
            seed: 0,
            engine: EngineOptions::default(),
            serial: false,
        }
    }
}

impl TrainerConfig {
    /// Engine options actually used: the serial policy runs every operator
    /// one vertex at a time, so it never defers work to a batched flush.
    pub fn effective_engine(&self) -> EngineOptions {
        if self.serial {
            EngineOptions { lazy: false, ..self.engine }
        } else {
            self.engine
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// One row per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    /// Mean loss per sample.
    pub loss: f64,
    /// Corpus parsing (first epoch only) plus mini-batch assembly.
    pub t_graph_io_s: f64,
    pub t_schedule_s: f64,
    /// Kernels, buffer copies, loss and parameter updates.
    pub t_compute_s: f64,
    pub kernel_dispatches: u64,
    pub bytes_copied: u64,
}

impl EpochRow {
    pub fn total_s(&self) -> f64 {
        self.t_graph_io_s + self.t_schedule_s + self.t_compute_s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub rows: Vec<EpochRow>,
    /// Times the corpus file was parsed during the run.
    pub corpus_parses: usize,
    pub barrier_waits: u64,
    pub params: ParamSet,
}

impl RunReport {
    pub fn final_loss(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn total_s(&self) -> f64 {
        self.rows.iter().map(EpochRow::total_s).sum()
    }
}

/// Parses the corpus once, then trains.
pub fn train_from_path(preset: &ModelPreset, path: impl AsRef<Path>, cfg: &TrainerConfig) -> Result<RunReport, TrainError> {
    let t = Instant::now();
    let corpus = parse_graphs(path)?;
    let parse_s = t.elapsed().as_secs_f64();
    let mut report = train(preset, &corpus, cfg)?;
    report.corpus_parses = 1;
    if let Some(first) = report.rows.first_mut() {
        first.t_graph_io_s += parse_s;
    }
    Ok(report)
}

/// Trains `preset` on an in-memory corpus.
pub fn train(preset: &ModelPreset, corpus: &[InputGraph], cfg: &TrainerConfig) -> Result<RunReport, TrainError> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::Config("corpus is empty".into()));
    }
    preset.check_corpus(corpus)?;
    let grad = differentiate(&preset.vertex_function()?)?;
    let mut trainer = Trainer::new(preset.clone(), &grad, cfg.effective_engine());
    init_params(&mut trainer.params, cfg.seed);

    let t = Instant::now();
    let targets: Vec<Targets> = corpus.iter().map(Targets::of).collect();
    let prep_s = t.elapsed().as_secs_f64();

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(fnv1a(b"shuffle"));
    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let before = trainer.engine.counters();
        let mut io = if epoch == 1 { prep_s } else { 0.0 };
        let (mut sched, mut compute, mut loss_sum) = (0.0, 0.0, 0.0);
        order.shuffle(&mut rng);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let t = Instant::now();
            let batch = GraphBatch::new(chunk.iter().map(|&i| &corpus[i]).collect());
            let tg: Vec<&Targets> = chunk.iter().map(|&i| &targets[i]).collect();
            io += t.elapsed().as_secs_f64();
            let step = trainer.step(&batch, &tg, cfg.serial)?;
            sched += step.schedule_s;
            compute += step.compute_s;
            let batch_loss = step.loss;
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    loss: batch_loss,
                });
            }
            let t = Instant::now();
            trainer.params.sgd_step(cfg.lr);
            compute += t.elapsed().as_secs_f64();
            loss_sum += batch_loss;
        }
        let delta = trainer.engine.counters() - before;
        rows.push(EpochRow {
            epoch,
            loss: loss_sum / corpus.len() as f64,
            t_graph_io_s: io,
            t_schedule_s: sched,
            t_compute_s: compute,
            kernel_dispatches: delta.kernel_dispatches,
            bytes_copied: delta.bytes_copied,
        });
    }
    Ok(RunReport {
        rows,
        corpus_parses: 0,
        barrier_waits: trainer.engine.counters().barrier_waits,
        params: trainer.params,
    })
}

/// Result of one forward and backward pass over a mini-batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    /// Summed loss over the batch's loss vertices.
    pub loss: f64,
    pub schedule_s: f64,
    pub compute_s: f64,
}

/// Engine, storage and parameters for one model.
#[derive(Debug)]
pub struct Trainer {
    pub preset: ModelPreset,
    pub engine: Engine,
    pub table: TensorTable,
    pub bufs: ExchangeBuffers,
    pub params: ParamSet,
    pub scheduler: Scheduler,
}

impl Trainer {
    pub fn new(preset: ModelPreset, grad: &GradProgram, opts: EngineOptions) -> Self {
        let engine = Engine::new(grad, opts);
        Self {
            preset,
            table: engine.new_table(),
            params: engine.new_params(),
            bufs: ExchangeBuffers::new(),
            scheduler: Scheduler::new(),
            engine,
        }
    }

    /// Forward pass only; the pushed rows are left in `self.bufs.push`.
    pub fn forward(&mut self, batch: &GraphBatch, serial: bool) -> Result<(), TrainError> {
        let stack = if serial {
            self.scheduler.serial_schedule(batch)
        } else {
            self.scheduler.forward_schedule(batch)
        }
        .map_err(crate::error::EngineError::from)?;
        self.engine
            .forward(batch, &stack, &mut self.table, &mut self.params, &mut self.bufs)?;
        Ok(())
    }

    /// Zeroes the gradients, runs both passes and leaves `∇(loss / K)` in
    /// the parameter gradients, `K` being the number of graphs.
    pub fn step(&mut self, batch: &GraphBatch, targets: &[&Targets], serial: bool) -> Result<StepResult, TrainError> {
        let t = Instant::now();
        let stack = if serial {
            self.scheduler.serial_schedule(batch)
        } else {
            self.scheduler.forward_schedule(batch)
        }
        .map_err(crate::error::EngineError::from)?;
        let mut schedule_s = t.elapsed().as_secs_f64();

        let t = Instant::now();
        self.params.zero_grads();
        self.engine
            .forward(batch, &stack, &mut self.table, &mut self.params, &mut self.bufs)?;
        let loss = loss_and_seed(
            self.preset.loss,
            batch,
            targets,
            &self.bufs.push,
            &mut self.bufs.push_grad,
            batch.len() as f64,
        )
        .map_err(|e| crate::error::EngineError::Kernel { task: usize::MAX, source: e })?;
        let mut compute_s = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let tasks = self
            .scheduler
            .backward_schedule(stack)
            .map_err(crate::error::EngineError::from)?;
        schedule_s += t.elapsed().as_secs_f64();

        let t = Instant::now();
        self.engine
            .backward(batch, &tasks, &mut self.table, &mut self.params, &mut self.bufs)?;
        compute_s += t.elapsed().as_secs_f64();
        Ok(StepResult {
            loss,
            schedule_s,
            compute_s,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_corpus, CorpusSpec};
    use crate::models::ModelKind;

    #[test]
    fn toy_regression_descends() {
        let corpus = generate_corpus(&CorpusSpec::Cbt { leaves: 4, count: 32 }, 3, 1).unwrap();
        let preset = ModelPreset::new(ModelKind::TreeFc, 4, 3);
        let cfg = TrainerConfig {
            batch_size: 8,
            epochs: 10,
            lr: 0.2,
            ..TrainerConfig::default()
        };
        let r = train(&preset, &corpus, &cfg).unwrap();
        assert_eq!(r.rows.len(), 10);
        assert!(r.rows[9].loss < r.rows[0].loss, "{:?}", r.rows);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let corpus = generate_corpus(&CorpusSpec::Random { min_n: 3, max_n: 9, arity: 2, count: 12, seed: 4 }, 2, 4).unwrap();
        let preset = ModelPreset::new(ModelKind::TreeLstm, 3, 2);
        let cfg = TrainerConfig {
            batch_size: 5,
            epochs: 2,
            ..TrainerConfig::default()
        };
        let a = train(&preset, &corpus, &cfg).unwrap();
        let b = train(&preset, &corpus, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.rows.iter().map(|r| r.loss).collect::<Vec<_>>(), b.rows.iter().map(|r| r.loss).collect::<Vec<_>>());
    }

    #[test]
    fn zero_batch_size_rejected() {
        let corpus = generate_corpus(&CorpusSpec::Chain { steps: 2, count: 1 }, 1, 0).unwrap();
        let cfg = TrainerConfig {
            batch_size: 0,
            ..TrainerConfig::default()
        };
        let preset = ModelPreset::new(ModelKind::FixedLstm, 2, 1);
        assert!(matches!(train(&preset, &corpus, &cfg), Err(TrainError::Config(_))));
    }
}
