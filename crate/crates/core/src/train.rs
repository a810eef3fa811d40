//! Causal-LM training: AdamW with linear warmup and cosine decay.
//!
//! Each document is processed at its own length, so no padding tokens are
//! ever materialized and the loss needs no mask. A batch's loss is the mean of
//! its documents' mean token cross-entropies. Gradients are accumulated in
//! fixed chunks of [`REDUCTION_CHUNK`] documents and the chunk sums are added
//! in order, which makes results bit-identical between the serial and the
//! parallel path.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{checkpoint, LmModel, Tokenizer};
use crate::par::{self, Exec};
use crate::seeding;

pub const REDUCTION_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub lr_schedule: LrSchedule,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default)]
    pub checkpoint_every_epoch: bool,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    /// Fine-tuning hyper-parameters used for the 7B-scale runs.
    pub fn paper(seed: u64) -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 1e-5,
            epochs: 5,
            lr_schedule: LrSchedule::Cosine,
            warmup_ratio: 0.03,
            weight_decay: 0.0,
            seed,
            checkpoint_every_epoch: false,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
        }
    }

    /// From-scratch profile for the tiny model.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 3e-4,
            epochs: 30,
            ..Self::paper(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Argument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Argument(format!(
                "warmup_ratio {} outside [0, 1)",
                self.warmup_ratio
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument("learning_rate must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Argument("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Learning rate at every optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct LrTrace {
    peak: f64,
    warmup_steps: usize,
    total_steps: usize,
    schedule: LrSchedule,
}

impl LrTrace {
    pub fn new(cfg: &TrainConfig, total_steps: usize) -> Self {
        let warmup_steps = (cfg.warmup_ratio * total_steps as f64).ceil() as usize;
        LrTrace {
            peak: cfg.learning_rate,
            warmup_steps: warmup_steps.min(total_steps),
            total_steps,
            schedule: cfg.lr_schedule,
        }
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_steps
    }

    /// `peak·(s+1)/warmup` during warmup, then half-cosine from the peak down
    /// to zero at `total_steps`.
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            LrSchedule::Constant => self.peak,
            LrSchedule::Cosine => {
                let span = (self.total_steps - self.warmup_steps).max(1) as f64;
                let progress = (step - self.warmup_steps) as f64 / span;
                0.5 * self.peak * (1.0 + (PI * progress).cos())
            }
        }
    }
}

/// Decoupled-weight-decay Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epoch_mean_loss: Vec<f64>,
    pub wall_time_secs: f64,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainLog {
    /// `step,epoch,loss,lr` with one row per optimizer step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,loss,lr\n");
        for s in &self.steps {
            let _ = writeln!(out, "{},{},{},{}", s.step, s.epoch, s.loss, s.lr);
        }
        out
    }
}

/// Per-epoch metrics appended by evaluation hooks.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub hook: String,
    pub metric: String,
    pub value: f64,
}

impl MetricTable {
    pub fn series(&self, hook: &str, metric: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.hook == hook && r.metric == metric)
            .map(|r| (r.epoch, r.value))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,hook,metric,value\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.hook, r.metric, r.value);
        }
        out
    }
}

/// Evaluator invoked on the model at the end of every epoch.
pub trait EpochHook {
    fn name(&self) -> &str;
    fn evaluate(&mut self, epoch: usize, model: &LmModel, tokenizer: &Tokenizer) -> Result<Vec<(String, f64)>>;
}

/// Mean of per-document mean token losses, with its gradient accumulated into `grad`.
pub fn batch_loss_and_grad(model: &LmModel, docs: &[&[u32]], exec: Exec, grad: &mut [f64]) -> Result<f64> {
    if docs.is_empty() {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    let weight = 1.0 / docs.len() as f64;
    let n = model.parameter_count();
    let chunks: Vec<&[&[u32]]> = docs.chunks(REDUCTION_CHUNK).collect();
    let partials = par::try_map(exec, &chunks, |chunk| -> Result<(f64, Vec<f64>)> {
        let mut g = vec![0.0; n];
        let mut loss = 0.0;
        for ids in chunk.iter() {
            loss += model.accumulate_loss_grad(ids, weight, &mut g)?;
        }
        Ok((loss, g))
    })?;
    let mut total = 0.0;
    for (loss, g) in partials {
        total += loss;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok(total * weight)
}

/// Mean of per-document mean token losses, without gradients.
pub fn batch_loss(model: &LmModel, docs: &[&[u32]]) -> Result<f64> {
    if docs.is_empty() {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    let mut total = 0.0;
    for ids in docs {
        total += model.sequence_loss(ids)?;
    }
    Ok(total / docs.len() as f64)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_param: usize,
    pub n_params: usize,
}

/// Relative error between an analytic and a numeric derivative. Magnitudes
/// below `1e-6` are compared on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the analytic gradient of [`batch_loss`] with central differences
/// of step `epsilon` for every parameter.
pub fn gradient_check(model: &LmModel, batch: &[&[u32]], epsilon: f64) -> Result<GradCheckReport> {
    let n = model.parameter_count();
    if n > 10_000 {
        return Err(Error::Argument(format!(
            "gradient check is for micro models (≤ 10^4 parameters), got {n}"
        )));
    }
    let mut analytic = vec![0.0; n];
    batch_loss_and_grad(model, batch, Exec::Serial, &mut analytic)?;
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_param: 0,
        n_params: n,
    };
    for i in 0..n {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + epsilon;
        let up = batch_loss(&probe, batch)?;
        probe.params_mut()[i] = orig - epsilon;
        let down = batch_loss(&probe, batch)?;
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let rel = relative_error(analytic[i], numeric);
        report.max_abs_error = report.max_abs_error.max((analytic[i] - numeric).abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_param = i;
        }
    }
    Ok(report)
}

/// Training driver. Holds the execution mode and optional checkpoint directory.
#[derive(Debug, Clone, Default)]
pub struct Trainer {
    pub exec: Exec,
    pub checkpoint_dir: Option<PathBuf>,
    pub init_seed: u64,
}

impl Trainer {
    pub fn new(exec: Exec) -> Self {
        Trainer {
            exec,
            ..Default::default()
        }
    }

    pub fn with_checkpoints(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn train<S: AsRef<str>>(
        &self,
        model: LmModel,
        corpus: &[S],
        tokenizer: &Tokenizer,
        cfg: &TrainConfig,
    ) -> Result<(LmModel, TrainLog)> {
        let (model, log, _) = self.train_with_eval_hooks(model, corpus, tokenizer, cfg, &mut [])?;
        Ok((model, log))
    }

    pub fn train_with_eval_hooks<S: AsRef<str>>(
        &self,
        mut model: LmModel,
        corpus: &[S],
        tokenizer: &Tokenizer,
        cfg: &TrainConfig,
        hooks: &mut [&mut dyn EpochHook],
    ) -> Result<(LmModel, TrainLog, MetricTable)> {
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(Error::EmptyInput("training corpus is empty".into()));
        }
        let docs = corpus
            .iter()
            .map(|t| tokenizer.encode(t.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let max_ctx = model.config().max_context;
        if let Some(long) = docs.iter().find(|d| d.len() - 1 > max_ctx) {
            return Err(Error::Context {
                len: long.len() - 1,
                max: max_ctx,
            });
        }

        let steps_per_epoch = docs.len().div_ceil(cfg.batch_size);
        let total_steps = steps_per_epoch * cfg.epochs;
        let lr_trace = LrTrace::new(cfg, total_steps);
        let mut opt = AdamW::new(model.parameter_count(), cfg);
        let mut log = TrainLog::default();
        let mut metrics = MetricTable::default();
        let started = Instant::now();
        let mut grad = vec![0.0; model.parameter_count()];
        let mut order: Vec<usize> = (0..docs.len()).collect();
        let mut step = 0;

        for epoch in 1..=cfg.epochs {
            let mut rng = seeding::rng(cfg.seed, "epoch-shuffle", epoch as u64);
            order.sort_unstable();
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch_idx in order.chunks(cfg.batch_size) {
                let batch: Vec<&[u32]> = batch_idx.iter().map(|&i| docs[i].as_slice()).collect();
                grad.iter_mut().for_each(|g| *g = 0.0);
                let lr = lr_trace.at(step);
                let loss = batch_loss_and_grad(&model, &batch, self.exec, &mut grad)?;
                if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFinite { step, lr, loss });
                }
                opt.step(model.params_mut(), &grad, lr);
                log.steps.push(StepRecord {
                    step,
                    epoch,
                    loss,
                    lr,
                });
                epoch_loss += loss;
                step += 1;
            }
            let mean = epoch_loss / steps_per_epoch as f64;
            log.epoch_mean_loss.push(mean);
            log::debug!("epoch {epoch}/{} mean loss {mean:.4}", cfg.epochs);

            if let Some(dir) = &self.checkpoint_dir {
                if cfg.checkpoint_every_epoch || epoch == cfg.epochs {
                    let path = dir.join(format!("epoch-{epoch:03}"));
                    checkpoint::save(
                        &path,
                        &model,
                        tokenizer,
                        self.init_seed,
                        epoch,
                        serde_json::to_value(cfg)?,
                    )?;
                    log.checkpoints.push(path);
                }
            }
            for hook in hooks.iter_mut() {
                let values = hook.evaluate(epoch, &model, tokenizer).map_err(|e| Error::Hook {
                    name: hook.name().to_string(),
                    epoch,
                    source: Box::new(e),
                })?;
                for (metric, value) in values {
                    metrics.rows.push(MetricRow {
                        epoch,
                        hook: hook.name().to_string(),
                        metric,
                        value,
                    });
                }
            }
        }
        log.wall_time_secs = started.elapsed().as_secs_f64();
        Ok((model, log, metrics))
    }
}

/// Convenience wrapper: parallel execution, no checkpoints.
pub fn train<S: AsRef<str>>(
    model: LmModel,
    corpus: &[S],
    tokenizer: &Tokenizer,
    cfg: &TrainConfig,
) -> Result<(LmModel, TrainLog)> {
    Trainer::default().train(model, corpus, tokenizer, cfg)
}

pub fn write_log_csv(log: &TrainLog, path: &Path) -> Result<()> {
    fs::write(path, log.to_csv()).map_err(|e| Error::io(path, e))
}
