//! Minibatch training loop.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{dalg_loss, LossWeights};
use crate::model::{DalgModel, StopGradient};
use crate::optim::{AdamW, LrSchedule};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Hard cap on optimizer steps; `None` runs every epoch in full.
    pub max_steps: Option<usize>,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss_weights: LossWeights,
    pub stop_gradient: StopGradient,
    /// Seeds the minibatch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::paper()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 130,
            warmup_epochs: 5,
            batch_size: 16,
            max_steps: None,
            base_lr: 0.00075,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss_weights: LossWeights::default(),
            stop_gradient: StopGradient::Both,
            seed: 0,
        }
    }

    /// 50 epochs of 10 batches over 8 x 20 synthetic images.
    pub fn toy() -> Self {
        TrainConfig {
            epochs: 50,
            warmup_epochs: 3,
            max_steps: Some(500),
            base_lr: 0.002,
            ..TrainConfig::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "need warmup_epochs < epochs, got {} and {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("invalid AdamW moments".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n_samples: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(n_samples);
        self.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn schedule(&self, n_samples: usize) -> LrSchedule {
        let total = self.total_steps(n_samples);
        let warmup = (self.warmup_epochs * self.steps_per_epoch(n_samples)).min(total.saturating_sub(1));
        LrSchedule {
            base_lr: self.base_lr,
            warmup_steps: warmup,
            total_steps: total,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub global_loss: f64,
    pub local_loss: Option<f64>,
    pub total_loss: f64,
    /// Fraction of the batch whose nearest class centre is the label.
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub global_loss: f64,
    pub local_loss: Option<f64>,
    pub total_loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

/// Hooks called from [`train`]; both default to no-ops.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) {}
    fn on_epoch(&mut self, _model: &DalgModel, _summary: &EpochSummary) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Optimizer state plus schedule; one call to [`Trainer::step`] per batch.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub schedule: LrSchedule,
    opt: AdamW,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, n_samples: usize) -> Result<Self> {
        cfg.validate()?;
        if n_samples == 0 {
            return Err(Error::Empty("train"));
        }
        Ok(Trainer {
            cfg: cfg.clone(),
            schedule: cfg.schedule(n_samples),
            opt: AdamW::new(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay),
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Forward, backward and one AdamW update on `images [B, S, S, 3]`.
    pub fn step(&mut self, model: &mut DalgModel, images: &Tensor, labels: &[usize], epoch: usize) -> Result<StepRecord> {
        let step = self.step;
        let diverged = |e: Error| match e {
            Error::NonFinite { op } => Error::Diverged {
                step,
                reason: format!("non-finite value in {op}"),
            },
            other => other,
        };
        let (grads, record) = {
            let mut g = Graph::new(&model.store);
            let x = g.constant(images.clone())?;
            let loss = dalg_loss(model, &mut g, x, labels, self.cfg.stop_gradient, self.cfg.loss_weights)
                .map_err(diverged)?;
            let record = StepRecord {
                step,
                epoch,
                lr: self.schedule.lr_at(step),
                global_loss: g.value(loss.global).item()?,
                local_loss: match loss.local {
                    Some(l) => Some(g.value(l).item()?),
                    None => None,
                },
                total_loss: g.value(loss.total).item()?,
                accuracy: accuracy(g.value(loss.cosines), labels),
            };
            (g.backward(loss.total).map_err(diverged)?, record)
        };
        model.store.zero_grad();
        model.store.accumulate(&grads);
        self.opt.step(&mut model.store, record.lr);
        if let Some((_, p)) = model.store.iter().find(|(_, p)| !p.value.is_finite()) {
            return Err(Error::Diverged {
                step,
                reason: format!("parameter {} became non-finite", p.name),
            });
        }
        self.step += 1;
        Ok(record)
    }
}

/// Share of rows of `scores [B, n]` whose argmax equals the label.
pub fn accuracy(scores: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let n = scores.shape()[1];
    let hits = scores
        .data()
        .chunks(n)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs the configured number of steps over `(images, labels)` in seeded
/// shuffled minibatches.
pub fn train(
    model: &mut DalgModel,
    images: &[Tensor],
    labels: &[usize],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainLog> {
    if images.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let mut trainer = Trainer::new(cfg, images.len())?;
    let total = cfg.total_steps(images.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut log = TrainLog::default();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let first = log.steps.len();
        for chunk in order.chunks(cfg.batch_size) {
            if trainer.steps_done() >= total {
                break 'epochs;
            }
            let batch: Vec<Tensor> = chunk.iter().map(|&i| images[i].clone()).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let record = trainer.step(model, &Tensor::stack(&batch)?, &batch_labels, epoch)?;
            observer.on_step(&record);
            log.steps.push(record);
        }
        let summary = summarize(epoch, &log.steps[first..]);
        observer.on_epoch(model, &summary)?;
        log.epochs.push(summary);
    }
    Ok(log)
}

fn summarize(epoch: usize, steps: &[StepRecord]) -> EpochSummary {
    let n = steps.len().max(1) as f64;
    let mean = |f: &dyn Fn(&StepRecord) -> f64| steps.iter().map(f).sum::<f64>() / n;
    EpochSummary {
        epoch,
        steps: steps.len(),
        global_loss: mean(&|r| r.global_loss),
        local_loss: if steps.iter().all(|r| r.local_loss.is_some()) && !steps.is_empty() {
            Some(mean(&|r| r.local_loss.unwrap_or(0.0)))
        } else {
            None
        },
        total_loss: mean(&|r| r.total_loss),
        accuracy: mean(&|r| r.accuracy),
    }
}

/// Nearest-class-centre predictions for descriptors `[N, C]`.
pub fn classify(model: &DalgModel, descriptors: &Tensor) -> Result<Vec<(usize, f64)>> {
    let mut g = Graph::new(&model.store);
    let f = g.constant(descriptors.clone())?;
    let w = g.param(model.arc_weights)?;
    let cos = crate::loss::class_cosines(&mut g, f, w)?;
    let scores = g.value(cos);
    let n = scores.shape()[1];
    Ok(scores
        .data()
        .chunks(n)
        .map(|row| {
            let k = argmax(row);
            (k, row[k])
        })
        .collect())
}
