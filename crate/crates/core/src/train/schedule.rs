use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adjustment fired when validation loss stalls.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StallAction {
    RaiseLr(f64),
    RaiseBatch(usize),
}

impl std::fmt::Display for StallAction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StallAction::RaiseLr(lr) => write!(f, "raise_lr:{lr:e}"),
            StallAction::RaiseBatch(b) => write!(f, "raise_batch:{b}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretextSchedule {
    pub lr0: f64,
    pub batch0: usize,
    pub weight_decay: f64,
    /// Evaluations without sufficient improvement before an action fires.
    pub stall_patience: usize,
    /// Minimum validation-loss decrease that counts as improvement.
    pub stall_delta: f64,
    /// Consumed in order, each at most once.
    pub actions: Vec<StallAction>,
    pub max_epochs: usize,
    /// Evaluate every this many epochs.
    pub eval_interval: usize,
    /// Apply child/parent augmentation to training batches.
    pub augment: bool,
}

impl Default for PretextSchedule {
    fn default() -> Self {
        PretextSchedule {
            lr0: 2e-5,
            batch0: 32,
            weight_decay: 1e-5,
            stall_patience: 3,
            stall_delta: 1e-3,
            actions: vec![StallAction::RaiseLr(1e-4), StallAction::RaiseBatch(64)],
            max_epochs: 30,
            eval_interval: 1,
            augment: true,
        }
    }
}

impl PretextSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || self.batch0 == 0 || self.max_epochs == 0 || self.eval_interval == 0 {
            return Err(Error::Config("pretext lr0, batch0, max_epochs and eval_interval must be positive".into()));
        }
        if self.stall_patience == 0 || self.stall_delta < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("stall_patience must be >= 1, delta and weight decay >= 0".into()));
        }
        for a in &self.actions {
            match *a {
                StallAction::RaiseLr(lr) if !(lr > 0.0) => {
                    return Err(Error::Config(format!("stall action lr {lr} must be positive")))
                }
                StallAction::RaiseBatch(0) => return Err(Error::Config("stall action batch must be positive".into())),
                _ => {}
            }
        }
        Ok(())
    }
}

/// Tracks validation losses and hands out the next stall action.
///
/// A loss improves when it is below `best - delta`; otherwise a counter is
/// bumped, and reaching `patience` fires the next action and resets the
/// counter.
#[derive(Clone, Debug)]
pub struct StallMonitor {
    patience: usize,
    delta: f64,
    actions: Vec<StallAction>,
    next: usize,
    best: f64,
    waiting: usize,
    evals: usize,
}

impl StallMonitor {
    pub fn new(patience: usize, delta: f64, actions: Vec<StallAction>) -> Self {
        StallMonitor {
            patience,
            delta,
            actions,
            next: 0,
            best: f64::INFINITY,
            waiting: 0,
            evals: 0,
        }
    }

    pub fn from_schedule(s: &PretextSchedule) -> Self {
        Self::new(s.stall_patience, s.stall_delta, s.actions.clone())
    }

    /// Feeds one evaluation; returns the action to apply, if any.
    pub fn observe(&mut self, val_loss: f64) -> Option<StallAction> {
        self.evals += 1;
        if val_loss < self.best - self.delta {
            self.best = val_loss;
            self.waiting = 0;
            return None;
        }
        self.waiting += 1;
        if self.waiting < self.patience {
            return None;
        }
        self.waiting = 0;
        let a = self.actions.get(self.next).copied();
        if a.is_some() {
            self.next += 1;
        }
        a
    }

    pub fn evals(&self) -> usize {
        self.evals
    }

    pub fn exhausted(&self) -> bool {
        self.next >= self.actions.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Frozen encoder, piecewise-constant rates.
    Frozen,
    /// Whole network, cosine warmup then cosine decay.
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamSchedule {
    /// `(epochs, lr)` phases run with the encoder frozen.
    pub stage1: Vec<(usize, f64)>,
    pub stage2_epochs: usize,
    pub peak_lr: f64,
    /// Fraction of stage-2 iterations spent warming up.
    pub warmup_fraction: f64,
    pub batch: usize,
    pub weight_decay: f64,
}

impl Default for DownstreamSchedule {
    fn default() -> Self {
        DownstreamSchedule {
            stage1: vec![(2, 1e-3), (2, 1e-4)],
            stage2_epochs: 120,
            peak_lr: 1e-4,
            warmup_fraction: 0.05,
            batch: 2,
            weight_decay: 1e-5,
        }
    }
}

impl DownstreamSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.peak_lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("downstream batch and peak_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must be in [0, 1)".into()));
        }
        if self.stage1.iter().any(|&(e, lr)| e == 0 || !(lr > 0.0)) {
            return Err(Error::Config("stage1 phases need positive epochs and lr".into()));
        }
        Ok(())
    }

    pub fn stage1_epochs(&self) -> usize {
        self.stage1.iter().map(|p| p.0).sum()
    }

    /// `ceil(warmup_fraction * total)` for a stage-2 run of `total` iterations.
    pub fn warmup_iters(&self, total: usize) -> usize {
        (self.warmup_fraction * total as f64 - 1e-9).ceil().max(0.0) as usize
    }

    /// Learning rate at `iteration` (0-based, counted within the stage).
    pub fn lr_at(&self, stage: Stage, iteration: usize, iters_per_epoch: usize) -> Result<f64> {
        if iters_per_epoch == 0 {
            return Err(Error::OutOfRange("iters_per_epoch must be positive".into()));
        }
        match stage {
            Stage::Frozen => {
                let epoch = iteration / iters_per_epoch;
                let mut start = 0;
                for &(epochs, lr) in &self.stage1 {
                    if epoch < start + epochs {
                        return Ok(lr);
                    }
                    start += epochs;
                }
                Err(Error::OutOfRange(format!("stage-1 iteration {iteration} past {start} epochs")))
            }
            Stage::Finetune => {
                let total = self.stage2_epochs * iters_per_epoch;
                cosine_lr(self.peak_lr, self.warmup_iters(total), total, iteration)
            }
        }
    }
}

/// Warmup `peak (1 - cos(pi i / w)) / 2` for `i <= w`, then
/// `peak (1 + cos(pi (i - w) / (T - 1 - w))) / 2`, reaching 0 at `i = T - 1`.
pub fn cosine_lr(peak: f64, warmup: usize, total: usize, i: usize) -> Result<f64> {
    use std::f64::consts::PI;
    if i >= total {
        return Err(Error::OutOfRange(format!("iteration {i} outside a {total}-iteration stage")));
    }
    if warmup > 0 && i <= warmup {
        return Ok(peak * (1.0 - (PI * i as f64 / warmup as f64).cos()) / 2.0);
    }
    let span = total - 1 - warmup;
    if span == 0 {
        return Ok(peak);
    }
    Ok(peak * (1.0 + (PI * (i - warmup) as f64 / span as f64).cos()) / 2.0)
}
