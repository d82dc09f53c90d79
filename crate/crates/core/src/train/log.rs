use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const LOG_HEADER: &str = "epoch,iter,train_loss,val_loss,val_acc,lr,batch,event";

/// One evaluation (or event) row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    /// Optimiser steps taken so far.
    pub iter: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub batch: usize,
    /// `;`-separated events, empty when nothing happened.
    pub event: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn push(&mut self, r: LogRecord) {
        debug_assert!(self.records.last().is_none_or(|l| l.iter <= r.iter));
        if !r.event.is_empty() {
            log::info!("epoch {} iter {}: {}", r.epoch, r.iter, r.event);
        }
        self.records.push(r);
    }

    pub fn best_val_acc(&self) -> Option<f64> {
        self.records.iter().map(|r| r.val_acc).fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:e},{},{}",
                r.epoch, r.iter, r.train_loss, r.val_loss, r.val_acc, r.lr, r.batch, r.event
            );
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}
