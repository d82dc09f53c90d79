//! Pretext training with stall-driven adjustments and two-stage downstream
//! fine-tuning.

mod downstream;
mod log;
mod pretext;
mod schedule;

pub use self::downstream::{evaluate_patches, predict_probs, train_downstream, DownstreamOutcome};
pub use self::log::{LogRecord, TrainLog, LOG_HEADER};
pub use self::pretext::{evaluate_pretext, train_pretext, PretextOutcome};
pub use self::schedule::{cosine_lr, DownstreamSchedule, PretextSchedule, Stage, StallAction, StallMonitor};

use zoomloc_nn::Tensor;

use crate::error::{Error, Result};
use crate::Scalar;

/// Predicted class per row (`[B, K]`, or `[B, 1]` read as a sigmoid logit).
pub(crate) fn predictions<S: Scalar>(logits: &Tensor<S>) -> Vec<u32> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            if k == 1 {
                return (row[0] > S::zero()) as u32;
            }
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect()
}

pub(crate) fn check_finite(loss: f64, iter: u64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Diverged(iter))
    }
}
