use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zoomloc_nn::{softmax_rows, Adam, AdamConfig, Checkpoint, Graph};

use super::log::{LogRecord, TrainLog};
use super::schedule::{DownstreamSchedule, Stage};
use super::{check_finite, predictions};
use crate::downstream::PatchSet;
use crate::error::{Error, Result};
use crate::model::{images_to_tensor, DownstreamModel};
use crate::Scalar;

const EVAL_BATCH: usize = 128;

pub struct DownstreamOutcome {
    pub best: Checkpoint,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub log: TrainLog,
}

/// Softmax probabilities for each image.
pub fn predict_probs<S: Scalar>(model: &DownstreamModel<S>, images: &[&[u8]], size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(chunk, size)?);
        let logits = model.forward(&mut g, x)?;
        let p = softmax_rows(g.value(logits));
        out.extend(
            p.data()
                .chunks(model.num_classes)
                .map(|r| r.iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>()),
        );
    }
    Ok(out)
}

/// Mean loss and patch accuracy over `set`.
pub fn evaluate_patches<S: Scalar>(model: &DownstreamModel<S>, set: &PatchSet) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in idx.chunks(EVAL_BATCH) {
        let imgs: Vec<&[u8]> = chunk.iter().map(|&i| set.image(i)).collect();
        let labels: Vec<u32> = chunk.iter().map(|&i| set.labels[i]).collect();
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(&imgs, set.input_size)?);
        let logits = model.forward(&mut g, x)?;
        let l = model.loss(&mut g, logits, &labels)?;
        loss += g.value(l).data()[0].to_f64_lossy() * chunk.len() as f64;
        correct += predictions(g.value(logits)).iter().zip(&labels).filter(|(a, b)| a == b).count();
    }
    let n = set.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Stage 1 trains the head with the encoder frozen at the piecewise-constant
/// stage-1 rates; stage 2 unfreezes everything under cosine warmup/decay.
/// Validation runs after every epoch; the best-accuracy weights are kept.
pub fn train_downstream<S: Scalar>(
    model: &mut DownstreamModel<S>,
    train: &PatchSet,
    val: &PatchSet,
    sched: &DownstreamSchedule,
    seed: u64,
) -> Result<DownstreamOutcome> {
    sched.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::DataFormat(format!(
            "downstream needs train and val patches (got {} and {})",
            train.len(),
            val.len()
        )));
    }
    if let Some(l) = train.labels.iter().chain(&val.labels).find(|&&l| l as usize >= model.num_classes) {
        return Err(Error::DataFormat(format!("label {l} with {} classes", model.num_classes)));
    }
    let mut opt = Adam::new(AdamConfig {
        weight_decay: sched.weight_decay,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ipe = train.len().div_ceil(sched.batch);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut iter = 0u64;
    let mut epoch = 0;

    let phases = [
        (Stage::Frozen, sched.stage1_epochs()),
        (Stage::Finetune, sched.stage2_epochs),
    ];
    for (stage, epochs) in phases {
        model.set_encoder_frozen(stage == Stage::Frozen);
        let mut local = 0usize;
        for e in 0..epochs {
            epoch += 1;
            order.shuffle(&mut rng);
            let (mut sum, mut lr) = (0.0, 0.0);
            for chunk in order.chunks(sched.batch) {
                lr = sched.lr_at(stage, local, ipe)?;
                let imgs: Vec<&[u8]> = chunk.iter().map(|&i| train.image(i)).collect();
                let labels: Vec<u32> = chunk.iter().map(|&i| train.labels[i]).collect();
                let mut g = Graph::new();
                let x = g.constant(images_to_tensor(&imgs, train.input_size)?);
                let logits = model.forward(&mut g, x)?;
                let l = model.loss(&mut g, logits, &labels)?;
                sum += check_finite(g.value(l).data()[0].to_f64_lossy(), iter)? * chunk.len() as f64;
                let grads = g.backward(l)?;
                opt.step(&mut model.store, &grads, lr)?;
                iter += 1;
                local += 1;
            }
            let (val_loss, val_acc) = evaluate_patches(model, val)?;
            check_finite(val_loss, iter)?;
            let mut events = Vec::new();
            if e == 0 {
                events.push(match stage {
                    Stage::Frozen => "stage1".to_string(),
                    Stage::Finetune => "stage2".to_string(),
                });
            }
            if best.as_ref().is_none_or(|b| val_acc > b.0) {
                best = Some((val_acc, epoch, model.checkpoint()));
                events.push("best".into());
            }
            log.push(LogRecord {
                epoch,
                iter,
                train_loss: sum / train.len() as f64,
                val_loss,
                val_acc,
                lr,
                batch: sched.batch,
                event: events.join(";"),
            });
        }
    }
    model.set_encoder_frozen(false);
    let (best_val_acc, best_epoch, best) =
        best.ok_or_else(|| Error::Config("downstream schedule has no epochs".into()))?;
    Ok(DownstreamOutcome {
        best,
        best_val_acc,
        best_epoch,
        log,
    })
}
