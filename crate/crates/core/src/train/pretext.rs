use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zoomloc_nn::{Adam, AdamConfig, Checkpoint, Graph, Tensor};

use super::log::{LogRecord, TrainLog};
use super::schedule::{PretextSchedule, StallAction, StallMonitor};
use super::{check_finite, predictions};
use crate::error::{Error, Result};
use crate::model::{images_to_tensor, SiameseModel, INPUT_MEAN, INPUT_SCALE};
use crate::pretext::{AugmentDraw, PretextShard, PretextTask};
use crate::pyramid::Raster;
use crate::Scalar;

const EVAL_BATCH: usize = 128;

pub struct PretextOutcome {
    /// Weights at the evaluation with the highest validation accuracy.
    pub best: Checkpoint,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub log: TrainLog,
}

fn check_shard<S: Scalar>(model: &SiameseModel<S>, shard: &PretextShard, what: &str) -> Result<()> {
    if shard.n != model.spec.n {
        return Err(Error::DataFormat(format!("{what} shard has n={} but model n={}", shard.n, model.spec.n)));
    }
    let max = match model.spec.task {
        PretextTask::Location => model.spec.outputs() as u32,
        PretextTask::Pair => 2,
    };
    if let Some(l) = shard.labels.iter().find(|&&l| l >= max) {
        return Err(Error::DataFormat(format!("{what} shard label {l} does not fit a {:?} model", model.spec.task)));
    }
    if shard.is_empty() {
        return Err(Error::DataFormat(format!("{what} shard is empty")));
    }
    Ok(())
}

fn raster_tensor<S: Scalar>(images: &[Raster<f32>], size: usize) -> Result<Tensor<S>> {
    let plane = size * size;
    let mut data = vec![S::zero(); images.len() * 3 * plane];
    for (i, img) in images.iter().enumerate() {
        let dst = &mut data[i * 3 * plane..(i + 1) * 3 * plane];
        for (p, px) in img.pixels().enumerate() {
            for c in 0..3 {
                dst[c * plane + p] = S::from_f64_lossy((px[c] as f64 - INPUT_MEAN) * INPUT_SCALE);
            }
        }
    }
    Ok(Tensor::from_vec(&[images.len(), 3, size, size], data)?)
}

fn batch<S: Scalar>(
    shard: &PretextShard,
    idx: &[usize],
    aug: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor<S>, Tensor<S>, Vec<u32>)> {
    let s = shard.input_size;
    let labels = idx.iter().map(|&i| shard.labels[i]).collect();
    match aug {
        None => {
            let c: Vec<&[u8]> = idx.iter().map(|&i| shard.child_bytes(i)).collect();
            let p: Vec<&[u8]> = idx.iter().map(|&i| shard.parent_bytes(i)).collect();
            Ok((images_to_tensor(&c, s)?, images_to_tensor(&p, s)?, labels))
        }
        Some(rng) => {
            let mut cs = Vec::with_capacity(idx.len());
            let mut ps = Vec::with_capacity(idx.len());
            for &i in idx {
                let d = AugmentDraw::sample(rng);
                let (p, c) = d.apply_pair(&shard.parent::<f32>(i), &shard.child::<f32>(i));
                cs.push(c);
                ps.push(p);
            }
            Ok((raster_tensor(&cs, s)?, raster_tensor(&ps, s)?, labels))
        }
    }
}

/// Mean loss and accuracy over a whole shard.
pub fn evaluate_pretext<S: Scalar>(model: &SiameseModel<S>, shard: &PretextShard) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..shard.len()).collect();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (c, p, labels) = batch::<S>(shard, chunk, None)?;
        let mut g = Graph::new();
        let (c, p) = (g.constant(c), g.constant(p));
        let logits = model.forward(&mut g, c, p)?;
        let l = model.loss(&mut g, logits, &labels)?;
        loss += g.value(l).data()[0].to_f64_lossy() * chunk.len() as f64;
        correct += predictions(g.value(logits)).iter().zip(&labels).filter(|(a, b)| a == b).count();
    }
    Ok((loss / shard.len() as f64, correct as f64 / shard.len() as f64))
}

/// Trains `model` on `train`, evaluating on `val` every `eval_interval`
/// epochs. Stall actions take effect from the next epoch.
pub fn train_pretext<S: Scalar>(
    model: &mut SiameseModel<S>,
    train: &PretextShard,
    val: &PretextShard,
    sched: &PretextSchedule,
    seed: u64,
) -> Result<PretextOutcome> {
    sched.validate()?;
    check_shard(model, train, "train")?;
    check_shard(model, val, "val")?;
    let mut opt = Adam::new(AdamConfig {
        weight_decay: sched.weight_decay,
        ..AdamConfig::default()
    });
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(seed);
    aug_rng.set_stream(1);
    let mut monitor = StallMonitor::from_schedule(sched);
    let (mut lr, mut bs) = (sched.lr0, sched.batch0);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut iter = 0u64;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=sched.max_epochs {
        order.shuffle(&mut order_rng);
        let (mut sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(bs) {
            let (c, p, labels) = batch::<S>(train, chunk, sched.augment.then_some(&mut aug_rng))?;
            let mut g = Graph::new();
            let (c, p) = (g.constant(c), g.constant(p));
            let logits = model.forward(&mut g, c, p)?;
            let l = model.loss(&mut g, logits, &labels)?;
            let lv = check_finite(g.value(l).data()[0].to_f64_lossy(), iter)?;
            let grads = g.backward(l)?;
            opt.step(&mut model.store, &grads, lr)?;
            iter += 1;
            sum += lv * chunk.len() as f64;
            seen += chunk.len();
        }
        if epoch % sched.eval_interval != 0 && epoch != sched.max_epochs {
            continue;
        }
        let (val_loss, val_acc) = evaluate_pretext(model, val)?;
        check_finite(val_loss, iter)?;
        let mut events = Vec::new();
        if best.as_ref().is_none_or(|b| val_acc > b.0) {
            best = Some((val_acc, epoch, model.checkpoint()));
            events.push("best".to_string());
        }
        let record = LogRecord {
            epoch,
            iter,
            train_loss: sum / seen.max(1) as f64,
            val_loss,
            val_acc,
            lr,
            batch: bs,
            event: String::new(),
        };
        if let Some(a) = monitor.observe(val_loss) {
            match a {
                StallAction::RaiseLr(v) => lr = v,
                StallAction::RaiseBatch(b) => bs = b,
            }
            events.push(format!("stall:{a}"));
        }
        log.push(LogRecord {
            event: events.join(";"),
            ..record
        });
    }
    let (best_val_acc, best_epoch, best) = best.expect("at least one evaluation");
    Ok(PretextOutcome {
        best,
        best_val_acc,
        best_epoch,
        log,
    })
}
