//! Stage drivers behind the command line. Each stage reads its inputs from
//! explicit directories and writes only below its own output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use zoomloc_nn::gradcheck::run_suite;
use zoomloc_nn::Checkpoint;

use crate::config::{Config, Precision};
use crate::downstream::{
    label_fraction_subset, predict_patients, tile_rois, tile_test_patients, write_predictions, PREDICTIONS_FILE,
};
use crate::error::{Error, Result};
use crate::eval::{
    ablation, curve_svg, mean_class_accuracy, AblationResult, ConfusionMatrix, FinetuneSetup, Variant,
};
use crate::model::{transfer_encoder, DownstreamModel, EncoderSpec, ModelSpec, SiameseModel, MODEL_FILE};
use crate::pretext::{
    build_dataset, locate_oracle, sample_location_with_source, DatasetInfo, PretextShard, PretextTask, TRAIN_SHARD,
    VAL_SHARD,
};
use crate::synth::{generate_cohort, generate_pyramid, Split, SynthCohort};
use crate::train::{train_downstream as fit_downstream, train_pretext as fit_pretext};
use crate::Scalar;

pub const LOG_FILE: &str = "train_log.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const CURVE_FILE: &str = "curve.svg";
pub const CONFIG_FILE: &str = "config.json";

const SEED_PRETEXT_INIT: u64 = 1;
const SEED_PRETEXT_TRAIN: u64 = 2;
const SEED_DOWNSTREAM_INIT: u64 = 3;
const SEED_DOWNSTREAM_TRAIN: u64 = 4;
const SEED_ABLATION: u64 = 5;
const SEED_VERIFY: u64 = 6;

/// Default artifact directories below `--out`.
#[derive(Clone, Debug)]
pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Layout { out: out.into() }
    }

    pub fn cohort(&self) -> PathBuf {
        self.out.join("cohort")
    }

    pub fn pretext_data(&self, task: PretextTask) -> PathBuf {
        self.out.join(format!("pretext-{}", task_name(task)))
    }

    pub fn pretext_model(&self, task: PretextTask) -> PathBuf {
        self.out.join(format!("pretext-model-{}", task_name(task)))
    }

    pub fn downstream_model(&self) -> PathBuf {
        self.out.join("downstream-model")
    }

    pub fn evaluation(&self) -> PathBuf {
        self.out.join("evaluation")
    }

    pub fn ablation(&self) -> PathBuf {
        self.out.join("ablation")
    }

    pub fn verify(&self) -> PathBuf {
        self.out.join("verify")
    }
}

pub fn task_name(task: PretextTask) -> &'static str {
    match task {
        PretextTask::Location => "location",
        PretextTask::Pair => "pair",
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn prepare(dir: &Path, cfg: &Config) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_json() + "\n")?;
    Ok(())
}

fn need_dir(dir: &Path, what: &str) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::DataFormat(format!("{what} directory {} not found", dir.display())))
    }
}

pub fn gen_synth(cfg: &Config, out: &Path) -> Result<SynthCohort> {
    cfg.validate()?;
    let cohort = generate_cohort(&cfg.synth, out)?;
    log::info!("wrote {} patients to {}", cohort.patients.len(), out.display());
    Ok(cohort)
}

pub fn gen_pretext(cfg: &Config, cohort_dir: &Path, out: &Path) -> Result<DatasetInfo> {
    cfg.validate()?;
    need_dir(cohort_dir, "cohort")?;
    let cohort = SynthCohort::open(cohort_dir)?;
    let info = build_dataset(&cohort, &cfg.pretext, out)?;
    log::info!("wrote {} train + {} val records to {}", info.train_count, info.val_count, out.display());
    Ok(info)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretextSummary {
    pub task: PretextTask,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub chance: f64,
}

/// Trains the siamese model on a dataset written by [`gen_pretext`]. Task,
/// zoom difference and input size come from the dataset itself.
pub fn train_pretext(cfg: &Config, data_dir: &Path, out: &Path) -> Result<PretextSummary> {
    cfg.validate()?;
    need_dir(data_dir, "pretext dataset")?;
    let info = DatasetInfo::load(data_dir)?;
    let train = PretextShard::load(&data_dir.join(TRAIN_SHARD))?;
    let val = PretextShard::load(&data_dir.join(VAL_SHARD))?;
    let spec = ModelSpec {
        n: info.spec.sampler.n,
        ..cfg.model_spec(info.spec.task)
    };
    spec.validate()?;
    if info.spec.sampler.input_size < spec.encoder.min_input() {
        return Err(Error::Config(format!(
            "dataset input size {} is below the encoder minimum {}",
            info.spec.sampler.input_size,
            spec.encoder.min_input()
        )));
    }
    let (ckpt, acc, epoch, log) = match cfg.precision {
        Precision::F32 => fit_siamese::<f32>(cfg, &spec, &train, &val)?,
        Precision::F64 => fit_siamese::<f64>(cfg, &spec, &train, &val)?,
    };
    prepare(out, cfg)?;
    ckpt.save(out)?;
    spec.save(out)?;
    log.save(&out.join(LOG_FILE))?;
    let summary = PretextSummary {
        task: spec.task,
        best_val_acc: acc,
        best_epoch: epoch,
        chance: match spec.task {
            PretextTask::Location => 1.0 / spec.outputs() as f64,
            PretextTask::Pair => 0.5,
        },
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    log::info!("{} pretext: best val acc {:.4} at epoch {epoch}", task_name(spec.task), acc);
    Ok(summary)
}

fn fit_siamese<S: Scalar>(
    cfg: &Config,
    spec: &ModelSpec,
    train: &PretextShard,
    val: &PretextShard,
) -> Result<(Checkpoint, f64, usize, crate::train::TrainLog)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(SEED_PRETEXT_INIT));
    let mut model = SiameseModel::<S>::new(spec, &mut rng)?;
    let o = fit_pretext(&mut model, train, val, &cfg.train.pretext, cfg.stage_seed(SEED_PRETEXT_TRAIN))?;
    Ok((o.best, o.best_val_acc, o.best_epoch, o.log))
}

/// Loads encoder weights from a checkpoint directory. When the directory
/// also holds a `model.json`, its encoder must match `expected`.
pub fn load_encoder(dir: &Path, expected: &EncoderSpec) -> Result<Checkpoint> {
    need_dir(dir, "encoder")?;
    if dir.join(MODEL_FILE).exists() {
        let spec = ModelSpec::load(dir)?;
        if &spec.encoder != expected {
            return Err(Error::ShapeMismatch(format!(
                "encoder in {} has blocks {:?}, config expects {:?}",
                dir.display(),
                spec.encoder.blocks,
                expected.blocks
            )));
        }
    }
    Ok(Checkpoint::load(dir)?)
}

/// Written next to downstream weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownstreamSpec {
    pub encoder: EncoderSpec,
    pub num_classes: usize,
    pub input_size: usize,
    pub variant: Variant,
    pub label_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownstreamSummary {
    pub variant: Variant,
    pub label_fraction: f64,
    pub train_patches: usize,
    pub val_patches: usize,
    pub best_val_acc: f64,
    pub best_epoch: usize,
}

/// Fine-tunes a subtype classifier on the labelled regions of the train
/// patients. `encoder` holds pretrained weights; `None` means random init.
pub fn train_downstream(
    cfg: &Config,
    cohort_dir: &Path,
    encoder: Option<(Variant, &Path)>,
    out: &Path,
) -> Result<DownstreamSummary> {
    cfg.validate()?;
    need_dir(cohort_dir, "cohort")?;
    let cohort = SynthCohort::open(cohort_dir)?;
    let weights = match encoder {
        Some((v, dir)) if v != Variant::RandomInit => Some((v, load_encoder(dir, &cfg.model.encoder)?)),
        _ => None,
    };
    let tiles = &cfg.downstream.tiles;
    let rois = tile_rois(&cohort, tiles)?;
    let k = cohort.num_classes;
    let fraction = cfg.downstream.label_fraction;
    let train = label_fraction_subset(&rois.train, k, fraction, tiles.seed)?;
    log::info!("downstream: {} train / {} val patches", train.len(), rois.val.len());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(SEED_DOWNSTREAM_INIT));
    let seed = cfg.stage_seed(SEED_DOWNSTREAM_TRAIN);
    let (ckpt, acc, epoch, log) = match cfg.precision {
        Precision::F32 => {
            let mut m = downstream_init::<f32>(cfg, k, weights.as_ref().map(|w| &w.1), &mut rng)?;
            let o = fit_downstream(&mut m, &train, &rois.val, &cfg.train.downstream, seed)?;
            (o.best, o.best_val_acc, o.best_epoch, o.log)
        }
        Precision::F64 => {
            let mut m = downstream_init::<f64>(cfg, k, weights.as_ref().map(|w| &w.1), &mut rng)?;
            let o = fit_downstream(&mut m, &train, &rois.val, &cfg.train.downstream, seed)?;
            (o.best, o.best_val_acc, o.best_epoch, o.log)
        }
    };
    let variant = weights.as_ref().map_or(Variant::RandomInit, |w| w.0);
    prepare(out, cfg)?;
    ckpt.save(out)?;
    write_json(
        &out.join(MODEL_FILE),
        &DownstreamSpec {
            encoder: cfg.model.encoder.clone(),
            num_classes: k,
            input_size: tiles.input_size,
            variant,
            label_fraction: fraction,
        },
    )?;
    log.save(&out.join(LOG_FILE))?;
    let summary = DownstreamSummary {
        variant,
        label_fraction: fraction,
        train_patches: train.len(),
        val_patches: rois.val.len(),
        best_val_acc: acc,
        best_epoch: epoch,
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

fn downstream_init<S: Scalar>(
    cfg: &Config,
    k: usize,
    weights: Option<&Checkpoint>,
    rng: &mut ChaCha8Rng,
) -> Result<DownstreamModel<S>> {
    match weights {
        Some(w) => transfer_encoder(w, &cfg.model.encoder, k, true, rng),
        None => DownstreamModel::new(&cfg.model.encoder, k, rng),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub patients: usize,
    pub mean_class_accuracy: f64,
    pub misclassified: u64,
    pub confusion: ConfusionMatrix,
}

/// Patient-level predictions of a trained downstream model on the test
/// patients' whole slides.
pub fn evaluate(cfg: &Config, cohort_dir: &Path, model_dir: &Path, out: &Path) -> Result<EvalSummary> {
    cfg.validate()?;
    need_dir(cohort_dir, "cohort")?;
    need_dir(model_dir, "downstream model")?;
    let cohort = SynthCohort::open(cohort_dir)?;
    let raw = fs::read(model_dir.join(MODEL_FILE))?;
    let spec: DownstreamSpec =
        serde_json::from_slice(&raw).map_err(|e| Error::DataFormat(format!("{MODEL_FILE}: {e}")))?;
    if spec.num_classes != cohort.num_classes {
        return Err(Error::ShapeMismatch(format!(
            "model has {} classes, cohort {}",
            spec.num_classes, cohort.num_classes
        )));
    }
    let ckpt = Checkpoint::load(model_dir)?;
    let tiles = crate::downstream::TileConfig {
        input_size: spec.input_size,
        ..cfg.downstream.tiles.clone()
    };
    let test = tile_test_patients(&cohort, &tiles)?;
    let preds = match cfg.precision {
        Precision::F32 => {
            let mut m = DownstreamModel::<f32>::new(&spec.encoder, spec.num_classes, &mut ChaCha8Rng::seed_from_u64(0))?;
            m.load_checkpoint(&ckpt)?;
            predict_patients(&m, &test, spec.input_size)?
        }
        Precision::F64 => {
            let mut m = DownstreamModel::<f64>::new(&spec.encoder, spec.num_classes, &mut ChaCha8Rng::seed_from_u64(0))?;
            m.load_checkpoint(&ckpt)?;
            predict_patients(&m, &test, spec.input_size)?
        }
    };
    let cm = ConfusionMatrix::from_predictions(&preds, spec.num_classes, 0)?;
    let summary = EvalSummary {
        patients: preds.len(),
        mean_class_accuracy: mean_class_accuracy(&cm)?,
        misclassified: cm.misclassified(),
        confusion: cm,
    };
    prepare(out, cfg)?;
    write_predictions(&preds, &out.join(PREDICTIONS_FILE))?;
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    log::info!("evaluate: mean class accuracy {:.4} over {} patients", summary.mean_class_accuracy, summary.patients);
    Ok(summary)
}

/// Runs the label-fraction ablation. `encoders` maps each pretrained
/// variant in the config to its checkpoint directory.
pub fn ablate(
    cfg: &Config,
    cohort_dir: &Path,
    encoders: &BTreeMap<Variant, PathBuf>,
    out: &Path,
) -> Result<AblationResult> {
    cfg.validate()?;
    need_dir(cohort_dir, "cohort")?;
    let cohort = SynthCohort::open(cohort_dir)?;
    let mut weights = BTreeMap::new();
    for &v in &cfg.eval.ablation.variants {
        if v == Variant::RandomInit {
            continue;
        }
        let dir = encoders
            .get(&v)
            .ok_or_else(|| Error::Config(format!("ablation variant {} needs an encoder directory", v.name())))?;
        weights.insert(v, load_encoder(dir, &cfg.model.encoder)?);
    }
    let rois = tile_rois(&cohort, &cfg.downstream.tiles)?;
    let test = tile_test_patients(&cohort, &cfg.downstream.tiles)?;
    let setup = FinetuneSetup {
        rois: &rois,
        test: &test,
        num_classes: cohort.num_classes,
        encoder: &cfg.model.encoder,
        schedule: &cfg.train.downstream,
        weights,
    };
    let seed = cfg.stage_seed(SEED_ABLATION);
    let result = match cfg.precision {
        Precision::F32 => ablation::<f32>(&setup, &cfg.eval.ablation, seed)?,
        Precision::F64 => ablation::<f64>(&setup, &cfg.eval.ablation, seed)?,
    };
    prepare(out, cfg)?;
    fs::write(out.join(ABLATION_FILE), result.to_csv())?;
    write_json(&out.join(SUMMARY_FILE), &result.points)?;
    fs::write(out.join(CURVE_FILE), curve_svg(&result.points))?;
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub samples: usize,
    pub matched: usize,
    pub mismatches: Vec<String>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.samples > 0 && self.matched == self.samples
    }
}

/// Draws `samples` location samples from in-memory synthetic pyramids and
/// checks that the content-only oracle recovers every label.
pub fn oracle_check(cfg: &Config, samples: usize) -> Result<OracleReport> {
    let cohort = SynthCohort::plan(&cfg.synth)?;
    let slides: Vec<_> = cohort
        .patients_in(Split::Train)
        .flat_map(|p| p.slides.iter().map(move |s| (p.patient_id.clone(), s)))
        .collect();
    let slides = &slides[..slides.len().min(4)];
    let sampler = &cfg.pretext.sampler;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(SEED_VERIFY));
    let mut report = OracleReport {
        samples: 0,
        matched: 0,
        mismatches: Vec::new(),
    };
    let per_slide = samples.div_ceil(slides.len().max(1));
    for (id, slide) in slides {
        let spec = slide
            .spec
            .as_ref()
            .ok_or_else(|| Error::Config("planned slide without a render spec".into()))?;
        let img = generate_pyramid::<f64>(spec)?;
        for _ in 0..per_slide.min(samples - report.samples) {
            let (s, draw) = sample_location_with_source(&img, id, sampler, &mut rng)?;
            report.samples += 1;
            match locate_oracle(&draw.parent, &draw.child, sampler.n) {
                Ok(l) if l == s.label as usize => report.matched += 1,
                Ok(l) => report.mismatches.push(format!("{:?}: label {} oracle {l}", s.source.parent, s.label)),
                Err(e) => report.mismatches.push(format!("{:?}: {e}", s.source.parent)),
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradEntry {
    pub op: String,
    pub shapes: Vec<Vec<usize>>,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub oracle: OracleReport,
    pub gradient_tolerance: f64,
    pub gradients: Vec<GradEntry>,
}

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Oracle and finite-difference suites. Writes `verify.json` into `out` and
/// fails with [`Error::GradientCheck`] if anything disagrees.
pub fn verify(cfg: &Config, out: &Path) -> Result<VerifyReport> {
    cfg.validate()?;
    let oracle = oracle_check(cfg, 1000)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(SEED_VERIFY));
    let checks = run_suite(&mut rng, 2, GRAD_STEP)?;
    let gradients: Vec<GradEntry> = checks
        .iter()
        .map(|c| GradEntry {
            op: c.op.to_string(),
            shapes: c.shapes.clone(),
            max_rel_error: c.report.max_rel_error,
            checked: c.report.checked,
        })
        .collect();
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed(GRAD_TOLERANCE))
        .map(|c| format!("{} {:?} ({:.2e})", c.op, c.shapes, c.report.max_rel_error))
        .collect();
    let report = VerifyReport {
        oracle,
        gradient_tolerance: GRAD_TOLERANCE,
        gradients,
    };
    fs::create_dir_all(out)?;
    write_json(&out.join("verify.json"), &report)?;
    log::info!(
        "verify: oracle {}/{}, gradients {}/{} within {GRAD_TOLERANCE:e}",
        report.oracle.matched,
        report.oracle.samples,
        checks.len() - failed.len(),
        checks.len()
    );
    if !report.oracle.passed() {
        return Err(Error::GradientCheck(format!(
            "oracle matched {}/{} labels: {}",
            report.oracle.matched,
            report.oracle.samples,
            report.oracle.mismatches.iter().take(3).cloned().collect::<Vec<_>>().join("; ")
        )));
    }
    if !failed.is_empty() {
        return Err(Error::GradientCheck(failed.join(", ")));
    }
    Ok(report)
}
