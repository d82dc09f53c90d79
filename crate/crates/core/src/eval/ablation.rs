use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use zoomloc_nn::Checkpoint;

use super::metrics::{aggregate_runs, mean_class_accuracy, ConfusionMatrix, RunSummary};
use crate::downstream::{label_fraction_subset, predict_patients, PatientPrediction, PatientTiles, RoiPatchSet};
use crate::error::{Error, Result};
use crate::model::{transfer_encoder, DownstreamModel, EncoderSpec};
use crate::train::{train_downstream, DownstreamSchedule};
use crate::Scalar;

/// Encoder initialisation compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    LocationSsl,
    PairSsl,
    ExternalWeights,
    RandomInit,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::LocationSsl,
        Variant::PairSsl,
        Variant::ExternalWeights,
        Variant::RandomInit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::LocationSsl => "location-ssl",
            Variant::PairSsl => "pair-ssl",
            Variant::ExternalWeights => "external-weights",
            Variant::RandomInit => "random-init",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
    pub fractions: Vec<f64>,
    pub runs: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            variants: vec![Variant::LocationSsl, Variant::PairSsl, Variant::RandomInit],
            fractions: vec![0.33, 0.66, 1.0],
            runs: 5,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.fractions.is_empty() || self.runs == 0 {
            return Err(Error::Config("ablation needs variants, fractions and runs >= 1".into()));
        }
        if let Some(&f) = self.fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::FractionOutOfRange(f));
        }
        Ok(())
    }
}

/// Everything a fine-tuning run needs besides its seed.
pub struct FinetuneSetup<'a> {
    pub rois: &'a RoiPatchSet,
    pub test: &'a [PatientTiles],
    pub num_classes: usize,
    pub encoder: &'a EncoderSpec,
    pub schedule: &'a DownstreamSchedule,
    /// Pretrained weights per variant; random-init needs none.
    pub weights: BTreeMap<Variant, Checkpoint>,
}

pub struct CellResult {
    pub variant: Variant,
    pub fraction: f64,
    pub run: usize,
    pub mean_acc: f64,
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<PatientPrediction>,
}

/// Fine-tunes one (variant, fraction, run) cell and scores it on the test
/// patients. The label subset and the head initialisation depend only on
/// `(seed, run)`, so variants are compared on identical data.
pub fn run_cell<S: Scalar>(
    setup: &FinetuneSetup<'_>,
    variant: Variant,
    fraction: f64,
    run: usize,
    seed: u64,
) -> Result<CellResult> {
    let k = setup.num_classes;
    let train = label_fraction_subset(&setup.rois.train, k, fraction, seed.wrapping_add(run as u64))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run as u64 + 1);
    let mut model: DownstreamModel<S> = match variant {
        Variant::RandomInit => DownstreamModel::new(setup.encoder, k, &mut rng)?,
        v => {
            let w = setup
                .weights
                .get(&v)
                .ok_or_else(|| Error::Config(format!("no encoder weights supplied for {}", v.name())))?;
            transfer_encoder(w, setup.encoder, k, true, &mut rng)?
        }
    };
    let out = train_downstream(&mut model, &train, &setup.rois.val, setup.schedule, seed ^ ((run as u64) << 20))?;
    model.load_checkpoint(&out.best)?;
    let predictions = predict_patients(&model, setup.test, setup.rois.train.input_size)?;
    let confusion = ConfusionMatrix::from_predictions(&predictions, k, run)?;
    Ok(CellResult {
        variant,
        fraction,
        run,
        mean_acc: mean_class_accuracy(&confusion)?,
        confusion,
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub variant: Variant,
    pub fraction: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub summary: Option<RunSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub fraction: f64,
    pub run: usize,
    pub mean_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub points: Vec<CurvePoint>,
}

/// Runs every (variant, fraction, run) cell; cells are independent and
/// execute in parallel, rows come back in config order.
pub fn ablation<S: Scalar>(setup: &FinetuneSetup<'_>, cfg: &AblationConfig, seed: u64) -> Result<AblationResult> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for &v in &cfg.variants {
        for &f in &cfg.fractions {
            for r in 0..cfg.runs {
                cells.push((v, f, r));
            }
        }
    }
    let results: Vec<CellResult> = cells
        .par_iter()
        .map(|&(v, f, r)| {
            let c = run_cell::<S>(setup, v, f, r, seed)?;
            log::info!("{} fraction {} run {}: mean class accuracy {:.4}", v.name(), f, r, c.mean_acc);
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let mut points = Vec::new();
    for &v in &cfg.variants {
        for &f in &cfg.fractions {
            let group: Vec<&CellResult> = results.iter().filter(|c| c.variant == v && c.fraction == f).collect();
            let accs: Vec<f64> = group.iter().map(|c| c.mean_acc).collect();
            let (mean_acc, std_acc) = super::metrics::mean_std(&accs);
            let cms: Vec<ConfusionMatrix> = group.iter().map(|c| c.confusion.clone()).collect();
            let summary = if cms.len() >= 2 { Some(aggregate_runs(&cms)?) } else { None };
            points.push(CurvePoint {
                variant: v,
                fraction: f,
                mean_acc,
                std_acc,
                summary,
            });
        }
    }
    let rows = results
        .iter()
        .map(|c| AblationRow {
            variant: c.variant,
            fraction: c.fraction,
            run: c.run,
            mean_acc: c.mean_acc,
        })
        .collect();
    Ok(AblationResult { rows, points })
}

impl AblationResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,fraction,run,mean_acc\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{:.6}", r.variant.name(), r.fraction, r.run, r.mean_acc);
        }
        s
    }

    pub fn point(&self, v: Variant, fraction: f64) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.variant == v && (p.fraction - fraction).abs() < 1e-12)
    }
}
