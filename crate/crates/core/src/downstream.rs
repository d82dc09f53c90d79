//! Subtype patches from labelled regions, whole-slide test tiling and
//! patient-level majority voting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DownstreamModel;
use crate::pyramid::{whiteness, PatchRef, PyramidImage, WhiteRule};
use crate::synth::{PatientEntry, Split, SynthCohort};
use crate::train::predict_probs;
use crate::Scalar;

pub const PREDICTIONS_FILE: &str = "predictions.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Whole patients go to either train or validation.
    PatientDisjoint,
    /// Patches are split at random within each class.
    PatchRandom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TileConfig {
    /// Tile side at the highest level.
    pub tile: usize,
    pub input_size: usize,
    pub white_rule: WhiteRule,
    pub white_reject: f64,
    pub val_fraction: f64,
    pub split_mode: SplitMode,
    /// Downsample majority classes to the smallest class.
    pub balance: bool,
    pub seed: u64,
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig {
            tile: 64,
            input_size: 32,
            white_rule: WhiteRule::default(),
            white_reject: 0.5,
            val_fraction: 0.15,
            split_mode: SplitMode::PatientDisjoint,
            balance: true,
            seed: 0,
        }
    }
}

impl TileConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile == 0 || self.input_size == 0 {
            return Err(Error::Config("tile and input_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.white_reject) {
            return Err(Error::Config("white_reject must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Labelled 8-bit RGB patches, `input_size^2 * 3` bytes each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PatchSet {
    pub input_size: usize,
    pub images: Vec<u8>,
    pub labels: Vec<u32>,
    pub patients: Vec<String>,
}

impl PatchSet {
    pub fn new(input_size: usize) -> Self {
        PatchSet {
            input_size,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn bytes(&self) -> usize {
        self.input_size * self.input_size * 3
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let b = self.bytes();
        &self.images[i * b..(i + 1) * b]
    }

    pub fn push(&mut self, image: &[u8], label: u32, patient: &str) {
        debug_assert_eq!(image.len(), self.bytes());
        self.images.extend_from_slice(image);
        self.labels.push(label);
        self.patients.push(patient.to_string());
    }

    /// Patches at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PatchSet {
        let mut out = PatchSet::new(self.input_size);
        for &i in indices {
            out.push(self.image(i), self.labels[i], &self.patients[i]);
        }
        out
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut c = vec![0; num_classes];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }

    fn indices_by_class(&self, num_classes: usize) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by[l as usize].push(i);
        }
        by
    }
}

/// Train/validation patches from the labelled regions of train patients.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiPatchSet {
    pub train: PatchSet,
    pub val: PatchSet,
}

/// Top-left corners of the non-overlapping `tile` windows inside `region`.
pub fn tile_grid(region: &PatchRef, tile: usize) -> Vec<PatchRef> {
    let mut out = Vec::new();
    for i in 0..region.height / tile {
        for j in 0..region.width / tile {
            out.push(PatchRef::square(region.level, region.row + i * tile, region.col + j * tile, tile));
        }
    }
    out
}

/// Tiles `region` of `img`, drops white tiles and returns the survivors'
/// resized 8-bit pixels.
pub fn tile_region<T: Scalar>(img: &PyramidImage<T>, region: &PatchRef, cfg: &TileConfig) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::new();
    for t in tile_grid(region, cfg.tile) {
        let px = img.extract(&t)?.resize_bilinear(cfg.input_size, cfg.input_size).quantized();
        if whiteness(&px, &cfg.white_rule) <= cfg.white_reject {
            out.push(px.to_u8());
        }
    }
    Ok(out)
}

fn patient_tiles(cohort: &SynthCohort, p: &PatientEntry, cfg: &TileConfig, whole: bool) -> Result<Vec<Vec<u8>>> {
    let mut tiles = Vec::new();
    for (s, slide) in p.slides.iter().enumerate() {
        let img = cohort.load_slide::<f32>(slide)?;
        let region = if whole {
            let top = img.level(img.top_level())?;
            PatchRef::new(img.top_level(), 0, 0, top.height(), top.width())
        } else {
            slide.roi
        };
        let t = tile_region(&img, &region, cfg)?;
        if t.is_empty() && !whole {
            return Err(Error::EmptyRegion(format!("{} slide {s} {region}", p.patient_id)));
        }
        tiles.extend(t);
    }
    Ok(tiles)
}

/// Tiles every labelled region of the train patients, balances classes and
/// splits into train and validation.
pub fn tile_rois(cohort: &SynthCohort, cfg: &TileConfig) -> Result<RoiPatchSet> {
    cfg.validate()?;
    let patients: Vec<&PatientEntry> = cohort.patients_in(Split::Train).collect();
    let tiles: Vec<Vec<Vec<u8>>> = patients
        .par_iter()
        .map(|p| patient_tiles(cohort, p, cfg, false))
        .collect::<Result<_>>()?;
    let mut all = PatchSet::new(cfg.input_size);
    for (p, ts) in patients.iter().zip(&tiles) {
        for t in ts {
            all.push(t, p.class_id as u32, &p.patient_id);
        }
    }
    let k = cohort.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if cfg.balance {
        all = balance_classes(&all, k, &mut rng)?;
    }
    let (train_idx, val_idx) = match cfg.split_mode {
        SplitMode::PatientDisjoint => split_patients(&all, k, cfg.val_fraction, &mut rng),
        SplitMode::PatchRandom => split_patches(&all, k, cfg.val_fraction, &mut rng),
    };
    Ok(RoiPatchSet {
        train: all.select(&train_idx),
        val: all.select(&val_idx),
    })
}

/// Downsamples every class to the size of the smallest one.
pub fn balance_classes(set: &PatchSet, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<PatchSet> {
    let by = set.indices_by_class(num_classes);
    if let Some(c) = by.iter().position(|v| v.is_empty()) {
        return Err(Error::EmptyClass(c));
    }
    let m = by.iter().map(Vec::len).min().unwrap_or(0);
    let mut keep = Vec::new();
    for mut idx in by {
        idx.shuffle(rng);
        idx.truncate(m);
        keep.extend(idx);
    }
    keep.sort_unstable();
    Ok(set.select(&keep))
}

fn val_count(n: usize, fraction: f64) -> usize {
    if n < 2 || fraction <= 0.0 {
        return 0;
    }
    ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
}

fn split_patients(set: &PatchSet, k: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut per_class: Vec<Vec<&str>> = vec![Vec::new(); k];
    for (l, p) in set.labels.iter().zip(&set.patients) {
        let v = &mut per_class[*l as usize];
        if !v.contains(&p.as_str()) {
            v.push(p);
        }
    }
    let mut val_patients = Vec::new();
    for mut ps in per_class {
        ps.shuffle(rng);
        let nv = val_count(ps.len(), fraction);
        val_patients.extend(ps.into_iter().take(nv));
    }
    (0..set.len()).partition(|&i| !val_patients.contains(&set.patients[i].as_str()))
}

fn split_patches(set: &PatchSet, k: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut is_val = vec![false; set.len()];
    for mut idx in set.indices_by_class(k) {
        idx.shuffle(rng);
        for &i in idx.iter().take(val_count(idx.len(), fraction)) {
            is_val[i] = true;
        }
    }
    (0..set.len()).partition(|&i| !is_val[i])
}

/// Stratified subsample keeping `round(fraction * n_c)` patches of each
/// class (at least one), in original order.
pub fn label_fraction_subset(set: &PatchSet, num_classes: usize, fraction: f64, seed: u64) -> Result<PatchSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::FractionOutOfRange(fraction));
    }
    if fraction == 1.0 {
        return Ok(set.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for mut idx in set.indices_by_class(num_classes) {
        let n = idx.len();
        let take = if n == 0 { 0 } else { ((n as f64 * fraction).round() as usize).max(1) };
        idx.shuffle(&mut rng);
        keep.extend(idx.into_iter().take(take));
    }
    keep.sort_unstable();
    Ok(set.select(&keep))
}

/// Whole-slide tiles of a test patient.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientTiles {
    pub patient_id: String,
    pub class_id: usize,
    pub tiles: Vec<Vec<u8>>,
}

/// Tiles every slide of every test patient without region restriction.
pub fn tile_test_patients(cohort: &SynthCohort, cfg: &TileConfig) -> Result<Vec<PatientTiles>> {
    cfg.validate()?;
    let patients: Vec<&PatientEntry> = cohort.patients_in(Split::Test).collect();
    patients
        .par_iter()
        .map(|p| {
            Ok(PatientTiles {
                patient_id: p.patient_id.clone(),
                class_id: p.class_id,
                tiles: patient_tiles(cohort, p, cfg, true)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientPrediction {
    pub patient_id: String,
    pub true_label: usize,
    pub pred: usize,
    pub votes: Vec<usize>,
    /// Winner's votes minus the runner-up's.
    pub margin: usize,
}

/// Plurality vote over per-patch predictions. Ties go to the class with the
/// larger summed softmax mass, then to the lowest index.
///
/// `probs` holds one row of `k` class probabilities per patch.
pub fn majority_vote(probs: &[Vec<f64>], k: usize) -> Result<(usize, Vec<usize>, usize)> {
    if probs.is_empty() {
        return Err(Error::NoPatches("(empty)".into()));
    }
    let mut votes = vec![0usize; k];
    let mut mass = vec![0.0f64; k];
    for row in probs {
        if row.len() != k {
            return Err(Error::ShapeMismatch(format!("probability row of {} for {k} classes", row.len())));
        }
        let mut best = 0;
        for c in 1..k {
            if row[c] > row[best] {
                best = c;
            }
        }
        votes[best] += 1;
        for c in 0..k {
            mass[c] += row[c];
        }
    }
    let winner = vote_winner(&votes, &mass);
    let runner_up = (0..k).filter(|&c| c != winner).map(|c| votes[c]).max().unwrap_or(0);
    Ok((winner, votes.clone(), votes[winner] - runner_up))
}

/// Classifies every tile of every patient and votes per patient.
pub fn predict_patients<S: Scalar>(
    model: &DownstreamModel<S>,
    patients: &[PatientTiles],
    input_size: usize,
) -> Result<Vec<PatientPrediction>> {
    patients
        .iter()
        .map(|p| {
            let imgs: Vec<&[u8]> = p.tiles.iter().map(Vec::as_slice).collect();
            let probs = predict_probs(model, &imgs, input_size)?;
            let (pred, votes, margin) = majority_vote(&probs, model.num_classes).map_err(|e| match e {
                Error::NoPatches(_) => Error::NoPatches(p.patient_id.clone()),
                e => e,
            })?;
            Ok(PatientPrediction {
                patient_id: p.patient_id.clone(),
                true_label: p.class_id,
                pred,
                votes,
                margin,
            })
        })
        .collect()
}

/// Most votes; ties go to the larger `mass`, then the lowest index.
pub fn vote_winner(votes: &[usize], mass: &[f64]) -> usize {
    let mut winner = 0;
    for c in 1..votes.len() {
        if votes[c] > votes[winner] || (votes[c] == votes[winner] && mass[c] > mass[winner]) {
            winner = c;
        }
    }
    winner
}

pub fn predictions_csv(preds: &[PatientPrediction]) -> String {
    let mut s = String::from("patient_id,true,pred,votes_per_class,margin\n");
    for p in preds {
        let votes: Vec<String> = p.votes.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{},{},{},{},{}", p.patient_id, p.true_label, p.pred, votes.join(";"), p.margin);
    }
    s
}

pub fn write_predictions(preds: &[PatientPrediction], path: &Path) -> Result<()> {
    fs::write(path, predictions_csv(preds))?;
    Ok(())
}

/// Patients per class, in id order.
pub fn patients_per_class(preds: &[PatientPrediction], k: usize) -> BTreeMap<usize, Vec<String>> {
    let mut m: BTreeMap<usize, Vec<String>> = (0..k).map(|c| (c, Vec::new())).collect();
    for p in preds {
        m.entry(p.true_label).or_default().push(p.patient_id.clone());
    }
    m
}
