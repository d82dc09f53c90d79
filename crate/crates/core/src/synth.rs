//! Deterministic synthetic slides.
//!
//! The top level is rendered as band-limited noise over a class palette,
//! plus two slide-wide ramps (hue left to right, luminance top to bottom)
//! so that where a window sits is visible in its colour. Pixels outside
//! an irregular tissue blob are near-white background. Every lower level
//! is the exact 2x2 average of the one above.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::{read_pyramid, write_pyramid, PatchRef, PyramidImage, Raster};
use crate::Scalar;

pub const COHORT_FILE: &str = "cohort.json";

/// Per-class appearance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassTexture {
    pub name: String,
    /// Mean tissue colour (RGB).
    pub palette: [f64; 3],
    /// Noise band in cycles per top-level pixel.
    pub freq_lo: f64,
    pub freq_hi: f64,
    pub amplitude: f64,
}

impl ClassTexture {
    /// Four classes named after the common renal carcinoma subtypes. They
    /// share one texture band and differ by a small palette offset on a
    /// 2x2 grid of (hue, luminance), the same two axes the slide-wide ramps
    /// use; texture amplitude varies strongly between patients.
    pub fn defaults() -> Vec<ClassTexture> {
        let c = |name: &str, palette| ClassTexture {
            name: name.into(),
            palette,
            freq_lo: 1.0 / 16.0,
            freq_hi: 1.0 / 6.0,
            amplitude: 0.25,
        };
        vec![
            c("ccRCC", [0.74, 0.54, 0.60]),
            c("pRCC", [0.66, 0.46, 0.52]),
            c("chRCC", [0.66, 0.54, 0.68]),
            c("ONCO", [0.58, 0.46, 0.60]),
        ]
    }
}

/// Everything needed to render one slide.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    /// Number of levels (`N + 1`).
    pub levels: usize,
    /// Level-0 side length; the top level is `base_size * 2^N`.
    pub base_size: usize,
    pub class_id: usize,
    pub texture: ClassTexture,
    /// Total hue swing across the slide width.
    pub hue_ramp: f64,
    /// Total luminance swing down the slide height.
    pub luminance_ramp: f64,
    /// Per-slide uniform palette offset bound.
    pub palette_jitter: f64,
    /// Texture amplitude is scaled by a factor uniform in `1 ± amplitude_jitter`.
    pub amplitude_jitter: f64,
    pub memory_budget_bytes: u64,
    pub patient_id: String,
}

impl SynthSpec {
    pub fn top_size(&self) -> usize {
        self.base_size << (self.levels - 1)
    }

    fn bytes_needed<T>(&self) -> u64 {
        let top = self.top_size() as u64;
        // all levels together are < 4/3 of the top level
        top * top * 3 * std::mem::size_of::<T>() as u64 * 4 / 3
    }
}

struct NoiseField {
    // per component: (cos(ax), sin(ax)) per column, (cos(by+phi), sin(by+phi)) per row
    cols: Vec<Vec<(f64, f64)>>,
    rows: Vec<Vec<(f64, f64)>>,
    norm: f64,
}

impl NoiseField {
    fn new(rng: &mut impl Rng, size: usize, lo: f64, hi: f64, components: usize) -> Self {
        let mut cols = Vec::with_capacity(components);
        let mut rows = Vec::with_capacity(components);
        for _ in 0..components {
            let f = rng.gen_range(lo..=hi);
            let theta = rng.gen_range(0.0..PI);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let (a, b) = (2.0 * PI * f * theta.cos(), 2.0 * PI * f * theta.sin());
            cols.push((0..size).map(|x| ((a * x as f64).cos(), (a * x as f64).sin())).collect());
            rows.push(
                (0..size)
                    .map(|y| ((b * y as f64 + phase).cos(), (b * y as f64 + phase).sin()))
                    .collect(),
            );
        }
        NoiseField {
            cols,
            rows,
            norm: (2.0 / components as f64).sqrt(),
        }
    }

    /// Unit-variance sample at (`y`, `x`).
    fn at(&self, y: usize, x: usize) -> f64 {
        let mut s = 0.0;
        for (c, r) in self.cols.iter().zip(&self.rows) {
            let (ca, sa) = c[x];
            let (cb, sb) = r[y];
            s += ca * cb - sa * sb;
        }
        s * self.norm
    }
}

const NOISE_COMPONENTS: usize = 12;
const BACKGROUND: f64 = 0.94;

/// Renders the slide described by `spec`.
pub fn generate_pyramid<T: Scalar>(spec: &SynthSpec) -> Result<PyramidImage<T>> {
    if spec.levels < 3 || spec.base_size == 0 {
        return Err(Error::Config(format!(
            "synthetic pyramid needs >= 3 levels and a positive base size (got {} / {})",
            spec.levels, spec.base_size
        )));
    }
    let needed = spec.bytes_needed::<T>();
    if needed > spec.memory_budget_bytes {
        return Err(Error::BudgetExceeded {
            needed,
            budget: spec.memory_budget_bytes,
        });
    }
    let size = spec.top_size();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tex = &spec.texture;

    let mut palette = tex.palette;
    for p in &mut palette {
        *p += rng.gen_range(-spec.palette_jitter..=spec.palette_jitter);
    }
    let amp = tex.amplitude * rng.gen_range(1.0 - spec.amplitude_jitter..=1.0 + spec.amplitude_jitter);
    let dark = NoiseField::new(&mut rng, size, tex.freq_lo, tex.freq_hi, NOISE_COMPONENTS);
    let tint = NoiseField::new(&mut rng, size, tex.freq_lo, tex.freq_hi, NOISE_COMPONENTS);

    // irregular tissue blob
    let (cx, cy) = (rng.gen_range(0.47..0.53), rng.gen_range(0.47..0.53));
    let (rx, ry) = (rng.gen_range(0.44..0.48), rng.gen_range(0.44..0.48));
    let lobes: Vec<(f64, f64, f64)> = (0..3)
        .map(|k| (k as f64 + 2.0, rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.02..0.05)))
        .collect();
    let inside = |u: f64, v: f64| {
        let (dx, dy) = ((u - cx) / rx, (v - cy) / ry);
        let theta = dy.atan2(dx);
        let wobble: f64 = lobes.iter().map(|(f, ph, a)| a * (f * theta + ph).sin()).sum();
        (dx * dx + dy * dy).sqrt() <= 1.0 + wobble
    };

    let mut bg_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut top = Raster::<T>::new(size, size, 3);
    let inv = 1.0 / size as f64;
    for y in 0..size {
        let v = (y as f64 + 0.5) * inv;
        for x in 0..size {
            let u = (x as f64 + 0.5) * inv;
            let px = top.pixel_mut(y, x);
            if !inside(u, v) {
                for c in px.iter_mut() {
                    *c = T::from_f64_lossy(BACKGROUND + bg_rng.gen_range(-0.01..0.01));
                }
                continue;
            }
            let hue = spec.hue_ramp * (u - 0.5);
            let lum = spec.luminance_ramp * (0.5 - v);
            let (n1, n2) = (dark.at(y, x), tint.at(y, x));
            let rgb = [
                palette[0] + hue + lum + amp * (0.9 * n1 + 0.4 * n2),
                palette[1] + lum + amp * (0.9 * n1 - 0.4 * n2),
                palette[2] - hue + lum + amp * (0.7 * n1 + 0.2 * n2),
            ];
            for (c, val) in px.iter_mut().zip(rgb) {
                *c = T::from_f64_lossy(val.clamp(0.0, 1.0));
            }
        }
    }
    PyramidImage::from_top(top, spec.levels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Cohort layout and slide appearance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub levels: usize,
    pub base_size: usize,
    pub classes: Vec<ClassTexture>,
    /// Train patients per class.
    pub train_patients: Vec<usize>,
    /// Test patients per class.
    pub test_patients: Vec<usize>,
    pub slides_per_patient: usize,
    pub hue_ramp: f64,
    pub luminance_ramp: f64,
    pub palette_jitter: f64,
    pub amplitude_jitter: f64,
    /// Side of the labelled region as a fraction of the top-level side.
    pub roi_fraction: f64,
    pub memory_budget_mb: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            levels: 4,
            base_size: 128,
            classes: ClassTexture::defaults(),
            train_patients: vec![5; 4],
            test_patients: vec![8; 4],
            slides_per_patient: 1,
            hue_ramp: 0.25,
            luminance_ramp: 0.25,
            palette_jitter: 0.008,
            amplitude_jitter: 0.7,
            roi_fraction: 0.25,
            memory_budget_mb: 256,
        }
    }
}

impl SynthConfig {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.classes.len();
        if k < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {k}")));
        }
        if self.train_patients.len() != k || self.test_patients.len() != k {
            return Err(Error::Config(format!(
                "per-class patient counts must have {k} entries"
            )));
        }
        for (c, (&tr, &te)) in self.train_patients.iter().zip(&self.test_patients).enumerate() {
            if tr == 0 || te == 0 {
                return Err(Error::Config(format!(
                    "class {} ({}) needs at least one train and one test patient (got {tr}/{te})",
                    c, self.classes[c].name
                )));
            }
        }
        if self.levels < 3 {
            return Err(Error::Config("levels must be >= 3".into()));
        }
        if self.slides_per_patient == 0 {
            return Err(Error::Config("slides_per_patient must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.amplitude_jitter) || self.palette_jitter < 0.0 {
            return Err(Error::Config("amplitude_jitter must be in [0, 1), palette_jitter >= 0".into()));
        }
        if !(0.0 < self.roi_fraction && self.roi_fraction <= 1.0) {
            return Err(Error::Config("roi_fraction must be in (0, 1]".into()));
        }
        for c in &self.classes {
            if !(0.0 < c.freq_lo && c.freq_lo <= c.freq_hi) {
                return Err(Error::Config(format!("class {}: bad frequency band", c.name)));
            }
        }
        Ok(())
    }

    pub fn top_size(&self) -> usize {
        self.base_size << (self.levels - 1)
    }
}

/// One slide of a planned or generated cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideEntry {
    /// Render recipe; absent for cohorts opened from disk.
    pub spec: Option<SynthSpec>,
    /// Labelled region at the top level.
    pub roi: PatchRef,
    /// Directory of the written pyramid, relative to the cohort root.
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientEntry {
    pub patient_id: String,
    pub class_id: usize,
    pub split: Split,
    pub slides: Vec<SlideEntry>,
}

/// Patients with their class and split. Slides are either rendered on
/// demand from their spec or read from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCohort {
    pub root: Option<PathBuf>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub patients: Vec<PatientEntry>,
}

/// Row of `cohort.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortRecord {
    pub patient_id: String,
    pub class_id: usize,
    pub split: Split,
    pub pyramid_path: String,
    /// Labelled region at the top level, `[row, col, height, width]`.
    pub roi: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortManifest {
    pub class_names: Vec<String>,
    pub patients: Vec<CohortRecord>,
}

impl SynthCohort {
    /// Lays out patients and slide specs without rendering anything.
    /// Patient `i` renders from seed `seed ^ i` (slide `s` adds `s << 32`).
    pub fn plan(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let top = cfg.top_size();
        let mut patients = Vec::new();
        let mut index = 0u64;
        for (class_id, class) in cfg.classes.iter().enumerate() {
            let counts = [
                (Split::Train, cfg.train_patients[class_id]),
                (Split::Test, cfg.test_patients[class_id]),
            ];
            for (split, count) in counts {
                for _ in 0..count {
                    let patient_id = format!("P{index:03}");
                    let seed = cfg.seed ^ index;
                    let mut roi_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5151));
                    let slides = (0..cfg.slides_per_patient)
                        .map(|s| {
                            let side = ((top as f64 * cfg.roi_fraction) as usize).max(1);
                            let slack = (top - side) / 8;
                            let jitter = |r: &mut ChaCha8Rng| {
                                if slack == 0 {
                                    0
                                } else {
                                    r.gen_range(0..=2 * slack)
                                }
                            };
                            let row = (top - side) / 2 - slack + jitter(&mut roi_rng);
                            let col = (top - side) / 2 - slack + jitter(&mut roi_rng);
                            SlideEntry {
                                spec: Some(SynthSpec {
                                    seed: seed ^ ((s as u64) << 32),
                                    levels: cfg.levels,
                                    base_size: cfg.base_size,
                                    class_id,
                                    texture: class.clone(),
                                    hue_ramp: cfg.hue_ramp,
                                    luminance_ramp: cfg.luminance_ramp,
                                    palette_jitter: cfg.palette_jitter,
                                    amplitude_jitter: cfg.amplitude_jitter,
                                    memory_budget_bytes: cfg.memory_budget_mb << 20,
                                    patient_id: patient_id.clone(),
                                }),
                                roi: PatchRef::square(cfg.levels - 1, row, col, side),
                                path: None,
                            }
                        })
                        .collect();
                    patients.push(PatientEntry {
                        patient_id,
                        class_id,
                        split,
                        slides,
                    });
                    index += 1;
                }
            }
        }
        Ok(SynthCohort {
            root: None,
            num_classes: cfg.num_classes(),
            class_names: cfg.classes.iter().map(|c| c.name.clone()).collect(),
            patients,
        })
    }

    pub fn patients_in(&self, split: Split) -> impl Iterator<Item = &PatientEntry> {
        self.patients.iter().filter(move |p| p.split == split)
    }

    /// Reads the slide from disk when the cohort was written, otherwise renders it.
    pub fn load_slide<T: Scalar>(&self, slide: &SlideEntry) -> Result<PyramidImage<T>> {
        match (&self.root, &slide.path, &slide.spec) {
            (Some(root), Some(rel), _) => read_pyramid(&root.join(rel)),
            (_, _, Some(spec)) => generate_pyramid(spec),
            _ => Err(Error::DataFormat("slide has neither a file nor a render spec".into())),
        }
    }

    pub fn manifest(&self) -> CohortManifest {
        let mut patients = Vec::new();
        for p in &self.patients {
            for (s, slide) in p.slides.iter().enumerate() {
                let path = slide
                    .path
                    .clone()
                    .unwrap_or_else(|| PathBuf::from(format!("pyramids/{}/slide_{s}", p.patient_id)));
                patients.push(CohortRecord {
                    patient_id: p.patient_id.clone(),
                    class_id: p.class_id,
                    split: p.split,
                    pyramid_path: path.to_string_lossy().into_owned(),
                    roi: [slide.roi.row, slide.roi.col, slide.roi.height, slide.roi.width],
                });
            }
        }
        CohortManifest {
            class_names: self.class_names.clone(),
            patients,
        }
    }

    /// Loads a cohort written by [`generate_cohort`].
    pub fn open(root: &Path) -> Result<Self> {
        let raw = fs::read(root.join(COHORT_FILE))?;
        let m: CohortManifest =
            serde_json::from_slice(&raw).map_err(|e| Error::DataFormat(format!("{COHORT_FILE}: {e}")))?;
        let mut patients: Vec<PatientEntry> = Vec::new();
        for rec in m.patients {
            if rec.class_id >= m.class_names.len() {
                return Err(Error::DataFormat(format!(
                    "{}: class {} out of range",
                    rec.patient_id, rec.class_id
                )));
            }
            let path = PathBuf::from(&rec.pyramid_path);
            let pyr_meta: crate::pyramid::PyramidManifest = serde_json::from_slice(&fs::read(
                root.join(&path).join(crate::pyramid::MANIFEST_FILE),
            )?)
            .map_err(|e| Error::Format(e.to_string()))?;
            let [row, col, h, w] = rec.roi;
            let slide = SlideEntry {
                spec: None,
                roi: PatchRef::new(pyr_meta.levels - 1, row, col, h, w),
                path: Some(path),
            };
            match patients.iter_mut().find(|p| p.patient_id == rec.patient_id) {
                Some(p) => {
                    if p.class_id != rec.class_id || p.split != rec.split {
                        return Err(Error::DataFormat(format!(
                            "patient {} listed with conflicting class/split",
                            rec.patient_id
                        )));
                    }
                    p.slides.push(slide);
                }
                None => patients.push(PatientEntry {
                    patient_id: rec.patient_id,
                    class_id: rec.class_id,
                    split: rec.split,
                    slides: vec![slide],
                }),
            }
        }
        Ok(SynthCohort {
            root: Some(root.to_path_buf()),
            num_classes: m.class_names.len(),
            class_names: m.class_names,
            patients,
        })
    }
}

/// Renders every slide of the planned cohort into `out` and writes `cohort.json`.
pub fn generate_cohort(cfg: &SynthConfig, out: &Path) -> Result<SynthCohort> {
    let mut cohort = SynthCohort::plan(cfg)?;
    fs::create_dir_all(out)?;
    let jobs: Vec<(usize, usize)> = cohort
        .patients
        .iter()
        .enumerate()
        .flat_map(|(p, e)| (0..e.slides.len()).map(move |s| (p, s)))
        .collect();
    let paths: Vec<PathBuf> = jobs
        .par_iter()
        .map(|&(p, s)| {
            let entry = &cohort.patients[p];
            let rel = PathBuf::from(format!("pyramids/{}/slide_{s}", entry.patient_id));
            let spec = entry.slides[s].spec.as_ref().expect("planned slides carry a spec");
            let img = generate_pyramid::<f32>(spec)?;
            write_pyramid(&img, &out.join(&rel))?;
            Ok(rel)
        })
        .collect::<Result<_>>()?;
    for (&(p, s), rel) in jobs.iter().zip(paths) {
        cohort.patients[p].slides[s].path = Some(rel);
    }
    cohort.root = Some(out.to_path_buf());
    fs::write(out.join(COHORT_FILE), serde_json::to_string_pretty(&cohort.manifest())?)?;
    Ok(cohort)
}

/// Mean tissue colour per class over the labelled regions of train slides.
pub fn class_channel_means(cohort: &SynthCohort) -> Result<Vec<[f64; 3]>> {
    let mut sums = vec![[0.0; 3]; cohort.num_classes];
    let mut counts = vec![0usize; cohort.num_classes];
    for p in &cohort.patients {
        for slide in &p.slides {
            let img: PyramidImage<f32> = cohort.load_slide(slide)?;
            let roi = img.extract(&slide.roi)?;
            let m = roi.channel_means();
            for c in 0..3 {
                sums[p.class_id][c] += m[c];
            }
            counts[p.class_id] += 1;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| s.map(|v| v / n.max(1) as f64))
        .collect())
}
