//! Pretext shards on disk: little-endian binary record streams plus a JSON
//! sidecar carrying the full generation config.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sampler::{sample_location, sample_pair, SamplerConfig};
use crate::error::{Error, Result};
use crate::pyramid::Raster;
use crate::synth::{Split, SynthCohort};

pub const SHARD_MAGIC: &[u8; 4] = b"PSSL";
pub const SHARD_VERSION: u32 = 1;
pub const TRAIN_SHARD: &str = "train.pssl";
pub const VAL_SHARD: &str = "val.pssl";
pub const DATASET_FILE: &str = "dataset.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretextTask {
    /// Which of the `4^n` cells holds the child.
    Location,
    /// Inside/outside pairs.
    Pair,
}

impl PretextTask {
    pub fn num_outputs(self, n: usize) -> usize {
        match self {
            PretextTask::Location => 1 << (2 * n),
            PretextTask::Pair => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub task: PretextTask,
    /// Total records over both shards.
    pub count: usize,
    /// Fraction of records going to the train shard.
    pub train_ratio: f64,
    pub sampler: SamplerConfig,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            task: PretextTask::Location,
            count: 24_000,
            train_ratio: 0.92,
            sampler: SamplerConfig::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        if self.count < 2 {
            return Err(Error::Config("pretext count must be >= 2".into()));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::Config(format!("train_ratio {} outside (0, 1)", self.train_ratio)));
        }
        Ok(())
    }

    /// Records in the train shard; the rest go to validation.
    pub fn train_count(&self) -> usize {
        ((self.count as f64 * self.train_ratio).round() as usize).clamp(1, self.count - 1)
    }
}

/// Sidecar written next to the shards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub spec: DatasetSpec,
    pub train_count: usize,
    pub val_count: usize,
    /// Train-split patients that contributed slides.
    pub patients: Vec<String>,
}

/// Records held as raw 8-bit RGB, `[input_size, input_size, 3]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct PretextShard {
    pub n: usize,
    pub input_size: usize,
    pub labels: Vec<u32>,
    pub parents: Vec<u8>,
    pub children: Vec<u8>,
}

impl PretextShard {
    pub fn new(n: usize, input_size: usize) -> Self {
        PretextShard {
            n,
            input_size,
            labels: Vec::new(),
            parents: Vec::new(),
            children: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn record_bytes(&self) -> usize {
        self.input_size * self.input_size * 3
    }

    pub fn push<T: crate::Scalar>(&mut self, label: u32, parent: &Raster<T>, child: &Raster<T>) -> Result<()> {
        for r in [parent, child] {
            if r.width() != self.input_size || r.height() != self.input_size || r.channels() != 3 {
                return Err(Error::ShapeMismatch(format!(
                    "record {}x{}x{} in a {}px shard",
                    r.width(),
                    r.height(),
                    r.channels(),
                    self.input_size
                )));
            }
        }
        self.labels.push(label);
        self.parents.extend(parent.to_u8());
        self.children.extend(child.to_u8());
        Ok(())
    }

    pub fn parent_bytes(&self, i: usize) -> &[u8] {
        let b = self.record_bytes();
        &self.parents[i * b..(i + 1) * b]
    }

    pub fn child_bytes(&self, i: usize) -> &[u8] {
        let b = self.record_bytes();
        &self.children[i * b..(i + 1) * b]
    }

    pub fn parent<T: crate::Scalar>(&self, i: usize) -> Raster<T> {
        Raster::from_u8(self.input_size, self.input_size, 3, self.parent_bytes(i)).expect("record size")
    }

    pub fn child<T: crate::Scalar>(&self, i: usize) -> Raster<T> {
        Raster::from_u8(self.input_size, self.input_size, 3, self.child_bytes(i)).expect("record size")
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(SHARD_MAGIC)?;
        w.write_all(&SHARD_VERSION.to_le_bytes())?;
        w.write_all(&(self.n as u32).to_le_bytes())?;
        w.write_all(&(self.input_size as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for i in 0..self.len() {
            w.write_all(&self.labels[i].to_le_bytes())?;
            w.write_all(self.parent_bytes(i))?;
            w.write_all(self.child_bytes(i))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if &magic != SHARD_MAGIC {
            return Err(Error::DataFormat(format!("bad shard magic {magic:?}")));
        }
        let version = read_u32(r, "version")?;
        if version != SHARD_VERSION {
            return Err(Error::DataFormat(format!("unsupported shard version {version}")));
        }
        let n = read_u32(r, "n")? as usize;
        let input_size = read_u32(r, "input_size")? as usize;
        let mut count = [0u8; 8];
        read_exact(r, &mut count, "count")?;
        let count = u64::from_le_bytes(count) as usize;
        if n == 0 || n > 8 || input_size == 0 {
            return Err(Error::DataFormat(format!("implausible header n={n} input_size={input_size}")));
        }
        let mut shard = PretextShard::new(n, input_size);
        let b = shard.record_bytes();
        let mut parent = vec![0u8; b];
        let mut child = vec![0u8; b];
        for i in 0..count {
            let label = read_u32(r, "label")?;
            read_exact(r, &mut parent, "parent")?;
            read_exact(r, &mut child, "child")?;
            if label as usize >= (1 << (2 * n)) {
                return Err(Error::DataFormat(format!("record {i}: label {label} >= 4^{n}")));
            }
            shard.labels.push(label);
            shard.parents.extend_from_slice(&parent);
            shard.children.extend_from_slice(&child);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::DataFormat("trailing bytes after last record".into()));
        }
        Ok(shard)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::DataFormat(format!("truncated shard reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

type Record = (u32, Raster<f32>, Raster<f32>);

/// Draws `spec.count` records from train-split patients and writes
/// `train.pssl`, `val.pssl` and `dataset.json` into `out`.
///
/// Draw unit `u` (one location sample, or one pair yielding two records)
/// uses its own ChaCha stream `u` under `spec.sampler.seed`, so the output
/// does not depend on the thread count.
pub fn build_dataset(cohort: &SynthCohort, spec: &DatasetSpec, out: &Path) -> Result<DatasetInfo> {
    spec.validate()?;
    let slides: Vec<(&str, &crate::synth::SlideEntry)> = cohort
        .patients_in(Split::Train)
        .flat_map(|p| p.slides.iter().map(move |s| (p.patient_id.as_str(), s)))
        .collect();
    if slides.is_empty() {
        return Err(Error::Config("cohort has no train-split slides".into()));
    }
    let per_unit = match spec.task {
        PretextTask::Location => 1,
        PretextTask::Pair => 2,
    };
    let units = spec.count.div_ceil(per_unit);
    let cfg = &spec.sampler;
    let unit_rng = |u: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u as u64);
        rng
    };

    // slide choice is the first draw of each unit's stream
    let mut by_slide: Vec<Vec<usize>> = vec![Vec::new(); slides.len()];
    for u in 0..units {
        by_slide[unit_rng(u).gen_range(0..slides.len())].push(u);
    }

    let drawn: Vec<Vec<(usize, Vec<Record>)>> = by_slide
        .par_iter()
        .enumerate()
        .filter(|(_, us)| !us.is_empty())
        .map(|(s, us)| {
            let (pid, slide) = slides[s];
            let img = cohort.load_slide::<f32>(slide)?;
            let id = format!("{pid}/slide{s}");
            us.iter()
                .map(|&u| {
                    let mut rng = unit_rng(u);
                    let _slide_draw: usize = rng.gen_range(0..slides.len());
                    let recs = match spec.task {
                        PretextTask::Location => {
                            let smp = sample_location(&img, &id, cfg, &mut rng)?;
                            vec![(smp.label, smp.parent, smp.child)]
                        }
                        PretextTask::Pair => {
                            let (a, b) = sample_pair(&img, &id, cfg, &mut rng)?;
                            vec![
                                (a.label as u32, a.parent, a.child),
                                (b.label as u32, b.parent, b.child),
                            ]
                        }
                    };
                    Ok((u, recs))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut ordered: Vec<Option<Vec<Record>>> = vec![None; units];
    for (u, recs) in drawn.into_iter().flatten() {
        ordered[u] = Some(recs);
    }
    let n_train = spec.train_count();
    let mut train = PretextShard::new(cfg.n, cfg.input_size);
    let mut val = PretextShard::new(cfg.n, cfg.input_size);
    let records = ordered.into_iter().flat_map(|r| r.expect("every unit drawn")).take(spec.count);
    for (i, (label, parent, child)) in records.enumerate() {
        let shard = if i < n_train { &mut train } else { &mut val };
        shard.push(label, &parent, &child)?;
    }

    fs::create_dir_all(out)?;
    train.save(&out.join(TRAIN_SHARD))?;
    val.save(&out.join(VAL_SHARD))?;
    let mut patients: Vec<String> = slides.iter().map(|(p, _)| p.to_string()).collect();
    patients.dedup();
    let info = DatasetInfo {
        spec: spec.clone(),
        train_count: train.len(),
        val_count: val.len(),
        patients,
    };
    fs::write(out.join(DATASET_FILE), serde_json::to_string_pretty(&info)?)?;
    Ok(info)
}

impl DatasetInfo {
    pub fn load(dir: &Path) -> Result<Self> {
        let raw = fs::read(dir.join(DATASET_FILE))?;
        serde_json::from_slice(&raw).map_err(|e| Error::DataFormat(format!("{DATASET_FILE}: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arithmetic() {
        let spec = DatasetSpec {
            count: 1000,
            ..DatasetSpec::default()
        };
        assert_eq!(spec.train_count(), 920);
        assert_eq!(spec.count - spec.train_count(), 80);
    }

    #[test]
    fn shard_round_trip_and_corruption() {
        let mut shard = PretextShard::new(2, 4);
        let a = Raster::from_u8(4, 4, 3, &(0..48).map(|i| i as u8 * 5).collect::<Vec<_>>()).unwrap();
        let b = Raster::<f32>::from_u8(4, 4, 3, &[200u8; 48]).unwrap();
        shard.push(15, &a, &b).unwrap();
        shard.push(0, &b, &a).unwrap();
        let mut bytes = Vec::new();
        shard.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"PSSL");
        assert_eq!(bytes.len(), 24 + 2 * (4 + 96));
        let back = PretextShard::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, shard);
        assert_eq!(back.parent::<f32>(0), a);

        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(
            PretextShard::read_from(&mut &truncated[..]),
            Err(Error::DataFormat(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(PretextShard::read_from(&mut bad.as_slice()), Err(Error::DataFormat(_))));
        let mut bad_label = bytes.clone();
        bad_label[24] = 16;
        assert!(matches!(
            PretextShard::read_from(&mut bad_label.as_slice()),
            Err(Error::DataFormat(_))
        ));
    }
}
