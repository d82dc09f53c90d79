//! `weights.bin` / `weights.json` checkpoint files.
//!
//! Binary layout, little-endian:
//! `"WGTS"`, version `u32`, tensor count `u32`, then per tensor:
//! name length `u32`, UTF-8 name, rank `u32`, `rank` dims as `u64`,
//! and the values as `f32`.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"WGTS";
pub const VERSION: u32 = 1;
pub const WEIGHTS_BIN: &str = "weights.bin";
pub const WEIGHTS_JSON: &str = "weights.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
}

/// Named tensors as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_store<S: Scalar>(store: &ParamStore<S>) -> Self {
        Checkpoint {
            tensors: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.cast::<f32>()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every tensor whose name starts with `prefix` into `store`.
    /// All matching store parameters must be present with equal shapes.
    pub fn load_into<S: Scalar>(&self, store: &mut ParamStore<S>, prefix: &str) -> Result<usize> {
        let names: Vec<String> = store
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(_, p)| p.name.clone())
            .collect();
        for name in &names {
            let t = self.get(name).ok_or_else(|| NnError::MissingTensor(name.clone()))?;
            store.assign(name, t.cast())?;
        }
        Ok(names.len())
    }

    pub fn manifest(&self) -> WeightsManifest {
        WeightsManifest {
            version: VERSION,
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_reader(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(NnError::Format(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| NnError::Format(e.to_string()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(Checkpoint { tensors })
    }

    /// Writes `weights.bin` and `weights.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(fs::File::create(dir.join(WEIGHTS_BIN))?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        fs::write(dir.join(WEIGHTS_JSON), serde_json::to_string_pretty(&self.manifest())?)?;
        Ok(())
    }

    /// Reads `weights.bin` from `dir` and checks it against `weights.json`.
    pub fn load(dir: &Path) -> Result<Self> {
        let ckpt = Self::from_reader(BufReader::new(fs::File::open(dir.join(WEIGHTS_BIN))?))?;
        let manifest: WeightsManifest = serde_json::from_slice(&fs::read(dir.join(WEIGHTS_JSON))?)?;
        if manifest != ckpt.manifest() {
            return Err(NnError::Format("weights.json does not match weights.bin".into()));
        }
        Ok(ckpt)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("enc.w", Tensor::from_vec(&[2, 3], vec![0.5, -1.0, 2.0, 3.25, 0.0, 1e-3]).unwrap());
        s.add("head.b", Tensor::from_vec(&[1], vec![7.0]).unwrap());
        s
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ck = Checkpoint::from_store(&sample());
        ck.save(dir.path()).unwrap();
        assert_eq!(Checkpoint::load(dir.path()).unwrap(), ck);
        assert_eq!(&ck.to_bytes()[..4], b"WGTS");
    }

    #[test]
    fn load_into_checks_shapes_and_presence() {
        let ck = Checkpoint::from_store(&sample());
        let mut other = ParamStore::<f64>::new();
        other.add("enc.w", Tensor::zeros(&[2, 3]));
        other.add("enc.extra", Tensor::zeros(&[1]));
        assert!(matches!(ck.load_into(&mut other, "enc."), Err(NnError::MissingTensor(_))));

        let mut wrong = ParamStore::<f64>::new();
        wrong.add("enc.w", Tensor::zeros(&[3, 2]));
        assert!(matches!(ck.load_into(&mut wrong, "enc."), Err(NnError::ShapeMismatch { .. })));
    }

    #[test]
    fn truncated_file_fails() {
        let bytes = Checkpoint::from_store(&sample()).to_bytes();
        assert!(Checkpoint::from_reader(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_reader(&b"NOPE"[..]).is_err());
    }
}
