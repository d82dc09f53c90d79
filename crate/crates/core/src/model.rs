//! Siamese patch encoder with a fusion head for the pretext tasks, and the
//! linear downstream classifier that reuses the encoder.
//!
//! Parameter names: `encoder.block{b}.conv{r}.*`, `fusion.hidden.*`,
//! `fusion.out.*`, `head.*`.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use zoomloc_nn::layers::{Conv2d, Dense};
use zoomloc_nn::{Checkpoint, Graph, NodeId, Padding, ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::pretext::PretextTask;
use crate::Scalar;

pub const MODEL_FILE: &str = "model.json";
/// Pixels in [0, 1] are fed as `(v - INPUT_MEAN) * INPUT_SCALE`.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_SCALE: f64 = 4.0;

/// Conv stack: each block is `repeats` 3x3 same-padded conv+relu layers
/// with `filters` channels followed by a 2x2 max pool, except the last
/// block which ends in a global average pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    /// `(filters, repeats)` per block.
    pub blocks: Vec<(usize, usize)>,
    pub kernel: usize,
    pub in_channels: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::desk()
    }
}

impl EncoderSpec {
    pub fn desk() -> Self {
        EncoderSpec {
            blocks: vec![(8, 1), (16, 1), (32, 1), (64, 1)],
            kernel: 3,
            in_channels: 3,
        }
    }

    /// VGG16 layer layout with the final max pool swapped for an average pool.
    pub fn vgg16_shape() -> Self {
        EncoderSpec {
            blocks: vec![(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)],
            kernel: 3,
            in_channels: 3,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "vgg16-shape" => Ok(Self::vgg16_shape()),
            _ => Err(Error::Spec(format!("unknown encoder preset {name:?}"))),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.0)
    }

    /// Smallest input side that survives every max pool.
    pub fn min_input(&self) -> usize {
        1 << self.blocks.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Spec("encoder needs at least one block".into()));
        }
        if self.blocks.iter().any(|&(f, r)| f == 0 || r == 0) {
            return Err(Error::Spec("block filters and repeats must be positive".into()));
        }
        if self.kernel % 2 == 0 || self.in_channels == 0 {
            return Err(Error::Spec("kernel must be odd and in_channels positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub encoder: EncoderSpec,
    /// Width of the fusion hidden layer.
    pub hidden: usize,
    pub task: PretextTask,
    /// Zoom difference; fixes `4^n` location outputs.
    pub n: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            encoder: EncoderSpec::desk(),
            hidden: 256,
            task: PretextTask::Location,
            n: 2,
        }
    }
}

impl ModelSpec {
    pub fn outputs(&self) -> usize {
        self.task.num_outputs(self.n)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.hidden == 0 {
            return Err(Error::Spec("fusion hidden width must be positive".into()));
        }
        if self.n == 0 || self.n > 4 {
            return Err(Error::Spec(format!("zoom difference n={} outside 1..=4", self.n)));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MODEL_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let raw = fs::read(dir.join(MODEL_FILE))?;
        serde_json::from_slice(&raw).map_err(|e| Error::Spec(format!("{MODEL_FILE}: {e}")))
    }
}

/// Shared conv stack.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub spec: EncoderSpec,
    blocks: Vec<Vec<Conv2d>>,
}

impl Encoder {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, spec: &EncoderSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut in_ch = spec.in_channels;
        let mut blocks = Vec::new();
        for (b, &(filters, repeats)) in spec.blocks.iter().enumerate() {
            let mut convs = Vec::new();
            for r in 0..repeats {
                let name = format!("encoder.block{b}.conv{r}");
                convs.push(Conv2d::new(store, &name, in_ch, filters, spec.kernel, Padding::Same, rng));
                in_ch = filters;
            }
            blocks.push(convs);
        }
        Ok(Encoder {
            spec: spec.clone(),
            blocks,
        })
    }

    /// `x` is `[B, C, H, W]`; returns `[B, latent_dim]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        let last = self.blocks.len() - 1;
        for (b, convs) in self.blocks.iter().enumerate() {
            for conv in convs {
                h = conv.forward(g, store, h)?;
                h = g.relu(h);
            }
            h = if b == last { g.global_avgpool(h)? } else { g.maxpool2(h)? };
        }
        Ok(h)
    }
}

/// Converts 8-bit interleaved RGB records into a normalised `[B, 3, s, s]` tensor.
pub fn images_to_tensor<S: Scalar>(images: &[&[u8]], size: usize) -> Result<Tensor<S>> {
    let plane = size * size;
    let mut data = vec![S::zero(); images.len() * 3 * plane];
    let scale = S::from_f64_lossy(INPUT_SCALE / 255.0);
    let offset = S::from_f64_lossy(INPUT_MEAN * INPUT_SCALE);
    for (i, img) in images.iter().enumerate() {
        if img.len() != 3 * plane {
            return Err(Error::ShapeMismatch(format!("image of {} bytes, expected {}", img.len(), 3 * plane)));
        }
        let dst = &mut data[i * 3 * plane..(i + 1) * 3 * plane];
        for (p, px) in img.chunks_exact(3).enumerate() {
            for c in 0..3 {
                dst[c * plane + p] = S::from_f64_lossy(px[c] as f64) * scale - offset;
            }
        }
    }
    Ok(Tensor::from_vec(&[images.len(), 3, size, size], data)?)
}

/// Encoder applied to child and parent with the same parameters, then
/// `concat(child, parent) -> hidden -> relu -> outputs`.
#[derive(Clone, Debug)]
pub struct SiameseModel<S> {
    pub spec: ModelSpec,
    pub store: ParamStore<S>,
    pub encoder: Encoder,
    hidden: Dense,
    out: Dense,
}

impl<S: Scalar> SiameseModel<S> {
    pub fn new(spec: &ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &spec.encoder, rng)?;
        let latent = spec.encoder.latent_dim();
        let hidden = Dense::new(&mut store, "fusion.hidden", 2 * latent, spec.hidden, rng);
        let out = Dense::new(&mut store, "fusion.out", spec.hidden, spec.outputs(), rng);
        Ok(SiameseModel {
            spec: spec.clone(),
            store,
            encoder,
            hidden,
            out,
        })
    }

    /// Logits `[B, outputs]` for child and parent batches `[B, 3, s, s]`.
    pub fn forward(&self, g: &mut Graph<S>, child: NodeId, parent: NodeId) -> Result<NodeId> {
        let zc = self.encoder.forward(g, &self.store, child)?;
        let zp = self.encoder.forward(g, &self.store, parent)?;
        let z = g.concat(&[zc, zp], 1)?;
        let h = self.hidden.forward(g, &self.store, z)?;
        let h = g.relu(h);
        Ok(self.out.forward(g, &self.store, h)?)
    }

    /// Task loss for integer labels (location index or 0/1 pair label).
    pub fn loss(&self, g: &mut Graph<S>, logits: NodeId, labels: &[u32]) -> Result<NodeId> {
        Ok(task_loss(g, logits, labels, self.spec.outputs(), self.spec.task == PretextTask::Pair)?)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store)
    }

    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.load_into(&mut self.store, "")?;
        Ok(())
    }
}

fn task_loss<S: Scalar>(g: &mut Graph<S>, logits: NodeId, labels: &[u32], k: usize, binary: bool) -> Result<NodeId> {
    if binary {
        let t: Vec<S> = labels.iter().map(|&l| if l > 0 { S::one() } else { S::zero() }).collect();
        return Ok(g.sigmoid_bce(logits, Tensor::from_vec(&[labels.len(), 1], t)?)?);
    }
    Ok(g.softmax_cross_entropy(logits, one_hot(labels, k)?)?)
}

pub fn one_hot<S: Scalar>(labels: &[u32], k: usize) -> Result<Tensor<S>> {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= k {
            return Err(Error::OutOfRange(format!("label {l} with {k} classes")));
        }
        t.data_mut()[i * k + l as usize] = S::one();
    }
    Ok(t)
}

/// Encoder plus a linear classifier over `num_classes` subtypes.
#[derive(Clone, Debug)]
pub struct DownstreamModel<S> {
    pub encoder_spec: EncoderSpec,
    pub num_classes: usize,
    pub store: ParamStore<S>,
    pub encoder: Encoder,
    head: Dense,
}

impl<S: Scalar> DownstreamModel<S> {
    /// Randomly initialised encoder and head.
    pub fn new(encoder_spec: &EncoderSpec, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Spec(format!("downstream head needs >= 2 classes, got {num_classes}")));
        }
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, encoder_spec, rng)?;
        let head = Dense::new(&mut store, "head", encoder_spec.latent_dim(), num_classes, rng);
        Ok(DownstreamModel {
            encoder_spec: encoder_spec.clone(),
            num_classes,
            store,
            encoder,
            head,
        })
    }

    /// Logits `[B, num_classes]`.
    pub fn forward(&self, g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
        let z = self.encoder.forward(g, &self.store, x)?;
        Ok(self.head.forward(g, &self.store, z)?)
    }

    pub fn loss(&self, g: &mut Graph<S>, logits: NodeId, labels: &[u32]) -> Result<NodeId> {
        task_loss(g, logits, labels, self.num_classes, false)
    }

    pub fn set_encoder_frozen(&mut self, frozen: bool) {
        self.store.set_trainable("encoder.", !frozen);
    }

    pub fn encoder_frozen(&self) -> bool {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with("encoder."))
            .all(|(_, p)| !p.trainable)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store)
    }

    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.load_into(&mut self.store, "")?;
        Ok(())
    }
}

/// Builds a downstream model whose encoder is copied from `ckpt` (any
/// checkpoint holding `encoder.*` tensors; fusion tensors are ignored) and
/// whose head is freshly initialised. `freeze` marks the encoder non-trainable.
pub fn transfer_encoder<S: Scalar>(
    ckpt: &Checkpoint,
    encoder_spec: &EncoderSpec,
    num_classes: usize,
    freeze: bool,
    rng: &mut impl Rng,
) -> Result<DownstreamModel<S>> {
    let mut model = DownstreamModel::new(encoder_spec, num_classes, rng)?;
    ckpt.load_into(&mut model.store, "encoder.")?;
    model.set_encoder_frozen(freeze);
    Ok(model)
}
