//! One JSON document holding every tunable, grouped by stage. Unknown keys
//! are rejected everywhere.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::downstream::TileConfig;
use crate::error::{Error, Result};
use crate::eval::AblationConfig;
use crate::model::{EncoderSpec, ModelSpec};
use crate::pretext::{DatasetSpec, PretextTask};
use crate::synth::SynthConfig;
use crate::train::{DownstreamSchedule, PretextSchedule, StallAction};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderSpec,
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderSpec::desk(),
            hidden: 256,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub pretext: PretextSchedule,
    pub downstream: DownstreamSchedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamConfig {
    pub tiles: TileConfig,
    /// Fraction of labelled train patches used by `train-downstream`.
    pub label_fraction: f64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            tiles: TileConfig::default(),
            label_fraction: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ablation: AblationConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Master seed; [`Config::set_seed`] derives every stage seed from it.
    pub seed: u64,
    pub precision: Precision,
    pub synth: SynthConfig,
    pub pretext: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub downstream: DownstreamConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config::desk()
    }
}

impl Config {
    /// Laptop-sized profile: 4-level 1024 px slides, 32 px inputs, a small
    /// four-block encoder and shortened schedules.
    pub fn desk() -> Self {
        let mut c = Config {
            seed: 0,
            precision: Precision::F32,
            synth: SynthConfig::default(),
            pretext: DatasetSpec {
                count: 20_000,
                ..DatasetSpec::default()
            },
            model: ModelConfig::default(),
            train: TrainConfig {
                pretext: PretextSchedule {
                    lr0: 3e-4,
                    actions: vec![StallAction::RaiseLr(1e-3), StallAction::RaiseBatch(64)],
                    max_epochs: 8,
                    ..PretextSchedule::default()
                },
                downstream: DownstreamSchedule {
                    stage2_epochs: 20,
                    batch: 8,
                    ..DownstreamSchedule::default()
                },
            },
            downstream: DownstreamConfig::default(),
            eval: EvalConfig::default(),
        };
        c.set_seed(0);
        c
    }

    /// Full-size settings: 256 px source patches rescaled to 112, a
    /// VGG16-shaped encoder, learning rate 2e-5 raised to 1e-4 then batch
    /// 32 raised to 64 on stalls, 120 fine-tuning epochs at batch 2 and
    /// 1024 px region tiles.
    pub fn full_scale() -> Self {
        let mut c = Config::desk();
        c.synth.levels = 5;
        c.synth.base_size = 256;
        c.synth.memory_budget_mb = 1024;
        c.pretext.count = 784_495;
        c.pretext.sampler.patch_size = 256;
        c.pretext.sampler.input_size = 112;
        c.model.encoder = EncoderSpec::vgg16_shape();
        c.train.pretext = PretextSchedule {
            max_epochs: 100,
            ..PretextSchedule::default()
        };
        c.train.downstream = DownstreamSchedule::default();
        c.downstream.tiles.tile = 1024;
        c.downstream.tiles.input_size = 112;
        c
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full_scale()),
            _ => Err(Error::Config(format!("unknown profile {name:?} (desk, full)"))),
        }
    }

    /// Sets the master seed and every stage seed derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.pretext.sampler.seed = seed ^ 0x5eed_0001;
        self.downstream.tiles.seed = seed ^ 0x5eed_0002;
    }

    /// Training seed for a stage, derived from the master seed.
    pub fn stage_seed(&self, stage: u64) -> u64 {
        self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stage)
    }

    pub fn model_spec(&self, task: PretextTask) -> ModelSpec {
        ModelSpec {
            encoder: self.model.encoder.clone(),
            hidden: self.model.hidden,
            task,
            n: self.pretext.sampler.n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.pretext.validate()?;
        self.model_spec(self.pretext.task).validate()?;
        self.train.pretext.validate()?;
        self.train.downstream.validate()?;
        self.downstream.tiles.validate()?;
        self.eval.ablation.validate()?;
        let f = self.downstream.label_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::FractionOutOfRange(f));
        }
        let min = self.model.encoder.min_input();
        for (what, size) in [
            ("pretext.sampler.input_size", self.pretext.sampler.input_size),
            ("downstream.tiles.input_size", self.downstream.tiles.input_size),
        ] {
            if size < min {
                return Err(Error::Config(format!("{what}={size} is below the encoder minimum {min}")));
            }
        }
        let top = self.synth.top_size();
        if self.downstream.tiles.tile > top {
            return Err(Error::Config(format!("tile {} exceeds the {top} px slide", self.downstream.tiles.tile)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Dotted paths of every leaf key under `section` (all keys when empty).
    pub fn keys(section: &str) -> Vec<String> {
        fn walk(v: &serde_json::Value, prefix: &str, out: &mut Vec<String>) {
            match v {
                serde_json::Value::Object(m) => {
                    for (k, v) in m {
                        let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(v, &p, out);
                    }
                }
                _ => out.push(prefix.to_string()),
            }
        }
        let v = serde_json::to_value(Config::desk()).expect("config serialises");
        let mut out = Vec::new();
        walk(&v, "", &mut out);
        out.retain(|k| section.is_empty() || k == section || k.starts_with(&format!("{section}.")));
        out
    }
}
