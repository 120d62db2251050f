//! Run configuration: model geometry presets, training, scoring and data.
//!
//! A config file is TOML. Its keys are merged over the chosen preset, so a
//! file only needs the values it changes; unknown keys are rejected.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::EncoderConfig;
use crate::data::synth::SynthConfig;
use crate::error::{Error, Result};
use crate::prototype::WindowConfig;
use crate::scoring::{ContrastParams, ScoreWeights, SMOOTHING_SIGMA};
use crate::ssm::DecoderConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    PaperShape,
    Toy,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-shape" => Ok(Preset::PaperShape),
            "toy" => Ok(Preset::Toy),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected paper-shape or toy)"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::PaperShape => "paper-shape",
            Preset::Toy => "toy",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Precision {
    F32,
    F64,
}

impl TryFrom<u32> for Precision {
    type Error = String;

    fn try_from(v: u32) -> std::result::Result<Self, String> {
        match v {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            _ => Err(format!("precision must be 32 or 64, got {v}")),
        }
    }
}

impl From<Precision> for u32 {
    fn from(p: Precision) -> u32 {
        match p {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub stem_channels: usize,
    pub level_channels: [usize; 3],
    pub fused_channels: usize,
    pub stage_channels: [usize; 4],
    pub depths: [usize; 4],
    pub expansion: usize,
    pub conv_kernel: usize,
    pub state_dim: usize,
    pub dt_rank: usize,
    /// Indices into the eight scan directions.
    pub directions: Vec<usize>,
    pub prototypes: usize,
    pub window: usize,
    pub encoder_trainable: bool,
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            image_size: self.image_size,
            stem_channels: self.stem_channels,
            level_channels: self.level_channels,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            fused_channels: self.fused_channels,
            stage_channels: self.stage_channels,
            depths: self.depths,
            level_channels: self.level_channels,
            expansion: self.expansion,
            conv_kernel: self.conv_kernel,
            state_dim: self.state_dim,
            dt_rank: self.dt_rank,
            directions: self.directions.clone(),
        }
    }

    pub fn window(&self) -> WindowConfig {
        WindowConfig { p: self.window }
    }

    /// Side of the fused (stride-8) grid.
    pub fn fused_side(&self) -> usize {
        self.image_size / 8
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epsilon: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Images whose fused grids seed the prototype bank.
    pub prototype_init_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    pub weights: ScoreWeights,
    pub contrast: ContrastParams,
    pub smoothing_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub preset: Preset,
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub score: ScoreConfig,
    pub synth: SynthConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self::preset(Preset::PaperShape)
    }
}

impl Config {
    pub fn preset(preset: Preset) -> Self {
        let score = ScoreConfig {
            weights: ScoreWeights::default(),
            contrast: ContrastParams::default(),
            smoothing_sigma: SMOOTHING_SIGMA,
        };
        match preset {
            Preset::PaperShape => Self {
                preset,
                seed: 0,
                precision: Precision::F32,
                model: ModelConfig {
                    image_size: 256,
                    stem_channels: 16,
                    level_channels: [32, 64, 128],
                    fused_channels: 128,
                    stage_channels: [128, 128, 64, 32],
                    depths: [3, 4, 6, 3],
                    expansion: 2,
                    conv_kernel: 4,
                    state_dim: 16,
                    dt_rank: 8,
                    directions: (0..8).collect(),
                    prototypes: 10,
                    window: 3,
                    encoder_trainable: false,
                },
                train: TrainConfig {
                    epsilon: 25.0,
                    lr: 0.005,
                    weight_decay: 1e-4,
                    batch_size: 16,
                    epochs: 100,
                    prototype_init_samples: 16,
                },
                score,
                synth: SynthConfig::with_size(256),
            },
            Preset::Toy => Self {
                preset,
                seed: 0,
                precision: Precision::F32,
                model: ModelConfig {
                    image_size: 64,
                    stem_channels: 16,
                    level_channels: [32, 64, 128],
                    fused_channels: 16,
                    stage_channels: [64, 64, 64, 32],
                    depths: [1, 1, 1, 1],
                    expansion: 2,
                    conv_kernel: 4,
                    state_dim: 4,
                    dt_rank: 4,
                    directions: (0..8).collect(),
                    prototypes: 10,
                    window: 3,
                    encoder_trainable: false,
                },
                train: TrainConfig {
                    epsilon: 25.0,
                    lr: 0.005,
                    weight_decay: 1e-4,
                    batch_size: 4,
                    epochs: 10,
                    prototype_init_samples: 16,
                },
                score,
                synth: SynthConfig::with_size(64),
            },
        }
    }

    /// Parses TOML over the preset it names (or `fallback`).
    pub fn from_toml_str(text: &str, fallback: Preset) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        let preset = match user.get("preset") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(v) => return Err(Error::Config(format!("preset must be a string, got {v}"))),
            None => fallback,
        };
        let mut base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, user);
        let cfg: Self = toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, fallback: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, fallback)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.image_size == 0 || !m.image_size.is_multiple_of(16) {
            return Err(Error::Config(format!("model.image_size {} must be a positive multiple of 16", m.image_size)));
        }
        if m.prototypes == 0 {
            return Err(Error::Config("model.prototypes must be >= 1".into()));
        }
        m.window().validate(m.fused_side(), m.fused_side()).map_err(|e| Error::Config(e.to_string()))?;
        if m.directions.is_empty() || m.directions.iter().any(|&d| d >= 8) {
            return Err(Error::Config(format!("model.directions must be non-empty indices < 8, got {:?}", m.directions)));
        }
        let t = &self.train;
        if !(t.epsilon >= 0.0 && t.epsilon.is_finite()) {
            return Err(Error::Config(format!("train.epsilon must be >= 0, got {}", t.epsilon)));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be > 0, got {}", t.lr)));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return Err(Error::Config(format!("train.weight_decay must be >= 0, got {}", t.weight_decay)));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        self.score.weights.validate()?;
        self.score.contrast.validate()?;
        self.synth.validate()?;
        if self.synth.image_size != m.image_size {
            return Err(Error::Config(format!(
                "synth.image_size {} differs from model.image_size {}",
                self.synth.image_size, m.image_size
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_constants() {
        let c = Config::default();
        assert_eq!(c.score.weights, ScoreWeights { alpha: 1.0, beta: -0.025, gamma: 400.0 });
        assert_eq!((c.score.contrast.sigma, c.score.contrast.k_sigma), (0.6, 1.2));
        assert_eq!((c.model.prototypes, c.model.window), (10, 3));
        assert_eq!((c.train.epsilon, c.train.lr, c.train.weight_decay, c.train.batch_size), (25.0, 0.005, 1e-4, 16));
        assert_eq!(c.model.image_size, 256);
        let toy = Config::preset(Preset::Toy);
        assert_eq!((toy.train.batch_size, toy.model.fused_channels), (4, 16));
    }

    #[test]
    fn toml_round_trip_and_override() {
        let c = Config::preset(Preset::Toy);
        assert_eq!(Config::from_toml_str(&c.to_toml(), Preset::PaperShape).unwrap(), c);
        let o = Config::from_toml_str("preset = \"toy\"\nseed = 7\n[train]\nepochs = 3\n", Preset::PaperShape).unwrap();
        assert_eq!((o.seed, o.train.epochs, o.model.image_size), (7, 3, 64));
    }

    #[test]
    fn rejects_bad_configs() {
        for bad in [
            "[train]\nlr = 0.0",
            "[train]\nbogus = 1",
            "precision = 16",
            "[model]\nwindow = 4",
            "preset = \"huge\"",
            "[score.contrast]\nsigma = 2.0",
            "not toml ===",
        ] {
            assert!(Config::from_toml_str(bad, Preset::Toy).is_err(), "{bad}");
        }
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = Config::preset(Preset::Toy);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
