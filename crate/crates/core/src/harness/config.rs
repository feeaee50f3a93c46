//! Training configuration, loadable from TOML.
//!
//! ```toml
//! mode = "univ-full"
//! max_iters = 2000
//! seed = 1
//!
//! [[domains]]
//! id = "city"
//! root = "data/city"
//! n_labeled = 20
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::InputNorm;
use crate::error::{Error, Result};
use crate::model::{Activation, DomainHead, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    TrainOnSource,
    UnivBasic,
    UnivCross,
    UnivFull,
    DirectSer,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::TrainOnSource => "train-on-source",
            Mode::UnivBasic => "univ-basic",
            Mode::UnivCross => "univ-cross",
            Mode::UnivFull => "univ-full",
            Mode::DirectSer => "direct-ser",
        }
    }

    /// True when the mode's loss reads label prototypes.
    pub fn uses_prototypes(self) -> bool {
        matches!(self, Mode::UnivCross | Mode::UnivFull)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "train-on-source" => Mode::TrainOnSource,
            "univ-basic" => Mode::UnivBasic,
            "univ-cross" => Mode::UnivCross,
            "univ-full" => Mode::UnivFull,
            "direct-ser" => Mode::DirectSer,
            other => return Err(Error::Config(format!("unknown mode {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub id: String,
    /// Dataset folder; relative paths resolve against the data root.
    #[serde(default)]
    pub root: Option<PathBuf>,
    /// Random-crop size `[h, w]`; falls back to the global `crop_hw`.
    #[serde(default)]
    pub crop_hw: Option<[usize; 2]>,
    /// Labeled pairs kept; the rest become unlabeled images.
    #[serde(default)]
    pub n_labeled: Option<usize>,
    #[serde(default)]
    pub n_unlabeled: Option<usize>,
}

fn d_alpha() -> f64 {
    1.0
}
fn d_lr() -> f64 {
    0.001
}
fn d_momentum() -> f64 {
    0.9
}
fn d_power() -> f64 {
    0.9
}
fn d_max_iters() -> usize {
    2000
}
fn d_batch() -> usize {
    10
}
fn d_ratio() -> f64 {
    0.5
}
fn d_crop() -> [usize; 2] {
    [64, 64]
}
fn d_embed() -> usize {
    32
}
fn d_k() -> usize {
    1
}
fn d_theta() -> f64 {
    1.0
}
fn d_channels() -> Vec<usize> {
    vec![16, 32, 64]
}
fn d_strides() -> Vec<usize> {
    vec![2, 2, 1]
}
fn d_pretrain() -> usize {
    600
}
fn d_cap() -> usize {
    2000
}
fn d_restarts() -> usize {
    10
}
fn d_probe() -> usize {
    50
}
fn d_decoder_fit() -> usize {
    300
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub domains: Vec<DomainConfig>,
    pub mode: Mode,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_alpha")]
    pub beta: f64,
    #[serde(default = "d_lr")]
    pub lr: f64,
    /// Learning rate for supervised pretraining; defaults to `lr`.
    #[serde(default)]
    pub pretrain_lr: Option<f64>,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_power")]
    pub poly_power: f64,
    #[serde(default = "d_max_iters")]
    pub max_iters: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_ratio")]
    pub labeled_ratio: f64,
    #[serde(default = "d_crop")]
    pub crop_hw: [usize; 2],
    #[serde(default = "d_embed")]
    pub d: usize,
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_theta")]
    pub theta: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_channels")]
    pub encoder_channels: Vec<usize>,
    #[serde(default = "d_strides")]
    pub encoder_strides: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "d_pretrain")]
    pub pretrain_iters: usize,
    #[serde(default = "d_cap")]
    pub proto_cap_per_class: usize,
    #[serde(default = "d_restarts")]
    pub kmeans_restarts: usize,
    /// Validation cadence; defaults to `max_iters / 20`.
    #[serde(default)]
    pub eval_every: Option<usize>,
    /// Unlabeled images per domain used to measure prediction entropy.
    #[serde(default = "d_probe")]
    pub entropy_probe: usize,
    /// Domain trained in `train-on-source`; defaults to the first.
    #[serde(default)]
    pub source_domain: Option<String>,
    /// Iterations for refitting a decoder on a frozen encoder.
    #[serde(default = "d_decoder_fit")]
    pub decoder_fit_iters: usize,
    #[serde(default)]
    pub norm: InputNorm,
}

impl TrainConfig {
    pub fn new(mode: Mode) -> Self {
        TrainConfig {
            domains: Vec::new(),
            mode,
            alpha: d_alpha(),
            beta: d_alpha(),
            lr: d_lr(),
            pretrain_lr: None,
            momentum: d_momentum(),
            poly_power: d_power(),
            max_iters: d_max_iters(),
            batch_size: d_batch(),
            labeled_ratio: d_ratio(),
            crop_hw: d_crop(),
            d: d_embed(),
            k: d_k(),
            theta: d_theta(),
            seed: 0,
            encoder_channels: d_channels(),
            encoder_strides: d_strides(),
            activation: Activation::default(),
            pretrain_iters: d_pretrain(),
            proto_cap_per_class: d_cap(),
            kmeans_restarts: d_restarts(),
            eval_every: None,
            entropy_probe: d_probe(),
            source_domain: None,
            decoder_fit_iters: d_decoder_fit(),
            norm: InputNorm::default(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.labeled_ratio) {
            return Err(Error::Config("labeled_ratio must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config("theta must be in [0, 1]".into()));
        }
        if self.batch_size == 0 || self.k == 0 || self.d == 0 {
            return Err(Error::Config("batch_size, k and d must be positive".into()));
        }
        if self.crop_hw.iter().any(|&v| v == 0) {
            return Err(Error::Config("crop_hw must be positive".into()));
        }
        if let Some(&c) = self.encoder_channels.last() {
            if self.d > c {
                return Err(Error::Config(format!(
                    "embedding dim {} exceeds encoder channels {c}; PCA cannot up-project",
                    self.d
                )));
            }
        }
        Ok(())
    }

    /// Loss weights implied by the mode.
    pub fn effective_weights(&self) -> (f64, f64) {
        match self.mode {
            Mode::TrainOnSource | Mode::UnivBasic => (0.0, 0.0),
            Mode::UnivCross => (1.0, 0.0),
            Mode::UnivFull => (self.alpha, self.beta),
            Mode::DirectSer => (0.0, self.beta),
        }
    }

    pub fn eval_every(&self) -> usize {
        self.eval_every.unwrap_or(self.max_iters / 20).max(1)
    }

    pub fn crop_for(&self, domain: usize) -> [usize; 2] {
        self.domains
            .get(domain)
            .and_then(|d| d.crop_hw)
            .unwrap_or(self.crop_hw)
    }

    pub fn model_config(&self, domains: Vec<DomainHead>) -> ModelConfig {
        ModelConfig {
            in_channels: 3,
            encoder_channels: self.encoder_channels.clone(),
            encoder_strides: self.encoder_strides.clone(),
            activation: self.activation,
            embed_dim: self.d,
            domains,
        }
    }
}
