//! The experiment configuration file.
//!
//! Every key is optional; missing keys take the defaults below and unknown
//! keys are rejected. The resolved configuration serializes back to TOML
//! and its SHA-256 digest identifies a run.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{SampleOptions, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{ClassifierConfig, GridSpec, Preset};
use crate::model::ModelConfig;
use crate::nn::hex;
use crate::prompt::{Adjective, ADJECTIVES};
use crate::tensor::optim::AdamConfig;

fn check_training(section: &str, epochs: usize, batch_size: usize, lr: f64) -> Result<()> {
    if epochs == 0 || batch_size == 0 {
        return Err(Error::Config(format!("{section} epochs and batch_size must be positive")));
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Config(format!("{section} lr {lr} must be positive")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl TrainSection {
    pub fn to_train_config(self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: AdamConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamConfig::adamw() },
            seed,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { epochs: 40, batch_size: 16, lr: 1e-3, weight_decay: 1e-2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub rank: usize,
    /// Candidate ranks compared by FID.
    pub ranks: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self { rank: 4, ranks: vec![2, 4, 8], epochs: 100, batch_size: 1, lr: 1e-4, weight_decay: 1e-2 }
    }
}

impl FinetuneSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainSection { epochs: self.epochs, batch_size: self.batch_size, lr: self.lr, weight_decay: self.weight_decay }
            .to_train_config(seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub adjectives: Vec<String>,
    pub ratios: Vec<f64>,
    /// Equal counts per class instead of real class frequencies.
    pub balanced: bool,
    pub stride: usize,
    pub chunk: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            adjectives: ADJECTIVES.iter().map(|s| (*s).to_owned()).collect(),
            ratios: crate::augment::RATIOS.to_vec(),
            balanced: false,
            stride: 1,
            chunk: 16,
        }
    }
}

impl GenerateSection {
    pub fn sample_options(&self) -> SampleOptions {
        SampleOptions { stride: self.stride, chunk: self.chunk }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub presets: Vec<Preset>,
    pub folds: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self { presets: Preset::ALL.to_vec(), folds: 5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub per_class: usize,
    pub side: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        Self { per_class: 60, side: 64, val_fraction: 0.15, test_fraction: 0.15 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub pretrain: TrainSection,
    pub finetune: FinetuneSection,
    pub generate: GenerateSection,
    pub classifier: ClassifierConfig,
    pub evaluate: EvaluateSection,
    pub phantom: PhantomSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The fully resolved configuration.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of [`ExperimentConfig::to_toml`].
    pub fn digest_bytes(&self) -> Result<[u8; 32]> {
        Ok(Sha256::digest(self.to_toml()?.as_bytes()).into())
    }

    pub fn digest(&self) -> Result<String> {
        Ok(hex(&self.digest_bytes()?))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config("seed must fit in a signed 64-bit integer".into()));
        }
        for a in &self.generate.adjectives {
            Adjective::parse(a).map_err(|_| Error::Config(format!("unknown adjective {a:?}")))?;
        }
        if let Some(r) = self.generate.ratios.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            return Err(Error::Config(format!("ratio {r} must be positive")));
        }
        if self.finetune.rank == 0 || self.finetune.ranks.contains(&0) {
            return Err(Error::Config("adapter ranks must be positive".into()));
        }
        if self.generate.stride == 0 || self.generate.chunk == 0 {
            return Err(Error::Config("sampling stride and chunk must be positive".into()));
        }
        check_training("pretrain", self.pretrain.epochs, self.pretrain.batch_size, self.pretrain.lr)?;
        check_training("finetune", self.finetune.epochs, self.finetune.batch_size, self.finetune.lr)?;
        check_training("classifier", self.classifier.epochs, self.classifier.batch_size, self.classifier.lr)?;
        let p = &self.phantom;
        if p.per_class == 0 || p.side == 0 {
            return Err(Error::Config("phantom per_class and side must be positive".into()));
        }
        let fraction = |f: f64| (0.0..1.0).contains(&f);
        if !(fraction(p.val_fraction) && fraction(p.test_fraction) && p.val_fraction + p.test_fraction < 1.0) {
            return Err(Error::Config("phantom val and test fractions must lie in [0, 1) and leave a train split".into()));
        }
        if self.evaluate.folds < 2 {
            return Err(Error::Config("at least two folds are required".into()));
        }
        if self.classifier.side != self.model.unet.side {
            log::warn!(
                "classifier side {} differs from image side {}; images will be resampled",
                self.classifier.side,
                self.model.unet.side
            );
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            classifier: self.classifier,
            presets: self.evaluate.presets.clone(),
            folds: self.evaluate.folds,
            seed: self.seed,
        }
    }
}
