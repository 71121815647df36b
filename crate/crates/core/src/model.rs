//! The denoiser plus its text encoder, sharing one parameter store.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{NoisePredictor, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::prompt::PromptTemplate;
use crate::rng::RngStream;
use crate::tensor::{checkpoint, Tensor};
use crate::text::{Conditioning, TextConfig, TextEncoder, Vocabulary};
use crate::unet::{BaseWeights, Projection, UNet, UNetConfig};

pub const TEXT_PREFIX: &str = "text.";
pub const SCHEDULE_ENTRY: &str = "__schedule.beta";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub text: TextConfig,
    pub schedule: ScheduleConfig,
    pub template: PromptTemplate,
}


impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        if self.unet.d_text != self.text.d_text {
            return Err(Error::Config(format!(
                "unet d_text {} differs from text encoder width {}",
                self.unet.d_text, self.text.d_text
            )));
        }
        NoiseSchedule::linear(&self.schedule)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub config: ModelConfig,
    pub unet: UNet,
    pub text: TextEncoder,
    pub params: ParamStore,
    pub schedule: NoiseSchedule,
}

impl DiffusionModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = RngStream::new(seed, "model-init");
        let schedule = NoiseSchedule::linear(&config.schedule)?;
        let unet = UNet::new(&mut params, config.unet.clone(), schedule.len(), &mut rng)?;
        let vocab = Vocabulary::from_template(&config.template);
        let text = TextEncoder::new(&mut params, config.text, vocab, &mut rng)?;
        Ok(Self { config, unet, text, params, schedule })
    }

    pub fn encode_prompts(&self, prompts: &[String]) -> Result<Conditioning> {
        self.text.encode_prompts(&self.params, prompts)
    }

    pub fn forward(&self, proj: &dyn Projection, z_t: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor> {
        self.unet.forward(&self.params, proj, z_t, t, cond)
    }

    /// Parameters belonging to the UNet, text encoder excluded.
    pub fn unet_param_count(&self) -> usize {
        self.params.count(|n| !n.starts_with(TEXT_PREFIX))
    }

    pub fn digest(&self) -> [u8; 32] {
        self.params.digest()
    }

    /// Writes `path` (LDFT weights plus schedule) and a JSON config sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = self.params.to_entries();
        let betas: Vec<f32> = self.schedule.betas().iter().map(|&b| b as f32).collect();
        entries.push((SCHEDULE_ENTRY.to_owned(), Tensor::new(&[betas.len()], betas)?));
        checkpoint::save(path, &entries)?;
        let cfg = serde_json::to_string_pretty(&self.config)?;
        let side = config_path(path);
        std::fs::write(&side, cfg).map_err(|e| Error::io(side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = config_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let config: ModelConfig = serde_json::from_str(&text)?;
        let mut model = Self::new(config, 0)?;
        let entries = checkpoint::load(path)?;
        if let Some((_, stored)) = entries.iter().find(|(n, _)| n == SCHEDULE_ENTRY) {
            let ours: Vec<f32> = model.schedule.betas().iter().map(|&b| b as f32).collect();
            if stored.data() != ours.as_slice() {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    reason: "stored noise schedule disagrees with config".into(),
                });
            }
        }
        model.params.load_entries(&entries)?;
        Ok(model)
    }
}

/// `weights/base.ldft` -> `weights/base.json`.
pub fn config_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

impl NoisePredictor for DiffusionModel {
    fn predict_noise(&self, z_t: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor> {
        self.forward(&BaseWeights, z_t, t, cond)
    }

    fn image_shape(&self) -> [usize; 3] {
        let u = &self.config.unet;
        [u.in_channels, u.side, u.side]
    }

    fn encode_prompts(&self, prompts: &[String]) -> Result<Conditioning> {
        DiffusionModel::encode_prompts(self, prompts)
    }
}
