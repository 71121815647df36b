//! Writing class-conditioned samples to disk as a synthetic manifest.

use std::path::{Path, PathBuf};

use super::imageio::{from_unit, write_gray_png};
use super::manifest::{Manifest, ManifestRow, Source, Split};
use super::plan::MixPlan;
use crate::diffusion::{sample, NoisePredictor, NoiseSchedule, SampleOptions};
use crate::error::{Error, Result};
use crate::prompt::{ClassLabel, PromptSpec, PromptTemplate};
use crate::rng::RngStream;

/// Everything needed to turn prompts into images.
pub struct Generator<'a> {
    pub predictor: &'a dyn NoisePredictor,
    pub schedule: &'a NoiseSchedule,
    pub template: &'a PromptTemplate,
    pub options: SampleOptions,
}

impl Generator<'_> {
    /// `n` samples of one class; the seed for each class is derived from
    /// `(seed, adjective, class)` so classes never share noise.
    pub fn class_samples(&self, adjective: &str, label: ClassLabel, n: usize, seed: u64) -> Result<Vec<Vec<u8>>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let spec = PromptSpec::new(adjective, label)?;
        let prompt = self.template.render(&spec);
        let cond = self.predictor.encode_prompts(&[prompt])?;
        let class_seed = RngStream::new(seed, &format!("synth/{}/{label}", spec.adjective.file_stem())).next_u64();
        let images = sample(self.predictor, self.schedule, &cond, n, class_seed, self.options)?;
        let per = images.len() / n;
        Ok(images.data().chunks_exact(per).map(from_unit).collect())
    }
}

/// Generates `plan` into `out` as `{adj|none}_{class}_{index:05}.png`.
/// On any failure the files written so far are removed.
pub fn synthesize(gen: &Generator<'_>, plan: &MixPlan, out: &Path) -> Result<Manifest> {
    let adjective = plan.adjective()?;
    let side = gen.predictor.image_shape()[1];
    if gen.predictor.image_shape()[0] != 1 {
        return Err(Error::invalid("synthesis writes grayscale images only"));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written: Vec<PathBuf> = Vec::new();
    let result = (|| -> Result<Vec<ManifestRow>> {
        let mut rows = Vec::with_capacity(plan.total());
        for label in ClassLabel::ALL {
            let imgs = gen.class_samples(adjective.as_str(), label, plan.count(label), plan.seed)?;
            for (i, px) in imgs.iter().enumerate() {
                let name = format!("{}_{label}_{i:05}.png", adjective.file_stem());
                let path = out.join(&name);
                written.push(path.clone());
                write_gray_png(&path, side, px)?;
                rows.push(ManifestRow {
                    image_path: path.display().to_string(),
                    label,
                    patient_id: format!("synthetic:{name}"),
                    split: Split::Train,
                    provenance: Source::Synthetic,
                    adjective: adjective.as_str().to_owned(),
                });
            }
        }
        Ok(rows)
    })();
    match result {
        Ok(rows) => Ok(Manifest::new(rows)),
        Err(e) => {
            for p in &written {
                let _ = std::fs::remove_file(p);
            }
            Err(e)
        }
    }
}
