//! Small residual CNN classifiers and their training loop.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::ConfusionMatrix;
use crate::augment::{Manifest, Split};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, Linear, ParamStore};
use crate::rng::RngStream;
use crate::tensor::ops::Conv2dGeom;
use crate::tensor::optim::{AdamConfig, OptimizerState, ParamSlot};
use crate::tensor::{backward, checkpoint, no_grad, Tensor};

pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    S,
    M,
    L,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::S, Preset::M, Preset::L];

    /// Stage widths and residual blocks per stage.
    pub fn layout(self) -> (&'static [usize], usize) {
        match self {
            Preset::S => (&[8, 16], 1),
            Preset::M => (&[8, 16, 32], 1),
            Preset::L => (&[16, 32, 64], 2),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::S => "s",
            Preset::M => "m",
            Preset::L => "l",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().trim_start_matches("preset-") {
            "s" => Ok(Preset::S),
            "m" => Ok(Preset::M),
            "l" => Ok(Preset::L),
            other => Err(Error::Config(format!("unknown classifier preset {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub preset: Preset,
    pub side: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { preset: Preset::S, side: 64, epochs: 100, batch_size: 32, lr: 1e-3 }
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
}

#[derive(Clone, Debug)]
struct Stage {
    down: Conv2d,
    blocks: Vec<Block>,
}

/// Stem, strided stages of pre-activation residual blocks, global average
/// pooling and a 3-way linear head.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub params: ParamStore,
    stem: Conv2d,
    stages: Vec<Stage>,
    norm_out: GroupNorm,
    head: Linear,
}

fn groups(c: usize) -> usize {
    (c / 4).max(1)
}

impl Classifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        if config.side < 8 {
            return Err(Error::Config(format!("classifier input side {} is too small", config.side)));
        }
        let mut rng = RngStream::new(seed, "classifier-init");
        let mut params = ParamStore::new();
        let (widths, per_stage) = config.preset.layout();
        let same = Conv2dGeom { stride: 1, padding: 1 };
        let stem = Conv2d::new(&mut params, "stem", 1, widths[0], 3, same, &mut rng);
        let mut stages = Vec::new();
        let mut c_in = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            let down = Conv2d::new(&mut params, &format!("stage.{i}.down"), c_in, w, 3, Conv2dGeom { stride: 2, padding: 1 }, &mut rng);
            let blocks = (0..per_stage)
                .map(|j| {
                    let p = format!("stage.{i}.block.{j}");
                    Block {
                        norm1: GroupNorm::new(&mut params, &format!("{p}.norm1"), w, groups(w)),
                        conv1: Conv2d::new(&mut params, &format!("{p}.conv1"), w, w, 3, same, &mut rng),
                        norm2: GroupNorm::new(&mut params, &format!("{p}.norm2"), w, groups(w)),
                        conv2: Conv2d::new(&mut params, &format!("{p}.conv2"), w, w, 3, same, &mut rng),
                    }
                })
                .collect();
            stages.push(Stage { down, blocks });
            c_in = w;
        }
        let norm_out = GroupNorm::new(&mut params, "norm_out", c_in, groups(c_in));
        let head = Linear::new(&mut params, "head", c_in, NUM_CLASSES, true, &mut rng);
        Ok(Self { config, params, stem, stages, norm_out, head })
    }

    pub fn feature_dim(&self) -> usize {
        self.head.d_in
    }

    /// Final feature map `[n, C, h, w]` after the last stage's normalization.
    pub fn activations(&self, x: &Tensor) -> Result<Tensor> {
        let s = &self.params;
        let mut h = self.stem.forward(s, x)?;
        for stage in &self.stages {
            h = stage.down.forward(s, &h)?;
            for b in &stage.blocks {
                let r = b.conv1.forward(s, &b.norm1.forward(s, &h)?.relu()?)?;
                let r = b.conv2.forward(s, &b.norm2.forward(s, &r)?.relu()?)?;
                h = h.add(&r)?;
            }
        }
        self.norm_out.forward(s, &h)?.relu()
    }

    /// Logits from a feature map produced by [`Classifier::activations`].
    pub fn head_from(&self, act: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.params, &act.mean_spatial()?)
    }

    /// `[n, 3]` logits for `[n, 1, side, side]` inputs.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.head_from(&self.activations(x)?)
    }

    /// Pooled penultimate features.
    pub fn features(&self, images: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
        let d = self.feature_dim();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let x = self.batch(chunk)?;
            let f = no_grad(|| self.activations(&x).and_then(|a| a.mean_spatial()))?;
            out.extend(f.data().chunks_exact(d).map(<[f32]>::to_vec));
        }
        Ok(out)
    }

    fn batch(&self, images: &[Vec<f32>]) -> Result<Tensor> {
        let side = self.config.side;
        if let Some(bad) = images.iter().find(|i| i.len() != side * side) {
            return Err(Error::ShapeMismatch { op: "classifier_input", shapes: vec![vec![bad.len()], vec![side * side]] });
        }
        Tensor::new(&[images.len(), 1, side, side], images.concat())
    }

    pub fn predict(&self, images: &[Vec<f32>]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let logits = no_grad(|| self.forward(&self.batch(chunk)?))?;
            out.extend(logits.data().chunks_exact(NUM_CLASSES).map(argmax));
        }
        Ok(out)
    }

    pub fn evaluate(&self, data: &LabeledImages) -> Result<ConfusionMatrix> {
        ConfusionMatrix::from_predictions(&data.labels, &self.predict(&data.images)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)?;
        let cfg = serde_json::to_string_pretty(&self.config)?;
        let side = path.with_extension("json");
        std::fs::write(&side, cfg).map_err(|e| Error::io(side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = path.with_extension("json");
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let mut c = Self::new(serde_json::from_str(&text)?, 0)?;
        c.params.load_entries(&checkpoint::load(path)?)?;
        Ok(c)
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Images in model space with their class indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledImages {
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn from_manifest(m: &Manifest, side: usize) -> Result<Self> {
        Ok(Self { images: m.load_images(side)?, labels: m.labels() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn extend(&mut self, other: &LabeledImages) {
        self.images.extend(other.images.iter().cloned());
        self.labels.extend(&other.labels);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    /// Weights from the epoch with the best validation accuracy.
    pub classifier: Classifier,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Entry 0 is the untrained model.
    pub curve: Vec<EpochStats>,
}

/// Adam training keeping the best-validation checkpoint; ties keep the
/// earlier epoch.
pub fn train_classifier(
    config: &ClassifierConfig,
    train: &LabeledImages,
    val: &LabeledImages,
    seed: u64,
) -> Result<TrainedClassifier> {
    let mut present = [false; NUM_CLASSES];
    for &l in &train.labels {
        *present.get_mut(l).ok_or_else(|| Error::Dataset(format!("label {l} out of range")))? = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::Dataset("classifier training data contains a single class".into()));
    }
    if val.is_empty() {
        return Err(Error::Dataset("validation split is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut model = Classifier::new(*config, seed)?;
    let accuracy = |m: &Classifier| -> Result<f64> {
        let cm = m.evaluate(val)?;
        Ok(cm.trace() as f64 / cm.total() as f64)
    };
    let mut best = (0, accuracy(&model)?, model.params.clone());
    let mut curve = vec![EpochStats { epoch: 0, train_loss: f64::NAN, val_accuracy: best.1 }];
    let mut opt = OptimizerState::new(AdamConfig { lr: config.lr, ..AdamConfig::adam() });
    let root = RngStream::new(seed, "classifier-train");
    for epoch in 1..=config.epochs {
        let mut rng = root.substream(&format!("epoch/{epoch}"));
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.shuffle(&mut order);
        let (mut total, mut batches) = (0.0, 0);
        for chunk in order.chunks(config.batch_size) {
            let imgs: Vec<Vec<f32>> = chunk.iter().map(|&i| train.images[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let loss = model.forward(&model.batch(&imgs)?)?.cross_entropy(&labels)?;
            total += f64::from(loss.item());
            batches += 1;
            let grads = backward(&loss)?;
            let gs: Vec<Vec<f32>> = model.params.iter().map(|(_, p)| grads.get_or_zeros(&p.value)).collect();
            let mut slots: Vec<ParamSlot<'_>> = model
                .params
                .iter_mut()
                .zip(&gs)
                .map(|((name, p), g)| ParamSlot { name, value: &mut p.value, grad: g })
                .collect();
            opt.step(&mut slots)?;
        }
        let val_accuracy = accuracy(&model)?;
        curve.push(EpochStats { epoch, train_loss: total / batches as f64, val_accuracy });
        if val_accuracy > best.1 {
            best = (epoch, val_accuracy, model.params.clone());
        }
    }
    model.params = best.2;
    Ok(TrainedClassifier { classifier: model, best_epoch: best.0, best_val_accuracy: best.1, curve })
}

/// Loads the train and val splits of `manifest` and trains on them.
pub fn train_classifier_on(config: &ClassifierConfig, manifest: &Manifest, seed: u64) -> Result<TrainedClassifier> {
    let train = LabeledImages::from_manifest(&manifest.split(Split::Train), config.side)?;
    let val = LabeledImages::from_manifest(&manifest.split(Split::Val), config.side)?;
    train_classifier(config, &train, &val, seed)
}
