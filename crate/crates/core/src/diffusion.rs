//! Linear-β DDPM: schedule, forward noising, ε-prediction loss, the
//! training loop, and ancestral sampling.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{Instrumented, LoraAdapterSet};
use crate::model::DiffusionModel;
use crate::rng::RngStream;
use crate::tensor::optim::{AdamConfig, OptimizerState, ParamSlot};
use crate::tensor::{backward, no_grad, Tensor};
use crate::text::Conditioning;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { timesteps: 250, beta_start: 1e-4, beta_end: 0.02 }
    }
}

/// Per-step β, α = 1 − β and ᾱ = running product of α. Index `t` in
/// `0..T` is diffusion step `t + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(cfg: &ScheduleConfig) -> Result<Self> {
        let t = cfg.timesteps;
        if t == 0 || !(0.0 < cfg.beta_start && cfg.beta_start <= cfg.beta_end && cfg.beta_end < 1.0) {
            return Err(Error::Config(format!("invalid noise schedule {cfg:?}")));
        }
        let betas: Vec<f64> = (0..t)
            .map(|i| {
                if t == 1 {
                    cfg.beta_start
                } else {
                    cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (t - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::invalid(format!("timestep {t} outside [0, {})", self.len())));
        }
        Ok(())
    }
}

/// `z_t = √ᾱ_t·z_0 + √(1−ᾱ_t)·ε`, with one timestep per leading-axis item.
pub fn forward_noise(z0: &Tensor, t: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if z0.shape() != eps.shape() || z0.shape().first() != Some(&t.len()) {
        return Err(Error::ShapeMismatch {
            op: "forward_noise",
            shapes: vec![z0.shape().to_vec(), eps.shape().to_vec(), vec![t.len()]],
        });
    }
    for &s in t {
        schedule.check(s)?;
    }
    let per = z0.len() / t.len();
    let mut out = Vec::with_capacity(z0.len());
    for (i, &s) in t.iter().enumerate() {
        let ab = schedule.alpha_bars[s];
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let rows = z0.data()[i * per..(i + 1) * per].iter().zip(&eps.data()[i * per..(i + 1) * per]);
        out.extend(rows.map(|(&z, &e)| a * z + b * e));
    }
    Tensor::new(z0.shape(), out)
}

/// Anything that predicts the injected noise.
pub trait NoisePredictor {
    fn predict_noise(&self, z_t: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor>;

    /// `[channels, side, side]` of one image.
    fn image_shape(&self) -> [usize; 3];

    fn encode_prompts(&self, prompts: &[String]) -> Result<Conditioning>;
}

/// Clean images, their conditioning, sampled timesteps and noise; all
/// index-aligned on the leading axis.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub z0: Tensor,
    pub cond: Conditioning,
    pub t: Vec<usize>,
    pub noise: Tensor,
}

/// Mean squared error between injected and predicted noise.
pub fn diffusion_loss(model: &dyn NoisePredictor, batch: &TrainBatch, schedule: &NoiseSchedule) -> Result<Tensor> {
    let z_t = forward_noise(&batch.z0, &batch.t, &batch.noise, schedule)?;
    let pred = model.predict_noise(&z_t, &batch.t, &batch.cond)?;
    pred.mse(&batch.noise)
}

/// A training image in `[-1, 1]` with its rendered prompt.
#[derive(Clone, Debug)]
pub struct Example {
    pub image: Vec<f32>,
    pub prompt: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// Adapter fine-tuning: AdamW at 1e-4, batch size 1, 100 epochs.
    pub fn finetune() -> Self {
        Self { epochs: 100, batch_size: 1, optimizer: AdamConfig::adamw(), seed: 0 }
    }

    pub fn pretrain() -> Self {
        Self { epochs: 100, batch_size: 16, optimizer: AdamConfig { lr: 1e-3, ..AdamConfig::adamw() }, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub loss_curve: Vec<f64>,
    pub steps: u64,
}

impl TrainReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut body = String::from("epoch,loss\n");
        for (i, l) in self.loss_curve.iter().enumerate() {
            body.push_str(&format!("{},{l:.9}\n", i + 1));
        }
        f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Trains the base model, or only `adapters` when given.
///
/// With adapters the base parameters are frozen and their digest is
/// checked after training.
pub fn train(
    model: &mut DiffusionModel,
    mut adapters: Option<&mut LoraAdapterSet>,
    data: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let [c, side, _] = model.image_shape();
    let per = c * side * side;
    if let Some(bad) = data.iter().position(|e| e.image.len() != per || e.prompt.trim().is_empty()) {
        return Err(Error::Dataset(format!("example {bad} has wrong size or no prompt")));
    }
    let base_digest = adapters.as_ref().map(|a| {
        model.params.set_frozen(true);
        let d = model.digest();
        (d, a.base_digest())
    });
    if let Some((d, expected)) = base_digest {
        if d != expected {
            return Err(Error::DigestMismatch { expected: crate::nn::hex(&expected), found: crate::nn::hex(&d) });
        }
    }

    let mut opt = OptimizerState::new(cfg.optimizer);
    let root = RngStream::new(cfg.seed, "train");
    let mut curve = Vec::with_capacity(cfg.epochs);
    let t_max = model.schedule.len();
    for epoch in 0..cfg.epochs {
        let mut rng = root.substream(&format!("epoch/{epoch}"));
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let n = chunk.len();
            let images: Vec<f32> = chunk.iter().flat_map(|&i| data[i].image.iter().copied()).collect();
            let prompts: Vec<String> = chunk.iter().map(|&i| data[i].prompt.clone()).collect();
            let t: Vec<usize> = (0..n).map(|_| rng.below(t_max)).collect();
            let noise = Tensor::randn(&[n, c, side, side], 1.0, &mut rng);
            let cond = model.encode_prompts(&prompts)?;
            let batch = TrainBatch { z0: Tensor::new(&[n, c, side, side], images)?, cond, t, noise };
            let step = opt.step_count() as usize;
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Diverged { epoch, step },
                other => other,
            };
            let loss = match adapters.as_deref() {
                Some(a) => diffusion_loss(&Instrumented::new_unchecked(&*model, a), &batch, &model.schedule),
                None => diffusion_loss(&*model, &batch, &model.schedule),
            }
            .map_err(diverged)?;
            total += f64::from(loss.item());
            batches += 1;
            let grads = backward(&loss)?;
            match adapters.as_deref_mut() {
                Some(a) => {
                    let gs: Vec<(Vec<f32>, Vec<f32>)> =
                        a.layers.iter().map(|l| (grads.get_or_zeros(&l.a), grads.get_or_zeros(&l.b))).collect();
                    let names: Vec<(String, String)> =
                        a.layers.iter().map(|l| (format!("{}#A", l.path), format!("{}#B", l.path))).collect();
                    let mut slots = Vec::with_capacity(2 * gs.len());
                    for ((layer, (ga, gb)), (na, nb)) in a.layers.iter_mut().zip(&gs).zip(&names) {
                        slots.push(ParamSlot { name: na, value: &mut layer.a, grad: ga });
                        slots.push(ParamSlot { name: nb, value: &mut layer.b, grad: gb });
                    }
                    opt.step(&mut slots).map_err(diverged)?;
                }
                None => {
                    let gs: Vec<Vec<f32>> = model
                        .params
                        .iter()
                        .filter(|(_, p)| !p.frozen)
                        .map(|(_, p)| grads.get_or_zeros(&p.value))
                        .collect();
                    let mut slots: Vec<ParamSlot<'_>> = model
                        .params
                        .iter_mut()
                        .filter(|(_, p)| !p.frozen)
                        .zip(&gs)
                        .map(|((name, p), g)| ParamSlot { name, value: &mut p.value, grad: g })
                        .collect();
                    opt.step(&mut slots).map_err(diverged)?;
                }
            }
        }
        curve.push(total / batches as f64);
        log::info!("epoch {}/{}: loss {:.6}", epoch + 1, cfg.epochs, total / batches as f64);
    }
    if let Some((before, _)) = base_digest {
        if model.digest() != before {
            return Err(Error::DigestMismatch {
                expected: crate::nn::hex(&before),
                found: crate::nn::hex(&model.digest()),
            });
        }
    }
    Ok(TrainReport { loss_curve: curve, steps: opt.step_count() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleOptions {
    /// Timestep stride; 1 runs every step.
    pub stride: usize,
    /// Samples denoised together per network call.
    pub chunk: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { stride: 1, chunk: 16 }
    }
}

/// Ancestral DDPM sampling of `n` images under one conditioning row
/// (`cond` batch 1) or one row per sample (batch `n`).
///
/// Sample `i` draws all its noise from stream `sample/{i}` of `seed`, so
/// results do not depend on chunking. Output is clamped to [-1, 1].
pub fn sample(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    cond: &Conditioning,
    n: usize,
    seed: u64,
    opts: SampleOptions,
) -> Result<Tensor> {
    if n == 0 || opts.stride == 0 || opts.chunk == 0 {
        return Err(Error::invalid("sample: n, stride and chunk must be positive"));
    }
    if cond.batch() != 1 && cond.batch() != n {
        return Err(Error::invalid(format!("sample: conditioning batch {} for {n} samples", cond.batch())));
    }
    let [c, side, _] = model.image_shape();
    let per = c * side * side;
    let steps: Vec<usize> = (0..schedule.len()).step_by(opts.stride).rev().collect();
    let mut out = Vec::with_capacity(n * per);
    no_grad(|| -> Result<()> {
        for start in (0..n).step_by(opts.chunk) {
            let idx: Vec<usize> = (start..(start + opts.chunk).min(n)).collect();
            let m = idx.len();
            let rows: Vec<usize> = if cond.batch() == 1 { vec![0; m] } else { idx.clone() };
            let cond_m = cond.gather(&rows)?;
            let mut streams: Vec<RngStream> =
                idx.iter().map(|i| RngStream::new(seed, &format!("sample/{i}"))).collect();
            let mut z: Vec<f32> = streams.iter_mut().flat_map(|r| r.normal_vec(per, 0.0, 1.0)).collect();
            for (si, &t) in steps.iter().enumerate() {
                let prev = steps.get(si + 1).copied();
                let ab = schedule.alpha_bars[t];
                let ab_prev = prev.map_or(1.0, |p| schedule.alpha_bars[p]);
                let (alpha, beta) = if prev == t.checked_sub(1) {
                    (schedule.alphas[t], schedule.betas[t])
                } else {
                    let a = ab / ab_prev;
                    (a, 1.0 - a)
                };
                let zt = Tensor::new(&[m, c, side, side], z.clone())?;
                let eps = model.predict_noise(&zt, &vec![t; m], &cond_m)?;
                let coef = (beta / (1.0 - ab).sqrt()) as f32;
                let inv_sqrt_alpha = (1.0 / alpha.sqrt()) as f32;
                for (zv, &e) in z.iter_mut().zip(eps.data()) {
                    *zv = (*zv - coef * e) * inv_sqrt_alpha;
                }
                if prev.is_some() {
                    let sigma = beta.sqrt() as f32;
                    for (chunk, r) in z.chunks_exact_mut(per).zip(&mut streams) {
                        let xi = r.normal_vec(per, 0.0, 1.0);
                        chunk.iter_mut().zip(xi).for_each(|(zv, x)| *zv += sigma * x);
                    }
                }
                if z.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "sample" });
                }
            }
            out.extend(z.into_iter().map(|v| v.clamp(-1.0, 1.0)));
        }
        Ok(())
    })?;
    Tensor::new(&[n, c, side, side], out)
}

/// Latent encoder seam; pixel-space diffusion uses the identity.
pub trait LatentCodec {
    fn encode(&self, x: &Tensor) -> Result<Tensor>;
    fn decode(&self, z: &Tensor) -> Result<Tensor>;
}

pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }

    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        Ok(z.clone())
    }
}
