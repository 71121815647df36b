#![allow(dead_code)]

pub mod grad;
pub mod manifests;

use augdiff::augment::imageio::to_unit;
use augdiff::augment::phantom_pixels;
use augdiff::diffusion::{NoisePredictor, ScheduleConfig};
use augdiff::eval::LabeledImages;
use augdiff::model::{DiffusionModel, ModelConfig};
use augdiff::prompt::ClassLabel;
use augdiff::rng::RngStream;
use augdiff::tensor::{backward, no_grad, Tensor};
use augdiff::text::{Conditioning, TextConfig};
use augdiff::unet::UNetConfig;
use augdiff::Result;

/// Half-widths of the symmetric difference pairs used by every gradient check.
pub const FD_STEPS: [f32; 4] = [5e-3, 1e-2, 1.5e-2, 2e-2];

/// Least-squares slope of `f(x + h) − f(x − h)` against the realized f32
/// step `(x + h) − (x − h)` over [`FD_STEPS`]. Several pairs average out
/// the f32 rounding noise of a single central difference.
pub fn fd_slope(x: f32, f: impl Fn(f32) -> f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for h in FD_STEPS {
        let (up, down) = (x + h, x - h);
        let d = f64::from(up) - f64::from(down);
        num += d * (f(up) - f(down));
        den += d * d;
    }
    num / den
}

/// `|a − n| / max(1, |a|, |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares backward gradients against finite differences of the f64
/// loss `Σ wᵢ·yᵢ` for `coords` randomly chosen entries of every input.
/// Returns the largest relative error seen.
pub fn fd_check(
    inputs: &[(Vec<usize>, Vec<f32>)],
    f: &dyn Fn(&[Tensor]) -> Result<Tensor>,
    coords: usize,
    rng: &mut RngStream,
) -> f64 {
    let params: Vec<Tensor> = inputs.iter().map(|(s, d)| Tensor::param(s, d.clone()).unwrap()).collect();
    let y = f(&params).unwrap();
    let w: Vec<f32> = rng.normal_vec(y.len(), 0.0, 1.0);
    let loss = y.mul(&Tensor::new(y.shape(), w.clone()).unwrap()).unwrap().sum().unwrap();
    let grads = backward(&loss).unwrap();
    let eval = |consts: &[Tensor]| -> f64 {
        let y = no_grad(|| f(consts)).unwrap();
        y.data().iter().zip(&w).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum()
    };
    let mut worst = 0.0f64;
    for (k, (shape, data)) in inputs.iter().enumerate() {
        let g = grads.get_or_zeros(&params[k]);
        for _ in 0..coords.min(data.len()) {
            let i = rng.below(data.len());
            let numeric = fd_slope(data[i], |v| {
                let mut consts: Vec<Tensor> = inputs.iter().map(|(s, d)| Tensor::new(s, d.clone()).unwrap()).collect();
                let mut moved = data.clone();
                moved[i] = v;
                consts[k] = Tensor::new(shape, moved).unwrap();
                eval(&consts)
            });
            worst = worst.max(rel_err(f64::from(g[i]), numeric));
        }
    }
    worst
}

/// Model with the default layout scaled down by `factor` in side and widths.
pub fn downsized_config(factor: usize) -> ModelConfig {
    let d = 64 / factor;
    ModelConfig {
        unet: UNetConfig {
            side: 64 / factor,
            base_width: d,
            d_text: d,
            d_attn: d,
            time_dim: d,
            norm_groups: 4,
            ..UNetConfig::default()
        },
        text: TextConfig { d_text: d, ..TextConfig::default() },
        schedule: ScheduleConfig::default(),
        ..ModelConfig::default()
    }
}

/// A small model for fast behavioural tests.
pub fn tiny_model(side: usize, seed: u64) -> DiffusionModel {
    let cfg = ModelConfig {
        unet: UNetConfig {
            side,
            base_width: 8,
            channel_mults: vec![1, 2],
            attention_levels: vec![1],
            d_text: 16,
            d_attn: 16,
            heads: 2,
            time_dim: 16,
            norm_groups: 4,
            ..UNetConfig::default()
        },
        text: TextConfig { d_text: 16, heads: 2, max_len: 16 },
        schedule: ScheduleConfig { timesteps: 100, ..ScheduleConfig::default() },
        ..ModelConfig::default()
    };
    DiffusionModel::new(cfg, seed).unwrap()
}

/// Returns `ε + offset` for a fixed `ε`, whatever the input.
pub struct StubPredictor {
    pub eps: Tensor,
    pub offset: f32,
    pub shape: [usize; 3],
    pub model: DiffusionModel,
}

impl NoisePredictor for StubPredictor {
    fn predict_noise(&self, _z: &Tensor, _t: &[usize], _c: &Conditioning) -> Result<Tensor> {
        let data = self.eps.data().iter().map(|v| v + self.offset).collect();
        Tensor::new(self.eps.shape(), data)
    }

    fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn encode_prompts(&self, prompts: &[String]) -> Result<Conditioning> {
        self.model.encode_prompts(prompts)
    }
}

/// In-memory phantoms, `n` per class, in model space.
pub fn phantom_set(n: usize, side: usize, seed: u64, classes: &[ClassLabel]) -> LabeledImages {
    let mut out = LabeledImages::default();
    for &c in classes {
        for i in 0..n {
            let mut rng = RngStream::new(seed, &format!("{c}/{i}"));
            out.images.push(to_unit(&phantom_pixels(c, side, &mut rng)));
            out.labels.push(c.index());
        }
    }
    out
}

pub fn max_abs(a: &[f32]) -> f64 {
    a.iter().fold(0.0f64, |m, &v| m.max(f64::from(v).abs()))
}

/// `‖a − b‖∞ / ‖b‖∞`.
pub fn rel_inf(a: &[f32], b: &[f32]) -> f64 {
    let num = a.iter().zip(b).fold(0.0f64, |m, (&x, &y)| m.max((f64::from(x) - f64::from(y)).abs()));
    num / max_abs(b).max(f64::MIN_POSITIVE)
}

/// Largest |z-score| of the Monte-Carlo mean and variance of `z_t` for a
/// fixed `z_0`, against `√ᾱ_t·z_0` and `1 − ᾱ_t`.
pub fn forward_moment_scores(
    schedule: &augdiff::diffusion::NoiseSchedule,
    t: usize,
    draws: usize,
    seed: u64,
) -> (f64, f64) {
    use augdiff::diffusion::forward_noise;
    let z0 = [0.8f32, -0.5, 0.0, 0.25];
    let d = z0.len();
    let mut rng = RngStream::new(seed, &format!("moments/{t}"));
    let eps = rng.normal_vec(draws * d, 0.0, 1.0);
    let z0s = Tensor::new(&[draws, d], z0.repeat(draws)).unwrap();
    let zt = forward_noise(&z0s, &vec![t; draws], &Tensor::new(&[draws, d], eps).unwrap(), schedule).unwrap();
    let ab = schedule.alpha_bars()[t];
    let n = draws as f64;
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for (j, &z) in z0.iter().enumerate() {
        let xs: Vec<f64> = zt.data().iter().skip(j).step_by(d).map(|&v| f64::from(v)).collect();
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expect_var = 1.0 - ab;
        worst_mean = worst_mean.max((mean - ab.sqrt() * f64::from(z)).abs() / (expect_var / n).sqrt());
        worst_var = worst_var.max((var - expect_var).abs() / (expect_var * (2.0 / (n - 1.0)).sqrt()));
    }
    (worst_mean, worst_var)
}

/// Predicts the exact noise for a dataset holding only the constant image `value`.
pub struct DeltaOracle {
    pub value: f32,
    pub shape: [usize; 3],
    pub schedule: augdiff::diffusion::NoiseSchedule,
    pub model: DiffusionModel,
}

impl NoisePredictor for DeltaOracle {
    fn predict_noise(&self, z: &Tensor, t: &[usize], _c: &Conditioning) -> Result<Tensor> {
        let per = z.len() / t.len();
        let data = z
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ab = self.schedule.alpha_bars()[t[i / per]];
                ((f64::from(v) - ab.sqrt() * f64::from(self.value)) / (1.0 - ab).sqrt()) as f32
            })
            .collect();
        Tensor::new(z.shape(), data)
    }

    fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn encode_prompts(&self, prompts: &[String]) -> Result<Conditioning> {
        self.model.encode_prompts(prompts)
    }
}

/// Replaces every adapter factor with Gaussian noise of the given std.
pub fn randomize_adapters(set: &mut augdiff::lora::LoraAdapterSet, std: f32, seed: u64) {
    let mut rng = RngStream::new(seed, "randomize");
    for l in &mut set.layers {
        l.a = Tensor::randn(l.a.shape(), std, &mut rng).as_param();
        l.b = Tensor::randn(l.b.shape(), std, &mut rng).as_param();
    }
}

/// Phantom examples with class prompts for diffusion training.
pub fn phantom_examples(n: usize, side: usize, seed: u64, classes: &[ClassLabel]) -> Vec<augdiff::diffusion::Example> {
    use augdiff::prompt::{render, PromptSpec};
    let set = phantom_set(n, side, seed, classes);
    set.images
        .into_iter()
        .zip(set.labels)
        .map(|(image, l)| augdiff::diffusion::Example {
            image,
            prompt: render(&PromptSpec::new("", ClassLabel::from_index(l).unwrap()).unwrap()),
        })
        .collect()
}

/// Worst relative deviation between two predictors over `probes` random inputs.
pub fn probe_deviation(a: &dyn NoisePredictor, b: &dyn NoisePredictor, probes: usize, seed: u64) -> f64 {
    let [c, s, _] = a.image_shape();
    let prompts = ["benign", "malignant", "dark ultrasound image of no tumor in the breast"];
    let mut rng = RngStream::new(seed, "probe");
    let mut worst = 0.0f64;
    for i in 0..probes {
        let z = Tensor::randn(&[1, c, s, s], 1.0, &mut rng);
        let t = [rng.below(100)];
        let cond = a.encode_prompts(&[prompts[i % prompts.len()].to_owned()]).unwrap();
        let ya = no_grad(|| a.predict_noise(&z, &t, &cond)).unwrap();
        let yb = no_grad(|| b.predict_noise(&z, &t, &cond)).unwrap();
        worst = worst.max(rel_inf(ya.data(), yb.data()));
    }
    worst
}

/// A fixed network whose feature map, and hence logits, only see the
/// top-left quadrant of its input.
pub struct QuadrantModel {
    pub kernel: Tensor,
    pub head: Tensor,
    pub side: usize,
}

impl QuadrantModel {
    pub fn new(side: usize, seed: u64) -> Self {
        let mut rng = RngStream::new(seed, "quadrant");
        let kernel = Tensor::randn(&[4, 1, 3, 3], 0.5, &mut rng);
        let head = Tensor::new(&[4, 3], rng.normal_vec(12, 0.0, 1.0).iter().map(|v| 0.1 + v.abs()).collect()).unwrap();
        Self { kernel, head, side }
    }
}

impl augdiff::eval::CamModel for QuadrantModel {
    fn cam_forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        use augdiff::tensor::ops::Conv2dGeom;
        let h = self.side / 2;
        let feat = x.conv2d(&self.kernel, None, Conv2dGeom { stride: 2, padding: 1 })?.relu()?;
        let mask: Vec<f32> = (0..4 * h * h)
            .map(|i| {
                let (y, x) = ((i % (h * h)) / h, i % h);
                if y < h / 2 && x < h / 2 { 1.0 } else { 0.0 }
            })
            .collect();
        let act = feat.mul(&Tensor::new(&[1, 4, h, h], mask)?)?;
        let logits = act.mean_spatial()?.matmul(&self.head)?;
        Ok((logits, act))
    }
}

/// Share of saliency mass inside the top-left quadrant.
pub fn top_left_mass(map: &[f32], side: usize) -> f64 {
    let total: f64 = map.iter().map(|&v| f64::from(v)).sum();
    let inside: f64 = (0..side / 2)
        .flat_map(|y| (0..side / 2).map(move |x| (y, x)))
        .map(|(y, x)| f64::from(map[y * side + x]))
        .sum();
    inside / total
}
