//! The text-conditioned denoising UNet.
//!
//! Residual conv blocks carry a projected timestep embedding; cross-attention
//! blocks let image features query the prompt sequence. Only the four
//! cross-attention projections are exposed as adapter targets.

use serde::{Deserialize, Serialize};

use crate::attention;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, Linear, ParamStore};
use crate::rng::RngStream;
use crate::tensor::ops::Conv2dGeom;
use crate::tensor::Tensor;
use crate::text::Conditioning;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub side: usize,
    pub in_channels: usize,
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    pub blocks_per_res: usize,
    /// Resolution levels (0 = full size) that get cross-attention; the
    /// middle block always has one.
    pub attention_levels: Vec<usize>,
    pub d_text: usize,
    pub d_attn: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub norm_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            side: 64,
            in_channels: 1,
            base_width: 64,
            channel_mults: vec![1, 2, 2],
            blocks_per_res: 1,
            attention_levels: vec![1, 2],
            d_text: 64,
            d_attn: 64,
            heads: 4,
            time_dim: 64,
            norm_groups: 8,
        }
    }
}

impl UNetConfig {
    pub fn widths(&self) -> Vec<usize> {
        self.channel_mults.iter().map(|m| m * self.base_width).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("unet: {msg}")));
        let levels = self.channel_mults.len();
        if levels == 0 {
            return bad("no resolution levels".into());
        }
        let factor = 1usize << (levels - 1);
        if self.side == 0 || !self.side.is_multiple_of(factor) {
            return bad(format!("side {} not divisible by {factor}", self.side));
        }
        let dims = [self.in_channels, self.base_width, self.blocks_per_res, self.d_text, self.d_attn];
        if dims.contains(&0) || self.heads == 0 || self.time_dim == 0 {
            return bad("all widths must be positive".into());
        }
        if self.channel_mults.contains(&0) {
            return bad("channel multipliers must be positive".into());
        }
        if !self.d_attn.is_multiple_of(self.heads) {
            return bad(format!("d_attn {} not divisible by {} heads", self.d_attn, self.heads));
        }
        if !self.time_dim.is_multiple_of(2) {
            return bad("time_dim must be even".into());
        }
        if let Some(w) = self.widths().iter().find(|w| self.norm_groups == 0 || *w % self.norm_groups != 0) {
            return bad(format!("width {w} not divisible by {} groups", self.norm_groups));
        }
        if let Some(l) = self.attention_levels.iter().find(|&&l| l >= levels) {
            return bad(format!("attention level {l} out of range"));
        }
        Ok(())
    }
}

/// How a cross-attention projection `x·W` is evaluated. The plain base
/// model multiplies by the stored weight; adapter sets add a low-rank path.
pub trait Projection {
    fn project(&self, path: &str, x: &Tensor, w0: &Tensor) -> Result<Tensor>;
}

/// Projection through the stored weight only.
pub struct BaseWeights;

impl Projection for BaseWeights {
    fn project(&self, _path: &str, x: &Tensor, w0: &Tensor) -> Result<Tensor> {
        x.matmul(w0)
    }
}

/// An adapter-eligible matrix: `W` is `d x k`, used as `x·W`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterTarget {
    pub path: String,
    pub d: usize,
    pub k: usize,
}

#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    pub path: String,
    pub d_model: usize,
    pub d_text: usize,
    pub d_attn: usize,
    pub heads: usize,
    norm: GroupNorm,
}

impl CrossAttentionBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        d_model: usize,
        d_text: usize,
        d_attn: usize,
        heads: usize,
        groups: usize,
        rng: &mut RngStream,
    ) -> Self {
        let norm = GroupNorm::new(store, &format!("{path}.norm"), d_model, groups);
        for (name, d, k) in [("w_q", d_model, d_attn), ("w_k", d_text, d_attn), ("w_v", d_text, d_attn), ("w_o", d_attn, d_model)] {
            let full = format!("{path}.{name}");
            let mut sub = rng.substream(&full);
            store.insert(full, Tensor::randn(&[d, k], (1.0 / d as f32).sqrt(), &mut sub));
        }
        Self { path: path.to_owned(), d_model, d_text, d_attn, heads, norm }
    }

    pub fn w_q(&self) -> String {
        format!("{}.w_q", self.path)
    }

    pub fn w_k(&self) -> String {
        format!("{}.w_k", self.path)
    }

    pub fn w_v(&self) -> String {
        format!("{}.w_v", self.path)
    }

    pub fn w_o(&self) -> String {
        format!("{}.w_o", self.path)
    }

    pub fn targets(&self) -> [AdapterTarget; 4] {
        [
            AdapterTarget { path: self.w_q(), d: self.d_model, k: self.d_attn },
            AdapterTarget { path: self.w_k(), d: self.d_text, k: self.d_attn },
            AdapterTarget { path: self.w_v(), d: self.d_text, k: self.d_attn },
            AdapterTarget { path: self.w_o(), d: self.d_attn, k: self.d_model },
        ]
    }

    /// Residual cross-attention over an NCHW feature map.
    fn forward_map(&self, store: &ParamStore, proj: &dyn Projection, h: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        let [n, c, hh, ww] = [h.shape()[0], h.shape()[1], h.shape()[2], h.shape()[3]];
        let seq = self
            .norm
            .forward(store, h)?
            .reshape(&[n, c, hh * ww])?
            .permute(&[0, 2, 1])?
            .reshape(&[n * hh * ww, c])?;
        let out = cross_attention(store, proj, self, &seq, cond)?;
        let out = out.reshape(&[n, hh * ww, c])?.permute(&[0, 2, 1])?.reshape(&[n, c, hh, ww])?;
        h.add(&out)
    }
}

/// `softmax(q·kᵀ/√d_head)·v·W_o` with `q = x·W_q`, `k = cond·W_k`,
/// `v = cond·W_v`, split over heads. `x` is `[n*lq, d_model]` with `n`
/// taken from the conditioning batch; masked keys receive zero weight.
pub fn cross_attention(
    store: &ParamStore,
    proj: &dyn Projection,
    block: &CrossAttentionBlock,
    x: &Tensor,
    cond: &Conditioning,
) -> Result<Tensor> {
    let n = cond.batch();
    if x.rank() != 2 || x.shape()[1] != block.d_model || !x.shape()[0].is_multiple_of(n) || cond.dim() != block.d_text {
        return Err(Error::ShapeMismatch {
            op: "cross_attention",
            shapes: vec![x.shape().to_vec(), cond.seq.shape().to_vec()],
        });
    }
    let ctx = cond.seq.reshape(&[n * cond.len(), block.d_text])?;
    let q = proj.project(&block.w_q(), x, store.get(&block.w_q())?)?;
    let k = proj.project(&block.w_k(), &ctx, store.get(&block.w_k())?)?;
    let v = proj.project(&block.w_v(), &ctx, store.get(&block.w_v())?)?;
    let a = attention::multi_head(&q, &k, &v, n, block.heads, &cond.mask)?;
    proj.project(&block.w_o(), &a, store.get(&block.w_o())?)
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, path: &str, c_in: usize, c_out: usize, cfg: &UNetConfig, rng: &mut RngStream) -> Self {
        let same = Conv2dGeom { stride: 1, padding: 1 };
        Self {
            norm1: GroupNorm::new(store, &format!("{path}.norm1"), c_in, cfg.norm_groups),
            conv1: Conv2d::new(store, &format!("{path}.conv1"), c_in, c_out, 3, same, rng),
            temb: Linear::new(store, &format!("{path}.temb"), cfg.time_dim, c_out, true, rng),
            norm2: GroupNorm::new(store, &format!("{path}.norm2"), c_out, cfg.norm_groups),
            conv2: Conv2d::new(store, &format!("{path}.conv2"), c_out, c_out, 3, same, rng),
            skip: (c_in != c_out)
                .then(|| Conv2d::new(store, &format!("{path}.skip"), c_in, c_out, 1, Conv2dGeom::default(), rng)),
        }
    }

    fn forward(&self, store: &ParamStore, x: &Tensor, temb_act: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(store, &self.norm1.forward(store, x)?.silu()?)?;
        let h = h.add_channel(&self.temb.forward(store, temb_act)?)?;
        let h = self.conv2.forward(store, &self.norm2.forward(store, &h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(store, x)?,
            None => x.clone(),
        };
        h.add(&skip)
    }
}

#[derive(Clone, Debug)]
struct Level {
    blocks: Vec<(ResBlock, Option<CrossAttentionBlock>)>,
    resample: Option<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    timesteps: usize,
    conv_in: Conv2d,
    time1: Linear,
    time2: Linear,
    down: Vec<Level>,
    mid: (ResBlock, CrossAttentionBlock, ResBlock),
    /// Ordered from the coarsest level up.
    up: Vec<Level>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

/// Sinusoidal timestep features, `[n, dim]`.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let ts = step as f64;
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| ts * f).collect();
        out.extend(args.iter().map(|a| a.sin() as f32));
        out.extend(args.iter().map(|a| a.cos() as f32));
    }
    out
}

impl UNet {
    /// Builds the network for `timesteps` diffusion steps, registering its
    /// parameters in `store`.
    pub fn new(store: &mut ParamStore, config: UNetConfig, timesteps: usize, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        if timesteps == 0 {
            return Err(Error::Config("unet: zero timesteps".into()));
        }
        let cfg = &config;
        let widths = cfg.widths();
        let levels = widths.len();
        let same = Conv2dGeom { stride: 1, padding: 1 };
        let conv_in = Conv2d::new(store, "conv_in", cfg.in_channels, widths[0], 3, same, rng);
        let time1 = Linear::new(store, "time.lin1", cfg.time_dim, cfg.time_dim, true, rng);
        let time2 = Linear::new(store, "time.lin2", cfg.time_dim, cfg.time_dim, true, rng);
        let xattn = |store: &mut ParamStore, path: String, width: usize, rng: &mut RngStream| {
            CrossAttentionBlock::new(store, &path, width, cfg.d_text, cfg.d_attn, cfg.heads, cfg.norm_groups, rng)
        };

        let mut down = Vec::with_capacity(levels);
        let mut ch = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for j in 0..cfg.blocks_per_res {
                let res = ResBlock::new(store, &format!("down.{i}.res.{j}"), ch, w, cfg, rng);
                ch = w;
                let xa = cfg.attention_levels.contains(&i).then(|| xattn(store, format!("down.{i}.xattn.{j}"), w, rng));
                blocks.push((res, xa));
            }
            let resample = (i + 1 < levels).then(|| {
                Conv2d::new(store, &format!("down.{i}.downsample"), w, w, 3, Conv2dGeom { stride: 2, padding: 1 }, rng)
            });
            down.push(Level { blocks, resample });
        }

        let mid = (
            ResBlock::new(store, "mid.res.0", ch, ch, cfg, rng),
            xattn(store, "mid.xattn".to_owned(), ch, rng),
            ResBlock::new(store, "mid.res.1", ch, ch, cfg, rng),
        );

        let mut up = Vec::with_capacity(levels);
        for i in (0..levels).rev() {
            let w = widths[i];
            let mut blocks = Vec::new();
            for j in 0..cfg.blocks_per_res {
                let c_in = if j == 0 { ch + w } else { w };
                let res = ResBlock::new(store, &format!("up.{i}.res.{j}"), c_in, w, cfg, rng);
                ch = w;
                let xa = cfg.attention_levels.contains(&i).then(|| xattn(store, format!("up.{i}.xattn.{j}"), w, rng));
                blocks.push((res, xa));
            }
            let resample = (i > 0).then(|| Conv2d::new(store, &format!("up.{i}.upsample"), w, w, 3, same, rng));
            up.push(Level { blocks, resample });
        }

        let norm_out = GroupNorm::new(store, "norm_out", ch, cfg.norm_groups);
        let conv_out = Conv2d::new(store, "conv_out", ch, cfg.in_channels, 3, same, rng);
        Ok(Self { config, timesteps, conv_in, time1, time2, down, mid, up, norm_out, conv_out })
    }

    /// Every cross-attention block in forward order.
    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn cross_attention_blocks(&self) -> Vec<&CrossAttentionBlock> {
        let mut out: Vec<&CrossAttentionBlock> = Vec::new();
        for lvl in &self.down {
            out.extend(lvl.blocks.iter().filter_map(|(_, xa)| xa.as_ref()));
        }
        out.push(&self.mid.1);
        for lvl in &self.up {
            out.extend(lvl.blocks.iter().filter_map(|(_, xa)| xa.as_ref()));
        }
        out
    }

    /// The adapter-eligible surface: four projections per cross-attention
    /// block and nothing else.
    pub fn enumerate_layers(&self) -> Vec<AdapterTarget> {
        self.cross_attention_blocks().into_iter().flat_map(|b| b.targets()).collect()
    }

    /// Predicted noise for `z_t` (`[n, c, side, side]`) at timesteps `t`.
    pub fn forward(
        &self,
        store: &ParamStore,
        proj: &dyn Projection,
        z_t: &Tensor,
        t: &[usize],
        cond: &Conditioning,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        let expect = [z_t.shape().first().copied().unwrap_or(0), cfg.in_channels, cfg.side, cfg.side];
        if z_t.shape() != expect || t.len() != expect[0] || cond.batch() != expect[0] || cond.dim() != cfg.d_text {
            return Err(Error::ShapeMismatch {
                op: "unet_forward",
                shapes: vec![z_t.shape().to_vec(), vec![t.len()], cond.seq.shape().to_vec()],
            });
        }
        if let Some(&bad) = t.iter().find(|&&s| s >= self.timesteps) {
            return Err(Error::invalid(format!("timestep {bad} outside [0, {})", self.timesteps)));
        }
        let n = t.len();
        let temb = Tensor::new(&[n, cfg.time_dim], timestep_embedding(t, cfg.time_dim))?;
        let temb = self.time2.forward(store, &self.time1.forward(store, &temb)?.silu()?)?;
        let temb_act = temb.silu()?;

        let mut h = self.conv_in.forward(store, z_t)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for lvl in &self.down {
            for (res, xa) in &lvl.blocks {
                h = res.forward(store, &h, &temb_act)?;
                if let Some(xa) = xa {
                    h = xa.forward_map(store, proj, &h, cond)?;
                }
            }
            skips.push(h.clone());
            if let Some(ds) = &lvl.resample {
                h = ds.forward(store, &h)?;
            }
        }

        h = self.mid.0.forward(store, &h, &temb_act)?;
        h = self.mid.1.forward_map(store, proj, &h, cond)?;
        h = self.mid.2.forward(store, &h, &temb_act)?;

        for lvl in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = Tensor::concat(&[h, skip], 1)?;
            for (res, xa) in &lvl.blocks {
                h = res.forward(store, &h, &temb_act)?;
                if let Some(xa) = xa {
                    h = xa.forward_map(store, proj, &h, cond)?;
                }
            }
            if let Some(us) = &lvl.resample {
                h = us.forward(store, &h.upsample2x()?)?;
            }
        }
        self.conv_out.forward(store, &self.norm_out.forward(store, &h)?.silu()?)
    }
}
