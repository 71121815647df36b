//! Low-rank adapters over the cross-attention projections.
//!
//! Each adapted matrix `W_0 (d x k)` gains a pair `A (d x r)`, `B (r x k)`
//! and is evaluated as `x·W_0 + scale·(x·A)·B`. The base model stays frozen.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::model::DiffusionModel;
use crate::nn::hex;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::text::Conditioning;
use crate::unet::{AdapterTarget, Projection};

pub const INIT_STD: f32 = 0.01;
const MAGIC: &[u8; 4] = b"USLR";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct LoraLayer {
    pub path: String,
    pub d: usize,
    pub k: usize,
    pub rank: usize,
    pub a: Tensor,
    pub b: Tensor,
    pub scale: f32,
}

fn check_rank(path: &str, rank: usize, d: usize, k: usize) -> Result<()> {
    if rank == 0 || rank >= d.min(k) {
        return Err(Error::RankTooLarge { path: path.to_owned(), rank, limit: d.min(k) });
    }
    Ok(())
}

impl LoraLayer {
    pub fn new(path: impl Into<String>, a: Tensor, b: Tensor, scale: f32) -> Result<Self> {
        let path = path.into();
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch { op: "lora_layer", shapes: vec![a.shape().to_vec(), b.shape().to_vec()] });
        }
        let (d, rank, k) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        check_rank(&path, rank, d, k)?;
        let a = if a.requires_grad() { a } else { a.as_param() };
        let b = if b.requires_grad() { b } else { b.as_param() };
        Ok(Self { path, d, k, rank, a, b, scale })
    }

    pub fn param_count(&self) -> usize {
        self.rank * (self.d + self.k)
    }

    /// Dense `scale·A·B`, accumulated in f64, row-major `d x k`.
    pub fn delta(&self) -> Vec<f64> {
        let (a, b, r, k) = (self.a.data(), self.b.data(), self.rank, self.k);
        let mut out = vec![0.0f64; self.d * k];
        for i in 0..self.d {
            for p in 0..r {
                let aip = f64::from(a[i * r + p]);
                if aip == 0.0 {
                    continue;
                }
                for (o, &bv) in out[i * k..(i + 1) * k].iter_mut().zip(&b[p * k..(p + 1) * k]) {
                    *o += aip * f64::from(bv);
                }
            }
        }
        let s = f64::from(self.scale);
        out.iter_mut().for_each(|v| *v *= s);
        out
    }
}

/// `x·W_0 + scale·(x·A)·B` without forming `A·B`.
pub fn effective_forward(x: &Tensor, w0: &Tensor, layer: &LoraLayer) -> Result<Tensor> {
    if w0.shape() != [layer.d, layer.k] {
        return Err(Error::ShapeMismatch {
            op: "effective_forward",
            shapes: vec![w0.shape().to_vec(), vec![layer.d, layer.k]],
        });
    }
    let base = x.matmul(w0)?;
    let low = x.matmul(&layer.a)?.matmul(&layer.b)?;
    let low = if layer.scale == 1.0 { low } else { low.scale(layer.scale)? };
    base.add(&low)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Provenance {
    pub base_digest: [u8; 32],
    /// Not persisted in adapter files; `None` after loading.
    pub seed: Option<u64>,
    /// Not persisted in adapter files; `None` after loading.
    pub config_digest: Option<[u8; 32]>,
}

#[derive(Clone, Debug)]
pub struct LoraAdapterSet {
    pub layers: Vec<LoraLayer>,
    pub rank: usize,
    pub provenance: Provenance,
    index: BTreeMap<String, usize>,
}

impl LoraAdapterSet {
    pub fn new(layers: Vec<LoraLayer>, rank: usize, provenance: Provenance) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, l) in layers.iter().enumerate() {
            if l.rank != rank {
                return Err(Error::invalid(format!("layer {} has rank {} in a rank-{rank} set", l.path, l.rank)));
            }
            if index.insert(l.path.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate adapter target {}", l.path)));
            }
        }
        Ok(Self { layers, rank, provenance, index })
    }

    pub fn base_digest(&self) -> [u8; 32] {
        self.provenance.base_digest
    }

    pub fn layer(&self, path: &str) -> Option<&LoraLayer> {
        self.index.get(path).map(|&i| &self.layers[i])
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Sum of adapter buffer lengths.
    pub fn trainable(&self) -> usize {
        self.layers.iter().map(|l| l.a.len() + l.b.len()).sum()
    }

    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for l in &self.layers {
            h.update(l.path.as_bytes());
            h.update(l.a.digest());
            h.update(l.b.digest());
        }
        h.finalize().into()
    }

    /// Checks every target exists in `model` with matching extents.
    pub fn check_targets(&self, model: &DiffusionModel) -> Result<()> {
        let eligible: BTreeMap<String, AdapterTarget> =
            model.unet.enumerate_layers().into_iter().map(|t| (t.path.clone(), t)).collect();
        for l in &self.layers {
            match eligible.get(&l.path) {
                Some(t) if t.d == l.d && t.k == l.k => {}
                Some(t) => {
                    return Err(Error::ShapeMismatch {
                        op: "adapter_target",
                        shapes: vec![vec![t.d, t.k], vec![l.d, l.k]],
                    })
                }
                None => return Err(Error::invalid(format!("{} is not an adapter-eligible matrix", l.path))),
            }
        }
        Ok(())
    }

    fn check_base(&self, model: &DiffusionModel) -> Result<()> {
        let found = model.digest();
        if found != self.base_digest() {
            return Err(Error::DigestMismatch { expected: hex(&self.base_digest()), found: hex(&found) });
        }
        Ok(())
    }
}

impl Projection for LoraAdapterSet {
    fn project(&self, path: &str, x: &Tensor, w0: &Tensor) -> Result<Tensor> {
        match self.layer(path) {
            Some(layer) => effective_forward(x, w0, layer),
            None => x.matmul(w0),
        }
    }
}

/// Creates one adapter per eligible matrix and freezes the base.
pub fn attach(model: &mut DiffusionModel, rank: usize, seed: u64) -> Result<LoraAdapterSet> {
    let targets = model.unet.enumerate_layers();
    if targets.is_empty() {
        return Err(Error::invalid("model has no cross-attention blocks"));
    }
    for t in &targets {
        check_rank(&t.path, rank, t.d, t.k)?;
    }
    model.params.set_frozen(true);
    let root = RngStream::new(seed, "lora-init");
    let layers = targets
        .iter()
        .map(|t| {
            let mut rng = root.substream(&t.path);
            let a = Tensor::randn(&[t.d, rank], INIT_STD, &mut rng).as_param();
            let b = Tensor::zeros(&[rank, t.k]).as_param();
            LoraLayer::new(t.path.clone(), a, b, 1.0)
        })
        .collect::<Result<Vec<_>>>()?;
    let provenance = Provenance { base_digest: model.digest(), seed: Some(seed), config_digest: None };
    LoraAdapterSet::new(layers, rank, provenance)
}

/// A base model evaluated through an adapter set.
pub struct Instrumented<'a> {
    pub model: &'a DiffusionModel,
    pub adapters: &'a LoraAdapterSet,
}

impl<'a> Instrumented<'a> {
    /// Fails unless the adapters were built for exactly this base.
    pub fn new(model: &'a DiffusionModel, adapters: &'a LoraAdapterSet) -> Result<Self> {
        adapters.check_base(model)?;
        adapters.check_targets(model)?;
        Ok(Self { model, adapters })
    }

    pub(crate) fn new_unchecked(model: &'a DiffusionModel, adapters: &'a LoraAdapterSet) -> Self {
        Self { model, adapters }
    }
}

impl NoisePredictor for Instrumented<'_> {
    fn predict_noise(&self, z_t: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor> {
        self.model.forward(self.adapters, z_t, t, cond)
    }

    fn image_shape(&self) -> [usize; 3] {
        self.model.image_shape()
    }

    fn encode_prompts(&self, prompts: &[String]) -> Result<Conditioning> {
        self.model.encode_prompts(prompts)
    }
}

fn apply_delta(model: &DiffusionModel, adapters: &LoraAdapterSet, sign: f64) -> Result<DiffusionModel> {
    adapters.check_targets(model)?;
    let mut out = model.clone();
    for layer in &adapters.layers {
        let w0 = model.params.get(&layer.path)?;
        let data = w0
            .data()
            .iter()
            .zip(layer.delta())
            .map(|(&w, d)| if d == 0.0 { w } else { (f64::from(w) + sign * d) as f32 })
            .collect();
        out.params.set(&layer.path, Tensor::new(w0.shape(), data)?)?;
    }
    Ok(out)
}

/// Bakes `W ← W_0 + scale·A·B` into a copy of `model`.
pub fn merge(model: &DiffusionModel, adapters: &LoraAdapterSet) -> Result<DiffusionModel> {
    adapters.check_base(model)?;
    apply_delta(model, adapters, 1.0)
}

/// Subtracts the adapter product from a merged model.
pub fn unmerge(merged: &DiffusionModel, adapters: &LoraAdapterSet) -> Result<DiffusionModel> {
    apply_delta(merged, adapters, -1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Accounting {
    pub trainable: usize,
    pub frozen: usize,
    pub fraction: f64,
}

/// Adapter parameter count `Σ r·(d+k)` over `targets` against `total`.
pub fn account(targets: &[AdapterTarget], rank: usize, total: usize) -> Result<Accounting> {
    for t in targets {
        check_rank(&t.path, rank, t.d, t.k)?;
    }
    let trainable: usize = targets.iter().map(|t| rank * (t.d + t.k)).sum();
    let fraction = if total == 0 { f64::INFINITY } else { trainable as f64 / total as f64 };
    Ok(Accounting { trainable, frozen: total, fraction })
}

pub fn parameter_accounting(model: &DiffusionModel, adapters: &LoraAdapterSet) -> Accounting {
    let trainable: usize = adapters.layers.iter().map(LoraLayer::param_count).sum();
    let frozen = model.unet_param_count();
    Accounting { trainable, frozen, fraction: trainable as f64 / frozen as f64 }
}

/// A layer table listing every parameter tensor of a network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerTable {
    pub total: usize,
    pub targets: Vec<AdapterTarget>,
}

#[derive(serde::Deserialize)]
struct DimRow {
    path: String,
    params: usize,
    adapter_eligible: bool,
    d: usize,
    k: usize,
}

/// Reads a `path,params,adapter_eligible,d,k` CSV.
pub fn load_layer_table(path: &Path) -> Result<LayerTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_layer_table(file, &path.display().to_string())
}

/// [`load_layer_table`] over any reader; `origin` names it in errors.
pub fn parse_layer_table(reader: impl std::io::Read, origin: &str) -> Result<LayerTable> {
    let format = |reason: String| Error::Format { path: origin.to_owned(), reason };
    let mut rdr = csv::Reader::from_reader(reader);
    let mut total = 0;
    let mut targets = Vec::new();
    for row in rdr.deserialize() {
        let row: DimRow = row?;
        total += row.params;
        if row.adapter_eligible {
            if row.d * row.k != row.params {
                return Err(format(format!("{}: {} x {} does not match {} params", row.path, row.d, row.k, row.params)));
            }
            targets.push(AdapterTarget { path: row.path, d: row.d, k: row.k });
        }
    }
    Ok(LayerTable { total, targets })
}

/// Serializes `set` in the USLR layout.
pub fn encode_adapters(set: &LoraAdapterSet) -> Result<Vec<u8>> {
    if let Some(l) = set.layers.iter().find(|l| l.scale != 1.0) {
        return Err(Error::invalid(format!("{} has scale {}; only scale 1 can be stored", l.path, l.scale)));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&u32::try_from(set.rank).map_err(|_| Error::invalid("rank too large"))?.to_le_bytes());
    buf.extend_from_slice(&set.provenance.base_digest);
    buf.extend_from_slice(&(set.layers.len() as u32).to_le_bytes());
    for l in &set.layers {
        let p = l.path.as_bytes();
        let len = u16::try_from(p.len()).map_err(|_| Error::invalid(format!("path too long: {}", l.path)))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(p);
        buf.extend_from_slice(&(l.d as u32).to_le_bytes());
        buf.extend_from_slice(&(l.k as u32).to_le_bytes());
        for v in l.a.data().iter().chain(l.b.data()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Cursor<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format { path: self.origin.to_owned(), reason: reason.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| self.fail("truncated"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.fail("payload too large"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_adapters(buf: &[u8], origin: &str) -> Result<LoraAdapterSet> {
    let fail = |reason: &str| Error::Format { path: origin.to_owned(), reason: reason.to_owned() };
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    if buf.len() < 4 + 4 + 4 + 32 + 4 + 4 {
        return Err(fail("truncated"));
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let mut cur = Cursor { buf: body, pos: 4, origin };
    let version = cur.u32()?;
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(fail("checksum mismatch (corrupt or truncated)"));
    }
    let rank = cur.u32()? as usize;
    let base_digest: [u8; 32] = cur.take(32)?.try_into().unwrap();
    let count = cur.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = cur.u16()? as usize;
        let path = std::str::from_utf8(cur.take(len)?).map_err(|_| fail("layer path is not UTF-8"))?.to_owned();
        let d = cur.u32()? as usize;
        let k = cur.u32()? as usize;
        let a = Tensor::new(&[d, rank], cur.f32s(d * rank)?)?;
        let b = Tensor::new(&[rank, k], cur.f32s(rank * k)?)?;
        layers.push(LoraLayer::new(path, a, b, 1.0)?);
    }
    if cur.pos != body.len() {
        return Err(fail("trailing bytes"));
    }
    LoraAdapterSet::new(layers, rank, Provenance { base_digest, seed: None, config_digest: None })
}

pub fn save_adapters(path: &Path, set: &LoraAdapterSet) -> Result<()> {
    let buf = encode_adapters(set)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_adapters(path: &Path) -> Result<LoraAdapterSet> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_adapters(&buf, &path.display().to_string())
}

/// Loads adapters for `model`, refusing a different base unless `force`.
///
/// A forced load is rebound to `model`'s digest.
pub fn load_adapters_for(path: &Path, model: &DiffusionModel, force: bool) -> Result<LoraAdapterSet> {
    let mut set = load_adapters(path)?;
    set.check_targets(model)?;
    if let Err(e) = set.check_base(model) {
        if !force {
            return Err(e);
        }
        log::warn!("{}: {e}; loading anyway", path.display());
        set.provenance.base_digest = model.digest();
    }
    Ok(set)
}
