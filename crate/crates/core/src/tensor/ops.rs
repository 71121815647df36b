//! Differentiable operations.
//!
//! Layouts are row-major; images are NCHW. Reductions accumulate in f64 in a
//! fixed order.

use super::{sgemm, shape_err, Tensor};
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, &[a.shape(), b.shape()]));
    }
    Ok(())
}

fn need(t: &Tensor) -> bool {
    t.requires_grad()
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dGeom {
    fn default() -> Self {
        Self { stride: 1, padding: 0 }
    }
}

/// Per-key validity for masked attention softmax.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyMask {
    /// Number of mask rows; must divide the number of softmax rows.
    pub batch: usize,
    pub keys: usize,
    pub valid: Vec<bool>,
}

impl KeyMask {
    pub fn new(batch: usize, keys: usize, valid: Vec<bool>) -> Result<KeyMask> {
        if valid.len() != batch * keys {
            return Err(Error::invalid("key mask length"));
        }
        Ok(KeyMask { batch, keys, valid })
    }

    pub fn all_valid(batch: usize, keys: usize) -> KeyMask {
        KeyMask { batch, keys, valid: vec![true; batch * keys] }
    }
}

impl Tensor {
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a, b) = (self, rhs);
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(shape_err("matmul", &[a.shape(), b.shape()]));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        sgemm(m, k, n, 1.0, a.data(), (k, 1), b.data(), (n, 1), 0.0, &mut out);
        let (ac, bc) = (a.clone(), b.clone());
        Tensor::from_op("matmul", vec![m, n], out, vec![a.clone(), b.clone()], move |g| {
            let ga = need(&ac).then(|| {
                let mut ga = vec![0.0; m * k];
                sgemm(m, n, k, 1.0, g, (n, 1), bc.data(), (1, n), 0.0, &mut ga);
                ga
            });
            let gb = need(&bc).then(|| {
                let mut gb = vec![0.0; k * n];
                sgemm(k, m, n, 1.0, ac.data(), (1, k), g, (n, 1), 0.0, &mut gb);
                gb
            });
            vec![ga, gb]
        })
    }

    /// Batched matmul: `[B, m, k] · [B, k, n] -> [B, m, n]`.
    pub fn bmm(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a, b) = (self, rhs);
        if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1] {
            return Err(shape_err("bmm", &[a.shape(), b.shape()]));
        }
        let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            sgemm(
                m,
                k,
                n,
                1.0,
                &a.data()[i * m * k..],
                (k, 1),
                &b.data()[i * k * n..],
                (n, 1),
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let (ac, bc) = (a.clone(), b.clone());
        Tensor::from_op("bmm", vec![bs, m, n], out, vec![a.clone(), b.clone()], move |g| {
            let ga = need(&ac).then(|| {
                let mut ga = vec![0.0; bs * m * k];
                for i in 0..bs {
                    sgemm(
                        m,
                        n,
                        k,
                        1.0,
                        &g[i * m * n..],
                        (n, 1),
                        &bc.data()[i * k * n..],
                        (1, n),
                        0.0,
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                }
                ga
            });
            let gb = need(&bc).then(|| {
                let mut gb = vec![0.0; bs * k * n];
                for i in 0..bs {
                    sgemm(
                        k,
                        m,
                        n,
                        1.0,
                        &ac.data()[i * m * k..],
                        (1, k),
                        &g[i * m * n..],
                        (n, 1),
                        0.0,
                        &mut gb[i * k * n..(i + 1) * k * n],
                    );
                }
                gb
            });
            vec![ga, gb]
        })
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("add", self, rhs)?;
        let out = self.data().iter().zip(rhs.data()).map(|(a, b)| a + b).collect();
        let (ra, rb) = (need(self), need(rhs));
        Tensor::from_op("add", self.shape().to_vec(), out, vec![self.clone(), rhs.clone()], move |g| {
            vec![ra.then(|| g.to_vec()), rb.then(|| g.to_vec())]
        })
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, rhs)?;
        let out = self.data().iter().zip(rhs.data()).map(|(a, b)| a - b).collect();
        let (ra, rb) = (need(self), need(rhs));
        Tensor::from_op("sub", self.shape().to_vec(), out, vec![self.clone(), rhs.clone()], move |g| {
            vec![ra.then(|| g.to_vec()), rb.then(|| g.iter().map(|v| -v).collect())]
        })
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, rhs)?;
        let out = self.data().iter().zip(rhs.data()).map(|(a, b)| a * b).collect();
        let (ac, bc) = (self.clone(), rhs.clone());
        Tensor::from_op("mul", self.shape().to_vec(), out, vec![self.clone(), rhs.clone()], move |g| {
            let ga = need(&ac).then(|| g.iter().zip(bc.data()).map(|(g, b)| g * b).collect());
            let gb = need(&bc).then(|| g.iter().zip(ac.data()).map(|(g, a)| g * a).collect());
            vec![ga, gb]
        })
    }

    pub fn scale(&self, s: f32) -> Result<Tensor> {
        let out = self.data().iter().map(|v| v * s).collect();
        Tensor::from_op("scale", self.shape().to_vec(), out, vec![self.clone()], move |g| {
            vec![Some(g.iter().map(|v| v * s).collect())]
        })
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let n = *self.shape().last().unwrap_or(&0);
        if bias.shape() != [n] {
            return Err(shape_err("add_bias", &[self.shape(), bias.shape()]));
        }
        let out = self
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(bias.data()).map(|(x, b)| x + b))
            .collect();
        let (rx, rb) = (need(self), need(bias));
        Tensor::from_op("add_bias", self.shape().to_vec(), out, vec![self.clone(), bias.clone()], move |g| {
            let gb = rb.then(|| {
                let mut acc = vec![0f64; n];
                for row in g.chunks_exact(n) {
                    acc.iter_mut().zip(row).for_each(|(a, v)| *a += f64::from(*v));
                }
                acc.into_iter().map(|v| v as f32).collect()
            });
            vec![rx.then(|| g.to_vec()), gb]
        })
    }

    /// `[N, C, ...] + [N, C]` broadcast over trailing axes.
    pub fn add_channel(&self, v: &Tensor) -> Result<Tensor> {
        if self.rank() < 2 || v.shape() != &self.shape()[..2] {
            return Err(shape_err("add_channel", &[self.shape(), v.shape()]));
        }
        let inner: usize = self.shape()[2..].iter().product();
        let out = self
            .data()
            .chunks_exact(inner)
            .zip(v.data())
            .flat_map(|(plane, b)| plane.iter().map(move |x| x + b))
            .collect();
        let (rx, rv) = (need(self), need(v));
        Tensor::from_op("add_channel", self.shape().to_vec(), out, vec![self.clone(), v.clone()], move |g| {
            let gv = rv.then(|| {
                g.chunks_exact(inner)
                    .map(|plane| plane.iter().map(|&x| f64::from(x)).sum::<f64>() as f32)
                    .collect()
            });
            vec![rx.then(|| g.to_vec()), gv]
        })
    }

    pub fn silu(&self) -> Result<Tensor> {
        let out = self.data().iter().map(|&x| x / (1.0 + (-x).exp())).collect();
        let xc = self.clone();
        Tensor::from_op("silu", self.shape().to_vec(), out, vec![self.clone()], move |g| {
            let gx = g
                .iter()
                .zip(xc.data())
                .map(|(g, &x)| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    g * s * (1.0 + x * (1.0 - s))
                })
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn relu(&self) -> Result<Tensor> {
        let out = self.data().iter().map(|&x| x.max(0.0)).collect();
        let xc = self.clone();
        Tensor::from_op("relu", self.shape().to_vec(), out, vec![self.clone()], move |g| {
            let gx = g.iter().zip(xc.data()).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
            vec![Some(gx)]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        let rows = self.len() / self.shape().last().copied().unwrap_or(1);
        self.masked_softmax(&KeyMask::all_valid(rows, *self.shape().last().unwrap_or(&1)))
    }

    /// Softmax over the last axis with masked keys forced to exactly zero.
    ///
    /// Softmax rows are grouped evenly over the mask's batch: with scores of
    /// shape `[B, H, Lq, Lk]` and a `[B, Lk]` mask, each mask row covers
    /// `H * Lq` softmax rows.
    pub fn masked_softmax(&self, mask: &KeyMask) -> Result<Tensor> {
        let lk = *self.shape().last().unwrap_or(&0);
        let rows = self.len() / lk.max(1);
        if mask.keys != lk || mask.batch == 0 || !rows.is_multiple_of(mask.batch) {
            return Err(shape_err("masked_softmax", &[self.shape(), &[mask.batch, mask.keys]]));
        }
        let per = rows / mask.batch;
        let mut out = vec![0.0f32; self.len()];
        for (r, (src, dst)) in self.data().chunks_exact(lk).zip(out.chunks_exact_mut(lk)).enumerate() {
            let m = &mask.valid[(r / per) * lk..(r / per + 1) * lk];
            let max = src
                .iter()
                .zip(m)
                .filter(|(_, &ok)| ok)
                .map(|(&v, _)| v)
                .fold(f32::NEG_INFINITY, f32::max);
            if max == f32::NEG_INFINITY {
                return Err(Error::invalid("masked_softmax: row has no valid key"));
            }
            let mut total = 0f64;
            for ((d, &s), &ok) in dst.iter_mut().zip(src).zip(m) {
                if ok {
                    let e = (s - max).exp();
                    *d = e;
                    total += f64::from(e);
                }
            }
            let inv = (1.0 / total) as f32;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let y = out.clone();
        Tensor::from_op("softmax", self.shape().to_vec(), out, vec![self.clone()], move |g| {
            let mut gx = vec![0.0f32; y.len()];
            for ((gy, yy), gxr) in g.chunks_exact(lk).zip(y.chunks_exact(lk)).zip(gx.chunks_exact_mut(lk)) {
                let dot: f64 = gy.iter().zip(yy).map(|(a, b)| f64::from(a * b)).sum();
                let dot = dot as f32;
                for ((o, &gv), &yv) in gxr.iter_mut().zip(gy).zip(yy) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(shape_err("reshape", &[self.shape(), shape]));
        }
        Tensor::from_op("reshape", shape.to_vec(), self.to_vec(), vec![self.clone()], |g| vec![Some(g.to_vec())])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", &[self.shape(), perm]));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let out = permute_data(self.data(), &in_shape, perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let os = out_shape.clone();
        Tensor::from_op("permute", out_shape, out, vec![self.clone()], move |g| {
            vec![Some(permute_data(g, &os, &inverse))]
        })
    }

    /// Transpose of a matrix.
    pub fn t(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(shape_err("transpose", &[self.shape()]));
        }
        self.permute(&[1, 0])
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(shape_err("concat", &[first.shape()]));
        }
        for p in parts {
            if p.rank() != rank
                || p.shape()[..axis] != first.shape()[..axis]
                || p.shape()[axis + 1..] != first.shape()[axis + 1..]
            {
                let shapes: Vec<&[usize]> = parts.iter().map(Tensor::shape).collect();
                return Err(shape_err("concat", &shapes));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let flags: Vec<bool> = parts.iter().map(need).collect();
        Tensor::from_op("concat", shape, out, parts.to_vec(), move |g| {
            let mut grads: Vec<Option<Vec<f32>>> =
                flags.iter().zip(&widths).map(|(&f, &w)| f.then(|| Vec::with_capacity(outer * w))).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &w) in grads.iter_mut().zip(&widths) {
                    if let Some(gp) = gp {
                        gp.extend_from_slice(&g[off..off + w]);
                    }
                    off += w;
                }
            }
            grads
        })
    }

    /// Rows of `self` (an embedding table `[V, D]`) gathered by id.
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(shape_err("embedding", &[self.shape()]));
        }
        let (v, d) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!("embedding id {bad} out of range for vocabulary of {v}")));
        }
        if ids.is_empty() {
            return Err(Error::invalid("embedding of empty id list"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&self.data()[i * d..(i + 1) * d]);
        }
        let ids = ids.to_vec();
        Tensor::from_op("embedding", vec![ids.len(), d], out, vec![self.clone()], move |g| {
            let mut gt = vec![0.0; v * d];
            for (r, &i) in ids.iter().enumerate() {
                gt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
            }
            vec![Some(gt)]
        })
    }

    /// Rows of `self` (`[R, D]`) where `keep[r]` is false are replaced by `fill` (`[D]`).
    pub fn fill_rows(&self, keep: &[bool], fill: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || keep.len() != self.shape()[0] || fill.shape() != [self.shape()[1]] {
            return Err(shape_err("fill_rows", &[self.shape(), fill.shape(), &[keep.len()]]));
        }
        let d = self.shape()[1];
        let mut out = self.to_vec();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                out[r * d..(r + 1) * d].copy_from_slice(fill.data());
            }
        }
        let keep = keep.to_vec();
        let (rx, rf) = (need(self), need(fill));
        Tensor::from_op("fill_rows", self.shape().to_vec(), out, vec![self.clone(), fill.clone()], move |g| {
            let gx = rx.then(|| {
                let mut gx = g.to_vec();
                for (r, &k) in keep.iter().enumerate() {
                    if !k {
                        gx[r * d..(r + 1) * d].fill(0.0);
                    }
                }
                gx
            });
            let gf = rf.then(|| {
                let mut acc = vec![0.0; d];
                for (r, &k) in keep.iter().enumerate() {
                    if !k {
                        acc.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
                    }
                }
                acc
            });
            vec![gx, gf]
        })
    }

    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().map(|&v| f64::from(v)).sum();
        let n = self.len();
        Tensor::from_op("sum", vec![1], vec![s as f32], vec![self.clone()], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.len();
        let s: f64 = self.data().iter().map(|&v| f64::from(v)).sum();
        Tensor::from_op("mean", vec![1], vec![(s / n as f64) as f32], vec![self.clone()], move |g| {
            vec![Some(vec![g[0] / n as f32; n])]
        })
    }

    /// Mean of squared differences, accumulated in f64.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        same_shape("mse", self, target)?;
        let n = self.len();
        let s: f64 = self
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| {
                let d = f64::from(a) - f64::from(b);
                d * d
            })
            .sum();
        let (ac, bc) = (self.clone(), target.clone());
        Tensor::from_op("mse", vec![1], vec![(s / n as f64) as f32], vec![self.clone(), target.clone()], move |g| {
            let k = 2.0 * g[0] / n as f32;
            let d: Vec<f32> = ac.data().iter().zip(bc.data()).map(|(a, b)| k * (a - b)).collect();
            let gb = need(&bc).then(|| d.iter().map(|v| -v).collect());
            vec![need(&ac).then_some(d), gb]
        })
    }

    /// `[N, C, ...] -> [N, C]` mean over trailing axes.
    pub fn mean_spatial(&self) -> Result<Tensor> {
        if self.rank() < 3 {
            return Err(shape_err("mean_spatial", &[self.shape()]));
        }
        let inner: usize = self.shape()[2..].iter().product();
        let out = self
            .data()
            .chunks_exact(inner)
            .map(|p| (p.iter().map(|&v| f64::from(v)).sum::<f64>() / inner as f64) as f32)
            .collect();
        Tensor::from_op("mean_spatial", self.shape()[..2].to_vec(), out, vec![self.clone()], move |g| {
            let inv = 1.0 / inner as f32;
            vec![Some(g.iter().flat_map(|&v| std::iter::repeat_n(v * inv, inner)).collect())]
        })
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class indices.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 || self.shape()[0] != targets.len() {
            return Err(shape_err("cross_entropy", &[self.shape(), &[targets.len()]]));
        }
        let (n, k) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(format!("target class {bad} out of range")));
        }
        let mut probs = vec![0.0f32; n * k];
        let mut total = 0f64;
        for (i, (row, p)) in self.data().chunks_exact(k).zip(probs.chunks_exact_mut(k)).enumerate() {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let z: f64 = row.iter().map(|&v| f64::from(v - max).exp()).sum();
            let lse = f64::from(max) + z.ln();
            total += lse - f64::from(row[targets[i]]);
            for (pp, &v) in p.iter_mut().zip(row) {
                *pp = (f64::from(v - max).exp() / z) as f32;
            }
        }
        let targets = targets.to_vec();
        Tensor::from_op("cross_entropy", vec![1], vec![(total / n as f64) as f32], vec![self.clone()], move |g| {
            let s = g[0] / n as f32;
            let mut gx = probs.clone();
            for (i, &t) in targets.iter().enumerate() {
                gx[i * k + t] -= 1.0;
            }
            gx.iter_mut().for_each(|v| *v *= s);
            vec![Some(gx)]
        })
    }

    /// 2-D convolution, NCHW input and `[C_out, C_in, kh, kw]` weights.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, geom: Conv2dGeom) -> Result<Tensor> {
        let (x, w) = (self, weight);
        if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1] || geom.stride == 0 {
            return Err(shape_err("conv2d", &[x.shape(), w.shape()]));
        }
        let [n, ci, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [co, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(shape_err("conv2d", &[x.shape(), w.shape(), b.shape()]));
            }
        }
        if h + 2 * geom.padding < kh || wd + 2 * geom.padding < kw {
            return Err(shape_err("conv2d", &[x.shape(), w.shape()]));
        }
        let geo = Im2Col {
            c: ci,
            h,
            w: wd,
            kh,
            kw,
            stride: geom.stride,
            pad: geom.padding,
            ho: (h + 2 * geom.padding - kh) / geom.stride + 1,
            wo: (wd + 2 * geom.padding - kw) / geom.stride + 1,
        };
        let ck = ci * kh * kw;
        let p = geo.ho * geo.wo;
        let plane_in = ci * h * wd;
        let mut out = vec![0.0; n * co * p];
        let mut cols = vec![0.0; ck * p];
        for (xs, ys) in x.data().chunks_exact(plane_in).zip(out.chunks_exact_mut(co * p)) {
            geo.im2col(xs, &mut cols);
            sgemm(co, ck, p, 1.0, w.data(), (ck, 1), &cols, (p, 1), 0.0, ys);
            if let Some(b) = bias {
                for (row, &bv) in ys.chunks_exact_mut(p).zip(b.data()) {
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        drop(cols);
        let mut inputs = vec![x.clone(), w.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        let has_bias = bias.is_some();
        let (xc, wc) = (x.clone(), w.clone());
        let rb = bias.is_some_and(need);
        Tensor::from_op("conv2d", vec![n, co, geo.ho, geo.wo], out, inputs, move |g| {
            let (nx, nw) = (need(&xc), need(&wc));
            let mut gx = nx.then(|| vec![0.0; n * plane_in]);
            let mut gw = nw.then(|| vec![0.0; co * ck]);
            let mut cols = vec![0.0; ck * p];
            for (s, gs) in g.chunks_exact(co * p).enumerate() {
                if let Some(gx) = gx.as_mut() {
                    sgemm(ck, co, p, 1.0, wc.data(), (1, ck), gs, (p, 1), 0.0, &mut cols);
                    geo.col2im(&cols, &mut gx[s * plane_in..(s + 1) * plane_in]);
                }
                if let Some(gw) = gw.as_mut() {
                    geo.im2col(&xc.data()[s * plane_in..(s + 1) * plane_in], &mut cols);
                    sgemm(co, p, ck, 1.0, gs, (p, 1), &cols, (1, p), 1.0, gw);
                }
            }
            let mut res = vec![gx, gw];
            if has_bias {
                res.push(rb.then(|| {
                    (0..co)
                        .map(|o| {
                            g.chunks_exact(co * p)
                                .flat_map(|gs| &gs[o * p..(o + 1) * p])
                                .map(|&v| f64::from(v))
                                .sum::<f64>() as f32
                        })
                        .collect()
                }));
            }
            res
        })
    }

    /// Nearest-neighbour 2x spatial upsampling of an NCHW tensor.
    pub fn upsample2x(&self) -> Result<Tensor> {
        if self.rank() != 4 {
            return Err(shape_err("upsample2x", &[self.shape()]));
        }
        let [n, c, h, w] = [self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]];
        let mut out = vec![0.0; n * c * 4 * h * w];
        for (plane, dst) in self.data().chunks_exact(h * w).zip(out.chunks_exact_mut(4 * h * w)) {
            for (src, rows) in plane.chunks_exact(w).zip(dst.chunks_exact_mut(4 * w)) {
                let (top, bottom) = rows.split_at_mut(2 * w);
                for (pair, &v) in top.chunks_exact_mut(2).zip(src) {
                    pair[0] = v;
                    pair[1] = v;
                }
                bottom.copy_from_slice(top);
            }
        }
        Tensor::from_op("upsample2x", vec![n, c, 2 * h, 2 * w], out, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; n * c * h * w];
            for (gp, src) in gx.chunks_exact_mut(h * w).zip(g.chunks_exact(4 * h * w)) {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        gp[(y / 2) * w + x / 2] += src[y * 2 * w + x];
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Group normalization over `[N, C, ...]` with per-channel affine.
    pub fn group_norm(&self, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
        if self.rank() < 2 {
            return Err(shape_err("group_norm", &[self.shape()]));
        }
        let (n, c) = (self.shape()[0], self.shape()[1]);
        if groups == 0 || c % groups != 0 || gamma.shape() != [c] || beta.shape() != [c] {
            return Err(shape_err("group_norm", &[self.shape(), gamma.shape(), beta.shape()]));
        }
        let inner: usize = self.shape()[2..].iter().product();
        let cg = c / groups;
        let gsize = cg * inner;
        let mut xhat = vec![0.0f32; self.len()];
        let mut inv_std = vec![0.0f32; n * groups];
        for (gi, (src, dst)) in self.data().chunks_exact(gsize).zip(xhat.chunks_exact_mut(gsize)).enumerate() {
            let mean = src.iter().map(|&v| f64::from(v)).sum::<f64>() / gsize as f64;
            let var = src.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / gsize as f64;
            let is = 1.0 / (var + f64::from(eps)).sqrt();
            inv_std[gi] = is as f32;
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = ((f64::from(v) - mean) * is) as f32;
            }
        }
        let mut out = vec![0.0f32; self.len()];
        for (ch, (xp, op)) in xhat.chunks_exact(inner).zip(out.chunks_exact_mut(inner)).enumerate() {
            let (ga, be) = (gamma.data()[ch % c], beta.data()[ch % c]);
            op.iter_mut().zip(xp).for_each(|(o, &v)| *o = v * ga + be);
        }
        let (rx, rg, rb) = (need(self), need(gamma), need(beta));
        let gc = gamma.clone();
        Tensor::from_op(
            "group_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g| {
                let mut dgamma = vec![0f64; c];
                let mut dbeta = vec![0f64; c];
                for (ch, (gp, xp)) in g.chunks_exact(inner).zip(xhat.chunks_exact(inner)).enumerate() {
                    let k = ch % c;
                    for (&gv, &xv) in gp.iter().zip(xp) {
                        dgamma[k] += f64::from(gv * xv);
                        dbeta[k] += f64::from(gv);
                    }
                }
                let gx = rx.then(|| {
                    let mut gx = vec![0.0f32; g.len()];
                    for (gi, &inv) in inv_std.iter().enumerate() {
                        let base = gi * gsize;
                        let ch0 = (gi % groups) * cg;
                        let mut sum_d = 0f64;
                        let mut sum_dx = 0f64;
                        for j in 0..gsize {
                            let d = f64::from(g[base + j] * gc.data()[ch0 + j / inner]);
                            sum_d += d;
                            sum_dx += d * f64::from(xhat[base + j]);
                        }
                        let (md, mdx) = (sum_d / gsize as f64, sum_dx / gsize as f64);
                        let is = f64::from(inv);
                        for j in 0..gsize {
                            let d = f64::from(g[base + j] * gc.data()[ch0 + j / inner]);
                            gx[base + j] = (is * (d - md - f64::from(xhat[base + j]) * mdx)) as f32;
                        }
                    }
                    gx
                });
                let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<_>>();
                vec![gx, rg.then(|| to32(dgamma)), rb.then(|| to32(dbeta))]
            },
        )
    }
}

fn permute_data(data: &[f32], shape: &[usize], perm: &[usize]) -> Vec<f32> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let (len_last, stride_last) = (out_shape[last], strides[last]);
    loop {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.extend((0..len_last).map(|j| data[base + j * stride_last]));
        // advance all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

#[derive(Clone, Copy)]
struct Im2Col {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Im2Col {
    /// One sample `[C, h, w]` into `cols` laid out `[C*kh*kw, ho*wo]`.
    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let p = self.ho * self.wo;
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..][..self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    dst.fill(0.0);
                    self.for_each_run(ki, kj, |o, i, len| {
                        if self.stride == 1 {
                            dst[o..o + len].copy_from_slice(&plane[i..i + len]);
                        } else {
                            for j in 0..len {
                                dst[o + j] = plane[i + j * self.stride];
                            }
                        }
                    });
                }
            }
        }
    }

    /// Adds `cols` back onto one sample's input gradient `x`.
    fn col2im(&self, cols: &[f32], x: &mut [f32]) {
        let p = self.ho * self.wo;
        for ci in 0..self.c {
            let plane = &mut x[ci * self.h * self.w..][..self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    self.for_each_run(ki, kj, |o, i, len| {
                        for j in 0..len {
                            plane[i + j * self.stride] += src[o + j];
                        }
                    });
                }
            }
        }
    }

    /// Calls `f(output_start, input_start, len)` for each output row's
    /// in-bounds span of tap `(ki, kj)`; inputs advance by `stride`.
    #[inline]
    fn for_each_run(&self, ki: usize, kj: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (s, pad) = (self.stride, self.pad);
        // ox valid when pad <= ox*s + kj < w + pad
        let lo = pad.saturating_sub(kj).div_ceil(s);
        let hi = if self.w + pad > kj { ((self.w + pad - kj - 1) / s + 1).min(self.wo) } else { 0 };
        if lo >= hi {
            return;
        }
        for oy in 0..self.ho {
            let iy = oy * s + ki;
            if iy < pad || iy >= self.h + pad {
                continue;
            }
            let ix = lo * s + kj - pad;
            f(oy * self.wo + lo, (iy - pad) * self.w + ix, hi - lo);
        }
    }
}
