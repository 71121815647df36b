//! Scaled dot-product attention with head splitting and key masking.

use crate::error::{Error, Result};
use crate::tensor::ops::KeyMask;
use crate::tensor::Tensor;

/// Attention over already-projected queries, keys and values.
///
/// `q` is `[n*lq, d]`, `k` and `v` are `[n*lk, d]`; `mask` is `[n, lk]`.
/// Returns `[n*lq, d]` with heads re-joined.
pub fn multi_head(q: &Tensor, k: &Tensor, v: &Tensor, n: usize, heads: usize, mask: &KeyMask) -> Result<Tensor> {
    let d = q.shape()[1];
    if heads == 0 || !d.is_multiple_of(heads) || k.shape()[1] != d || v.shape() != k.shape() {
        return Err(Error::ShapeMismatch {
            op: "attention",
            shapes: vec![q.shape().to_vec(), k.shape().to_vec(), v.shape().to_vec()],
        });
    }
    let lq = q.shape()[0] / n;
    let lk = k.shape()[0] / n;
    if lq * n != q.shape()[0] || lk * n != k.shape()[0] || mask.batch != n || mask.keys != lk {
        return Err(Error::ShapeMismatch {
            op: "attention",
            shapes: vec![q.shape().to_vec(), k.shape().to_vec(), vec![mask.batch, mask.keys]],
        });
    }
    let dh = d / heads;
    let qh = q.reshape(&[n, lq, heads, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[n * heads, lq, dh])?;
    let kt = k.reshape(&[n, lk, heads, dh])?.permute(&[0, 2, 3, 1])?.reshape(&[n * heads, dh, lk])?;
    let vh = v.reshape(&[n, lk, heads, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[n * heads, lk, dh])?;
    let scores = qh.bmm(&kt)?.scale(1.0 / (dh as f32).sqrt())?;
    let weights = scores.masked_softmax(mask)?;
    weights
        .bmm(&vh)?
        .reshape(&[n, heads, lq, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[n * lq, d])
}
