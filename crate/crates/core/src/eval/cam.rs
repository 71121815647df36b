//! Gradient-weighted class activation maps.

use super::classifier::Classifier;
use crate::error::{Error, Result};
use crate::tensor::{backward, Tensor};

/// A classifier exposing the feature map its logits are computed from.
pub trait CamModel {
    /// `(logits [1, classes], activations [1, C, h, w])` for a `[1, 1, s, s]` input.
    fn cam_forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)>;
}

impl CamModel for Classifier {
    fn cam_forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let act = self.activations(x)?;
        Ok((self.head_from(&act)?, act))
    }
}

/// Bilinear resampling of an `h x w` map to `side x side` with pixel
/// centres aligned.
pub fn bilinear(map: &[f32], h: usize, w: usize, side: usize) -> Vec<f32> {
    let coord = |dst: usize, src_len: usize| {
        let c = ((dst as f64 + 0.5) * src_len as f64 / side as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let i0 = c.floor() as usize;
        (i0, (i0 + 1).min(src_len - 1), (c - i0 as f64) as f32)
    };
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        let (y0, y1, fy) = coord(y, h);
        for x in 0..side {
            let (x0, x1, fx) = coord(x, w);
            let top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
            let bottom = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Saliency for `target` over a `side x side` image, in [0, 1].
///
/// Channel weights are the spatially averaged gradients of the target
/// logit; the weighted activation sum is clipped at zero, resampled to the
/// input size and divided by its maximum. A map with no positive value is
/// returned as all zeros.
pub fn heatmap(model: &dyn CamModel, image: &[f32], side: usize, target: usize) -> Result<Vec<f32>> {
    if image.len() != side * side {
        return Err(Error::ShapeMismatch { op: "heatmap", shapes: vec![vec![image.len()], vec![side, side]] });
    }
    let x = Tensor::param(&[1, 1, side, side], image.to_vec())?;
    let (logits, act) = model.cam_forward(&x)?;
    let classes = logits.len();
    if target >= classes || act.rank() != 4 || act.shape()[0] != 1 {
        return Err(Error::invalid(format!("heatmap target {target} for {classes} classes")));
    }
    let mut onehot = vec![0.0; classes];
    onehot[target] = 1.0;
    let score = logits.reshape(&[classes])?.mul(&Tensor::new(&[classes], onehot)?)?.sum()?;
    let grads = backward(&score)?;
    let (c, h, w) = (act.shape()[1], act.shape()[2], act.shape()[3]);
    let g = grads.get_or_zeros(&act);
    let mut cam = vec![0.0f32; h * w];
    for ch in 0..c {
        let plane = &g[ch * h * w..(ch + 1) * h * w];
        let alpha = (plane.iter().map(|&v| f64::from(v)).sum::<f64>() / (h * w) as f64) as f32;
        for (o, &a) in cam.iter_mut().zip(&act.data()[ch * h * w..(ch + 1) * h * w]) {
            *o += alpha * a;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut up = bilinear(&cam, h, w, side);
    let max = up.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        up.iter_mut().for_each(|v| *v = (*v / max).clamp(0.0, 1.0));
    } else {
        up.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(up)
}
