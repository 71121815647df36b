//! Fréchet distance between Gaussian fits of two feature sets, and
//! adapter-rank selection by lowest distance.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub const JITTER: f64 = 1e-6;

fn gaussian(features: &[Vec<f32>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = features.len();
    let mut mean = DVector::zeros(dim);
    for f in features {
        for (m, &v) in mean.iter_mut().zip(f) {
            *m += f64::from(v);
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for f in features {
        let d = DVector::from_iterator(dim, f.iter().map(|&v| f64::from(v))) - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov /= (n - 1) as f64;
    for i in 0..dim {
        cov[(i, i)] += JITTER;
    }
    (mean, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`.
pub fn fid(a: &[Vec<f32>], b: &[Vec<f32>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("fid needs at least two feature vectors per side"));
    }
    let dim = a[0].len();
    if dim == 0 || a.iter().chain(b).any(|f| f.len() != dim) {
        return Err(Error::ShapeMismatch { op: "fid", shapes: vec![vec![a[0].len()], vec![b[0].len()]] });
    }
    let (m1, s1) = gaussian(a, dim);
    let (m2, s2) = gaussian(b, dim);
    let r1 = sym_sqrt(&s1);
    let mut inner = &r1 * &s2 * &r1;
    inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let d = (m1 - m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    if !d.is_finite() {
        return Err(Error::NonFinite { op: "fid" });
    }
    Ok(d.max(0.0))
}

/// Rank with the lowest FID; ties go to the smaller rank.
pub fn rank_select(candidates: &BTreeMap<usize, f64>) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (&r, &f) in candidates {
        if f.is_nan() {
            return Err(Error::invalid(format!("FID for rank {r} is NaN")));
        }
        if best.is_none_or(|(_, bf)| f < bf) {
            best = Some((r, f));
        }
    }
    best.map(|(r, _)| r).ok_or_else(|| Error::invalid("no rank candidates"))
}
