//! Two-sided paired t-test.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TTest {
    Defined { t: f64, p: f64, df: usize },
    /// Every paired difference is identical, so the statistic is undefined.
    Degenerate { mean_difference: f64 },
}

impl TTest {
    pub fn p(&self) -> Option<f64> {
        match *self {
            TTest::Defined { p, .. } => Some(p),
            TTest::Degenerate { .. } => None,
        }
    }

    pub fn t(&self) -> Option<f64> {
        match *self {
            TTest::Defined { t, .. } => Some(t),
            TTest::Degenerate { .. } => None,
        }
    }
}

/// Student's t on `a − b` with `n − 1` degrees of freedom.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid(format!("paired t-test needs equal lengths ≥ 2, got {} and {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "paired_ttest" });
    }
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    if d.iter().all(|&v| v == d[0]) {
        return Ok(TTest::Degenerate { mean_difference: mean });
    }
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = mean / (var / n).sqrt();
    let df = d.len() - 1;
    let nu = df as f64;
    let p = beta_reg(nu / 2.0, 0.5, nu / (nu + t * t)).clamp(0.0, 1.0);
    Ok(TTest::Defined { t, p, df })
}
