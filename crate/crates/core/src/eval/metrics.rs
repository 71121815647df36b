//! Confusion matrices and one-vs-rest macro metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::ClassLabel;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 3]; 3],
}

impl ConfusionMatrix {
    pub fn new(counts: [[u64; 3]; 3]) -> Self {
        Self { counts }
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::invalid(format!("{} labels vs {} predictions", truth.len(), predicted.len())));
        }
        let mut cm = Self::default();
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= 3 || p >= 3 {
                return Err(Error::invalid(format!("class index out of range: {t}/{p}")));
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..3).map(|i| self.counts[i][i]).sum()
    }

    pub fn metrics(&self) -> Result<Metrics> {
        metrics(self)
    }
}

/// One class against the rest; `None` marks a zero denominator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: ClassLabel,
    pub support: u64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `class.metric` names left out of the macro means.
    pub undefined: Vec<String>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Accuracy plus macro averages over classes with nonzero support.
pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("confusion matrix is empty"));
    }
    let mut per_class = Vec::with_capacity(3);
    for (i, class) in ClassLabel::ALL.into_iter().enumerate() {
        let tp = cm.counts[i][i];
        let fn_ = cm.counts[i].iter().sum::<u64>() - tp;
        let fp = (0..3).map(|r| cm.counts[r][i]).sum::<u64>() - tp;
        let tn = total - tp - fn_ - fp;
        per_class.push(ClassMetrics {
            class,
            support: tp + fn_,
            sensitivity: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
            precision: ratio(tp, tp + fp),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
        });
    }
    let mut undefined = Vec::new();
    let mut macro_of = |name: &str, get: fn(&ClassMetrics) -> Option<f64>| {
        let mut vals = Vec::new();
        for c in per_class.iter().filter(|c| c.support > 0) {
            match get(c) {
                Some(v) => vals.push(v),
                None => undefined.push(format!("{}.{name}", c.class)),
            }
        }
        if vals.is_empty() {
            undefined.push(format!("macro.{name}"));
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let sensitivity = macro_of("sensitivity", |c| c.sensitivity);
    let specificity = macro_of("specificity", |c| c.specificity);
    let precision = macro_of("precision", |c| c.precision);
    let f1 = macro_of("f1", |c| c.f1);
    Ok(Metrics {
        accuracy: cm.trace() as f64 / total as f64,
        sensitivity,
        specificity,
        precision,
        f1,
        per_class,
        undefined,
    })
}
