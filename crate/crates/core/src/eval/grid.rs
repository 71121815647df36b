//! The adjective × ratio × preset experiment grid and its report.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::classifier::{train_classifier, Classifier, ClassifierConfig, LabeledImages, Preset};
use super::fid::fid;
use super::metrics::{ConfusionMatrix, Metrics};
use super::stats::{paired_ttest, TTest};
use crate::augment::{make_folds, mix, Manifest, Split};
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub classifier: ClassifierConfig,
    pub presets: Vec<Preset>,
    pub folds: usize,
    pub seed: u64,
}

/// One grid cell's synthetic data; `None` when it could not be produced.
#[derive(Clone, Debug)]
pub struct CellInput {
    pub adjective: String,
    pub ratio: f64,
    pub synthetic: Option<Manifest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f1: f64,
}

impl MeanMetrics {
    pub fn of(folds: &[FoldResult]) -> Self {
        let n = folds.len() as f64;
        let avg = |f: fn(&Metrics) -> f64| folds.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
        Self {
            accuracy: avg(|m| m.accuracy),
            sensitivity: avg(|m| m.sensitivity),
            specificity: avg(|m| m.specificity),
            precision: avg(|m| m.precision),
            f1: avg(|m| m.f1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    /// `None` for the real-only baseline.
    pub adjective: Option<String>,
    pub ratio: Option<f64>,
    pub preset: Preset,
    pub seed: u64,
    pub absent: Option<String>,
    pub folds: Vec<FoldResult>,
    pub mean: Option<MeanMetrics>,
    pub fid: Option<f64>,
    /// Fold accuracies against the baseline of the same preset.
    pub ttest: Option<TTest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_digest: String,
    pub cells: Vec<CellReport>,
}

struct ImageCache {
    side: usize,
    images: HashMap<String, Vec<f32>>,
}

impl ImageCache {
    fn load(&mut self, m: &Manifest) -> Result<LabeledImages> {
        let mut out = LabeledImages::default();
        for r in &m.rows {
            if !self.images.contains_key(&r.image_path) {
                let one = Manifest::new(vec![r.clone()]).load_images(self.side)?;
                self.images.insert(r.image_path.clone(), one.into_iter().next().unwrap_or_default());
            }
            out.images.push(self.images[&r.image_path].clone());
            out.labels.push(r.label.index());
        }
        Ok(out)
    }
}

fn run_folds(
    cache: &mut ImageCache,
    real: &Manifest,
    synthetic: Option<&Manifest>,
    config: &ClassifierConfig,
    spec: &GridSpec,
    cell_seed: u64,
) -> Result<Vec<FoldResult>> {
    let test = cache.load(&real.split(Split::Test))?;
    let folds = make_folds(real, spec.folds, spec.seed)?;
    let mut out = Vec::with_capacity(folds.len());
    for (i, fold) in folds.iter().enumerate() {
        let split = fold.apply(real);
        let split = match synthetic {
            Some(s) => mix(&split, s)?,
            None => split,
        };
        let train = cache.load(&split.split(Split::Train))?;
        let val = cache.load(&split.split(Split::Val))?;
        let seed = RngStream::new(cell_seed, &format!("fold/{i}")).next_u64();
        let trained = train_classifier(config, &train, &val, seed)?;
        let confusion = trained.classifier.evaluate(&test)?;
        out.push(FoldResult { fold: i, metrics: confusion.metrics()?, confusion });
    }
    Ok(out)
}

/// Trains and tests every cell with `spec.folds`-fold patient-level
/// cross-validation on the real train split; the real test split scores
/// every fold. A cell whose inputs are missing or fail is marked absent.
///
/// With a `probe` classifier each present cell also gets the FID between
/// its synthetic images and the real training images.
pub fn run_experiment_grid(
    real: &Manifest,
    cells: &[CellInput],
    spec: &GridSpec,
    probe: Option<&Classifier>,
    config_digest: &str,
) -> Result<EvalReport> {
    if spec.presets.is_empty() {
        return Err(Error::Config("no classifier presets selected".into()));
    }
    if real.split(Split::Test).is_empty() {
        return Err(Error::Dataset("real manifest has no test split".into()));
    }
    if real.rows.iter().any(|r| r.provenance != crate::augment::Source::Real) {
        return Err(Error::Dataset("baseline manifest contains synthetic rows".into()));
    }
    let mut cache = ImageCache { side: spec.classifier.side, images: HashMap::new() };
    let real_features = match probe {
        Some(p) => Some(p.features(&cache.load(&real.split(Split::Train))?.images)?),
        None => None,
    };
    let mut reports = Vec::new();
    for &preset in &spec.presets {
        let config = ClassifierConfig { preset, ..spec.classifier };
        let base_seed = RngStream::new(spec.seed, &format!("grid/{}/baseline", preset.name())).next_u64();
        let baseline = run_folds(&mut cache, real, None, &config, spec, base_seed)?;
        let base_acc: Vec<f64> = baseline.iter().map(|f| f.metrics.accuracy).collect();
        reports.push(CellReport {
            adjective: None,
            ratio: None,
            preset,
            seed: base_seed,
            absent: None,
            mean: Some(MeanMetrics::of(&baseline)),
            folds: baseline,
            fid: None,
            ttest: None,
        });
        for cell in cells {
            let seed = RngStream::new(spec.seed, &format!("grid/{}/{}/{}", preset.name(), cell.adjective, cell.ratio))
                .next_u64();
            let mut report = CellReport {
                adjective: Some(cell.adjective.clone()),
                ratio: Some(cell.ratio),
                preset,
                seed,
                absent: None,
                folds: Vec::new(),
                mean: None,
                fid: None,
                ttest: None,
            };
            let outcome = match &cell.synthetic {
                None => Err(Error::Dataset("synthetic set missing".into())),
                Some(s) => run_folds(&mut cache, real, Some(s), &config, spec, seed).and_then(|folds| {
                    let fid_value = match (probe, &real_features) {
                        (Some(p), Some(rf)) => Some(fid(rf, &p.features(&cache.load(s)?.images)?)?),
                        _ => None,
                    };
                    Ok((folds, fid_value))
                }),
            };
            match outcome {
                Ok((folds, fid_value)) => {
                    let acc: Vec<f64> = folds.iter().map(|f| f.metrics.accuracy).collect();
                    report.ttest = paired_ttest(&acc, &base_acc).ok();
                    report.mean = Some(MeanMetrics::of(&folds));
                    report.folds = folds;
                    report.fid = fid_value;
                }
                Err(e) => {
                    log::warn!("cell {} x{} ({}) absent: {e}", cell.adjective, cell.ratio, preset.name());
                    report.absent = Some(e.to_string());
                }
            }
            reports.push(report);
        }
    }
    Ok(EvalReport { config_digest: config_digest.to_owned(), cells: reports })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

pub const REPORT_HEADER: &str =
    "kind,adjective,ratio,preset,seed,status,folds,accuracy,sensitivity,specificity,precision,f1,fid,t,p";

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for c in &self.cells {
            let kind = if c.adjective.is_none() { "baseline" } else { "cell" };
            let adjective = match c.adjective.as_deref() {
                Some("") => "none",
                Some(a) => a,
                None => "",
            };
            let m = c.mean;
            let _ = writeln!(
                s,
                "{kind},{adjective},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                c.ratio.map_or_else(String::new, |r| format!("{r}")),
                c.preset.name(),
                c.seed,
                if c.absent.is_some() { "absent" } else { "ok" },
                c.folds.len(),
                opt(m.map(|m| m.accuracy)),
                opt(m.map(|m| m.sensitivity)),
                opt(m.map(|m| m.specificity)),
                opt(m.map(|m| m.precision)),
                opt(m.map(|m| m.f1)),
                opt(c.fid),
                opt(c.ttest.and_then(|t| t.t())),
                opt(c.ttest.and_then(|t| t.p())),
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
