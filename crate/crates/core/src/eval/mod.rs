//! Downstream evaluation: classifiers, metrics, FID, significance tests,
//! synthetic-set probes, saliency maps and the experiment grid.

pub mod cam;
pub mod classifier;
pub mod fid;
pub mod grid;
pub mod metrics;
pub mod probe;
pub mod stats;

pub use cam::{heatmap, CamModel};
pub use classifier::{train_classifier, train_classifier_on, Classifier, ClassifierConfig, LabeledImages, Preset, TrainedClassifier};
pub use fid::{fid, rank_select};
pub use grid::{run_experiment_grid, CellInput, EvalReport, GridSpec};
pub use metrics::{metrics, ConfusionMatrix, Metrics};
pub use probe::{probe_synthetic, ProbeRow};
pub use stats::{paired_ttest, TTest};
