//! Datasets: ingestion, phantoms, synthetic generation and mixing.

pub mod imageio;
pub mod manifest;
pub mod phantom;
pub mod plan;
pub mod synth;

pub use manifest::{ingest, make_folds, mix, split_patients, Fold, Manifest, ManifestRow, Source, Split};
pub use phantom::{phantom_generate, phantom_pixels, PhantomSpec, BACKGROUND_MEAN_BAND};
pub use plan::{apportion, MixPlan, RATIOS};
pub use synth::{synthesize, Generator};
