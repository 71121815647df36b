//! Dataset manifests: one CSV row per image with its label, patient, split
//! and provenance.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::imageio;
use crate::error::{Error, Result};
use crate::prompt::ClassLabel;
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub image_path: String,
    pub label: ClassLabel,
    pub patient_id: String,
    pub split: Split,
    pub provenance: Source,
    /// Source adjective of synthetic rows; empty for real rows.
    pub adjective: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>) -> Self {
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        if self.rows.is_empty() {
            w.write_record(["image_path", "label", "patient_id", "split", "provenance", "adjective"])?;
        }
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Rows of one split.
    pub fn split(&self, split: Split) -> Manifest {
        Manifest { rows: self.rows.iter().filter(|r| r.split == split).cloned().collect() }
    }

    /// Image count per class in [`ClassLabel::ALL`] order.
    pub fn class_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for r in &self.rows {
            c[r.label.index()] += 1;
        }
        c
    }

    pub fn patients(&self) -> BTreeSet<&str> {
        self.rows.iter().map(|r| r.patient_id.as_str()).collect()
    }

    /// Every patient maps to exactly one split.
    pub fn check_patient_splits(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for r in &self.rows {
            match seen.insert(&r.patient_id, r.split) {
                Some(prev) if prev != r.split => {
                    return Err(Error::Dataset(format!(
                        "patient {} appears in both {prev} and {}",
                        r.patient_id, r.split
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Patient leakage, duplicate paths, synthetic rows outside train and,
    /// with `decode`, that every file exists and decodes.
    pub fn validate(&self, decode: bool) -> Result<()> {
        self.check_patient_splits()?;
        let mut paths = BTreeSet::new();
        for r in &self.rows {
            if !paths.insert(r.image_path.as_str()) {
                return Err(Error::Dataset(format!("duplicate image path {}", r.image_path)));
            }
            if r.provenance == Source::Synthetic && r.split != Split::Train {
                return Err(Error::Dataset(format!("synthetic row {} placed in {}", r.image_path, r.split)));
            }
            if decode {
                imageio::read_gray(Path::new(&r.image_path))?;
            }
        }
        Ok(())
    }

    /// Decodes every row to `side x side` model-space values.
    pub fn load_images(&self, side: usize) -> Result<Vec<Vec<f32>>> {
        self.rows
            .iter()
            .map(|r| imageio::read_square(Path::new(&r.image_path), side).map(|px| imageio::to_unit(&px)))
            .collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.label.index()).collect()
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format { path: path.display().to_string(), reason: format!("{other:?}") },
    }
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Reads `root/<class>/*` (all rows train) or `root/<split>/<class>/*`.
///
/// An optional `root/patients.csv` with columns `filename,patient_id`
/// groups files by patient; without it every file is its own patient.
pub fn ingest(root: &Path) -> Result<Manifest> {
    let has_splits = Split::ALL.iter().any(|s| root.join(s.name()).is_dir());
    let layout: Vec<(Split, PathBuf)> = if has_splits {
        Split::ALL.iter().map(|&s| (s, root.join(s.name()))).filter(|(_, p)| p.is_dir()).collect()
    } else {
        vec![(Split::Train, root.to_path_buf())]
    };
    let patients = read_patients(&root.join("patients.csv"))?;
    if patients.is_none() {
        log::warn!("{}: no patients.csv; treating every image as its own patient", root.display());
    }
    let mut rows = Vec::new();
    let mut names = BTreeSet::new();
    for (split, dir) in layout {
        let mut classes_found = 0;
        for entry in sorted_entries(&dir)? {
            if !entry.is_dir() {
                continue;
            }
            let dname = entry.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_owned();
            let Ok(label) = dname.parse::<ClassLabel>() else {
                return Err(Error::Dataset(format!("unexpected directory {}", entry.display())));
            };
            classes_found += 1;
            let files: Vec<PathBuf> = sorted_entries(&entry)?.into_iter().filter(|p| is_image(p)).collect();
            if files.is_empty() {
                return Err(Error::Dataset(format!("class directory {} ({label}) has no images", entry.display())));
            }
            for f in files {
                let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_owned();
                if !names.insert(name.clone()) {
                    return Err(Error::Dataset(format!("duplicate filename {name}")));
                }
                imageio::read_gray(&f)?;
                let patient_id = match &patients {
                    Some(map) => map
                        .get(&name)
                        .cloned()
                        .ok_or_else(|| Error::Dataset(format!("{name} missing from patients.csv")))?,
                    None => name.clone(),
                };
                rows.push(ManifestRow {
                    image_path: f.display().to_string(),
                    label,
                    patient_id,
                    split,
                    provenance: Source::Real,
                    adjective: String::new(),
                });
            }
        }
        if classes_found == 0 {
            return Err(Error::Dataset(format!("{} has no class directories", dir.display())));
        }
    }
    let m = Manifest { rows };
    m.check_patient_splits()?;
    Ok(m)
}

#[derive(Deserialize)]
struct PatientRow {
    filename: String,
    patient_id: String,
}

fn read_patients(path: &Path) -> Result<Option<BTreeMap<String, String>>> {
    if !path.exists() {
        return Ok(None);
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut map = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: PatientRow = row?;
        if map.insert(row.filename.clone(), row.patient_id).is_some() {
            return Err(Error::Dataset(format!("{} listed twice in patients.csv", row.filename)));
        }
    }
    Ok(Some(map))
}

/// Writes `patients.csv` for `manifest`, keyed by file name.
pub fn write_patients(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["filename", "patient_id"])?;
    for r in &manifest.rows {
        let name = Path::new(&r.image_path).file_name().and_then(|n| n.to_str()).unwrap_or_default();
        w.write_record([name, r.patient_id.as_str()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Patient-level validation partition of the train split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub val_patients: BTreeSet<String>,
}

impl Fold {
    /// `manifest` with this fold's patients moved from train to val.
    /// Existing val rows are dropped; test rows are kept.
    pub fn apply(&self, manifest: &Manifest) -> Manifest {
        let rows = manifest
            .rows
            .iter()
            .filter(|r| r.split != Split::Val)
            .cloned()
            .map(|mut r| {
                if r.split == Split::Train && self.val_patients.contains(&r.patient_id) {
                    r.split = Split::Val;
                }
                r
            })
            .collect();
        Manifest { rows }
    }
}

/// Shuffles the train-split patients and deals them round-robin into `k`
/// validation folds.
pub fn make_folds(manifest: &Manifest, k: usize, seed: u64) -> Result<Vec<Fold>> {
    let mut patients: Vec<String> = manifest.split(Split::Train).patients().into_iter().map(str::to_owned).collect();
    if k < 2 || patients.len() < k {
        return Err(Error::Dataset(format!("{} training patients cannot form {k} folds", patients.len())));
    }
    RngStream::new(seed, "folds").shuffle(&mut patients);
    let mut folds = vec![Fold { val_patients: BTreeSet::new() }; k];
    for (i, p) in patients.into_iter().enumerate() {
        folds[i % k].val_patients.insert(p);
    }
    Ok(folds)
}

/// Moves whole patients of the train split into val and test so that
/// each receives roughly the given fraction of patients.
pub fn split_patients(manifest: &Manifest, val: f64, test: f64, seed: u64) -> Result<Manifest> {
    if !(0.0..1.0).contains(&val) || !(0.0..1.0).contains(&test) || val + test >= 1.0 {
        return Err(Error::invalid(format!("split fractions val={val} test={test}")));
    }
    let train = manifest.split(Split::Train);
    let mut patients: Vec<&str> = train.patients().into_iter().collect();
    RngStream::new(seed, "split-patients").shuffle(&mut patients);
    let n = patients.len();
    let n_test = (test * n as f64).round() as usize;
    let n_val = (val * n as f64).round() as usize;
    let assign: BTreeMap<&str, Split> = patients
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let s = if i < n_test {
                Split::Test
            } else if i < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            };
            (p, s)
        })
        .collect();
    let rows = manifest
        .rows
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if r.split == Split::Train {
                r.split = assign[r.patient_id.as_str()];
            }
            r
        })
        .collect();
    Ok(Manifest { rows })
}

/// Real rows plus synthetic train rows.
pub fn mix(real: &Manifest, synthetic: &Manifest) -> Result<Manifest> {
    let real_paths: BTreeSet<&str> = real.rows.iter().map(|r| r.image_path.as_str()).collect();
    for r in &synthetic.rows {
        if r.split != Split::Train {
            return Err(Error::Dataset(format!("synthetic row {} targets the {} split", r.image_path, r.split)));
        }
        if r.provenance != Source::Synthetic {
            return Err(Error::Dataset(format!("{} is not marked synthetic", r.image_path)));
        }
        if real_paths.contains(r.image_path.as_str()) {
            return Err(Error::Dataset(format!("{} appears in both manifests", r.image_path)));
        }
    }
    let mut rows = real.rows.clone();
    rows.extend(synthetic.rows.iter().cloned());
    let m = Manifest { rows };
    m.check_patient_splits()?;
    Ok(m)
}
