//! Hand-built manifests and a strategy for random ones.

use std::collections::BTreeSet;

use augdiff::augment::{make_folds, Manifest, ManifestRow, Source, Split};
use augdiff::prompt::ClassLabel;
use proptest::prelude::*;

pub fn row(path: &str, label: ClassLabel, patient: &str, split: Split, provenance: Source) -> ManifestRow {
    ManifestRow {
        image_path: path.into(),
        label,
        patient_id: patient.into(),
        split,
        provenance,
        adjective: String::new(),
    }
}

/// Manifests of 5–40 patients with 1+ images each. Patients 0–4 always
/// sit in train so five folds exist; the rest spread over the splits.
pub fn manifest_strategy() -> impl Strategy<Value = Manifest> {
    (5usize..40, prop::collection::vec((0usize..3, 0usize..3, 0usize..100), 5..120)).prop_map(|(n_pat, picks)| {
        let split_of = |p: usize| match p % 7 {
            0 => Split::Test,
            1 => Split::Val,
            _ => Split::Train,
        };
        let mut rows: Vec<ManifestRow> = (0..n_pat)
            .map(|p| row(&format!("seed_{p}.png"), ClassLabel::ALL[p % 3], &format!("p{p}"), Split::Train, Source::Real))
            .collect();
        for (i, (c, _, p)) in picks.into_iter().enumerate() {
            let p = p % n_pat;
            rows.push(row(&format!("img_{i}.png"), ClassLabel::ALL[c], &format!("p{p}"), split_of(p), Source::Real));
        }
        for r in &mut rows {
            let p: usize = r.patient_id[1..].parse().unwrap();
            r.split = if r.image_path.starts_with("seed_") && p < 5 { Split::Train } else { split_of(p) };
            if p < 5 {
                r.split = Split::Train;
            }
        }
        Manifest::new(rows)
    })
}


/// Five folds partition the training patients into near-equal groups and
/// each fold keeps test untouched and patients within one split.
pub fn fold_laws(m: &Manifest, seed: u64) -> Result<(), TestCaseError> {
    let folds = make_folds(m, 5, seed).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let pool: BTreeSet<String> = m.split(Split::Train).patients().into_iter().map(str::to_owned).collect();
    let mut union = BTreeSet::new();
    for f in &folds {
        for p in &f.val_patients {
            prop_assert!(union.insert(p.clone()), "patient {} in two folds", p);
        }
    }
    prop_assert_eq!(&union, &pool);
    let sizes: Vec<usize> = folds.iter().map(|f| f.val_patients.len()).collect();
    prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    for f in &folds {
        let applied = f.apply(m);
        prop_assert!(applied.check_patient_splits().is_ok());
        prop_assert_eq!(applied.split(Split::Test), m.split(Split::Test));
        prop_assert_eq!(applied.split(Split::Val).len() + applied.split(Split::Train).len(), m.split(Split::Train).len());
    }
    Ok(())
}
