mod common;

use std::collections::BTreeMap;

use augdiff::augment::{phantom_generate, split_patients, Manifest, ManifestRow, PhantomSpec, Source, Split};
use augdiff::eval::classifier::NUM_CLASSES;
use augdiff::eval::grid::REPORT_HEADER;
use augdiff::eval::probe::{probe_svg, write_probe_csv};
use augdiff::eval::{
    fid, heatmap, metrics, paired_ttest, probe_synthetic, rank_select, run_experiment_grid, train_classifier,
    CellInput, Classifier, ClassifierConfig, ConfusionMatrix, EvalReport, GridSpec, LabeledImages, Preset, TTest,
};
use augdiff::prompt::{grid, ClassLabel, ADJECTIVES};
use augdiff::rng::RngStream;
use augdiff::tensor::Tensor;
use common::{phantom_set, top_left_mass, QuadrantModel};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn metrics_hand_computed_example() {
    let m = metrics(&ConfusionMatrix::new([[5, 0, 0], [0, 0, 5], [0, 0, 5]])).unwrap();
    assert!(close(m.accuracy, 10.0 / 15.0, 1e-9));
    assert!(close(m.sensitivity, 2.0 / 3.0, 1e-9));
    assert!(close(m.specificity, (1.0 + 1.0 + 0.5) / 3.0, 1e-9));
    assert!(close(m.precision, (1.0 + 0.5) / 2.0, 1e-9));
    assert!(close(m.f1, (1.0 + 0.0 + 2.0 / 3.0) / 3.0, 1e-9));
    assert_eq!(m.undefined, vec!["malignant.precision".to_owned()]);
    let recalls: Vec<Option<f64>> = m.per_class.iter().map(|c| c.sensitivity).collect();
    assert_eq!(recalls, vec![Some(1.0), Some(0.0), Some(1.0)]);
}

#[test]
fn metrics_trivial_cases() {
    let diag = metrics(&ConfusionMatrix::new([[3, 0, 0], [0, 4, 0], [0, 0, 2]])).unwrap();
    for v in [diag.accuracy, diag.sensitivity, diag.specificity, diag.precision, diag.f1] {
        assert_eq!(v, 1.0);
    }
    let uniform = metrics(&ConfusionMatrix::new([[2; 3]; 3])).unwrap();
    assert!(close(uniform.accuracy, 1.0 / 3.0, 1e-12));
    assert!(metrics(&ConfusionMatrix::default()).is_err());
    let never_right = metrics(&ConfusionMatrix::new([[0, 0, 4], [0, 0, 0], [0, 0, 0]])).unwrap();
    assert_eq!((never_right.precision, never_right.specificity), (0.0, 0.0));
    assert_eq!(
        never_right.undefined,
        ["benign.specificity", "macro.specificity", "benign.precision", "macro.precision"].map(String::from)
    );
    let json = serde_json::to_value(&diag).unwrap();
    for key in ["accuracy", "sensitivity", "specificity", "precision", "f1"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    let cm = ConfusionMatrix::from_predictions(&[0, 1, 2, 2], &[0, 2, 2, 1]).unwrap();
    assert_eq!(cm.counts, [[1, 0, 0], [0, 0, 1], [0, 1, 1]]);
    assert!(ConfusionMatrix::from_predictions(&[0], &[3]).is_err());
}

#[test]
fn ttest_matches_reference_values() {
    let TTest::Defined { t, p, df } =
        paired_ttest(&[30.0, 31.0, 29.0, 32.0, 30.0], &[28.0, 30.0, 27.0, 30.0, 29.0]).unwrap()
    else {
        panic!("degenerate")
    };
    assert_eq!(df, 4);
    assert!(close(t, 6.531972647421809, 1e-6), "{t}");
    assert!(close(p, 0.0028378459267344464, 1e-6), "{p}");

    let r = paired_ttest(&[0.8, 0.82, 0.79, 0.85, 0.81], &[0.83, 0.85, 0.8, 0.86, 0.84]).unwrap();
    assert!(close(r.t().unwrap(), -4.490731195102501, 1e-6));
    assert!(close(r.p().unwrap(), 0.01089969856959355, 1e-6));

    let a: Vec<f64> = (1..=10).map(f64::from).collect();
    let b = [1.5, 1.9, 3.7, 3.2, 5.5, 6.1, 6.4, 8.8, 9.9, 9.1];
    let r = paired_ttest(&a, &b).unwrap();
    assert!(close(r.t().unwrap(), -0.512321076115885, 1e-6));
    assert!(close(r.p().unwrap(), 0.6207613824857048, 1e-6));
}

#[test]
fn ttest_degenerate_and_invalid() {
    assert!(matches!(
        paired_ttest(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        TTest::Degenerate { mean_difference } if mean_difference == -1.0
    ));
    let noise = [0.3, -0.1, 0.7];
    assert!(matches!(paired_ttest(&noise, &noise).unwrap(), TTest::Degenerate { .. }));
    assert!(paired_ttest(&[1.0], &[2.0]).is_err());
    assert!(paired_ttest(&[1.0, 2.0], &[2.0]).is_err());
}

fn gaussian_features(n: usize, mean: &[f64], chol: &[Vec<f64>], seed: u64) -> Vec<Vec<f32>> {
    let mut rng = RngStream::new(seed, "fid");
    let d = mean.len();
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            (0..d).map(|i| (mean[i] + (0..=i).map(|j| chol[i][j] * z[j]).sum::<f64>()) as f32).collect()
        })
        .collect()
}

#[test]
fn fid_closed_form_oracles() {
    let n = 20_000;
    let one = vec![vec![1.0]];
    let a = gaussian_features(n, &[0.0], &one, 1);
    let b = gaussian_features(n, &[1.0], &one, 2);
    let f = fid(&a, &b).unwrap();
    assert!((f - 1.0).abs() < 0.05, "{f}");

    let id = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let two = vec![vec![2.0, 0.0], vec![0.0, 2.0]];
    let f = fid(&gaussian_features(n, &[0.0, 0.0], &id, 3), &gaussian_features(n, &[0.0, 0.0], &two, 4)).unwrap();
    assert!((f - 2.0).abs() < 0.1, "{f}");

    // Σ₁ = [[2, .5], [.5, 1]], Σ₂ = [[1, −.3], [−.3, 3]], μ₂ = (1, 2).
    let l1 = vec![vec![2f64.sqrt(), 0.0], vec![0.5 / 2f64.sqrt(), (1.0 - 0.125f64).sqrt()]];
    let l2 = vec![vec![1.0, 0.0], vec![-0.3, (3.0 - 0.09f64).sqrt()]];
    let f = fid(&gaussian_features(n, &[0.0, 0.0], &l1, 5), &gaussian_features(n, &[1.0, 2.0], &l2, 6)).unwrap();
    assert!((f / 5.929311854967773 - 1.0).abs() < 0.05, "{f}");
}

#[test]
fn fid_identity_symmetry_and_errors() {
    let l = vec![vec![1.0, 0.0, 0.0], vec![0.2, 1.0, 0.0], vec![0.0, 0.4, 0.5]];
    let a = gaussian_features(500, &[0.0, 1.0, 2.0], &l, 7);
    let b = gaussian_features(400, &[0.5, 1.0, 1.0], &l, 8);
    assert!(fid(&a, &a).unwrap() < 1e-6);
    assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-6);
    assert!(fid(&a, &[vec![1.0, 2.0], vec![1.0, 2.0]]).is_err());
    assert!(fid(&a[..1], &b).is_err());
}

#[test]
fn rank_selection() {
    let pick = |v: &[(usize, f64)]| rank_select(&v.iter().copied().collect::<BTreeMap<_, _>>());
    assert_eq!(pick(&[(2, 0.463), (4, 0.357), (8, 0.513)]).unwrap(), 4);
    assert_eq!(pick(&[(2, 0.5), (4, 0.5)]).unwrap(), 2);
    assert_eq!(pick(&[(8, 0.9)]).unwrap(), 8);
    assert!(pick(&[]).is_err());
    for s in [1e-3, 0.5, 7.0, 1e4] {
        assert_eq!(pick(&[(2, 0.463 * s), (4, 0.357 * s), (8, 0.513 * s)]).unwrap(), 4);
    }
}

fn small(epochs: usize) -> ClassifierConfig {
    ClassifierConfig { preset: Preset::S, side: 32, epochs, batch_size: 16, lr: 3e-3 }
}

#[test]
fn untrained_classifier_is_near_chance() {
    let train = phantom_set(10, 32, 1, &ClassLabel::ALL);
    let val = phantom_set(40, 32, 2, &ClassLabel::ALL);
    let t = train_classifier(&small(0), &train, &val, 3).unwrap();
    assert_eq!(t.best_epoch, 0);
    assert_eq!(t.curve.len(), 1);
    let se = (1.0f64 / 3.0 * 2.0 / 3.0 / 120.0).sqrt();
    let acc = t.best_val_accuracy;
    assert!((0.0..=1.0 / 3.0 + 2.0 / 3.0).contains(&acc));
    let cm = t.classifier.evaluate(&val).unwrap();
    let counts: Vec<u64> = (0..3).map(|c| (0..3).map(|r| cm.counts[r][c]).sum()).collect();
    let dominant = *counts.iter().max().unwrap() as f64 / 120.0;
    assert!(acc <= dominant.max(1.0 / 3.0) + 3.0 * se, "{acc}");
}

#[test]
fn classifier_learns_phantoms_deterministically() {
    let train = phantom_set(60, 32, 1, &ClassLabel::ALL);
    let val = phantom_set(20, 32, 2, &ClassLabel::ALL);
    let a = train_classifier(&small(30), &train, &val, 3).unwrap();
    assert!(a.best_val_accuracy >= 0.85, "{}", a.best_val_accuracy);
    assert_eq!(a.curve.len(), 31);
    let b = train_classifier(&small(30), &train, &val, 3).unwrap();
    assert_eq!(a.classifier.params.digest(), b.classifier.params.digest());
    assert_eq!(a.best_epoch, b.best_epoch);
}

#[test]
fn classifier_rejects_single_class_and_round_trips() {
    let one = phantom_set(4, 32, 1, &[ClassLabel::Benign]);
    assert!(train_classifier(&small(1), &one, &one, 0).is_err());

    let c = Classifier::new(ClassifierConfig { preset: Preset::M, side: 32, ..ClassifierConfig::default() }, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clf.ldft");
    c.save(&path).unwrap();
    let back = Classifier::load(&path).unwrap();
    assert_eq!(back.params.digest(), c.params.digest());
    assert_eq!(back.config, c.config);
    let imgs = phantom_set(2, 32, 9, &ClassLabel::ALL).images;
    assert_eq!(back.predict(&imgs).unwrap(), c.predict(&imgs).unwrap());
    for p in Preset::ALL {
        let m = Classifier::new(ClassifierConfig { preset: p, side: 32, ..ClassifierConfig::default() }, 1).unwrap();
        let logits = m.forward(&Tensor::zeros(&[2, 1, 32, 32])).unwrap();
        assert_eq!(logits.shape(), &[2, NUM_CLASSES]);
        assert_eq!(format!("preset-{}", p.name()).parse::<Preset>().unwrap(), p);
    }
}

#[test]
fn probe_reproduces_test_accuracy_and_noise_floor() {
    let train = phantom_set(30, 32, 1, &ClassLabel::ALL);
    let val = phantom_set(10, 32, 2, &ClassLabel::ALL);
    let test = phantom_set(20, 32, 3, &ClassLabel::ALL);
    let clf = train_classifier(&small(8), &train, &val, 3).unwrap().classifier;
    let cm = clf.evaluate(&test).unwrap();
    let rows = probe_synthetic(&clf, &[("".into(), test.clone())]).unwrap();
    assert_eq!(rows[0].accuracy, cm.trace() as f64 / cm.total() as f64);

    let mut rng = RngStream::new(5, "noise");
    let n = 300;
    let noise = LabeledImages {
        images: (0..n).map(|_| rng.normal_vec(32 * 32, 0.0, 0.5)).collect(),
        labels: (0..n).map(|i| i % 3).collect(),
    };
    let acc = probe_synthetic(&clf, &[("dark".into(), noise)]).unwrap()[0].accuracy;
    let se = (1.0f64 / 3.0 * 2.0 / 3.0 / n as f64).sqrt();
    assert!(acc <= 1.0 / 3.0 + 3.0 * se, "{acc}");

    let sets: Vec<(String, LabeledImages)> = ADJECTIVES.iter().map(|a| ((*a).to_owned(), test.clone())).collect();
    let rows = probe_synthetic(&clf, &sets).unwrap();
    let adjectives: std::collections::BTreeSet<&str> = grid().iter().map(|s| s.adjective.as_str()).collect();
    assert_eq!(rows.len(), adjectives.len());
    assert!(probe_synthetic(&clf, &[("x".into(), LabeledImages::default())]).is_err());

    let dir = tempfile::tempdir().unwrap();
    write_probe_csv(&dir.path().join("p.csv"), &rows).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("p.csv")).unwrap();
    assert!(csv.starts_with("adjective,images,accuracy\nnone,60,"));
    assert_eq!(csv.lines().count(), 11);
    let svg = probe_svg(&rows, Some(0.9));
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<circle").count(), 10);
}

#[test]
fn heatmap_bounds_on_random_draws() {
    let clf = Classifier::new(small(0), 6).unwrap();
    let mut rng = RngStream::new(2, "cam");
    for i in 0..20 {
        let img = rng.normal_vec(32 * 32, 0.0, 0.7);
        let map = heatmap(&clf, &img, 32, i % 3).unwrap();
        assert_eq!(map.len(), 32 * 32);
        assert!(map.iter().all(|v| (0.0..=1.0).contains(v)));
        let max = map.iter().copied().fold(0.0f32, f32::max);
        assert!(max == 1.0 || max == 0.0);
    }
    assert!(heatmap(&clf, &[0.0; 10], 32, 0).is_err());
    assert!(heatmap(&clf, &[0.0; 1024], 32, 3).is_err());
}

#[test]
fn zero_weight_classifier_gives_flat_map() {
    let mut clf = Classifier::new(small(0), 6).unwrap();
    let names: Vec<String> = clf.params.names().map(str::to_owned).collect();
    for n in names {
        let p = clf.params.get(&n).unwrap().clone();
        clf.params.set(&n, Tensor::zeros(p.shape())).unwrap();
    }
    let map = heatmap(&clf, &vec![0.3; 32 * 32], 32, 1).unwrap();
    assert!(map.iter().all(|&v| v == 0.0));
}

#[test]
fn quadrant_classifier_saliency_stays_in_quadrant() {
    let mut rng = RngStream::new(3, "quadrant-draws");
    for seed in 0..10 {
        let model = QuadrantModel::new(32, seed);
        let img: Vec<f32> = rng.normal_vec(32 * 32, 0.0, 1.0);
        let map = heatmap(&model, &img, 32, (seed % 3) as usize).unwrap();
        let mass = top_left_mass(&map, 32);
        assert!(mass >= 0.7, "seed {seed}: {mass}");
    }
}

fn phantom_manifest(dir: &std::path::Path, per_class: usize) -> Manifest {
    let m = phantom_generate(&PhantomSpec::new(per_class, 16, 2), dir).unwrap();
    split_patients(&m, 0.0, 0.25, 1).unwrap()
}

#[test]
fn experiment_grid_reports_cells_and_absences() {
    let dir = tempfile::tempdir().unwrap();
    let real = phantom_manifest(&dir.path().join("real"), 12);
    let synth_src = phantom_generate(&PhantomSpec::new(3, 16, 9), &dir.path().join("synth")).unwrap();
    let synthetic = Manifest::new(
        synth_src
            .rows
            .iter()
            .map(|r| ManifestRow {
                provenance: Source::Synthetic,
                adjective: "dark".into(),
                patient_id: format!("synthetic:{}", r.image_path),
                ..r.clone()
            })
            .collect(),
    );
    let spec = GridSpec {
        classifier: ClassifierConfig { preset: Preset::S, side: 16, epochs: 2, batch_size: 8, lr: 3e-3 },
        presets: vec![Preset::S],
        folds: 2,
        seed: 4,
    };
    let probe = Classifier::new(spec.classifier, 1).unwrap();
    let cells = vec![
        CellInput { adjective: "dark".into(), ratio: 0.5, synthetic: Some(synthetic) },
        CellInput { adjective: "bright".into(), ratio: 1.0, synthetic: None },
    ];
    let report = run_experiment_grid(&real, &cells, &spec, Some(&probe), "abc").unwrap();
    assert_eq!(report.cells.len(), 3);
    let base = &report.cells[0];
    assert!(base.adjective.is_none() && base.absent.is_none() && base.folds.len() == 2);
    let cell = &report.cells[1];
    assert!(cell.absent.is_none() && cell.fid.is_some() && cell.ttest.is_some());
    let mean = cell.mean.unwrap();
    let avg = cell.folds.iter().map(|f| f.metrics.accuracy).sum::<f64>() / 2.0;
    assert!((mean.accuracy - avg).abs() < 1e-9);
    assert!(report.cells[2].absent.is_some() && report.cells[2].folds.is_empty());

    let again = run_experiment_grid(&real, &cells, &spec, Some(&probe), "abc").unwrap();
    assert_eq!(again, report);

    let csv = report.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], REPORT_HEADER);
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("baseline,,,s,"));
    assert!(lines[2].starts_with("cell,dark,0.5,s,"));
    assert!(lines[3].contains(",absent,0,"));
    let path = dir.path().join("r.json");
    report.write_json(&path).unwrap();
    assert_eq!(EvalReport::read_json(&path).unwrap(), report);

    let mut leaky = real.clone();
    leaky.rows[0].provenance = Source::Synthetic;
    assert!(run_experiment_grid(&leaky, &cells, &spec, None, "").is_err());
    let no_test = Manifest::new(real.rows.iter().filter(|r| r.split != Split::Test).cloned().collect());
    assert!(run_experiment_grid(&no_test, &cells, &spec, None, "").is_err());
}
