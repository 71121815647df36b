//! The experiment stages as plain functions over an [`ExperimentConfig`].
//!
//! Every stage derives its seed from the config seed and a fixed stage
//! label, so a stage rerun with the same inputs writes the same bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::augment::imageio::{resize_square, to_unit};
use crate::augment::{ingest, phantom_generate, split_patients, synthesize, Generator, Manifest, MixPlan, PhantomSpec, Split};
use crate::config::ExperimentConfig;
use crate::diffusion::{train, Example, NoisePredictor, TrainReport};
use crate::error::Result;
use crate::eval::probe::{probe_svg, write_probe_csv};
use crate::eval::{
    fid, probe_synthetic, rank_select, run_experiment_grid, train_classifier_on, CellInput, Classifier, EvalReport,
    LabeledImages, ProbeRow, TrainedClassifier,
};
use crate::lora::{attach, save_adapters, Instrumented, LoraAdapterSet};
use crate::model::DiffusionModel;
use crate::prompt::{Adjective, ClassLabel, PromptSpec};
use crate::rng::RngStream;

pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    RngStream::new(seed, &format!("stage/{stage}")).next_u64()
}

/// Writes the phantom images under `out`, assigns patient-level splits
/// and saves `out/manifest.csv`.
pub fn phantom_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    let p = cfg.phantom;
    let spec = PhantomSpec::new(p.per_class, p.side, stage_seed(cfg.seed, "phantom"));
    let m = phantom_generate(&spec, out)?;
    let m = split_patients(&m, p.val_fraction, p.test_fraction, stage_seed(cfg.seed, "split"))?;
    m.write_csv(&out.join("manifest.csv"))?;
    Ok(m)
}

/// Reads an image folder laid out for [`ingest`] and writes `manifest`.
///
/// A folder without split directories gets patient-level val and test
/// splits at the `phantom` section fractions.
pub fn ingest_dataset(cfg: &ExperimentConfig, root: &Path, manifest: &Path) -> Result<Manifest> {
    let m = ingest(root)?;
    let m = if m.rows.iter().all(|r| r.split == Split::Train) {
        split_patients(&m, cfg.phantom.val_fraction, cfg.phantom.test_fraction, stage_seed(cfg.seed, "split"))?
    } else {
        m
    };
    m.validate(true)?;
    m.write_csv(manifest)?;
    Ok(m)
}

/// Train-split images paired with their adjective-free class prompts.
pub fn diffusion_examples(model: &DiffusionModel, manifest: &Manifest) -> Result<Vec<Example>> {
    let train = manifest.split(Split::Train);
    let images = train.load_images(model.config.unet.side)?;
    images
        .into_iter()
        .zip(&train.rows)
        .map(|(image, r)| Ok(Example { image, prompt: model.config.template.render(&PromptSpec::new("", r.label)?) }))
        .collect()
}

pub fn pretrain_base(cfg: &ExperimentConfig, manifest: &Manifest) -> Result<(DiffusionModel, TrainReport)> {
    let mut model = DiffusionModel::new(cfg.model.clone(), stage_seed(cfg.seed, "model-init"))?;
    let data = diffusion_examples(&model, manifest)?;
    let report = train(&mut model, None, &data, &cfg.pretrain.to_train_config(stage_seed(cfg.seed, "pretrain")))?;
    Ok((model, report))
}

/// Attaches rank-`rank` adapters to `model` (freezing it) and trains them.
pub fn finetune_lora(
    cfg: &ExperimentConfig,
    model: &mut DiffusionModel,
    manifest: &Manifest,
    rank: usize,
) -> Result<(LoraAdapterSet, TrainReport)> {
    let mut adapters = attach(model, rank, stage_seed(cfg.seed, &format!("lora-init/{rank}")))?;
    adapters.provenance.config_digest = Some(cfg.digest_bytes()?);
    let data = diffusion_examples(model, manifest)?;
    let tc = cfg.finetune.to_train_config(stage_seed(cfg.seed, &format!("finetune/{rank}")));
    let report = train(model, Some(&mut adapters), &data, &tc)?;
    Ok((adapters, report))
}

fn with_generator<T>(
    cfg: &ExperimentConfig,
    model: &DiffusionModel,
    adapters: Option<&LoraAdapterSet>,
    f: impl FnOnce(&Generator<'_>) -> Result<T>,
) -> Result<T> {
    let inst;
    let predictor: &dyn NoisePredictor = match adapters {
        Some(a) => {
            inst = Instrumented::new(model, a)?;
            &inst
        }
        None => model,
    };
    let gen = Generator {
        predictor,
        schedule: &model.schedule,
        template: &model.config.template,
        options: cfg.generate.sample_options(),
    };
    f(&gen)
}

/// Synthesizes `ratio` times the real train split under `adjective` into
/// `out`, which also receives the synthetic `manifest.csv`.
pub fn generate_synthetic(
    cfg: &ExperimentConfig,
    model: &DiffusionModel,
    adapters: Option<&LoraAdapterSet>,
    real: &Manifest,
    adjective: &str,
    ratio: f64,
    out: &Path,
) -> Result<Manifest> {
    let train = real.split(Split::Train);
    let adj = Adjective::parse(adjective)?;
    let seed = stage_seed(cfg.seed, &format!("generate/{}/{ratio}", adj.file_stem()));
    let plan = MixPlan::new(ratio, train.len(), train.class_counts(), adj, seed, cfg.generate.balanced)?;
    let m = with_generator(cfg, model, adapters, |gen| synthesize(gen, &plan, out))?;
    m.write_csv(&out.join("manifest.csv"))?;
    Ok(m)
}

/// `per_class` in-memory samples of each class present in `real`, at the
/// classifier's input side.
pub fn sample_labeled(
    cfg: &ExperimentConfig,
    model: &DiffusionModel,
    adapters: Option<&LoraAdapterSet>,
    real: &Manifest,
    adjective: &str,
    per_class: usize,
    seed: u64,
) -> Result<LabeledImages> {
    let counts = real.class_counts();
    let side = model.config.unet.side;
    let target = cfg.classifier.side;
    with_generator(cfg, model, adapters, |gen| {
        let mut out = LabeledImages::default();
        for label in ClassLabel::ALL.into_iter().filter(|l| counts[l.index()] > 0) {
            for px in gen.class_samples(adjective, label, per_class, seed)? {
                let px = if side == target { px } else { resize_square(&px, side, target)? };
                out.images.push(to_unit(&px));
                out.labels.push(label.index());
            }
        }
        Ok(out)
    })
}

/// The real-data classifier used for FID features and synthetic probes.
pub fn train_probe(cfg: &ExperimentConfig, real: &Manifest) -> Result<TrainedClassifier> {
    train_classifier_on(&cfg.classifier, real, stage_seed(cfg.seed, "probe"))
}

/// Probe accuracy on `per_class` fresh samples per configured adjective.
pub fn probe_adjectives(
    cfg: &ExperimentConfig,
    model: &DiffusionModel,
    adapters: Option<&LoraAdapterSet>,
    probe: &Classifier,
    real: &Manifest,
    per_class: usize,
) -> Result<Vec<ProbeRow>> {
    let seed = stage_seed(cfg.seed, "probe-samples");
    let sets = cfg
        .generate
        .adjectives
        .iter()
        .map(|a| Ok((a.clone(), sample_labeled(cfg, model, adapters, real, a, per_class, seed)?)))
        .collect::<Result<Vec<_>>>()?;
    probe_synthetic(probe, &sets)
}

/// FID of adapter samples against the real train split for every
/// configured rank, and the rank [`rank_select`] picks.
pub fn rank_sweep(
    cfg: &ExperimentConfig,
    base: &DiffusionModel,
    real: &Manifest,
    probe: &Classifier,
    per_class: usize,
) -> Result<(BTreeMap<usize, f64>, usize)> {
    let real_features = probe.features(&LabeledImages::from_manifest(&real.split(Split::Train), cfg.classifier.side)?.images)?;
    let mut fids = BTreeMap::new();
    for &rank in &cfg.finetune.ranks {
        let mut model = base.clone();
        let (adapters, _) = finetune_lora(cfg, &mut model, real, rank)?;
        let seed = stage_seed(cfg.seed, &format!("rank-samples/{rank}"));
        let synth = sample_labeled(cfg, &model, Some(&adapters), real, "", per_class, seed)?;
        let value = fid(&real_features, &probe.features(&synth.images)?)?;
        log::info!("rank {rank}: fid {value:.6}");
        fids.insert(rank, value);
    }
    let best = rank_select(&fids)?;
    Ok((fids, best))
}

pub fn evaluate_grid(
    cfg: &ExperimentConfig,
    real: &Manifest,
    cells: &[CellInput],
    probe: Option<&Classifier>,
) -> Result<EvalReport> {
    run_experiment_grid(real, cells, &cfg.grid_spec(), probe, &cfg.digest()?)
}

/// Directory of one synthetic cell, e.g. `dark_x0.5`.
pub fn cell_dir_name(adjective: &str, ratio: f64) -> Result<String> {
    Ok(format!("{}_x{ratio}", Adjective::parse(adjective)?.file_stem()))
}

/// Paths written by [`run_phantom_pipeline`], relative to its output root.
#[derive(Clone, Debug)]
pub struct PipelineOutputs {
    pub manifest: PathBuf,
    pub weights: PathBuf,
    pub adapters: PathBuf,
    pub synth: Vec<PathBuf>,
    pub report_csv: PathBuf,
    pub report_json: PathBuf,
    pub probe_csv: PathBuf,
    pub probe_svg: PathBuf,
    pub report: EvalReport,
}

/// Phantom data, base training, adapter fine-tuning at the configured
/// rank, one synthetic set per (adjective, ratio), the experiment grid and
/// the adjective probe, all under `out`:
///
/// ```text
/// data/      phantom PNGs and manifest.csv
/// weights/   base.ldft, probe.ldft
/// adapters/  rank{r}.uslr
/// synth/     {adjective}_x{ratio}/
/// reports/   eval.csv, eval.json, probe.csv, probe.svg
/// logs/      pretrain_loss.csv, finetune_loss.csv
/// ```
pub fn run_phantom_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<PipelineOutputs> {
    let dir = |name: &str| -> Result<PathBuf> {
        let d = out.join(name);
        std::fs::create_dir_all(&d).map_err(|e| crate::Error::io(&d, e))?;
        Ok(d)
    };
    let (data, weights, adapters_dir, synth_dir, reports, logs) =
        (dir("data")?, dir("weights")?, dir("adapters")?, dir("synth")?, dir("reports")?, dir("logs")?);

    let real = phantom_dataset(cfg, &data)?;
    let (mut model, pre) = pretrain_base(cfg, &real)?;
    model.save(&weights.join("base.ldft"))?;
    pre.write_csv(&logs.join("pretrain_loss.csv"))?;

    let rank = cfg.finetune.rank;
    let (adapters, ft) = finetune_lora(cfg, &mut model, &real, rank)?;
    let adapters_path = adapters_dir.join(format!("rank{rank}.uslr"));
    save_adapters(&adapters_path, &adapters)?;
    ft.write_csv(&logs.join("finetune_loss.csv"))?;

    let mut cells = Vec::new();
    let mut synth = Vec::new();
    for adjective in &cfg.generate.adjectives {
        for &ratio in &cfg.generate.ratios {
            let d = synth_dir.join(cell_dir_name(adjective, ratio)?);
            let m = generate_synthetic(cfg, &model, Some(&adapters), &real, adjective, ratio, &d)?;
            synth.push(d);
            cells.push(CellInput { adjective: adjective.clone(), ratio, synthetic: Some(m) });
        }
    }

    let probe = train_probe(cfg, &real)?;
    probe.classifier.save(&weights.join("probe.ldft"))?;
    let report = evaluate_grid(cfg, &real, &cells, Some(&probe.classifier))?;
    let (report_csv, report_json) = (reports.join("eval.csv"), reports.join("eval.json"));
    report.write_csv(&report_csv)?;
    report.write_json(&report_json)?;

    let per_class = (real.split(Split::Train).len() / 3).max(1);
    let rows = probe_adjectives(cfg, &model, Some(&adapters), &probe.classifier, &real, per_class)?;
    let (probe_csv, probe_svg_path) = (reports.join("probe.csv"), reports.join("probe.svg"));
    write_probe_csv(&probe_csv, &rows)?;
    let svg = probe_svg(&rows, Some(probe.best_val_accuracy));
    std::fs::write(&probe_svg_path, svg).map_err(|e| crate::Error::io(&probe_svg_path, e))?;

    Ok(PipelineOutputs {
        manifest: data.join("manifest.csv"),
        weights: weights.join("base.ldft"),
        adapters: adapters_path,
        synth,
        report_csv,
        report_json,
        probe_csv,
        probe_svg: probe_svg_path,
        report,
    })
}
