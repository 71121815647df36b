mod error;
mod run;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use augdiff::augment::{mix, Manifest, Split};
use augdiff::config::ExperimentConfig;
use augdiff::eval::classifier::EpochStats;
use augdiff::eval::probe::{probe_svg, write_probe_csv};
use augdiff::eval::{probe_synthetic, rank_select, CellInput, Classifier, EvalReport, LabeledImages, Preset};
use augdiff::lora::{load_adapters_for, save_adapters, LoraAdapterSet};
use augdiff::model::DiffusionModel;
use augdiff::pipeline;
use augdiff::prompt::Adjective;
use clap::{Parser, Subcommand};

use error::CliError;
use run::RunDir;

/// Text-conditioned diffusion augmentation for ultrasound classifiers.
#[derive(Parser)]
#[command(name = "augdiff", version)]
struct Cli {
    /// Experiment configuration (TOML). Missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Root under which run directories are created.
    #[arg(long, global = true, env = "AUGDIFF_OUT", default_value = "runs")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a phantom dataset with patient-level splits.
    Phantom {
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        side: Option<usize>,
    },
    /// Build a manifest from `root/<class>/*` or `root/<split>/<class>/*`.
    Ingest {
        #[arg(long)]
        root: PathBuf,
        /// Share of patients moved to val when the folder has no splits.
        #[arg(long)]
        val_fraction: Option<f64>,
        #[arg(long)]
        test_fraction: Option<f64>,
    },
    /// Train the base denoiser and text encoder from scratch.
    PretrainBase {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train cross-attention adapters on a frozen base.
    FinetuneLora {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Synthesize a ratio of the real train split under one adjective.
    Generate {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        adapters: Option<PathBuf>,
        /// Accept adapters trained for a different base model.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        manifest: PathBuf,
        /// Prompt adjective; `none` or empty for the plain prompt.
        #[arg(long, default_value = "none")]
        adjective: String,
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        balanced: bool,
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Add synthetic rows to the train split of a real manifest.
    Mix {
        #[arg(long)]
        real: PathBuf,
        #[arg(long, required = true)]
        synthetic: Vec<PathBuf>,
    },
    /// Train a classifier on the train split, selecting on val.
    TrainClassifier {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_parser = parse_preset)]
        preset: Option<Preset>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Cross-validated grid of synthetic cells against the real baseline.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// `ADJECTIVE:RATIO=MANIFEST`, repeatable. Unreadable cells are reported absent.
        #[arg(long = "cell")]
        cells: Vec<String>,
        /// Classifier providing FID features.
        #[arg(long)]
        probe: Option<PathBuf>,
    },
    /// Score a real-trained classifier on fresh samples per adjective.
    Probe {
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
    },
    /// Pick the adapter rank with the lowest FID.
    RankSelect {
        /// `RANK=FID` pairs, comma separated. Nothing is trained or written.
        #[arg(long, conflicts_with_all = ["weights", "manifest", "classifier"])]
        fids: Option<String>,
        #[arg(long, requires_all = ["manifest", "classifier"])]
        weights: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
    },
    /// Re-render the CSV of an evaluation JSON bundle.
    Report {
        #[arg(long)]
        json: PathBuf,
    },
    /// Every stage end to end on phantom data.
    Pipeline,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: augdiff::Error| e.to_string())
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn check(cfg: &ExperimentConfig) -> Result<(), CliError> {
    cfg.validate()?;
    Ok(())
}

fn read_manifest(path: &Path) -> Result<Manifest, CliError> {
    let m = Manifest::read_csv(path)?;
    m.validate(false)?;
    Ok(m)
}

fn load_model(path: &Path, cfg: &mut ExperimentConfig) -> Result<DiffusionModel, CliError> {
    let model = DiffusionModel::load(path)?;
    cfg.model = model.config.clone();
    Ok(model)
}

fn load_adapters(path: Option<&Path>, model: &DiffusionModel, force: bool) -> Result<Option<LoraAdapterSet>, CliError> {
    path.map(|p| load_adapters_for(p, model, force)).transpose().map_err(CliError::from)
}

fn adjective_arg(s: &str) -> Result<String, CliError> {
    let s = if s == "none" { "" } else { s };
    Ok(Adjective::parse(s)?.as_str().to_owned())
}

/// `ADJ:RATIO=PATH`.
fn parse_cell(spec: &str) -> Result<(String, f64, PathBuf), CliError> {
    let bad = || CliError::Argument(format!("cell {spec:?} is not ADJECTIVE:RATIO=MANIFEST"));
    let (key, path) = spec.split_once('=').ok_or_else(bad)?;
    let (adj, ratio) = key.split_once(':').ok_or_else(bad)?;
    let ratio: f64 = ratio.parse().map_err(|_| bad())?;
    Ok((adjective_arg(adj)?, ratio, PathBuf::from(path)))
}

/// `2=0.463,4=0.357`.
fn parse_fids(spec: &str) -> Result<BTreeMap<usize, f64>, CliError> {
    spec.split(',')
        .map(|pair| {
            let bad = || CliError::Argument(format!("fid entry {pair:?} is not RANK=VALUE"));
            let (r, v) = pair.trim().split_once('=').ok_or_else(bad)?;
            Ok((r.trim().parse().map_err(|_| bad())?, v.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

fn write_curve(path: &Path, curve: &[EpochStats]) -> Result<(), CliError> {
    let mut body = String::from("epoch,train_loss,val_accuracy\n");
    for e in curve {
        let loss = if e.train_loss.is_finite() { format!("{:.9}", e.train_loss) } else { String::new() };
        body.push_str(&format!("{},{loss},{:.6}\n", e.epoch, e.val_accuracy));
    }
    std::fs::write(path, body).map_err(|e| CliError::io(path, e))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = load_config(&cli)?;
    let name = command_name(&cli.command);
    let run = match cli.command {
        Command::Phantom { per_class, side } => {
            if let Some(n) = per_class {
                cfg.phantom.per_class = n;
            }
            if let Some(s) = side {
                cfg.phantom.side = s;
            }
            check(&cfg)?;
            let mut run = RunDir::create(&cli.out, name, &cfg)?;
            let data = run.sub("data");
            let m = pipeline::phantom_dataset(&cfg, &data)?;
            run.output(data.join("manifest.csv"));
            log::info!("{} phantom images", m.len());
            run
        }
        Command::Ingest { root, val_fraction, test_fraction } => {
            if let Some(f) = val_fraction {
                cfg.phantom.val_fraction = f;
            }
            if let Some(f) = test_fraction {
                cfg.phantom.test_fraction = f;
            }
            check(&cfg)?;
            let mut run = RunDir::create(&cli.out, name, &cfg)?;
            let path = run.output(run.sub("data").join("manifest.csv"));
            std::fs::create_dir_all(run.sub("data")).map_err(|e| CliError::io(&run.sub("data"), e))?;
            let m = pipeline::ingest_dataset(&cfg, &root, &path)?;
            log::info!("{} images from {} patients", m.len(), m.patients().len());
            run
        }
        Command::PretrainBase { manifest, epochs } => {
            if let Some(e) = epochs {
                cfg.pretrain.epochs = e;
            }
            check(&cfg)?;
            let real = read_manifest(&manifest)?;
            let mut run = RunDir::create(&cli.out, name, &cfg)?;
            let (model, report) = pipeline::pretrain_base(&cfg, &real)?;
            model.save(&run.output(run.sub("weights").join("base.ldft")))?;
            report.write_csv(&run.output(run.sub("logs").join("pretrain_loss.csv")))?;
            run
        }
        Command::FinetuneLora { weights, manifest, rank, epochs } => {
            if let Some(r) = rank {
                cfg.finetune.rank = r;
            }
            if let Some(e) = epochs {
                cfg.finetune.epochs = e;
            }
            let mut model = load_model(&weights, &mut cfg)?;
            check(&cfg)?;
            let real = read_manifest(&manifest)?;
            let mut run = RunDir::create(&cli.out, name, &cfg)?;
            let r = cfg.finetune.rank;
            let (adapters, report) = pipeline::finetune_lora(&cfg, &mut model, &real, r)?;
            save_adapters(&run.output(run.sub("adapters").join(format!("rank{r}.uslr"))), &adapters)?;
            report.write_csv(&run.output(run.sub("logs").join("finetune_loss.csv")))?;
            run
        }
        Command::Generate { weights, adapters, force, manifest, adjective, ratio, balanced, stride } => {
            let adjective = adjective_arg(&adjective)?;
            cfg.generate.adjectives = vec![adjective.clone()];
            cfg.generate.ratios = vec![ratio];
            cfg.generate.balanced |= balanced;
            if let Some(s) = stride {
                cfg.generate.stride = s;
            }
            let model = load_model(&weights, &mut cfg)?;
            check(&cfg)?;
            let adapters = load_adapters(adapters.as_deref(), &model, force)?;
            let real = read_manifest(&manifest)?;
            let mut run = RunDir::create(&cli.out, name, &cfg)?;
            let out = run.sub("synth").join(pipeline::cell_dir_name(&adjective, ratio)?);
            let m = pipeline::generate_synthetic(&cfg, &model, adapters.as_ref(), &real, &adjective, ratio, &out)?;
            run.output(out.join("manifest.csv"));
            log::info!("{} synthetic images", m.len());
            run
        }
        Command::Mix { real, synthetic } => {
            check(&cfg)?;
            let mut mixed = read_manifest(&real)?;
            for s in &synthetic {
                mixed = mix(&mixed, &Manifest::read_csv(s)?)?;
            }
            let mut run = RunDir::create(&cli.out, name, &cfg)?;
            mixed.write_csv(&run.output(run.sub("synth").join("mixed.csv")))?;
            run
        }
        Command::TrainClassifier { manifest, preset, epochs } => {
            if let Some(p) = preset {
                cfg.classifier.preset = p;
            }
            if let Some(e) = epochs {
                cfg.classifier.epochs = e;
            }
            check(&cfg)?;
            let data = read_manifest(&manifest)?;
            let mut run = RunDir::create(&cli.out, name, &cfg)?;
            let trained = pipeline::train_probe(&cfg, &data)?;
            trained.classifier.save(&run.output(run.sub("weights").join("classifier.ldft")))?;
            write_curve(&run.output(run.sub("logs").join("classifier_curve.csv")), &trained.curve)?;
            let test = data.split(Split::Test);
            if !test.is_empty() {
                let cm = trained.classifier.evaluate(&LabeledImages::from_manifest(&test, cfg.classifier.side)?)?;
                let path = run.output(run.sub("reports").join("classifier_test.json"));
                let body = serde_json::json!({ "confusion": cm, "metrics": cm.metrics()? });
                let text = serde_json::to_string_pretty(&body).map_err(augdiff::Error::from)?;
                std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
            }
            run
        }
        Command::Evaluate { manifest, cells, probe } => {
            let parsed = cells.iter().map(|c| parse_cell(c)).collect::<Result<Vec<_>, _>>()?;
            cfg.generate.adjectives = parsed.iter().map(|c| c.0.clone()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
            let probe = probe.map(|p| Classifier::load(&p)).transpose()?;
            if let Some(p) = &probe {
                cfg.classifier.side = p.config.side;
            }
            check(&cfg)?;
            let real = read_manifest(&manifest)?;
            let inputs: Vec<CellInput> = parsed
                .into_iter()
                .map(|(adjective, ratio, path)| {
                    let synthetic = Manifest::read_csv(&path)
                        .map_err(|e| log::warn!("cell {adjective:?} x{ratio}: {e}"))
                        .ok();
                    CellInput { adjective, ratio, synthetic }
                })
                .collect();
            let mut run = RunDir::create(&cli.out, name, &cfg)?;
            let report = pipeline::evaluate_grid(&cfg, &real, &inputs, probe.as_ref())?;
            report.write_csv(&run.output(run.sub("reports").join("eval.csv")))?;
            report.write_json(&run.output(run.sub("reports").join("eval.json")))?;
            run
        }
        Command::Probe { classifier, weights, adapters, force, manifest, per_class } => {
            let model = load_model(&weights, &mut cfg)?;
            let clf = Classifier::load(&classifier)?;
            cfg.classifier = clf.config;
            check(&cfg)?;
            let adapters = load_adapters(adapters.as_deref(), &model, force)?;
            let real = read_manifest(&manifest)?;
            let mut run = RunDir::create(&cli.out, name, &cfg)?;
            let rows = pipeline::probe_adjectives(&cfg, &model, adapters.as_ref(), &clf, &real, per_class)?;
            let test = real.split(Split::Test);
            let reference = if test.is_empty() {
                None
            } else {
                let set = LabeledImages::from_manifest(&test, clf.config.side)?;
                Some(probe_synthetic(&clf, &[("real".into(), set)])?[0].accuracy)
            };
            write_probe_csv(&run.output(run.sub("reports").join("probe.csv")), &rows)?;
            let svg_path = run.output(run.sub("reports").join("probe.svg"));
            std::fs::write(&svg_path, probe_svg(&rows, reference)).map_err(|e| CliError::io(&svg_path, e))?;
            run
        }
        Command::RankSelect { fids: Some(spec), .. } => {
            println!("{}", rank_select(&parse_fids(&spec)?)?);
            return Ok(());
        }
        Command::RankSelect { fids: None, weights, manifest, classifier, per_class } => {
            let missing = || CliError::Argument("rank-select needs --fids or --weights, --manifest and --classifier".into());
            let model = load_model(&weights.ok_or_else(missing)?, &mut cfg)?;
            let clf = Classifier::load(&classifier.ok_or_else(missing)?)?;
            cfg.classifier = clf.config;
            check(&cfg)?;
            let real = read_manifest(&manifest.ok_or_else(missing)?)?;
            let mut run = RunDir::create(&cli.out, name, &cfg)?;
            let (fids, best) = pipeline::rank_sweep(&cfg, &model, &real, &clf, per_class)?;
            let mut body = String::from("rank,fid\n");
            for (r, f) in &fids {
                body.push_str(&format!("{r},{f:.6}\n"));
            }
            let path = run.output(run.sub("reports").join("rank_fid.csv"));
            std::fs::write(&path, body).map_err(|e| CliError::io(&path, e))?;
            println!("{best}");
            let root = run.finish()?;
            log::info!("run directory {}", root.display());
            return Ok(());
        }
        Command::Report { json } => {
            check(&cfg)?;
            let report = EvalReport::read_json(&json)?;
            let mut run = RunDir::create(&cli.out, name, &cfg)?;
            report.write_csv(&run.output(run.sub("reports").join("eval.csv")))?;
            print!("{}", report.to_csv());
            let root = run.finish()?;
            log::info!("run directory {}", root.display());
            return Ok(());
        }
        Command::Pipeline => {
            check(&cfg)?;
            let mut run = RunDir::create(&cli.out, name, &cfg)?;
            let out = pipeline::run_phantom_pipeline(&cfg, &run.root)?;
            for p in [out.manifest, out.weights, out.adapters, out.report_csv, out.report_json, out.probe_csv, out.probe_svg] {
                run.output(p);
            }
            run
        }
    };
    println!("{}", run.finish()?.display());
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Phantom { .. } => "phantom",
        Command::Ingest { .. } => "ingest",
        Command::PretrainBase { .. } => "pretrain-base",
        Command::FinetuneLora { .. } => "finetune-lora",
        Command::Generate { .. } => "generate",
        Command::Mix { .. } => "mix",
        Command::TrainClassifier { .. } => "train-classifier",
        Command::Evaluate { .. } => "evaluate",
        Command::Probe { .. } => "probe",
        Command::RankSelect { .. } => "rank-select",
        Command::Report { .. } => "report",
        Command::Pipeline => "pipeline",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
