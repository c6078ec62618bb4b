use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use decouple_core::curation::{build_mask_bank, select_remover_images, select_restorer_images, MaskBank};
use decouple_core::evaluation::{evaluate_run, EvalSettings};
use decouple_core::experiment::{config_hash, render_ablation_table, run_seed, ExperimentResult};
use decouple_core::losses::Phase;
use decouple_core::manifest::{load_manifest, save_manifest, DatasetManifest};
use decouple_core::nets::{Embedder, FeatureNet};
use decouple_core::synth::{generate_dataset, MANIFEST_NAME};
use decouple_core::training::{save_run, train_baseline, train_remover, train_restorer, Checkpoint, TrainRun};
use decouple_core::Error;

use crate::config::{resolve_out, RunConfig};
use crate::{CliError, CurateMode};

pub const CHECKPOINT_NAME: &str = "checkpoint.dckp";
pub const REPORT_NAME: &str = "report.json";

fn absolute(path: &Path) -> Result<PathBuf, CliError> {
    std::path::absolute(path).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

/// Loads a manifest with absolute entry paths so derived manifests can be
/// written anywhere.
fn open_manifest(path: &Path) -> Result<DatasetManifest, CliError> {
    Ok(load_manifest(&absolute(path)?)?)
}

fn unix_timestamp() -> String {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs().to_string())
        .unwrap_or_default()
}

pub fn gen_synth(config: Option<&Path>, out: &Path, n: usize, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if seed.is_some() {
        cfg.seed = seed;
    }
    cfg.synth.seed = cfg.require_seed()?;
    let out = resolve_out(out);
    generate_dataset(&cfg.synth, n, &out)?;
    cfg.echo(&out)?;
    println!("{}", out.join(MANIFEST_NAME).display());
    Ok(())
}

pub fn curate(manifest: &Path, class: &str, mode: CurateMode, out: &Path, config: Option<&Path>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let m = open_manifest(manifest)?;
    let target = m.resolve_class(class)?;
    let out = resolve_out(out);
    match mode {
        CurateMode::Restorer | CurateMode::Remover => {
            let selected = match mode {
                CurateMode::Restorer => select_restorer_images(&m, target, &cfg.train.curation)?,
                _ => select_remover_images(&m, target)?,
            };
            println!("selected {} rejected {}", selected.len(), m.len() - selected.len());
            if selected.is_empty() {
                return Err(Error::EmptySelection(format!("no image of {} passes the rule", manifest.display())).into());
            }
            fs::create_dir_all(&out).map_err(|e| CliError::Io(out.clone(), e))?;
            save_manifest(&selected, &out.join(MANIFEST_NAME))?;
            println!("{}", out.join(MANIFEST_NAME).display());
        }
        CurateMode::Bank => {
            let bank = build_mask_bank(&m, target)?;
            println!("selected {} rejected {}", bank.len(), m.len() - bank.len());
            if bank.is_empty() {
                return Err(Error::EmptySelection(format!("no image of {} contains class {target}", manifest.display())).into());
            }
            bank.save(&out)?;
            println!("{}", out.display());
        }
    }
    cfg.echo(&out)
}

pub struct TrainArgs {
    pub phase: Phase,
    pub config: Option<PathBuf>,
    pub restorer_ckpt: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub bank: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub max_steps: Option<usize>,
}

fn load_bank(dir: Option<&Path>, manifest: &DatasetManifest, target: u16) -> Result<MaskBank, CliError> {
    match dir {
        Some(d) if !d.join(decouple_core::curation::BANK_INDEX_NAME).is_file() => {
            Err(Error::MissingArtifact(format!("mask bank {}", d.display())).into())
        }
        Some(d) => Ok(MaskBank::load(d)?),
        None => Ok(build_mask_bank(manifest, target)?),
    }
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    cfg.train.seed = cfg.require_seed()?;
    cfg.train.phase = args.phase;
    if args.max_steps.is_some() {
        cfg.train.max_steps = args.max_steps;
    }
    if args.manifest.is_some() {
        cfg.data.train_manifest = args.manifest;
    }
    if args.bank.is_some() {
        cfg.data.bank = args.bank;
    }
    cfg.train.validate()?;

    // Check the guidance dependency before any data is touched.
    let restorer = match (&args.restorer_ckpt, args.phase) {
        (Some(p), Phase::Remover) => Some(Checkpoint::load(p)?),
        (None, Phase::Remover) if cfg.train.guidance.any() => {
            return Err(Error::MissingArtifact("remover training needs --restorer-ckpt".into()).into())
        }
        _ => None,
    };
    let manifest_path = cfg
        .data
        .train_manifest
        .clone()
        .ok_or_else(|| CliError::Usage("no training manifest (--manifest or data.train_manifest)".into()))?;
    let manifest = open_manifest(&manifest_path)?;
    let target = cfg.train.target_class;
    let run: TrainRun = match args.phase {
        Phase::Restorer => {
            let selected = select_restorer_images(&manifest, target, &cfg.train.curation)?;
            train_restorer(&cfg.train, &selected.load_all()?)?
        }
        Phase::Remover => {
            let bank = load_bank(cfg.data.bank.as_deref(), &manifest, target)?;
            let selected = select_remover_images(&manifest, target)?;
            train_remover(&cfg.train, &selected.load_all()?, &bank, restorer.as_ref())?
        }
        Phase::Baseline => {
            let bank = load_bank(cfg.data.bank.as_deref(), &manifest, target)?;
            train_baseline(&cfg.train, &manifest.load_all()?, &bank)?
        }
    };
    let out = resolve_out(
        &args
            .out
            .unwrap_or_else(|| PathBuf::from(format!("train-{}-seed{}", args.phase, cfg.train.seed))),
    );
    save_run(&run, &out)?;
    cfg.echo(&out)?;
    println!("{}", out.join(CHECKPOINT_NAME).display());
    println!("{:<12} {:>14}", "term", "final");
    for (k, v) in &run.checkpoint.metrics {
        println!("{k:<12} {v:>14.6}");
    }
    Ok(())
}

pub fn evaluate(
    ckpt: &Path,
    test: Option<PathBuf>,
    comparison: Option<PathBuf>,
    out: &Path,
    config: Option<&Path>,
) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if test.is_some() {
        cfg.data.test_manifest = test;
    }
    if comparison.is_some() {
        cfg.data.comparison_manifest = comparison;
    }
    let checkpoint = Checkpoint::load(ckpt)?;
    let settings = EvalSettings {
        target_class: checkpoint.config.target_class,
        ..cfg.eval.clone()
    };
    let need = |p: &Option<PathBuf>, what: &str| {
        p.clone()
            .ok_or_else(|| CliError::Usage(format!("no {what} manifest given")))
    };
    let test = open_manifest(&need(&cfg.data.test_manifest, "test")?)?;
    let comparison = open_manifest(&need(&cfg.data.comparison_manifest, "comparison")?)?;
    let embedder = Embedder::new(cfg.embedder.clone())?;
    let phi = FeatureNet::new(checkpoint.config.features.clone())?;
    let mut report = evaluate_run(&checkpoint, &test, &comparison, &embedder, &phi, &settings)?;
    report.timestamp = unix_timestamp();
    let out = resolve_out(out);
    report.save(&out.join(REPORT_NAME))?;
    cfg.eval = settings;
    cfg.echo(&out)?;
    print!("{}", report.table());
    Ok(())
}

pub fn ablate(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.experiment.seeds = vec![s];
        cfg.seed = Some(s);
    }
    let exp = &cfg.experiment;
    exp.validate()?;
    let out = resolve_out(out);
    cfg.echo(&out)?;
    let mut result = ExperimentResult {
        config_hash: config_hash(exp),
        outcomes: Vec::new(),
    };
    for &s in &exp.seeds {
        let seed_dir = out.join(format!("seed{s}"));
        let mut save_err = None;
        let outcomes = run_seed(
            exp,
            s,
            |row, ck| {
                if let Err(e) = ck.save(&seed_dir.join(row.name()).join(CHECKPOINT_NAME)) {
                    save_err.get_or_insert(e);
                }
            },
            |msg| eprintln!("{msg}"),
        )?;
        if let Some(e) = save_err {
            return Err(e.into());
        }
        for o in &outcomes {
            if let Some(r) = &o.report {
                let mut r = r.clone();
                r.timestamp = unix_timestamp();
                r.save(&seed_dir.join(o.row.name()).join(REPORT_NAME))?;
            }
        }
        result.outcomes.extend(outcomes);
    }
    let table = render_ablation_table(&result.ablation_table(), &result.config_hash);
    let json = serde_json::to_string_pretty(&result).expect("result is serialisable");
    for (name, text) in [("ablation.json", json.as_str()), ("ablation.txt", table.as_str())] {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| CliError::Io(p, e))?;
    }
    print!("{table}");
    if result.any_failed() {
        let failed: Vec<String> = result
            .outcomes
            .iter()
            .filter_map(|o| o.error.as_ref().map(|e| format!("{} seed {}: {e}", o.row, o.seed)))
            .collect();
        return Err(CliError::Failed(format!("ablation rows failed: {}", failed.join("; "))));
    }
    Ok(())
}
