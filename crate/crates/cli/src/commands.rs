use std::fs;
use std::path::{Path, PathBuf};

use kdseg::data::{load_dataset, split_folds, synth_generate, write_dataset, Dataset, FoldSplit, Modality};
use kdseg::evaluation::{
    config_hash, emit_report, evaluate_subjects, run_ablation, AblationOptions, AblationSpec, EvalOptions,
    RegionScores, ReportMeta, SubjectScores,
};
use kdseg::network::{load_checkpoint, load_checkpoint_for};
use kdseg::training::{train_baseline, train_student, train_teacher, EpochMetrics, RunOptions, Stage, TrainOutcome};
use serde::Serialize;

use crate::config::{resolve_config, ResolvedConfig};
use crate::{CliError, Command, ConfigArgs};

pub(crate) fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::SynthData {
            out,
            subjects,
            size,
            seed,
            no_compress,
        } => synth_data(&out, subjects, size, seed, !no_compress),
        Command::TrainTeacher { cfg, data, out, fold } => train(&cfg, &data, &out, fold, Mode::Teacher),
        Command::TrainStudent {
            cfg,
            data,
            out,
            teacher,
            baseline,
            fold,
        } => {
            let mode = match teacher {
                Some(path) if !baseline => Mode::Student(path),
                _ => Mode::Baseline,
            };
            train(&cfg, &data, &out, fold, mode)
        }
        Command::Evaluate {
            cfg,
            checkpoint,
            data,
            fold,
            threshold,
            nesting,
            out,
        } => evaluate(
            &cfg,
            &checkpoint,
            &data,
            fold,
            EvalOptions {
                threshold,
                enforce_nesting: nesting,
            },
            out.as_deref(),
        ),
        Command::Ablate { cfg, data, out } => ablate(&cfg, &data, &out),
    }
}

/// Resolves the config and freezes it into `out/resolved_config.toml`.
fn prepare(args: &ConfigArgs, out: &Path) -> Result<(ResolvedConfig, String), CliError> {
    let cfg = resolve_config(args.config.as_deref(), &args.overrides)?;
    let text = cfg.to_toml();
    fs::create_dir_all(out).map_err(kdseg::Error::from)?;
    fs::write(out.join("resolved_config.toml"), &text).map_err(kdseg::Error::from)?;
    Ok((cfg, text))
}

fn progress_line(label: &str, m: &EpochMetrics) {
    eprintln!(
        "{label} epoch={} lr={:e} train_kd={:.6} train_kl={:.6} train_gt={:.6} train_total={:.6} val_total={:.6}",
        m.epoch, m.lr, m.train_kd, m.train_kl, m.train_gt, m.train_total, m.val_total
    );
}

fn synth_data(out: &Path, subjects: usize, size: usize, seed: u64, compress: bool) -> Result<(), CliError> {
    let set = synth_generate(subjects, size, seed)?;
    fs::create_dir_all(out).map_err(kdseg::Error::from)?;
    let record = format!("subjects = {subjects}\nsize = {size}\nseed = {seed}\n");
    fs::write(out.join("synth.toml"), record).map_err(kdseg::Error::from)?;
    write_dataset(out, &set, compress)?;
    println!(
        "wrote {subjects} synthetic subjects ({size}^3, seed {seed}) to {}",
        out.display()
    );
    Ok(())
}

fn load_split(cfg: &ResolvedConfig, data: &Path) -> Result<(Dataset, FoldSplit), CliError> {
    let dataset = load_dataset(data, &cfg.preprocess())?;
    let split = split_folds(&dataset.subject_ids(), cfg.training.folds, cfg.training.seed)?;
    Ok((dataset, split))
}

enum Mode {
    Teacher,
    Baseline,
    Student(PathBuf),
}

#[derive(Serialize)]
struct ScoreFile<'a> {
    mean: RegionScores,
    subjects: &'a [SubjectScores],
}

fn write_scores(path: &Path, scores: &[SubjectScores]) -> Result<RegionScores, CliError> {
    let mean = RegionScores::mean(&scores.iter().map(|s| s.scores).collect::<Vec<_>>());
    let json = serde_json::to_string_pretty(&ScoreFile { mean, subjects: scores })
        .map_err(|e| CliError::Core(kdseg::Error::Config(e.to_string())))?;
    fs::write(path, json).map_err(kdseg::Error::from)?;
    Ok(mean)
}

fn train(args: &ConfigArgs, data: &Path, out: &Path, fold: usize, mode: Mode) -> Result<(), CliError> {
    let (cfg, _) = prepare(args, out)?;
    let (dataset, split) = load_split(&cfg, data)?;
    if fold >= split.folds {
        return Err(CliError::Validation(format!(
            "fold {fold} out of range for {} folds",
            split.folds
        )));
    }
    split.write_csv(&out.join("folds.csv"))?;
    let train_set = dataset.subset(&split.training(fold));
    let val_set = dataset.subset(&split.validation(fold));
    let train_cfg = cfg.train_config();
    let net_cfg = cfg.network_config(dataset.modalities.len());
    let quiet = args.quiet;
    let mut progress = |stage: Stage, m: &EpochMetrics| {
        if !quiet {
            progress_line(stage.name(), m);
        }
    };
    let opts = RunOptions {
        run_dir: Some(out.to_path_buf()),
        progress: Some(&mut progress),
    };
    let outcome: TrainOutcome = match mode {
        Mode::Teacher => train_teacher(&train_cfg, &net_cfg, &train_set, &val_set, opts)?,
        Mode::Baseline => train_baseline(&train_cfg, &net_cfg, &train_set, &val_set, opts)?,
        Mode::Student(path) => {
            let (teacher, _) = load_checkpoint_for(&path, &net_cfg)?;
            train_student(&train_cfg, &net_cfg, &teacher.freeze(), &train_set, &val_set, opts)?
        }
    };
    let scores = evaluate_subjects(
        &outcome.best,
        &val_set.select(&outcome.input_modalities)?,
        &EvalOptions::default(),
    )?;
    let mean = write_scores(&out.join("scores.json"), &scores)?;
    println!(
        "{} fold {fold}: best epoch {} val_loss {:.6}  Dice ET {:.2} TC {:.2} WT {:.2}",
        outcome.stage.name(),
        outcome.best_epoch,
        outcome.best_val_loss,
        mean.et,
        mean.tc,
        mean.wt
    );
    Ok(())
}

fn checkpoint_modalities(extra: &serde_json::Map<String, serde_json::Value>) -> Option<Vec<Modality>> {
    extra
        .get("modalities")?
        .as_array()?
        .iter()
        .map(|v| v.as_str().and_then(|s| s.parse().ok()))
        .collect()
}

fn evaluate(
    args: &ConfigArgs,
    checkpoint: &Path,
    data: &Path,
    fold: Option<usize>,
    opts: EvalOptions,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = match out {
        Some(dir) => prepare(args, dir)?.0,
        None => resolve_config(args.config.as_deref(), &args.overrides)?,
    };
    let (net, meta) = load_checkpoint(checkpoint)?;
    let (dataset, split) = load_split(&cfg, data)?;
    let inputs = match checkpoint_modalities(&meta.extra) {
        Some(m) => m,
        None if net.config().in_channels == dataset.modalities.len() => dataset.modalities.clone(),
        None => {
            return Err(CliError::Validation(format!(
                "checkpoint takes {} channels and does not record its modalities",
                net.config().in_channels
            )))
        }
    };
    let subset = match fold {
        Some(f) if f >= split.folds => {
            return Err(CliError::Validation(format!(
                "fold {f} out of range for {} folds",
                split.folds
            )))
        }
        Some(f) => dataset.subset(&split.validation(f)),
        None => dataset,
    };
    let scores = evaluate_subjects(&net, &subset.select(&inputs)?, &opts)?;
    let mean = match out {
        Some(dir) => write_scores(&dir.join("scores.json"), &scores)?,
        None => RegionScores::mean(&scores.iter().map(|s| s.scores).collect::<Vec<_>>()),
    };
    println!(
        "{} subjects: Dice ET {:.2} TC {:.2} WT {:.2}",
        scores.len(),
        mean.et,
        mean.tc,
        mean.wt
    );
    Ok(())
}

fn ablate(args: &ConfigArgs, data: &Path, out: &Path) -> Result<(), CliError> {
    let (cfg, text) = prepare(args, out)?;
    let (dataset, split) = load_split(&cfg, data)?;
    split.write_csv(&out.join("folds.csv"))?;
    let spec = AblationSpec::loss_terms(cfg.network.depth);
    let quiet = args.quiet;
    let mut progress = |label: &str, fold: usize, _: Stage, m: &EpochMetrics| {
        if !quiet {
            progress_line(&format!("{label} fold{fold}"), m);
        }
    };
    let table = run_ablation(
        &spec,
        &dataset,
        &cfg.network_config(dataset.modalities.len()),
        &cfg.train_config(),
        &split,
        AblationOptions {
            out_dir: Some(out.join("runs")),
            progress: Some(&mut progress),
        },
    )?;
    let dims = dataset.samples.first().map(|s| s.dims()).unwrap_or_default();
    let meta = ReportMeta {
        seed: cfg.training.seed,
        config_hash: config_hash(&text),
        notes: vec![
            format!(
                "Dice computed at the training resolution {}x{}x{}.",
                dims[0], dims[1], dims[2]
            ),
            format!("Student modality: {}.", cfg.data.student_modality),
        ],
    };
    let files = emit_report(&table, &meta, out)?;
    let failed = table.entries.iter().filter(|e| e.error.is_some()).count();
    println!(
        "ablation: {} rows ({failed} failed); wrote {} and {}",
        table.entries.len(),
        files.csv.display(),
        files.markdown.display()
    );
    Ok(())
}
