use std::fs;
use std::path::PathBuf;

use serde::Serialize;

use super::{train_baseline, train_student, train_teacher, EpochMetrics, RunOptions, Stage, TrainConfig, TrainOutcome};
use crate::data::{Dataset, FoldSplit};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_subjects, EvalOptions, RegionScores, ScoreSummary, SubjectScores};
use crate::network::{FrozenNetwork, NetworkConfig};

/// What each fold trains.
#[derive(Clone, Copy)]
pub enum CvStage<'a> {
    Teacher,
    Baseline,
    /// One frozen teacher per fold, trained on that fold's training split.
    Student {
        teachers: &'a [FrozenNetwork],
    },
}

impl CvStage<'_> {
    pub fn stage(&self) -> Stage {
        match self {
            CvStage::Teacher => Stage::Teacher,
            CvStage::Baseline => Stage::Baseline,
            CvStage::Student { .. } => Stage::Student,
        }
    }
}

pub struct FoldRun {
    pub fold: usize,
    pub outcome: TrainOutcome,
    /// Validation-split scores of the best checkpoint.
    pub subject_scores: Vec<SubjectScores>,
    pub scores: RegionScores,
}

pub struct CvReport {
    pub stage: Stage,
    pub folds: Vec<FoldRun>,
    pub summary: ScoreSummary,
}

#[derive(Serialize)]
struct CvRow {
    fold: String,
    best_epoch: String,
    best_val_loss: String,
    et: f64,
    tc: f64,
    wt: f64,
}

/// Trains one network per fold (train on the other folds, validate on this one)
/// and scores each best checkpoint on its validation split.
///
/// With an `out_dir`, fold `k` runs in `out_dir/fold{k}` and `cv.csv` holds one
/// row per fold plus `mean` and `std` rows.
pub fn run_cross_validation(
    cfg: &TrainConfig,
    net_cfg: &NetworkConfig,
    data: &Dataset,
    split: &FoldSplit,
    stage: CvStage<'_>,
    out_dir: Option<PathBuf>,
    mut progress: Option<&mut dyn FnMut(usize, Stage, &EpochMetrics)>,
) -> Result<CvReport> {
    if let CvStage::Student { teachers } = stage {
        if teachers.len() != split.folds {
            return Err(Error::contract(format!(
                "{} teachers for {} folds",
                teachers.len(),
                split.folds
            )));
        }
    }
    let mut folds = Vec::with_capacity(split.folds);
    for fold in 0..split.folds {
        let mut run = || -> Result<FoldRun> {
            let train = data.subset(&split.training(fold));
            let val = data.subset(&split.validation(fold));
            let mut forward = |s: Stage, m: &EpochMetrics| {
                if let Some(p) = progress.as_mut() {
                    p(fold, s, m);
                }
            };
            let opts = RunOptions {
                run_dir: out_dir.as_ref().map(|d| d.join(format!("fold{fold}"))),
                progress: Some(&mut forward),
            };
            let outcome = match stage {
                CvStage::Teacher => train_teacher(cfg, net_cfg, &train, &val, opts)?,
                CvStage::Baseline => train_baseline(cfg, net_cfg, &train, &val, opts)?,
                CvStage::Student { teachers } => train_student(cfg, net_cfg, &teachers[fold], &train, &val, opts)?,
            };
            let inputs = val.select(&outcome.input_modalities)?;
            let subject_scores = evaluate_subjects(&outcome.best, &inputs, &EvalOptions::default())?;
            let scores = RegionScores::mean(&subject_scores.iter().map(|s| s.scores).collect::<Vec<_>>());
            Ok(FoldRun {
                fold,
                outcome,
                subject_scores,
                scores,
            })
        };
        folds.push(run().map_err(|e| Error::Fold {
            fold,
            source: Box::new(e),
        })?);
    }
    let per_fold: Vec<Vec<SubjectScores>> = folds.iter().map(|f| f.subject_scores.clone()).collect();
    let summary = ScoreSummary::from_folds(&per_fold);

    if let Some(dir) = &out_dir {
        fs::create_dir_all(dir)?;
        split.write_csv(&dir.join("folds.csv"))?;
        let mut w = csv::Writer::from_path(dir.join("cv.csv")).map_err(csv_err)?;
        let row = |fold: String, epoch: String, loss: String, s: RegionScores| CvRow {
            fold,
            best_epoch: epoch,
            best_val_loss: loss,
            et: s.et,
            tc: s.tc,
            wt: s.wt,
        };
        for f in &folds {
            w.serialize(row(
                f.fold.to_string(),
                f.outcome.best_epoch.to_string(),
                f.outcome.best_val_loss.to_string(),
                f.scores,
            ))
            .map_err(csv_err)?;
        }
        w.serialize(row("mean".into(), String::new(), String::new(), summary.mean))
            .map_err(csv_err)?;
        w.serialize(row("std".into(), String::new(), String::new(), summary.std_folds))
            .map_err(csv_err)?;
        w.flush()?;
    }
    Ok(CvReport {
        stage: stage.stage(),
        folds,
        summary,
    })
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("cv table: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_folds, tiny_dataset, Modality};

    #[test]
    fn three_folds_structure() {
        let data = tiny_dataset(6, 8, 21);
        let split = split_folds(&data.subject_ids(), 3, 1).unwrap();
        for f in 0..3 {
            let (t, v) = (split.training(f), split.validation(f));
            assert!(v.iter().all(|s| !t.contains(s)));
        }
        let cfg = TrainConfig {
            epochs: 1,
            lr: 1e-3,
            student_modality: Modality::Flair,
            ..TrainConfig::default()
        };
        let net_cfg = NetworkConfig {
            depth: 1,
            base_filters: 2,
            skip_connections: 1,
            ..NetworkConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let mut seen = Vec::new();
        let mut log = |fold: usize, _: Stage, _: &EpochMetrics| seen.push(fold);
        let report = run_cross_validation(
            &cfg,
            &net_cfg,
            &data,
            &split,
            CvStage::Baseline,
            Some(dir.path().to_path_buf()),
            Some(&mut log),
        )
        .unwrap();
        assert_eq!(seen, vec![0, 1, 2]);
        assert_eq!(report.folds.len(), 3);
        for f in 0..3 {
            assert!(dir.path().join(format!("fold{f}/best.ckpt")).is_file());
        }
        let text = fs::read_to_string(dir.path().join("cv.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 + 2);
        assert!(dir.path().join("folds.csv").is_file());

        let teachers: Vec<FrozenNetwork> = Vec::new();
        let err = run_cross_validation(
            &cfg,
            &net_cfg,
            &data,
            &split,
            CvStage::Student { teachers: &teachers },
            None,
            None,
        );
        assert!(err.is_err());
    }

    #[test]
    fn fold_errors_carry_index() {
        let data = tiny_dataset(3, 8, 2);
        let split = split_folds(&data.subject_ids(), 3, 0).unwrap();
        // T1 is not part of the synthetic modalities
        let cfg = TrainConfig {
            epochs: 1,
            student_modality: Modality::T1,
            ..TrainConfig::default()
        };
        let net_cfg = NetworkConfig {
            depth: 1,
            base_filters: 2,
            skip_connections: 0,
            ..NetworkConfig::default()
        };
        let err = run_cross_validation(&cfg, &net_cfg, &data, &split, CvStage::Baseline, None, None)
            .err()
            .unwrap();
        assert!(matches!(err, Error::Fold { fold: 0, .. }), "{err}");
    }
}
