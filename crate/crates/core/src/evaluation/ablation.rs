use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::ScoreSummary;
use crate::data::{Dataset, FoldSplit};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::{FrozenNetwork, NetworkConfig};
use crate::training::{run_cross_validation, CvStage, EpochMetrics, Stage, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    Baseline,
    Teacher,
    KdNet,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Baseline => "Baseline",
            ModelKind::Teacher => "Teacher",
            ModelKind::KdNet => "KD-Net",
        }
    }
}

/// Objective terms a row trains with; ground truth is always present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossSet {
    Gt,
    GtKl,
    GtKd,
    GtKlKd,
}

impl LossSet {
    pub fn label(self) -> &'static str {
        match self {
            LossSet::Gt => "GT",
            LossSet::GtKl => "GT+KL",
            LossSet::GtKd => "GT+KD",
            LossSet::GtKlKd => "GT+KL+KD",
        }
    }

    /// `(enable_kd, enable_kl)`.
    pub fn flags(self) -> (bool, bool) {
        match self {
            LossSet::Gt => (false, false),
            LossSet::GtKl => (false, true),
            LossSet::GtKd => (true, false),
            LossSet::GtKlKd => (true, true),
        }
    }

    /// `base` with the switches of this set; λ, T and α are kept.
    pub fn apply(self, base: LossWeights) -> LossWeights {
        let (enable_kd, enable_kl) = self.flags();
        LossWeights {
            enable_kd,
            enable_kl,
            ..base
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub skip_connections: usize,
    pub model: ModelKind,
    pub loss: LossSet,
}

impl fmt::Display for AblationRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} skips {} {}",
            self.skip_connections,
            self.model.label(),
            self.loss.label()
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub rows: Vec<AblationRow>,
}

impl AblationSpec {
    /// Baseline, teacher and the three distilled objectives, first with every
    /// skip connection (`full_skips`) then with none.
    pub fn loss_terms(full_skips: usize) -> Self {
        let mut rows = Vec::with_capacity(10);
        for skip_connections in [full_skips, 0] {
            let row = |model, loss| AblationRow {
                skip_connections,
                model,
                loss,
            };
            rows.push(row(ModelKind::Baseline, LossSet::Gt));
            rows.push(row(ModelKind::Teacher, LossSet::Gt));
            rows.push(row(ModelKind::KdNet, LossSet::GtKl));
            rows.push(row(ModelKind::KdNet, LossSet::GtKd));
            rows.push(row(ModelKind::KdNet, LossSet::GtKlKd));
        }
        AblationSpec { rows }
    }

    pub fn validate(&self, net_cfg: &NetworkConfig) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Config("ablation has no rows".into()));
        }
        for row in &self.rows {
            if row.model != ModelKind::KdNet && row.loss != LossSet::Gt {
                return Err(Error::Config(format!(
                    "{row}: only KD-Net rows can use distillation terms"
                )));
            }
            NetworkConfig {
                skip_connections: row.skip_connections,
                ..net_cfg.clone()
            }
            .validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub row: AblationRow,
    pub summary: Option<ScoreSummary>,
    /// Failure message when the row could not be trained.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub folds: usize,
    pub entries: Vec<AblationEntry>,
}

#[derive(Default)]
pub struct AblationOptions<'a> {
    /// Runs go to `out_dir/skip{S}/{model}-{loss}/fold{k}`.
    pub out_dir: Option<PathBuf>,
    /// Called per epoch with a row label, the fold, and the stage.
    pub progress: Option<&'a mut dyn FnMut(&str, usize, Stage, &EpochMetrics)>,
}

struct TeacherSet {
    frozen: Vec<FrozenNetwork>,
    summary: ScoreSummary,
}

fn slug(row: &AblationRow) -> String {
    format!("{}-{}", row.model.label(), row.loss.label())
        .to_lowercase()
        .replace('+', "_")
}

/// Cross-validates every row; a teacher is trained once per fold and skip setting
/// and shared by the rows that need it. Row failures are recorded, not fatal.
pub fn run_ablation(
    spec: &AblationSpec,
    data: &Dataset,
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
    split: &FoldSplit,
    mut opts: AblationOptions<'_>,
) -> Result<AblationTable> {
    spec.validate(net_cfg)?;
    train_cfg.validate()?;
    let mut teachers: BTreeMap<usize, std::result::Result<TeacherSet, String>> = BTreeMap::new();
    let mut entries = Vec::with_capacity(spec.rows.len());

    for row in &spec.rows {
        let net_cfg = NetworkConfig {
            skip_connections: row.skip_connections,
            ..net_cfg.clone()
        };
        let dir_for = |name: &str| {
            opts.out_dir
                .as_ref()
                .map(|d| d.join(format!("skip{}", row.skip_connections)).join(name))
        };
        let needs_teacher = row.model != ModelKind::Baseline;
        if needs_teacher && !teachers.contains_key(&row.skip_connections) {
            let label = format!("skip{}/teacher", row.skip_connections);
            let mut forward = |fold: usize, s: Stage, m: &EpochMetrics| {
                if let Some(p) = opts.progress.as_mut() {
                    p(&label, fold, s, m);
                }
            };
            let trained = run_cross_validation(
                train_cfg,
                &net_cfg,
                data,
                split,
                CvStage::Teacher,
                dir_for("teacher"),
                Some(&mut forward),
            )
            .map(|report| TeacherSet {
                summary: report.summary,
                frozen: report.folds.into_iter().map(|f| f.outcome.best.freeze()).collect(),
            })
            .map_err(|e| e.to_string());
            teachers.insert(row.skip_connections, trained);
        }

        let result: std::result::Result<ScoreSummary, String> = match row.model {
            ModelKind::Teacher => match &teachers[&row.skip_connections] {
                Ok(set) => Ok(set.summary.clone()),
                Err(e) => Err(e.clone()),
            },
            ModelKind::Baseline | ModelKind::KdNet => {
                let label = format!("skip{}/{}", row.skip_connections, slug(row));
                let mut forward = |fold: usize, s: Stage, m: &EpochMetrics| {
                    if let Some(p) = opts.progress.as_mut() {
                        p(&label, fold, s, m);
                    }
                };
                let cfg = TrainConfig {
                    weights: row.loss.apply(train_cfg.weights),
                    ..train_cfg.clone()
                };
                let stage_result = match (row.model, teachers.get(&row.skip_connections)) {
                    (ModelKind::Baseline, _) => Ok(CvStage::Baseline),
                    (_, Some(Ok(set))) => Ok(CvStage::Student { teachers: &set.frozen }),
                    (_, Some(Err(e))) => Err(format!("teacher unavailable: {e}")),
                    (_, None) => Err("teacher unavailable".to_string()),
                };
                stage_result.and_then(|stage| {
                    run_cross_validation(
                        &cfg,
                        &net_cfg,
                        data,
                        split,
                        stage,
                        dir_for(&slug(row)),
                        Some(&mut forward),
                    )
                    .map(|r| r.summary)
                    .map_err(|e| e.to_string())
                })
            }
        };
        entries.push(match result {
            Ok(summary) => AblationEntry {
                row: *row,
                summary: Some(summary),
                error: None,
            },
            Err(e) => AblationEntry {
                row: *row,
                summary: None,
                error: Some(e),
            },
        });
    }
    Ok(AblationTable {
        folds: split.folds,
        entries,
    })
}
