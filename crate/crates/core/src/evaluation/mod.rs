//! Hard-Dice evaluation per tumor region, fold aggregation, the loss-term
//! ablation runner and report files.

mod ablation;
mod report;

use serde::{Deserialize, Serialize};

pub use ablation::{
    run_ablation, AblationEntry, AblationOptions, AblationRow, AblationSpec, AblationTable, LossSet, ModelKind,
};
pub use report::{config_hash, emit_report, read_results_csv, ReportFiles, ReportMeta, ResultRow};

use crate::data::{Dataset, REGION_COUNT};
use crate::error::{Error, Result};
use crate::losses::{sigmoid, BINARIZE_THRESHOLD};
use crate::network::Network;
use crate::tensor::Tensor;

/// Dice scores in percent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionScores {
    pub wt: f64,
    pub tc: f64,
    pub et: f64,
}

impl RegionScores {
    /// From `[WT, TC, ET]`.
    pub fn from_array(v: [f64; REGION_COUNT]) -> Self {
        RegionScores {
            wt: v[0],
            tc: v[1],
            et: v[2],
        }
    }

    pub fn to_array(self) -> [f64; REGION_COUNT] {
        [self.wt, self.tc, self.et]
    }

    pub fn mean(scores: &[RegionScores]) -> RegionScores {
        let n = scores.len() as f64;
        let mut acc = [0.0; REGION_COUNT];
        for s in scores {
            for (a, v) in acc.iter_mut().zip(s.to_array()) {
                *a += v;
            }
        }
        RegionScores::from_array(acc.map(|a| a / n))
    }

    /// Population standard deviation per region.
    pub fn std(scores: &[RegionScores]) -> RegionScores {
        let m = RegionScores::mean(scores).to_array();
        let n = scores.len() as f64;
        let mut acc = [0.0; REGION_COUNT];
        for s in scores {
            for ((a, v), mu) in acc.iter_mut().zip(s.to_array()).zip(m) {
                *a += (v - mu) * (v - mu);
            }
        }
        RegionScores::from_array(acc.map(|a| (a / n).sqrt()))
    }
}

/// `2|A∩B| / (|A| + |B|)` in percent; two empty masks score 100.
pub fn hard_dice(pred: &Tensor<u8>, target: &Tensor<u8>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::contract(format!(
            "hard_dice: shapes {:?} and {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    hard_dice_slices(pred.data(), target.data())
}

fn hard_dice_slices(a: &[u8], b: &[u8]) -> Result<f64> {
    let (mut na, mut nb, mut inter) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        if x > 1 || y > 1 {
            return Err(Error::contract("hard_dice: masks must be binary"));
        }
        na += x as usize;
        nb += y as usize;
        inter += (x & y) as usize;
    }
    if na + nb == 0 {
        return Ok(100.0);
    }
    Ok(200.0 * inter as f64 / (na + nb) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Probabilities at or above the threshold count as foreground.
    pub threshold: f64,
    /// Clip predictions to `ET ⊆ TC ⊆ WT` before scoring.
    pub enforce_nesting: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: BINARIZE_THRESHOLD,
            enforce_nesting: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectScores {
    pub subject_id: String,
    pub scores: RegionScores,
}

/// Binary region predictions `(3, D, H, W)` for one subject image `(C, D, H, W)`.
pub fn predict_regions(net: &Network, image: &Tensor<f32>, opts: &EvalOptions) -> Result<Tensor<u8>> {
    if !(opts.threshold > 0.0 && opts.threshold < 1.0) {
        return Err(Error::param("threshold", format!("{} not in (0, 1)", opts.threshold)));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let x = image.clone().reshape(&shape)?;
    let logits = net.forward(&x)?.logits;
    if logits.shape()[1] != REGION_COUNT {
        return Err(Error::contract(format!(
            "network predicts {} regions, expected {REGION_COUNT}",
            logits.shape()[1]
        )));
    }
    let mut masks = logits
        .map(|z| u8::from(sigmoid(f64::from(z)) >= opts.threshold))
        .reshape(&logits.shape()[1..])?;
    if opts.enforce_nesting {
        let n = masks.item_len();
        let data = masks.data_mut();
        for i in 0..n {
            data[n + i] &= data[i];
            data[2 * n + i] &= data[n + i];
        }
    }
    Ok(masks)
}

/// Per-subject scores; the dataset's channels must match the network input.
pub fn evaluate_subjects(net: &Network, data: &Dataset, opts: &EvalOptions) -> Result<Vec<SubjectScores>> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    if data.modalities.len() != net.config().in_channels {
        return Err(Error::contract(format!(
            "network takes {} channels, dataset has {}",
            net.config().in_channels,
            data.modalities.len()
        )));
    }
    data.samples
        .iter()
        .map(|s| {
            let pred = predict_regions(net, &s.image, opts)?;
            let n = pred.item_len();
            let mut out = [0.0; REGION_COUNT];
            for (r, o) in out.iter_mut().enumerate() {
                *o = hard_dice_slices(&pred.data()[r * n..(r + 1) * n], s.target.regions.item(r))?;
            }
            Ok(SubjectScores {
                subject_id: s.subject_id.clone(),
                scores: RegionScores::from_array(out),
            })
        })
        .collect()
}

/// Mean per-region Dice over subjects at `threshold`.
pub fn evaluate(net: &Network, data: &Dataset, threshold: f64) -> Result<RegionScores> {
    let opts = EvalOptions {
        threshold,
        ..EvalOptions::default()
    };
    let per = evaluate_subjects(net, data, &opts)?;
    Ok(RegionScores::mean(&per.iter().map(|s| s.scores).collect::<Vec<_>>()))
}

/// Cross-validated scores: mean of fold means, with spread over folds and over pooled subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub folds: Vec<RegionScores>,
    pub mean: RegionScores,
    pub std_folds: RegionScores,
    pub std_subjects: RegionScores,
}

impl ScoreSummary {
    pub fn from_folds(per_fold: &[Vec<SubjectScores>]) -> Self {
        let folds: Vec<RegionScores> = per_fold
            .iter()
            .map(|f| RegionScores::mean(&f.iter().map(|s| s.scores).collect::<Vec<_>>()))
            .collect();
        let pooled: Vec<RegionScores> = per_fold.iter().flatten().map(|s| s.scores).collect();
        ScoreSummary {
            mean: RegionScores::mean(&folds),
            std_folds: RegionScores::std(&folds),
            std_subjects: RegionScores::std(&pooled),
            folds,
        }
    }
}
