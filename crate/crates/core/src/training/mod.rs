//! Optimization of the multi-modal teacher, the mono-modal baseline and the
//! distilled student.
//!
//! All three stages share one loop: shuffled mini-batches with per-subject
//! random flips, Adam on the trained network only, a validation pass without
//! augmentation after every epoch, and the plateau learning-rate rule driven
//! by the validation loss. The teacher and the baseline minimize the
//! ground-truth loss; the student minimizes the full objective against a
//! [`FrozenNetwork`].

mod cv;
mod optim;
mod schedule;

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cv::{run_cross_validation, CvReport, CvStage, FoldRun};
pub use optim::Adam;
pub use schedule::{lr_step, PlateauOutcome, TrainState};

use crate::data::{Dataset, FlipAxes, Modality, Sample};
use crate::error::{Error, Result};
use crate::losses::{objective, LossReport, LossWeights, ObjectiveGrad, TeacherSignal};
use crate::network::{save_checkpoint, FrozenNetwork, Network, NetworkConfig, Tape};
use crate::tensor::Tensor;

/// Environment variable overriding [`TrainConfig::seed`].
pub const SEED_ENV: &str = "KDSEG_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub student_modality: Modality,
    /// Random flips of training batches.
    pub augment: bool,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            lr: 1e-4,
            plateau_factor: 0.2,
            plateau_patience: 50,
            batch_size: 2,
            weights: LossWeights::default(),
            seed: 0,
            student_modality: Modality::T1ce,
            augment: true,
            folds: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Err(Error::Config(format!("{key}: {reason}")));
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("{} must be positive", self.lr));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor", format!("{} not in (0, 1)", self.plateau_factor));
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.folds < 2 {
            return bad("folds", format!("{} folds, need at least 2", self.folds));
        }
        self.weights.validate().or_else(|e| match e {
            Error::Parameter { name, reason } => bad(name, reason),
            other => Err(other),
        })
    }

    /// Applies `KDSEG_SEED` if set; returns whether it was.
    pub fn apply_seed_env(&mut self) -> Result<bool> {
        match std::env::var(SEED_ENV) {
            Ok(raw) => {
                self.seed = raw
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("seed: {SEED_ENV}={raw:?} is not an unsigned integer")))?;
                Ok(true)
            }
            Err(std::env::VarError::NotPresent) => Ok(false),
            Err(e) => Err(Error::Config(format!("seed: {SEED_ENV}: {e}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Teacher,
    Baseline,
    Student,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Teacher => "teacher",
            Stage::Baseline => "baseline",
            Stage::Student => "student",
        }
    }
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Rate used during this epoch.
    pub lr: f64,
    pub train_kd: f64,
    pub train_kl: f64,
    pub train_gt: f64,
    pub train_total: f64,
    pub val_total: f64,
}

/// A mini-batch carrying every modality of the dataset.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `(B, N, D, H, W)`.
    pub image: Tensor<f32>,
    /// `(B, 3, D, H, W)` binary region maps.
    pub reference: Tensor<f64>,
}

impl Batch {
    /// Stacks samples, flipping each one (image and target alike) by its own axes.
    pub fn from_samples(samples: &[&Sample], flips: &[FlipAxes]) -> Result<Batch> {
        let Some(first) = samples.first() else {
            return Err(Error::contract("empty batch"));
        };
        if flips.len() != samples.len() {
            return Err(Error::contract("one flip per sample required"));
        }
        let img_shape = first.image.shape().to_vec();
        let tgt_shape = first.target.regions.shape().to_vec();
        let mut image = Vec::with_capacity(samples.len() * first.image.len());
        let mut reference = Vec::with_capacity(samples.len() * first.target.regions.len());
        for (s, f) in samples.iter().zip(flips) {
            if s.image.shape() != img_shape.as_slice() || s.target.regions.shape() != tgt_shape.as_slice() {
                return Err(Error::contract(format!(
                    "sample {} differs in shape from the batch",
                    s.subject_id
                )));
            }
            image.extend_from_slice(f.apply(&s.image)?.data());
            reference.extend(f.apply(&s.target.regions)?.data().iter().map(|&v| f64::from(v)));
        }
        let stack = |mut shape: Vec<usize>| {
            shape.insert(0, samples.len());
            shape
        };
        Ok(Batch {
            image: Tensor::new(&stack(img_shape), image)?,
            reference: Tensor::new(&stack(tgt_shape), reference)?,
        })
    }

    pub fn len(&self) -> usize {
        self.image.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn channels(&self, channels: &[usize]) -> Tensor<f32> {
        let s = self.image.shape();
        let vox: usize = s[2..].iter().product();
        if channels.len() == s[1] && channels.iter().enumerate().all(|(i, &c)| i == c) {
            return self.image.clone();
        }
        let mut data = Vec::with_capacity(s[0] * channels.len() * vox);
        for b in 0..s[0] {
            let item = self.image.item(b);
            for &c in channels {
                data.extend_from_slice(&item[c * vox..(c + 1) * vox]);
            }
        }
        let mut shape = s.to_vec();
        shape[1] = channels.len();
        Tensor::new(&shape, data).expect("consistent channel gather")
    }
}

/// Where the trained network's supervision comes from.
#[derive(Clone, Copy, Debug)]
pub enum Supervision<'a> {
    GroundTruth,
    Distilled(&'a FrozenNetwork),
}

/// How one batch is turned into a loss for the trained network.
#[derive(Clone, Debug)]
pub struct StepSpec<'a> {
    /// Dataset channels fed to the trained network.
    pub input_channels: Vec<usize>,
    pub supervision: Supervision<'a>,
    pub weights: LossWeights,
}

fn evaluate_batch(
    net: &Network,
    batch: &Batch,
    spec: &StepSpec<'_>,
    keep_tape: bool,
) -> Result<(ObjectiveGrad, Option<Tape>)> {
    let inputs = batch.channels(&spec.input_channels);
    let (out, tape) = if keep_tape {
        let (out, tape) = net.forward_train(&inputs)?;
        (out, Some(tape))
    } else {
        (net.forward(&inputs)?, None)
    };
    let logits = out.logits.to_f64();
    let bottleneck = out.bottleneck.to_f64();
    let grad = match spec.supervision {
        Supervision::GroundTruth => objective(&logits, &bottleneck, &batch.reference, None, &spec.weights)?,
        Supervision::Distilled(teacher) => {
            // the teacher always sees every modality
            let t = teacher.forward(&batch.image)?;
            let (t_logits, t_bn) = (t.logits.to_f64(), t.bottleneck.to_f64());
            let signal = TeacherSignal {
                logits: &t_logits,
                bottleneck: &t_bn,
            };
            objective(&logits, &bottleneck, &batch.reference, Some(signal), &spec.weights)?
        }
    };
    Ok((grad, tape))
}

/// Loss of `net` on `batch` without updating anything.
pub fn batch_loss(net: &Network, batch: &Batch, spec: &StepSpec<'_>) -> Result<LossReport> {
    Ok(evaluate_batch(net, batch, spec, false)?.0.report)
}

/// One Adam step on `net`; returns the loss before the step.
pub fn train_step(
    net: &mut Network,
    adam: &mut Adam,
    lr: f64,
    batch: &Batch,
    spec: &StepSpec<'_>,
) -> Result<LossReport> {
    let (grad, tape) = evaluate_batch(net, batch, spec, true)?;
    if !grad.report.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {:?}", grad.report)));
    }
    let tape = tape.expect("training forward keeps its tape");
    let grad_bn = grad.grad_bottleneck.as_ref().map(Tensor::to_f32);
    let grads = net.backward(&tape, &grad.grad_logits.to_f32(), grad_bn.as_ref())?;
    adam.step(net.params_mut(), &grads, lr)?;
    Ok(grad.report)
}

/// Flips for `subject_id` in `epoch`, independent of batch composition.
pub fn flips_for(seed: u64, epoch: usize, subject_id: &str) -> FlipAxes {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((epoch as u64).to_le_bytes());
    h.update(subject_id.as_bytes());
    let digest = h.finalize();
    let mut rng = ChaCha8Rng::from_seed(digest.into());
    FlipAxes::sample(&mut rng)
}

/// Per-run plumbing: output directory and progress reporting.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Receives `config.toml`, `metrics.csv`, `best.ckpt` and `last.ckpt`.
    pub run_dir: Option<PathBuf>,
    pub progress: Option<&'a mut dyn FnMut(Stage, &EpochMetrics)>,
}

pub struct TrainOutcome {
    pub stage: Stage,
    /// Network at the epoch with the lowest validation loss.
    pub best: Network,
    pub last: Network,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochMetrics>,
    pub state: TrainState,
    /// Modalities fed to the trained network, in channel order.
    pub input_modalities: Vec<Modality>,
}

#[derive(Serialize)]
struct RunSnapshot<'a> {
    stage: Stage,
    input_modalities: &'a [Modality],
    training: &'a TrainConfig,
    network: &'a NetworkConfig,
}

#[derive(Serialize)]
struct DivergenceDump<'a> {
    epoch: usize,
    state: &'a TrainState,
    last_report: Option<LossReport>,
    detail: &'a str,
}

/// Ground-truth training on every modality of `train`.
pub fn train_teacher(
    cfg: &TrainConfig,
    net_cfg: &NetworkConfig,
    train: &Dataset,
    val: &Dataset,
    opts: RunOptions<'_>,
) -> Result<TrainOutcome> {
    train_stage(Stage::Teacher, cfg, net_cfg, None, train, val, opts)
}

/// Ground-truth training on `cfg.student_modality` only.
pub fn train_baseline(
    cfg: &TrainConfig,
    net_cfg: &NetworkConfig,
    train: &Dataset,
    val: &Dataset,
    opts: RunOptions<'_>,
) -> Result<TrainOutcome> {
    train_stage(Stage::Baseline, cfg, net_cfg, None, train, val, opts)
}

/// Full-objective training of a `cfg.student_modality` network against `teacher`.
pub fn train_student(
    cfg: &TrainConfig,
    net_cfg: &NetworkConfig,
    teacher: &FrozenNetwork,
    train: &Dataset,
    val: &Dataset,
    opts: RunOptions<'_>,
) -> Result<TrainOutcome> {
    train_stage(Stage::Student, cfg, net_cfg, Some(teacher), train, val, opts)
}

fn ckpt_extra(
    stage: Stage,
    epoch: usize,
    val_loss: f64,
    inputs: &[Modality],
) -> serde_json::Map<String, serde_json::Value> {
    let mut m = serde_json::Map::new();
    m.insert("stage".into(), stage.name().into());
    m.insert("epoch".into(), epoch.into());
    m.insert("val_loss".into(), val_loss.into());
    m.insert(
        "modalities".into(),
        inputs.iter().map(|m| serde_json::Value::from(m.name())).collect(),
    );
    m
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("metrics log: {other:?}")),
    }
}

fn train_stage(
    stage: Stage,
    cfg: &TrainConfig,
    net_cfg: &NetworkConfig,
    teacher: Option<&FrozenNetwork>,
    train: &Dataset,
    val: &Dataset,
    mut opts: RunOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::contract("training and validation sets must both be non-empty"));
    }
    if train.modalities != val.modalities {
        return Err(Error::contract(
            "training and validation sets carry different modalities",
        ));
    }
    let input_modalities = match stage {
        Stage::Teacher => train.modalities.clone(),
        Stage::Baseline | Stage::Student => vec![cfg.student_modality],
    };
    let input_channels = input_modalities
        .iter()
        .map(|&m| train.channel_of(m))
        .collect::<Result<Vec<_>>>()?;
    if let Some(t) = teacher {
        if t.config().in_channels != train.modalities.len() {
            return Err(Error::Compatibility(format!(
                "teacher has {} input channels, data has {} modalities",
                t.config().in_channels,
                train.modalities.len()
            )));
        }
    }
    let net_cfg = net_cfg.with_in_channels(input_channels.len());
    net_cfg.check_spatial(train.samples[0].dims())?;
    let mut net = Network::build(net_cfg.clone(), cfg.seed)?;
    let spec = StepSpec {
        input_channels,
        supervision: teacher.map_or(Supervision::GroundTruth, Supervision::Distilled),
        weights: cfg.weights,
    };

    let mut metrics_log = None;
    if let Some(dir) = &opts.run_dir {
        fs::create_dir_all(dir)?;
        let snapshot = RunSnapshot {
            stage,
            input_modalities: &input_modalities,
            training: cfg,
            network: &net_cfg,
        };
        let text = toml::to_string(&snapshot).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(dir.join("config.toml"), text)?;
        metrics_log = Some(csv::Writer::from_writer(File::create(dir.join("metrics.csv"))?));
    }

    let mut adam = Adam::new(net.params());
    let mut state = TrainState::new(cfg.lr);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = net.clone();
    let mut best_epoch = 0;
    let mut last_report = None;

    for epoch in 1..=cfg.epochs {
        let lr = state.current_lr;
        order.shuffle(&mut order_rng);
        let mut sum = LossReport::default();
        let diverged = |state: &TrainState, last: Option<LossReport>, detail: String| -> Error {
            if let Some(dir) = &opts.run_dir {
                let dump = DivergenceDump {
                    epoch,
                    state,
                    last_report: last,
                    detail: &detail,
                };
                if let Ok(json) = serde_json::to_string_pretty(&dump) {
                    let _ = fs::write(dir.join("diverged.json"), json);
                }
            }
            Error::Diverged { epoch, detail }
        };
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &train.samples[i]).collect();
            let flips: Vec<FlipAxes> = samples
                .iter()
                .map(|s| {
                    if cfg.augment {
                        flips_for(cfg.seed, epoch, &s.subject_id)
                    } else {
                        FlipAxes::none()
                    }
                })
                .collect();
            let batch = Batch::from_samples(&samples, &flips)?;
            let report = match train_step(&mut net, &mut adam, lr, &batch, &spec) {
                Ok(r) => r,
                Err(Error::Numeric(detail)) => return Err(diverged(&state, last_report, detail)),
                Err(e) => return Err(e),
            };
            if net.params().iter().any(|p| p.value.iter().any(|v| !v.is_finite())) {
                return Err(diverged(
                    &state,
                    Some(report),
                    "non-finite parameters after update".into(),
                ));
            }
            let w = chunk.len() as f64;
            sum.kd += w * report.kd;
            sum.kl += w * report.kl;
            sum.gt += w * report.gt;
            sum.total += w * report.total;
            last_report = Some(report);
        }
        let n = train.len() as f64;

        let mut val_sum = 0.0;
        let val_refs: Vec<&Sample> = val.samples.iter().collect();
        for chunk in val_refs.chunks(cfg.batch_size) {
            let batch = Batch::from_samples(chunk, &vec![FlipAxes::none(); chunk.len()])?;
            val_sum += chunk.len() as f64 * batch_loss(&net, &batch, &spec)?.total;
        }
        let val_total = val_sum / val.len() as f64;
        if !val_total.is_finite() {
            return Err(diverged(&state, last_report, format!("validation loss {val_total}")));
        }

        let row = EpochMetrics {
            epoch,
            lr,
            train_kd: sum.kd / n,
            train_kl: sum.kl / n,
            train_gt: sum.gt / n,
            train_total: sum.total / n,
            val_total,
        };
        let step = state.lr_step(val_total, cfg.plateau_factor, cfg.plateau_patience);
        if step.improved {
            best = net.clone();
            best_epoch = epoch;
            if let Some(dir) = &opts.run_dir {
                save_checkpoint(
                    &best,
                    &dir.join("best.ckpt"),
                    ckpt_extra(stage, epoch, val_total, &input_modalities),
                )?;
            }
        }
        if let Some(log) = metrics_log.as_mut() {
            log.serialize(&row).map_err(csv_io)?;
            log.flush()?;
        }
        if let Some(progress) = opts.progress.as_mut() {
            progress(stage, &row);
        }
        history.push(row);
    }

    if let Some(dir) = &opts.run_dir {
        let last_val = history.last().map_or(f64::NAN, |r| r.val_total);
        save_checkpoint(
            &net,
            &dir.join("last.ckpt"),
            ckpt_extra(stage, cfg.epochs, last_val, &input_modalities),
        )?;
    }
    Ok(TrainOutcome {
        stage,
        best,
        last: net,
        best_epoch,
        best_val_loss: state.best_val_loss,
        history,
        state,
        input_modalities,
    })
}

/// Reads `metrics.csv` back.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_io)?;
    r.deserialize().map(|row| row.map_err(csv_io)).collect()
}
