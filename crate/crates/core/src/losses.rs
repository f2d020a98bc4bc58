//! Distillation objective: temperature-softened teacher targets, soft Dice,
//! binary cross-entropy, bottleneck KL alignment and their weighted sum.
//!
//! All tensors are laid out `(batch, regions, spatial...)`. Every loss is a
//! batch mean, and every `*_with_grad` variant returns the gradient with
//! respect to the student-side argument only; teacher-side inputs are
//! treated as constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Added to both numerator and denominator of the soft Dice ratio.
pub const DICE_SMOOTHING: f64 = 1e-5;
/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before logs.
pub const BCE_CLAMP: f64 = 1e-7;
/// Soft teacher targets at or above this value binarize to 1.
pub const BINARIZE_THRESHOLD: f64 = 0.5;

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-voxel region probabilities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap(Tensor<f64>);

impl ProbabilityMap {
    pub fn new(values: Tensor<f64>) -> Result<Self> {
        if let Some(v) = values.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("probability map value {v} outside [0, 1]")));
        }
        Ok(ProbabilityMap(values))
    }

    pub fn tensor(&self) -> &Tensor<f64> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f64> {
        self.0
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }
}

/// Teacher soft probabilities together with their binarization.
#[derive(Clone, Debug)]
pub struct SoftTarget {
    pub soft: ProbabilityMap,
    pub hard: Tensor<f64>,
    pub temperature: f64,
}

impl SoftTarget {
    pub fn from_teacher_logits(teacher_logits: &Tensor<f64>, temperature: f64) -> Result<Self> {
        let soft = temperature_soften(teacher_logits, temperature)?;
        let hard = binarize(&soft, BINARIZE_THRESHOLD)?;
        Ok(SoftTarget {
            soft,
            hard,
            temperature,
        })
    }
}

/// A flattened bottleneck mapped onto the probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckDistribution {
    probs: Vec<f64>,
}

impl BottleneckDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Weights and ablation switches of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Imitation weight between teacher soft labels and ground truth.
    pub lambda: f64,
    /// Scale of the bottleneck KL term.
    pub alpha: f64,
    pub temperature: f64,
    pub enable_kd: bool,
    pub enable_kl: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.75,
            alpha: 10.0,
            temperature: 5.0,
            enable_kd: true,
            enable_kl: true,
        }
    }
}

impl LossWeights {
    /// Ground-truth supervision only.
    pub fn gt_only() -> Self {
        LossWeights {
            enable_kd: false,
            enable_kl: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::param("lambda", format!("{} not in [0, 1]", self.lambda)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::param("alpha", format!("{} must be >= 0", self.alpha)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::param("temperature", format!("{} must be > 0", self.temperature)));
        }
        Ok(())
    }

    /// Coefficients `(kd, gt, kl)` actually applied to each term.
    pub fn coefficients(&self) -> (f64, f64, f64) {
        let (kd, gt) = if self.enable_kd {
            (self.lambda, 1.0 - self.lambda)
        } else {
            (0.0, 1.0)
        };
        let kl = if self.enable_kl { self.alpha } else { 0.0 };
        (kd, gt, kl)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub kd: f64,
    pub kl: f64,
    pub gt: f64,
    pub total: f64,
}

/// A loss value with its gradient w.r.t. the student-side input.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Tensor<f64>,
}

fn check_finite(t: &Tensor<f64>, what: &str) -> Result<()> {
    if !t.all_finite() {
        return Err(Error::Numeric(format!("{what} contains non-finite values")));
    }
    Ok(())
}

fn check_layout(t: &Tensor<f64>, what: &str) -> Result<()> {
    if t.shape().len() < 2 {
        return Err(Error::contract(format!(
            "{what} must be laid out (batch, channels, ...), got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn check_binary(t: &Tensor<f64>, what: &str) -> Result<()> {
    if let Some(v) = t.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract(format!("{what} must be binary, found {v}")));
    }
    Ok(())
}

/// Element-wise `sigmoid(logits / T)`.
pub fn temperature_soften(logits: &Tensor<f64>, temperature: f64) -> Result<ProbabilityMap> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::param("temperature", format!("{temperature} must be > 0")));
    }
    check_finite(logits, "logits")?;
    Ok(ProbabilityMap(logits.map(|z| sigmoid(z / temperature))))
}

/// Student activation (no temperature).
pub fn activate(logits: &Tensor<f64>) -> Result<ProbabilityMap> {
    temperature_soften(logits, 1.0)
}

struct DiceParts {
    /// Mean Dice over (batch, channel) pairs.
    mean: f64,
    /// d(mean Dice)/d(pred), same layout as pred.
    grad: Vec<f64>,
}

fn dice_parts(pred: &Tensor<f64>, target: &Tensor<f64>, want_grad: bool) -> DiceParts {
    let groups = pred.shape()[0] * pred.shape()[1];
    let per = pred.len() / groups.max(1);
    let mut mean = 0.0;
    let mut grad = if want_grad { vec![0.0; pred.len()] } else { Vec::new() };
    for g in 0..groups {
        let p = &pred.data()[g * per..(g + 1) * per];
        let t = &target.data()[g * per..(g + 1) * per];
        let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
        let denom = p.iter().sum::<f64>() + t.iter().sum::<f64>() + DICE_SMOOTHING;
        let num = 2.0 * inter + DICE_SMOOTHING;
        mean += num / denom;
        if want_grad {
            let out = &mut grad[g * per..(g + 1) * per];
            for (o, &tv) in out.iter_mut().zip(t) {
                *o = (2.0 * tv * denom - num) / (denom * denom) / groups as f64;
            }
        }
    }
    DiceParts {
        mean: mean / groups as f64,
        grad,
    }
}

/// Smoothed soft Dice, averaged over batch items and region channels.
pub fn soft_dice(pred: &ProbabilityMap, target: &ProbabilityMap) -> Result<f64> {
    pred.0.ensure_same_shape(&target.0, "soft_dice")?;
    check_layout(&pred.0, "soft_dice input")?;
    Ok(dice_parts(&pred.0, &target.0, false).mean)
}

fn bce_parts(pred: &Tensor<f64>, target: &Tensor<f64>, want_grad: bool) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let mut sum = 0.0;
    let mut grad = if want_grad { vec![0.0; pred.len()] } else { Vec::new() };
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        sum -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        if want_grad && p > BCE_CLAMP && p < 1.0 - BCE_CLAMP {
            grad[i] = (-t / pc + (1.0 - t) / (1.0 - pc)) / n;
        }
    }
    (sum / n, grad)
}

/// Mean binary cross-entropy of `pred` against a binary `target`.
pub fn binary_cross_entropy(pred: &ProbabilityMap, target: &Tensor<f64>) -> Result<f64> {
    pred.0.ensure_same_shape(target, "binary_cross_entropy")?;
    check_binary(target, "BCE target")?;
    Ok(bce_parts(&pred.0, target, false).0)
}

/// `1` where `probs >= threshold`, else `0`.
pub fn binarize(probs: &ProbabilityMap, threshold: f64) -> Result<Tensor<f64>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::param("threshold", format!("{threshold} not in (0, 1)")));
    }
    Ok(probs.0.map(|p| if p >= threshold { 1.0 } else { 0.0 }))
}

/// `(1 - Dice(soft, p)) + BCE(hard, p)` with `p = sigmoid(student_logits)`,
/// plus the gradient w.r.t. the student logits.
fn dice_bce_with_grad(student_logits: &Tensor<f64>, soft: &Tensor<f64>, hard: &Tensor<f64>) -> LossGrad {
    let pred = student_logits.map(sigmoid);
    let dice = dice_parts(&pred, soft, true);
    let (bce, bce_grad) = bce_parts(&pred, hard, true);
    let grad = Tensor::from_fn(pred.shape(), |i| {
        let p = pred.data()[i];
        (bce_grad[i] - dice.grad[i]) * p * (1.0 - p)
    });
    LossGrad {
        value: (1.0 - dice.mean) + bce,
        grad,
    }
}

fn check_pair(student: &Tensor<f64>, other: &Tensor<f64>, what: &str) -> Result<()> {
    student.ensure_same_shape(other, what)?;
    check_layout(student, what)?;
    check_finite(student, "student logits")
}

/// Distillation term against the temperature-softened, frozen teacher output.
pub fn kd_loss(student_logits: &Tensor<f64>, teacher_logits: &Tensor<f64>, temperature: f64) -> Result<f64> {
    kd_loss_with_grad(student_logits, teacher_logits, temperature).map(|l| l.value)
}

pub fn kd_loss_with_grad(
    student_logits: &Tensor<f64>,
    teacher_logits: &Tensor<f64>,
    temperature: f64,
) -> Result<LossGrad> {
    check_pair(student_logits, teacher_logits, "kd_loss")?;
    let target = SoftTarget::from_teacher_logits(teacher_logits, temperature)?;
    Ok(kd_loss_against(student_logits, &target))
}

/// Distillation term for an already-computed soft target.
pub fn kd_loss_against(student_logits: &Tensor<f64>, target: &SoftTarget) -> LossGrad {
    dice_bce_with_grad(student_logits, target.soft.tensor(), &target.hard)
}

/// Ground-truth term: `(1 - Dice(y, p)) + BCE(y, p)`.
pub fn gt_loss(student_logits: &Tensor<f64>, reference: &Tensor<f64>) -> Result<f64> {
    gt_loss_with_grad(student_logits, reference).map(|l| l.value)
}

pub fn gt_loss_with_grad(student_logits: &Tensor<f64>, reference: &Tensor<f64>) -> Result<LossGrad> {
    check_pair(student_logits, reference, "gt_loss")?;
    check_binary(reference, "reference segmentation")?;
    Ok(dice_bce_with_grad(student_logits, reference, reference))
}

fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax over the whole flattened activation.
pub fn flatten_normalize(bottleneck: &Tensor<f64>) -> Result<BottleneckDistribution> {
    check_finite(bottleneck, "bottleneck")?;
    if bottleneck.is_empty() {
        return Err(Error::contract("empty bottleneck"));
    }
    Ok(BottleneckDistribution {
        probs: softmax(bottleneck.data()),
    })
}

/// `KL(target || approx) = sum target * ln(target / approx)`.
pub fn kl_divergence(target: &BottleneckDistribution, approx: &BottleneckDistribution) -> Result<f64> {
    if target.probs.len() != approx.probs.len() {
        return Err(Error::contract(format!(
            "KL over distributions of length {} and {}",
            target.probs.len(),
            approx.probs.len()
        )));
    }
    Ok(target
        .probs
        .iter()
        .zip(&approx.probs)
        .filter(|(q, _)| **q > 0.0)
        .map(|(q, p)| q * (q.ln() - p.ln()))
        .sum())
}

/// Bottleneck alignment: per batch item, `KL(q || p)` with `q` the teacher's
/// and `p` the student's normalized bottleneck; averaged over the batch.
pub fn kl_bottleneck_loss(student_bn: &Tensor<f64>, teacher_bn: &Tensor<f64>) -> Result<f64> {
    kl_bottleneck_loss_with_grad(student_bn, teacher_bn).map(|l| l.value)
}

pub fn kl_bottleneck_loss_with_grad(student_bn: &Tensor<f64>, teacher_bn: &Tensor<f64>) -> Result<LossGrad> {
    if student_bn.len() != teacher_bn.len() || student_bn.batch() != teacher_bn.batch() {
        return Err(Error::contract(format!(
            "bottleneck element counts differ: {:?} vs {:?}",
            student_bn.shape(),
            teacher_bn.shape()
        )));
    }
    check_finite(student_bn, "student bottleneck")?;
    check_finite(teacher_bn, "teacher bottleneck")?;
    let batch = student_bn.batch();
    let mut grad = Tensor::zeros(student_bn.shape());
    let mut value = 0.0;
    for b in 0..batch {
        let p = softmax(student_bn.item(b));
        let q = softmax(teacher_bn.item(b));
        value += q
            .iter()
            .zip(&p)
            .filter(|(q, _)| **q > 0.0)
            .map(|(q, p)| q * (q.ln() - p.ln()))
            .sum::<f64>();
        // d/dz_j sum_k q_k (ln q_k - ln p_k) = p_j - q_j
        for (g, (pj, qj)) in grad.item_mut(b).iter_mut().zip(p.iter().zip(&q)) {
            *g = (pj - qj) / batch as f64;
        }
    }
    Ok(LossGrad {
        value: value / batch as f64,
        grad,
    })
}

/// `lambda * kd + (1 - lambda) * gt + alpha * kl` under the ablation switches.
///
/// With `enable_kd == false` the ground-truth term gets full weight, so the
/// result is `gt + alpha * kl` (or `gt` when KL is also off).
pub fn total_loss(kd: f64, gt: f64, kl: f64, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    let (ckd, cgt, ckl) = weights.coefficients();
    let mut total = cgt * gt;
    if weights.enable_kd {
        total += ckd * kd;
    }
    if weights.enable_kl {
        total += ckl * kl;
    }
    Ok(total)
}

/// Teacher outputs a student batch is distilled against.
#[derive(Clone, Debug)]
pub struct TeacherSignal<'a> {
    pub logits: &'a Tensor<f64>,
    pub bottleneck: &'a Tensor<f64>,
}

/// Result of evaluating the full objective on one batch.
#[derive(Clone, Debug)]
pub struct ObjectiveGrad {
    pub report: LossReport,
    pub grad_logits: Tensor<f64>,
    /// `None` when the KL term does not contribute.
    pub grad_bottleneck: Option<Tensor<f64>>,
}

/// Evaluates every term of the objective and its gradient w.r.t. the
/// student's logits and bottleneck.
///
/// Without a teacher this is the ground-truth loss alone and `kd`, `kl` are
/// reported as 0. Disabled terms are still evaluated for logging when a
/// teacher is present but contribute neither value nor gradient.
pub fn objective(
    student_logits: &Tensor<f64>,
    student_bn: &Tensor<f64>,
    reference: &Tensor<f64>,
    teacher: Option<TeacherSignal<'_>>,
    weights: &LossWeights,
) -> Result<ObjectiveGrad> {
    weights.validate()?;
    let gt = gt_loss_with_grad(student_logits, reference)?;
    let Some(teacher) = teacher else {
        return Ok(ObjectiveGrad {
            report: LossReport {
                kd: 0.0,
                kl: 0.0,
                gt: gt.value,
                total: gt.value,
            },
            grad_logits: gt.grad,
            grad_bottleneck: None,
        });
    };
    let kd = kd_loss_with_grad(student_logits, teacher.logits, weights.temperature)?;
    let kl = kl_bottleneck_loss_with_grad(student_bn, teacher.bottleneck)?;
    let total = total_loss(kd.value, gt.value, kl.value, weights)?;
    let (ckd, cgt, ckl) = weights.coefficients();
    let mut grad_logits = gt.grad;
    for (g, k) in grad_logits.data_mut().iter_mut().zip(kd.grad.data()) {
        *g = cgt * *g + ckd * k;
    }
    let grad_bottleneck = weights.enable_kl.then(|| kl.grad.map(|g| ckl * g));
    Ok(ObjectiveGrad {
        report: LossReport {
            kd: kd.value,
            kl: kl.value,
            gt: gt.value,
            total,
        },
        grad_logits,
        grad_bottleneck,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn pm(shape: &[usize], data: &[f64]) -> ProbabilityMap {
        ProbabilityMap::new(t(shape, data)).unwrap()
    }

    #[test]
    fn soften_zero_logits_is_half() {
        let out = temperature_soften(&Tensor::zeros(&[1, 3, 2, 2, 2]), 3.0).unwrap();
        assert!(out.tensor().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn soften_closed_form() {
        let out = temperature_soften(&t(&[1, 1, 1], &[2.0]), 5.0).unwrap();
        assert!((out.tensor().data()[0] - 0.598_687_660_112_452).abs() < 1e-12);
    }

    #[test]
    fn soften_rejects_bad_inputs() {
        let x = t(&[1, 1, 1], &[1.0]);
        assert!(matches!(temperature_soften(&x, 0.0), Err(Error::Parameter { .. })));
        assert!(matches!(temperature_soften(&x, -1.0), Err(Error::Parameter { .. })));
        let bad = t(&[1, 1, 1], &[f64::NAN]);
        assert!(matches!(temperature_soften(&bad, 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn soften_approaches_half_monotonically() {
        let x = t(&[1, 1, 2], &[3.0, -2.0]);
        let mut prev = [1.0, 0.0];
        for temp in [1.0, 2.0, 5.0, 10.0, 100.0, 1e4] {
            let v = temperature_soften(&x, temp).unwrap().into_tensor().into_data();
            assert!(v[0] < prev[0] && v[0] > 0.5);
            assert!(v[1] > prev[1] && v[1] < 0.5);
            prev = [v[0], v[1]];
        }
        assert!((prev[0] - 0.5).abs() < 1e-3 && (prev[1] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn dice_examples() {
        let ones = pm(&[1, 1, 4, 4, 4], &[1.0; 64]);
        assert!((soft_dice(&ones, &ones).unwrap() - 1.0).abs() < 1e-12);
        let a = pm(&[1, 1, 4], &[1.0, 1.0, 0.0, 0.0]);
        let b = pm(&[1, 1, 4], &[1.0, 0.0, 1.0, 0.0]);
        assert!((soft_dice(&a, &b).unwrap() - 0.5).abs() < 1e-5);
        let zeros = pm(&[1, 1, 4], &[0.0; 4]);
        assert_eq!(soft_dice(&zeros, &zeros).unwrap(), 1.0);
    }

    #[test]
    fn dice_shape_mismatch() {
        let a = pm(&[1, 1, 4], &[0.0; 4]);
        let b = pm(&[1, 2, 2], &[0.0; 4]);
        assert!(matches!(soft_dice(&a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn bce_examples() {
        let half = pm(&[1, 1, 3], &[0.5; 3]);
        let target = t(&[1, 1, 3], &[1.0, 0.0, 1.0]);
        assert!((binary_cross_entropy(&half, &target).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let p = pm(&[1, 1, 1], &[0.9]);
        let one = t(&[1, 1, 1], &[1.0]);
        assert!((binary_cross_entropy(&p, &one).unwrap() - 0.105_360_515_657_826_3).abs() < 1e-12);
        let exact = pm(&[1, 1, 3], &[1.0, 0.0, 1.0]);
        let v = binary_cross_entropy(&exact, &target).unwrap();
        assert!(v >= 0.0 && v <= -(1.0 - BCE_CLAMP).ln() + 1e-15);
    }

    #[test]
    fn bce_rejects_soft_target() {
        let p = pm(&[1, 1, 1], &[0.5]);
        assert!(matches!(
            binary_cross_entropy(&p, &t(&[1, 1, 1], &[0.3])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn binarize_examples() {
        let p = pm(&[1, 1, 3], &[0.2, 0.5, 0.8]);
        assert_eq!(binarize(&p, 0.5).unwrap().data(), &[0.0, 1.0, 1.0]);
        let z = pm(&[1, 1, 3], &[0.0; 3]);
        assert_eq!(binarize(&z, 0.5).unwrap().data(), &[0.0; 3]);
        let once = ProbabilityMap::new(binarize(&p, 0.5).unwrap()).unwrap();
        assert_eq!(binarize(&once, 0.5).unwrap(), *once.tensor());
        assert!(binarize(&p, 1.0).is_err());
    }

    #[test]
    fn kd_self_distillation_fixed_point() {
        let logits = t(&[1, 3, 2], &[12.0, -11.0, 10.0, -10.0, 15.0, -13.0]);
        assert!(kd_loss(&logits, &logits, 1.0).unwrap() < 1e-3);
    }

    #[test]
    fn kd_one_voxel_oracle() {
        // student logit 0.4 gives the same probability as the softened teacher
        let v = kd_loss(&t(&[1, 1, 1], &[0.4]), &t(&[1, 1, 1], &[2.0]), 5.0).unwrap();
        assert!((v - 0.914_324_240_715_261_4).abs() < 1e-9, "{v}");
    }

    #[test]
    fn gt_examples() {
        let reference = t(&[1, 1, 2, 2, 2], &[1.0; 8]);
        let v = gt_loss(&Tensor::zeros(&[1, 1, 2, 2, 2]), &reference).unwrap();
        assert!((v - 1.026_480_236_115_732).abs() < 1e-9, "{v}");
        let r = t(&[1, 1, 4], &[1.0, 0.0, 0.0, 1.0]);
        let saturated = t(&[1, 1, 4], &[10.0, -10.0, -12.0, 11.0]);
        assert!(gt_loss(&saturated, &r).unwrap() < 1e-3);
    }

    #[test]
    fn flatten_normalize_examples() {
        let d = flatten_normalize(&Tensor::filled(&[2, 2, 2], 3.5)).unwrap();
        assert!(d.probs().iter().all(|&p| (p - 0.125).abs() < 1e-15));
        let d = flatten_normalize(&t(&[2], &[0.0, 3f64.ln()])).unwrap();
        assert!((d.probs()[0] - 0.25).abs() < 1e-12 && (d.probs()[1] - 0.75).abs() < 1e-12);
        let shifted = flatten_normalize(&t(&[2], &[7.0, 7.0 + 3f64.ln()])).unwrap();
        for (a, b) in d.probs().iter().zip(shifted.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(flatten_normalize(&t(&[1], &[f64::INFINITY])).is_err());
    }

    #[test]
    fn kl_examples() {
        let teacher = t(&[1, 2], &[0.0, 0.0]);
        let student = t(&[1, 2], &[0.0, 3f64.ln()]);
        let v = kl_bottleneck_loss(&student, &teacher).unwrap();
        assert!((v - 0.143_841_036_225_890_5).abs() < 1e-12);
        let swapped = kl_bottleneck_loss(&teacher, &student).unwrap();
        assert!((swapped - 0.130_812_035_941_137).abs() < 1e-12);
        assert!(kl_bottleneck_loss(&student, &student).unwrap().abs() < 1e-9);
        assert!(kl_bottleneck_loss(&t(&[1, 3], &[0.0; 3]), &teacher).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 1.0, 0.1, &w).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(total_loss(0.3, 0.7, 0.2, &LossWeights::gt_only()).unwrap(), 0.7);
        let w0 = LossWeights { lambda: 0.0, ..w };
        assert_eq!(total_loss(0.3, 0.7, 0.2, &w0).unwrap(), 0.7 + 10.0 * 0.2);
        let gt_kl = LossWeights { enable_kd: false, ..w };
        assert_eq!(total_loss(5.0, 0.7, 0.2, &gt_kl).unwrap(), 0.7 + 10.0 * 0.2);
    }

    #[test]
    fn weights_validation() {
        let bad = LossWeights {
            lambda: 1.5,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Parameter { name: "lambda", .. })));
        let bad = LossWeights {
            alpha: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossWeights {
            temperature: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn objective_without_teacher_is_gt() {
        let logits = t(&[1, 1, 2], &[0.3, -1.2]);
        let bn = t(&[1, 2], &[0.0, 1.0]);
        let y = t(&[1, 1, 2], &[1.0, 0.0]);
        let out = objective(&logits, &bn, &y, None, &LossWeights::default()).unwrap();
        assert_eq!(out.report.total, gt_loss(&logits, &y).unwrap());
        assert!(out.grad_bottleneck.is_none());
    }
}
