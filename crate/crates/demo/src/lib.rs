//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Three operations: render slices of a synthetic subject, evaluate the
//! distillation objective on that subject for chosen weights, and plot the
//! temperature-softened sigmoid.

use kdseg::data::{prepare_sample, synth_subject, Preprocess, Sample, SynthConfig};
use kdseg::losses::{objective, sigmoid, LossReport, LossWeights, TeacherSignal};
use kdseg::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wasm_bindgen::prelude::*;

const REGION_COLORS: [[u8; 3]; 3] = [[255, 214, 10], [255, 120, 40], [220, 30, 60]];

/// One generated subject held in memory between calls.
#[wasm_bindgen]
pub struct Subject {
    sample: Sample,
}

#[wasm_bindgen]
impl Subject {
    /// Subject `index` of the synthetic stream `seed`, `size`³ voxels.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, index: usize, size: usize) -> Result<Subject, JsError> {
        if size < 8 || size % 8 != 0 {
            return Err(JsError::new("size must be a positive multiple of 8"));
        }
        let cfg = SynthConfig {
            dims: [size; 3],
            seed,
            ..SynthConfig::default()
        };
        let (stack, labels) = synth_subject(&cfg, index, &format!("synth_{index:03}"));
        let sample = prepare_sample(&stack, &labels, &Preprocess::identity()).map_err(js)?;
        Ok(Subject { sample })
    }

    pub fn size(&self) -> usize {
        self.sample.dims()[0]
    }

    /// RGBA pixels of axial slice `z`: grey intensities of `channel`
    /// (0 = Flair, 1 = T1ce) with the selected regions blended on top.
    /// `regions` is a bit mask: 1 = WT, 2 = TC, 4 = ET.
    pub fn slice_rgba(&self, channel: usize, z: usize, regions: u8) -> Result<Vec<u8>, JsError> {
        let [d, h, w] = self.sample.dims();
        if channel >= self.sample.image.shape()[0] || z >= d {
            return Err(JsError::new("slice out of range"));
        }
        let plane = h * w;
        let vol = d * plane;
        let image = &self.sample.image.data()[channel * vol + z * plane..][..plane];
        let (lo, hi) = image.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        let span = (hi - lo).max(1e-6);
        let masks = self.sample.target.regions.data();
        let mut out = Vec::with_capacity(plane * 4);
        for i in 0..plane {
            let g = ((image[i] - lo) / span * 255.0) as f64;
            let mut rgb = [g; 3];
            for (r, color) in REGION_COLORS.iter().enumerate() {
                if regions & (1 << r) != 0 && masks[r * vol + z * plane + i] == 1 {
                    for c in 0..3 {
                        rgb[c] = 0.45 * rgb[c] + 0.55 * f64::from(color[c]);
                    }
                }
            }
            out.extend(rgb.map(|v| v as u8));
            out.push(255);
        }
        Ok(out)
    }

    /// Foreground voxel counts as `[WT, TC, ET]`.
    pub fn region_counts(&self) -> Vec<u32> {
        self.sample.target.counts().iter().map(|&c| c as u32).collect()
    }

    /// Loss terms for a simulated teacher and student on this subject, as JSON
    /// `{kd, kl, gt, total}`.
    ///
    /// The teacher's logits are `confidence·(2y−1)` plus noise. The student
    /// interpolates between the teacher (`agreement` = 1) and independent
    /// noise (`agreement` = 0), at the logits and at the bottleneck.
    #[allow(clippy::too_many_arguments)]
    pub fn explore_losses(
        &self,
        lambda: f64,
        temperature: f64,
        alpha: f64,
        enable_kd: bool,
        enable_kl: bool,
        confidence: f64,
        agreement: f64,
        seed: u64,
    ) -> Result<String, JsError> {
        let weights = LossWeights {
            lambda,
            alpha,
            temperature,
            enable_kd,
            enable_kl,
        };
        let reference = self.sample.target.regions.map(f64::from);
        let shape: Vec<usize> = std::iter::once(1).chain(reference.shape().iter().copied()).collect();
        let reference = reference.reshape(&shape).map_err(js)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).expect("unit normal");
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| noise.sample(&mut rng)).collect() };

        let n = reference.len();
        let teacher_logits: Vec<f64> = reference
            .data()
            .iter()
            .zip(draw(n))
            .map(|(&y, e)| confidence * (2.0 * y - 1.0) + e)
            .collect();
        let student_logits: Vec<f64> = teacher_logits
            .iter()
            .zip(draw(n))
            .map(|(&t, e)| agreement * t + (1.0 - agreement) * 2.0 * e)
            .collect();
        let bn_shape = [1, 8, 4, 4, 4];
        let bn_len: usize = bn_shape.iter().product();
        let teacher_bn = draw(bn_len);
        let student_bn: Vec<f64> = teacher_bn
            .iter()
            .zip(draw(bn_len))
            .map(|(&t, e)| agreement * t + (1.0 - agreement) * e)
            .collect();

        let teacher_logits = Tensor::new(&shape, teacher_logits).map_err(js)?;
        let student_logits = Tensor::new(&shape, student_logits).map_err(js)?;
        let teacher_bn = Tensor::new(&bn_shape, teacher_bn).map_err(js)?;
        let student_bn = Tensor::new(&bn_shape, student_bn).map_err(js)?;
        let out = objective(
            &student_logits,
            &student_bn,
            &reference,
            Some(TeacherSignal {
                logits: &teacher_logits,
                bottleneck: &teacher_bn,
            }),
            &weights,
        )
        .map_err(js)?;
        Ok(report_json(&out.report))
    }
}

fn report_json(r: &LossReport) -> String {
    serde_json::json!({ "kd": r.kd, "kl": r.kl, "gt": r.gt, "total": r.total }).to_string()
}

/// `sigmoid(z / T)` at `points` evenly spaced logits in `[-span, span]`.
#[wasm_bindgen]
pub fn soften_curve(temperature: f64, span: f64, points: usize) -> Result<Vec<f64>, JsError> {
    if !(temperature > 0.0) || points < 2 {
        return Err(JsError::new("temperature must be > 0 and points >= 2"));
    }
    let step = 2.0 * span / (points - 1) as f64;
    Ok((0..points)
        .map(|i| sigmoid((-span + i as f64 * step) / temperature))
        .collect())
}

fn js(e: kdseg::Error) -> JsError {
    JsError::new(&e.to_string())
}
