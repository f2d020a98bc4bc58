//! Two-modality synthetic tumors.
//!
//! Each subject is a noisy brain ellipsoid (background exactly zero) holding a
//! whole-tumor ellipsoid with a tumor-core ellipsoid inside it; the outer shell
//! of the core is enhancing tumor, the rest of the core is necrosis. Flair
//! shows only the whole tumor as a uniform hyperintensity. T1ce shows the
//! enhancing ring bright and the necrotic center dark, with edema invisible.
//! A Flair-only model therefore sees the whole tumor but can only guess where
//! the core sits inside it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabelVolume, Modality, ModalityStack};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Channel order of generated stacks.
pub const SYNTH_MODALITIES: [Modality; 2] = [Modality::Flair, Modality::T1ce];

const LABEL_NECROSIS: u8 = 1;
const LABEL_EDEMA: u8 = 2;
const LABEL_ENHANCING: u8 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dims: [usize; 3],
    pub seed: u64,
    /// Standard deviation of additive Gaussian noise, relative to tissue intensity 1.
    pub noise: f64,
    /// Normalized radius (in core units) beyond which core voxels are enhancing.
    pub ring_start: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dims: [32; 3],
            seed: 0,
            noise: 0.2,
            ring_start: 0.65,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Squared normalized distance; < 1 inside.
    fn rho2(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum()
    }
}

/// Generates subject `index` of the stream defined by `cfg.seed`.
pub fn synth_subject(cfg: &SynthConfig, index: usize, subject_id: &str) -> (ModalityStack, LabelVolume) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let dims = cfg.dims;
    let size = dims.map(|d| d as f64);
    let mid = size.map(|s| (s - 1.0) / 2.0);

    let brain = Ellipsoid {
        center: mid,
        radii: size.map(|s| s * rng.random_range(0.40..0.47)),
    };
    // whole tumor somewhere in the inner part of the brain
    let wt_radii = size.map(|s| s * rng.random_range(0.13..0.22));
    let wt = Ellipsoid {
        center: std::array::from_fn(|a| mid[a] + rng.random_range(-0.35..0.35) * (brain.radii[a] - wt_radii[a])),
        radii: wt_radii,
    };
    let tc_radii = wt.radii.map(|r| r * rng.random_range(0.40..0.65));
    let tc = Ellipsoid {
        center: std::array::from_fn(|a| wt.center[a] + rng.random_range(-0.8..0.8) * (wt.radii[a] - tc_radii[a])),
        radii: tc_radii,
    };
    let gain_a = rng.random_range(0.8..1.25);
    let gain_b = rng.random_range(0.8..1.25);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite noise");
    let ring2 = cfg.ring_start * cfg.ring_start;

    let n = dims.iter().product::<usize>();
    let mut voxels = Tensor::<f32>::zeros(&[2, dims[0], dims[1], dims[2]]);
    let mut labels = Tensor::<u8>::zeros(&[1, dims[0], dims[1], dims[2]]);
    let (flair, t1ce) = voxels.data_mut().split_at_mut(n);
    let lab = labels.data_mut();
    let mut i = 0;
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z as f64, y as f64, x as f64];
                if brain.rho2(p) < 1.0 {
                    let in_wt = wt.rho2(p) < 1.0;
                    let core = tc.rho2(p);
                    let label = match (in_wt, core < 1.0) {
                        (true, true) if core >= ring2 => LABEL_ENHANCING,
                        (true, true) => LABEL_NECROSIS,
                        (true, false) => LABEL_EDEMA,
                        _ => 0,
                    };
                    let a = if in_wt { 2.0 } else { 1.0 };
                    let b = match label {
                        LABEL_ENHANCING => 2.2,
                        LABEL_NECROSIS => 0.35,
                        _ => 1.0,
                    };
                    lab[i] = label;
                    // clamp keeps tissue strictly nonzero so the zero set is exactly the background
                    flair[i] = ((a + noise.sample(&mut rng)) * gain_a).max(0.01) as f32;
                    t1ce[i] = ((b + noise.sample(&mut rng)) * gain_b).max(0.01) as f32;
                }
                i += 1;
            }
        }
    }
    let stack = ModalityStack::new(voxels, SYNTH_MODALITIES.to_vec(), subject_id).expect("two channels");
    (stack, labels)
}

/// `n_subjects` cubic subjects of side `size`, ids `synth_000`, `synth_001`, ...
pub fn synth_generate(n_subjects: usize, size: usize, seed: u64) -> Result<Vec<(ModalityStack, LabelVolume)>> {
    if size < 8 || size % 8 != 0 {
        return Err(Error::Config(format!(
            "synthetic size must be a positive multiple of 8, got {size}"
        )));
    }
    if n_subjects == 0 {
        return Err(Error::Config("synthetic dataset needs at least one subject".into()));
    }
    let cfg = SynthConfig {
        dims: [size; 3],
        seed,
        ..SynthConfig::default()
    };
    Ok((0..n_subjects)
        .map(|i| synth_subject(&cfg, i, &format!("synth_{i:03}")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::regions_from_labels;

    #[test]
    fn deterministic_per_seed() {
        let a = synth_generate(3, 16, 7).unwrap();
        let b = synth_generate(3, 16, 7).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(3, 16, 8).unwrap();
        assert_ne!(a[0].0.voxels, c[0].0.voxels);
        assert_ne!(a[0].0.voxels, a[1].0.voxels);
    }

    #[test]
    fn targets_nested_and_nonempty() {
        for (stack, labels) in synth_generate(12, 32, 1).unwrap() {
            let r = regions_from_labels(&labels).unwrap();
            assert!(r.is_nested());
            let [wt, tc, et] = r.counts();
            assert!(wt > tc && tc > et && et > 0, "{} {wt} {tc} {et}", stack.subject_id);
        }
    }

    #[test]
    fn background_is_exact_zero_and_shared() {
        let (stack, _) = synth_subject(&SynthConfig::default(), 0, "s");
        let n = stack.voxels.item_len();
        let (a, b) = stack.voxels.data().split_at(n);
        assert!(a.iter().zip(b).all(|(x, y)| (*x == 0.0) == (*y == 0.0)));
        assert!(a.iter().any(|&v| v == 0.0) && a.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn flair_blind_to_core_boundary() {
        // inside the whole tumor, flair means over core and edema agree within noise
        let cfg = SynthConfig {
            noise: 0.0,
            ..SynthConfig::default()
        };
        let (stack, labels) = synth_subject(&cfg, 2, "s");
        let flair = stack.voxels.item(0);
        let vals = |want: &[u8]| -> Vec<f32> {
            labels
                .data()
                .iter()
                .zip(flair)
                .filter(|(l, _)| want.contains(l))
                .map(|(_, &v)| v)
                .collect()
        };
        let core = vals(&[1, 4]);
        let edema = vals(&[2]);
        assert!(!core.is_empty() && !edema.is_empty());
        assert!(core.iter().chain(&edema).all(|&v| v == core[0]));
    }

    #[test]
    fn invalid_sizes() {
        assert!(matches!(synth_generate(2, 12, 0), Err(Error::Config(_))));
        assert!(matches!(synth_generate(0, 16, 0), Err(Error::Config(_))));
    }

    #[test]
    fn generates_quickly() {
        let t = std::time::Instant::now();
        let set = synth_generate(60, 32, 3).unwrap();
        assert_eq!(set.len(), 60);
        assert!(t.elapsed().as_secs_f64() < 60.0);
    }
}
