use rand::Rng;

use super::{ModalityStack, RegionTarget, REGION_COUNT};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn dims4<T: Copy>(v: &Tensor<T>) -> Result<(usize, [usize; 3])> {
    match *v.shape() {
        [c, d, h, w] => Ok((c, [d, h, w])),
        _ => Err(Error::contract(format!(
            "expected a (C, D, H, W) volume, got {:?}",
            v.shape()
        ))),
    }
}

/// Z-scores each modality over its nonzero voxels; zeros stay exactly zero.
pub fn normalize_nonzero(stack: &ModalityStack) -> Result<ModalityStack> {
    let mut out = stack.clone();
    for (m, modality) in stack.modalities.iter().enumerate() {
        let channel = out.voxels.item_mut(m);
        let support: Vec<f64> = channel.iter().filter(|&&v| v != 0.0).map(|&v| f64::from(v)).collect();
        let n = support.len() as f64;
        let mean = support.iter().sum::<f64>() / n.max(1.0);
        let var = support.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.max(1.0);
        if support.len() < 2 || var <= 0.0 {
            return Err(Error::DegenerateInput(format!(
                "{} of subject {} has a constant or empty nonzero region",
                modality, stack.subject_id
            )));
        }
        let std = var.sqrt();
        for v in channel.iter_mut().filter(|v| **v != 0.0) {
            *v = ((f64::from(*v) - mean) / std) as f32;
        }
    }
    Ok(out)
}

/// Centered crop with offsets `floor((dim - size) / 2)` per axis.
pub fn central_crop<T: Copy + Default>(volume: &Tensor<T>, size: [usize; 3]) -> Result<Tensor<T>> {
    let (c, dims) = dims4(volume)?;
    if dims.iter().zip(&size).any(|(d, s)| d < s) {
        return Err(Error::contract(format!("cannot crop {dims:?} to {size:?}")));
    }
    let off: Vec<usize> = dims.iter().zip(&size).map(|(d, s)| (d - s) / 2).collect();
    let mut out = Tensor::zeros(&[c, size[0], size[1], size[2]]);
    let src = volume.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for z in 0..size[0] {
            for y in 0..size[1] {
                let s = ((ch * dims[0] + z + off[0]) * dims[1] + y + off[1]) * dims[2] + off[2];
                let d = ((ch * size[0] + z) * size[1] + y) * size[2];
                dst[d..d + size[2]].copy_from_slice(&src[s..s + size[2]]);
            }
        }
    }
    Ok(out)
}

/// Which spatial axes to mirror.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlipAxes(pub [bool; 3]);

impl FlipAxes {
    /// Each axis independently with probability 0.5.
    pub fn sample(rng: &mut impl Rng) -> Self {
        FlipAxes([rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)])
    }

    pub fn none() -> Self {
        FlipAxes([false; 3])
    }

    pub fn apply<T: Copy + Default>(&self, volume: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, [d, h, w]) = dims4(volume)?;
        if !self.0.iter().any(|&f| f) {
            return Ok(volume.clone());
        }
        let src = volume.data();
        let mut out = Tensor::zeros(volume.shape());
        let dst = out.data_mut();
        let pick = |i: usize, n: usize, flip: bool| if flip { n - 1 - i } else { i };
        for ch in 0..c {
            for z in 0..d {
                let sz = pick(z, d, self.0[0]);
                for y in 0..h {
                    let sy = pick(y, h, self.0[1]);
                    let s = ((ch * d + sz) * h + sy) * w;
                    let o = ((ch * d + z) * h + y) * w;
                    for x in 0..w {
                        dst[o + x] = src[s + pick(x, w, self.0[2])];
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Applies one random set of flips to both image and target.
pub fn random_flip(
    image: &Tensor<f32>,
    target: &RegionTarget,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, RegionTarget)> {
    let flips = FlipAxes::sample(rng);
    Ok((
        flips.apply(image)?,
        RegionTarget {
            regions: flips.apply(&target.regions)?,
        },
    ))
}

fn check_divisible(dims: [usize; 3], factor: usize) -> Result<()> {
    if factor == 0 || dims.iter().any(|d| d % factor != 0) {
        return Err(Error::contract(format!(
            "dims {dims:?} not divisible by subsampling factor {factor}"
        )));
    }
    Ok(())
}

/// Mean-pools each `factor^3` window.
pub fn subsample_image(volume: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let (c, dims) = dims4(volume)?;
    check_divisible(dims, factor)?;
    if factor == 1 {
        return Ok(volume.clone());
    }
    let od = dims.map(|d| d / factor);
    let mut out = Tensor::<f32>::zeros(&[c, od[0], od[1], od[2]]);
    let src = volume.data();
    let norm = 1.0 / (factor * factor * factor) as f64;
    let dst = out.data_mut();
    for ch in 0..c {
        for z in 0..od[0] {
            for y in 0..od[1] {
                for x in 0..od[2] {
                    let mut acc = 0.0f64;
                    for a in 0..factor {
                        for b in 0..factor {
                            let row =
                                ((ch * dims[0] + z * factor + a) * dims[1] + y * factor + b) * dims[2] + x * factor;
                            acc += src[row..row + factor].iter().map(|&v| f64::from(v)).sum::<f64>();
                        }
                    }
                    dst[((ch * od[0] + z) * od[1] + y) * od[2] + x] = (acc * norm) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Stride-`factor` nearest-neighbour picking; keeps label volumes discrete.
pub fn subsample_labels(volume: &Tensor<u8>, factor: usize) -> Result<Tensor<u8>> {
    let (c, dims) = dims4(volume)?;
    check_divisible(dims, factor)?;
    let od = dims.map(|d| d / factor);
    let src = volume.data();
    let mut out = Tensor::zeros(&[c, od[0], od[1], od[2]]);
    let dst = out.data_mut();
    for ch in 0..c {
        for z in 0..od[0] {
            for y in 0..od[1] {
                for x in 0..od[2] {
                    dst[((ch * od[0] + z) * od[1] + y) * od[2] + x] =
                        src[((ch * dims[0] + z * factor) * dims[1] + y * factor) * dims[2] + x * factor];
                }
            }
        }
    }
    Ok(out)
}

/// BraTS label convention: WT = {1, 2, 4}, TC = {1, 4}, ET = {4}.
pub fn regions_from_labels(labels: &Tensor<u8>) -> Result<RegionTarget> {
    let (c, [d, h, w]) = dims4(labels)?;
    if c != 1 {
        return Err(Error::contract(format!("label volume must have one channel, got {c}")));
    }
    let n = d * h * w;
    let mut regions = Tensor::zeros(&[REGION_COUNT, d, h, w]);
    let out = regions.data_mut();
    for (i, &l) in labels.data().iter().enumerate() {
        let (wt, tc, et) = match l {
            0 => (0, 0, 0),
            1 => (1, 1, 0),
            2 => (1, 0, 0),
            4 => (1, 1, 1),
            other => return Err(Error::contract(format!("label {other} outside {{0, 1, 2, 4}}"))),
        };
        out[i] = wt;
        out[n + i] = tc;
        out[2 * n + i] = et;
    }
    Ok(RegionTarget { regions })
}
