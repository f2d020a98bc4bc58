//! Subject volumes, preprocessing, region targets and fold splitting.
//!
//! All volumes are channel-first tensors `(C, D, H, W)` in the index order of
//! the source files. The fixed pipeline per subject is
//! `load -> normalize_nonzero -> central_crop -> regions_from_labels -> subsample`,
//! with `random_flip` applied per epoch during training only.

mod folds;
#[cfg(feature = "nifti")]
mod nifti_io;
mod preprocess;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use folds::{split_folds, FoldSplit};
#[cfg(feature = "nifti")]
pub use nifti_io::{
    load_dataset, load_subject, read_dataset_modalities, write_dataset, write_subject, DATASET_MANIFEST,
};
pub use preprocess::{
    central_crop, normalize_nonzero, random_flip, regions_from_labels, subsample_image, subsample_labels, FlipAxes,
};
pub use synth::{synth_generate, synth_subject, SynthConfig, SYNTH_MODALITIES};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of tumor regions: whole tumor, tumor core, enhancing tumor.
pub const REGION_COUNT: usize = 3;
pub const REGION_NAMES: [&str; REGION_COUNT] = ["WT", "TC", "ET"];

/// An MR acquisition contrast.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    T1,
    T2,
    T1ce,
    Flair,
}

impl Modality {
    /// Canonical BraTS channel order.
    pub const ALL: [Modality; 4] = [Modality::T1, Modality::T2, Modality::T1ce, Modality::Flair];

    /// Suffix used in `<subject>_<suffix>.nii.gz`.
    pub fn file_suffix(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T2 => "t2",
            Modality::T1ce => "t1ce",
            Modality::Flair => "flair",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "T1",
            Modality::T2 => "T2",
            Modality::T1ce => "T1ce",
            Modality::Flair => "Flair",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown modality `{s}` (expected T1, T2, T1ce or Flair)")))
    }
}

/// Co-registered modalities of one subject, `(N, D, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityStack {
    pub voxels: Tensor<f32>,
    pub modalities: Vec<Modality>,
    pub subject_id: String,
}

impl ModalityStack {
    pub fn new(voxels: Tensor<f32>, modalities: Vec<Modality>, subject_id: impl Into<String>) -> Result<Self> {
        if voxels.shape().len() != 4 || voxels.shape()[0] != modalities.len() {
            return Err(Error::contract(format!(
                "stack of shape {:?} does not hold {} modalities",
                voxels.shape(),
                modalities.len()
            )));
        }
        Ok(ModalityStack {
            voxels,
            modalities,
            subject_id: subject_id.into(),
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[1], s[2], s[3]]
    }
}

/// Raw integer segmentation labels, `(1, D, H, W)`.
pub type LabelVolume = Tensor<u8>;

/// Binary region maps `(3, D, H, W)` ordered (WT, TC, ET).
#[derive(Clone, Debug, PartialEq)]
pub struct RegionTarget {
    pub regions: Tensor<u8>,
}

impl RegionTarget {
    /// `ET ⊆ TC ⊆ WT` at every voxel.
    pub fn is_nested(&self) -> bool {
        let n = self.regions.item_len();
        let (wt, rest) = self.regions.data().split_at(n);
        let (tc, et) = rest.split_at(n);
        wt.iter().zip(tc).zip(et).all(|((&w, &t), &e)| e <= t && t <= w)
    }

    /// Foreground voxel count per region.
    pub fn counts(&self) -> [usize; REGION_COUNT] {
        let mut out = [0; REGION_COUNT];
        for (r, c) in out.iter_mut().enumerate() {
            *c = self.regions.item(r).iter().filter(|&&v| v == 1).count();
        }
        out
    }
}

/// Preprocessing applied once per subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    /// Central crop size; `None` keeps the full volume.
    pub crop: Option<[usize; 3]>,
    /// Integer subsampling factor (1 = none).
    pub subsample: usize,
}

impl Preprocess {
    /// 128³ central crop then factor-2 subsampling to 64³.
    pub fn brats() -> Self {
        Preprocess {
            crop: Some([128; 3]),
            subsample: 2,
        }
    }

    pub fn identity() -> Self {
        Preprocess {
            crop: None,
            subsample: 1,
        }
    }
}

/// A preprocessed training/evaluation sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub subject_id: String,
    /// `(N, D, H, W)` normalized intensities.
    pub image: Tensor<f32>,
    pub target: RegionTarget,
}

impl Sample {
    pub fn dims(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[1], s[2], s[3]]
    }
}

/// Preprocessed samples sharing one modality layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub modalities: Vec<Modality>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.subject_id.clone()).collect()
    }

    pub fn channel_of(&self, modality: Modality) -> Result<usize> {
        self.modalities.iter().position(|&m| m == modality).ok_or_else(|| {
            Error::Config(format!(
                "modality {modality} not present in dataset (has {})",
                self.modalities.iter().map(|m| m.name()).collect::<Vec<_>>().join(", ")
            ))
        })
    }

    /// Keeps only the image channels of `modalities`, in the given order.
    pub fn select(&self, modalities: &[Modality]) -> Result<Dataset> {
        let channels = modalities
            .iter()
            .map(|&m| self.channel_of(m))
            .collect::<Result<Vec<_>>>()?;
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let [d, h, w] = s.dims();
                let mut data = Vec::with_capacity(channels.len() * d * h * w);
                for &c in &channels {
                    data.extend_from_slice(s.image.item(c));
                }
                Ok(Sample {
                    subject_id: s.subject_id.clone(),
                    image: Tensor::new(&[channels.len(), d, h, w], data)?,
                    target: s.target.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            modalities: modalities.to_vec(),
            samples,
        })
    }

    /// Samples whose subject ids are in `ids`, in dataset order.
    pub fn subset(&self, ids: &[String]) -> Dataset {
        Dataset {
            modalities: self.modalities.clone(),
            samples: self
                .samples
                .iter()
                .filter(|s| ids.contains(&s.subject_id))
                .cloned()
                .collect(),
        }
    }
}

/// Runs the per-subject pipeline (without augmentation).
pub fn prepare_sample(stack: &ModalityStack, labels: &LabelVolume, pre: &Preprocess) -> Result<Sample> {
    if labels.shape()[1..] != stack.voxels.shape()[1..] {
        return Err(Error::contract(format!(
            "labels {:?} and images {:?} are not co-registered",
            labels.shape(),
            stack.voxels.shape()
        )));
    }
    let normalized = normalize_nonzero(stack)?;
    let (mut image, mut labels) = (normalized.voxels, labels.clone());
    if let Some(size) = pre.crop {
        image = central_crop(&image, size)?;
        labels = central_crop(&labels, size)?;
    }
    let regions = regions_from_labels(&labels)?;
    let image = subsample_image(&image, pre.subsample)?;
    let regions = RegionTarget {
        regions: subsample_labels(&regions.regions, pre.subsample)?,
    };
    Ok(Sample {
        subject_id: stack.subject_id.clone(),
        image,
        target: regions,
    })
}

/// Small preprocessed synthetic datasets for unit tests.
#[cfg(test)]
pub(crate) fn tiny_dataset(n: usize, size: usize, seed: u64) -> Dataset {
    let samples = synth_generate(n, size, seed)
        .unwrap()
        .iter()
        .map(|(s, l)| prepare_sample(s, l, &Preprocess::identity()).unwrap())
        .collect();
    Dataset {
        modalities: SYNTH_MODALITIES.to_vec(),
        samples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modality_parsing() {
        assert_eq!("t1ce".parse::<Modality>().unwrap(), Modality::T1ce);
        assert_eq!("FLAIR".parse::<Modality>().unwrap(), Modality::Flair);
        assert!("pd".parse::<Modality>().is_err());
    }

    #[test]
    fn prepare_sample_shapes_and_nesting() {
        let cfg = SynthConfig {
            dims: [20, 24, 20],
            ..SynthConfig::default()
        };
        let (stack, labels) = synth_subject(&cfg, 3, "s3");
        let pre = Preprocess {
            crop: Some([16, 16, 16]),
            subsample: 2,
        };
        let sample = prepare_sample(&stack, &labels, &pre).unwrap();
        assert_eq!(sample.image.shape(), &[2, 8, 8, 8]);
        assert_eq!(sample.target.regions.shape(), &[3, 8, 8, 8]);
        assert!(sample.target.is_nested());
    }
}
