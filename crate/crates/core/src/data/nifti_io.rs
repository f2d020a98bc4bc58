//! Per-subject NIfTI layout: `<root>/<id>/<id>_<modality>.nii[.gz]` plus `<id>_seg.nii[.gz]`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use super::{prepare_sample, Dataset, LabelVolume, Modality, ModalityStack, Preprocess};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optional root-level file naming the modalities present in a dataset.
pub const DATASET_MANIFEST: &str = "dataset.toml";

#[derive(Serialize, Deserialize)]
struct Manifest {
    modalities: Vec<Modality>,
}

fn find_volume(dir: &Path, id: &str, suffix: &str) -> Option<PathBuf> {
    ["nii.gz", "nii"]
        .iter()
        .map(|ext| dir.join(format!("{id}_{suffix}.{ext}")))
        .find(|p| p.is_file())
}

fn read_volume(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let ingest = |reason: String| Error::Ingestion {
        path: path.to_path_buf(),
        reason,
    };
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| ingest(e.to_string()))?;
    let arr = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| ingest(e.to_string()))?;
    // trailing singleton dims (time, etc.) are tolerated
    let mut shape = arr.shape().to_vec();
    while shape.len() > 3 && shape.last() == Some(&1) {
        shape.pop();
    }
    if shape.len() != 3 {
        return Err(ingest(format!("expected a 3-D volume, got shape {:?}", arr.shape())));
    }
    Ok((shape, arr.iter().copied().collect()))
}

fn subject_id(dir: &Path) -> Result<String> {
    dir.file_name()
        .and_then(|n| n.to_str())
        .map(str::to_owned)
        .ok_or_else(|| Error::Ingestion {
            path: dir.to_path_buf(),
            reason: "subject directory has no usable name".into(),
        })
}

/// Reads one subject directory; the stack follows the canonical order of `modalities`.
pub fn load_subject(dir: &Path, modalities: &[Modality]) -> Result<(ModalityStack, LabelVolume)> {
    let id = subject_id(dir)?;
    let mut ordered = modalities.to_vec();
    ordered.sort();
    ordered.dedup();
    let missing: Vec<&str> = ordered
        .iter()
        .filter(|m| find_volume(dir, &id, m.file_suffix()).is_none())
        .map(|m| m.name())
        .collect();
    let seg_path = find_volume(dir, &id, "seg");
    if !missing.is_empty() || seg_path.is_none() {
        let mut names = missing;
        if seg_path.is_none() {
            names.push("seg");
        }
        return Err(Error::Ingestion {
            path: dir.to_path_buf(),
            reason: format!("missing volumes: {}", names.join(", ")),
        });
    }
    let seg_path = seg_path.expect("checked above");
    let (dims, raw_labels) = read_volume(&seg_path)?;
    let mut labels = Vec::with_capacity(raw_labels.len());
    for v in raw_labels {
        match v {
            0.0 | 1.0 | 2.0 | 4.0 => labels.push(v as u8),
            other => {
                return Err(Error::Ingestion {
                    path: seg_path,
                    reason: format!("label value {other} outside {{0, 1, 2, 4}}"),
                })
            }
        }
    }
    let mut voxels = Vec::with_capacity(labels.len() * ordered.len());
    for m in &ordered {
        let path = find_volume(dir, &id, m.file_suffix()).expect("checked above");
        let (shape, data) = read_volume(&path)?;
        if shape != dims {
            return Err(Error::Ingestion {
                path,
                reason: format!("shape {shape:?} differs from label shape {dims:?}"),
            });
        }
        voxels.extend(data);
    }
    let stack = ModalityStack::new(
        Tensor::new(&[ordered.len(), dims[0], dims[1], dims[2]], voxels)?,
        ordered,
        id,
    )?;
    Ok((stack, Tensor::new(&[1, dims[0], dims[1], dims[2]], labels)?))
}

fn write_f32(path: &Path, dims: [usize; 3], data: Vec<f32>) -> Result<()> {
    let arr = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| Error::contract(e.to_string()))?;
    WriterOptions::new(path)
        .write_nifti(&arr)
        .map_err(|e| writer_err(path, e))
}

fn write_u8(path: &Path, dims: [usize; 3], data: Vec<u8>) -> Result<()> {
    let arr = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| Error::contract(e.to_string()))?;
    WriterOptions::new(path)
        .write_nifti(&arr)
        .map_err(|e| writer_err(path, e))
}

fn writer_err(path: &Path, e: nifti::NiftiError) -> Error {
    match e {
        nifti::NiftiError::Io(io) => Error::Io(io),
        other => Error::Ingestion {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

/// Writes `<root>/<id>/` in the layout read by [`load_subject`]; returns the subject directory.
pub fn write_subject(root: &Path, stack: &ModalityStack, labels: &LabelVolume, compress: bool) -> Result<PathBuf> {
    let id = &stack.subject_id;
    let dir = root.join(id);
    fs::create_dir_all(&dir)?;
    let ext = if compress { "nii.gz" } else { "nii" };
    let dims = stack.dims();
    for (c, m) in stack.modalities.iter().enumerate() {
        let path = dir.join(format!("{id}_{}.{ext}", m.file_suffix()));
        write_f32(&path, dims, stack.voxels.item(c).to_vec())?;
    }
    write_u8(&dir.join(format!("{id}_seg.{ext}")), dims, labels.data().to_vec())?;
    Ok(dir)
}

/// Modalities declared by the manifest, or all four when there is none.
pub fn read_dataset_modalities(root: &Path) -> Result<Vec<Modality>> {
    let path = root.join(DATASET_MANIFEST);
    if !path.is_file() {
        return Ok(Modality::ALL.to_vec());
    }
    let text = fs::read_to_string(&path)?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Ingestion {
        path,
        reason: e.to_string(),
    })?;
    Ok(manifest.modalities)
}

/// Writes the manifest and every subject under `root`.
pub fn write_dataset(root: &Path, subjects: &[(ModalityStack, LabelVolume)], compress: bool) -> Result<()> {
    fs::create_dir_all(root)?;
    if let Some((first, _)) = subjects.first() {
        let manifest = Manifest {
            modalities: first.modalities.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(root.join(DATASET_MANIFEST), text)?;
    }
    for (stack, labels) in subjects {
        write_subject(root, stack, labels, compress)?;
    }
    Ok(())
}

/// Loads and preprocesses every subject directory under `root`, sorted by name.
pub fn load_dataset(root: &Path, pre: &Preprocess) -> Result<Dataset> {
    let modalities = read_dataset_modalities(root)?;
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Ingestion {
            path: root.to_path_buf(),
            reason: "no subject directories".into(),
        });
    }
    let mut samples = Vec::with_capacity(dirs.len());
    let mut order = modalities.clone();
    order.sort();
    order.dedup();
    for dir in &dirs {
        let (stack, labels) = load_subject(dir, &order)?;
        samples.push(prepare_sample(&stack, &labels, pre)?);
    }
    Ok(Dataset {
        modalities: order,
        samples,
    })
}
