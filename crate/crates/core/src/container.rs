//! On-disk layout for datasets and per-image outputs.
//!
//! Every image is stored as raw little-endian `f32` rows (`<stem>.f32`) with
//! optional `u8` masks (`<stem>.anomaly.u8`, `<stem>.fg.u8`) and a JSON
//! sidecar (`<stem>.json`). A split directory holds one such group per image;
//! the dataset root has a `manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{Image, LabeledImage, Mask, NormStats};
use crate::synth::{DatasetSplits, SplitName};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub subject_id: String,
    pub slice_id: u32,
    pub seed: u64,
    pub shape: [usize; 2],
    pub normalization: Option<NormStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub generator_seed: u64,
    pub reference: NormStats,
    pub splits: BTreeMap<String, Vec<String>>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn image_stem(subject_id: &str, slice_id: u32) -> String {
    format!("{subject_id}_s{slice_id:03}")
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_image_f32(path: &Path, image: &Image) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * image.len());
    for &v in image.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write(path, &bytes)
}

pub fn read_image_f32(path: &Path, shape: [usize; 2]) -> Result<Image> {
    let bytes = read(path)?;
    let n = shape[0] * shape[1];
    if bytes.len() != 4 * n {
        return Err(Error::Artifact {
            path: path.to_path_buf(),
            detail: format!("expected {} bytes for shape {shape:?}, found {}", 4 * n, bytes.len()),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Image::from_shape_vec((shape[0], shape[1]), values).expect("length checked"))
}

pub fn write_mask_u8(path: &Path, mask: &Mask) -> Result<()> {
    let bytes: Vec<u8> = mask.iter().map(|&m| m as u8).collect();
    write(path, &bytes)
}

pub fn read_mask_u8(path: &Path, shape: [usize; 2]) -> Result<Mask> {
    let bytes = read(path)?;
    if bytes.len() != shape[0] * shape[1] || bytes.iter().any(|&b| b > 1) {
        return Err(Error::Artifact {
            path: path.to_path_buf(),
            detail: format!("not a 0/1 mask of shape {shape:?}"),
        });
    }
    Ok(Mask::from_shape_vec((shape[0], shape[1]), bytes.into_iter().map(|b| b == 1).collect()).expect("length checked"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)?.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Artifact {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Writes one labeled image; returns its stem.
pub fn write_labeled(dir: &Path, image: &LabeledImage) -> Result<String> {
    let stem = image_stem(&image.subject_id, image.slice_id);
    let (h, w) = image.shape();
    write_image_f32(&dir.join(format!("{stem}.f32")), &image.pixels)?;
    write_mask_u8(&dir.join(format!("{stem}.anomaly.u8")), &image.anomaly_mask)?;
    write_mask_u8(&dir.join(format!("{stem}.fg.u8")), &image.foreground_mask)?;
    write_json(
        &dir.join(format!("{stem}.json")),
        &Sidecar {
            subject_id: image.subject_id.clone(),
            slice_id: image.slice_id,
            seed: image.seed,
            shape: [h, w],
            normalization: image.normalization,
        },
    )?;
    Ok(stem)
}

pub fn read_labeled(dir: &Path, stem: &str) -> Result<LabeledImage> {
    let side: Sidecar = read_json(&dir.join(format!("{stem}.json")))?;
    let image = LabeledImage {
        pixels: read_image_f32(&dir.join(format!("{stem}.f32")), side.shape)?,
        anomaly_mask: read_mask_u8(&dir.join(format!("{stem}.anomaly.u8")), side.shape)?,
        foreground_mask: read_mask_u8(&dir.join(format!("{stem}.fg.u8")), side.shape)?,
        subject_id: side.subject_id,
        slice_id: side.slice_id,
        seed: side.seed,
        normalization: side.normalization,
    };
    image.validate().map_err(|e| Error::Artifact {
        path: dir.join(stem),
        detail: e.to_string(),
    })?;
    Ok(image)
}

/// Writes all splits under `root` and a dataset manifest.
pub fn write_dataset(root: &Path, data: &DatasetSplits, config_hash: &str) -> Result<DatasetManifest> {
    let mut splits = BTreeMap::new();
    for name in SplitName::ALL {
        let dir = root.join(name.as_str());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let stems = data
            .split(name)
            .iter()
            .map(|img| write_labeled(&dir, img))
            .collect::<Result<Vec<_>>>()?;
        splits.insert(name.as_str().to_string(), stems);
    }
    let manifest = DatasetManifest {
        config_hash: config_hash.to_string(),
        generator_seed: data.generator_seed,
        reference: data.reference,
        splits,
    };
    write_json(&root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    read_json(&root.join("manifest.json"))
}

/// Loads one split listed in the dataset manifest.
pub fn read_split(root: &Path, name: SplitName) -> Result<Vec<LabeledImage>> {
    let manifest = read_manifest(root)?;
    let stems = manifest.splits.get(name.as_str()).ok_or_else(|| Error::Artifact {
        path: root.join("manifest.json"),
        detail: format!("split {} missing", name.as_str()),
    })?;
    let dir = root.join(name.as_str());
    stems.iter().map(|s| read_labeled(&dir, s)).collect()
}

/// Every regular file under `root`, relative and sorted.
pub fn list_files(root: &Path) -> Result<Vec<PathBuf>> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                walk(base, &path, out)?;
            } else {
                out.push(path.strip_prefix(base).expect("under base").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    if root.exists() {
        walk(root, root, &mut out)?;
    }
    out.sort();
    Ok(out)
}
