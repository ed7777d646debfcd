//! On-disk dataset layout.
//!
//! ```text
//! manifest.json   counts, shapes, seeds, versions
//! images.f32      count x [1,32,32] little-endian f32 target images
//! conds.f32       count x [1,32,32] little-endian f32 condition images
//! captions.u8     count x 4 token ids
//! annos.json      the ground-truth scenes
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetRecord, SceneSpec, TokenSeq, CAPTION_LEN, IMAGE_SHAPE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const VOCAB_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const IMAGES: &str = "images.f32";
const CONDS: &str = "conds.f32";
const CAPTIONS: &str = "captions.u8";
const ANNOS: &str = "annos.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub vocab_version: u32,
    pub count: usize,
    pub image_shape: [usize; 3],
    pub caption_len: usize,
    pub seeds: Vec<u64>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn f32_bytes<'a>(images: impl Iterator<Item = &'a Tensor<f32>>) -> Vec<u8> {
    images
        .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
        .collect()
}

/// Writes `records` into `dir` (created if needed) and returns the manifest.
pub fn write_dataset(records: &[DatasetRecord], dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        vocab_version: VOCAB_VERSION,
        count: records.len(),
        image_shape: IMAGE_SHAPE,
        caption_len: CAPTION_LEN,
        seeds: records.iter().map(|r| r.seed).collect(),
    };
    if !records.is_empty() {
        for r in records {
            if r.target_image.shape() != IMAGE_SHAPE || r.cond_image.shape() != IMAGE_SHAPE {
                return Err(Error::Argument("record image is not [1,32,32]".into()));
            }
        }
        write_file(&dir.join(IMAGES), &f32_bytes(records.iter().map(|r| &r.target_image)))?;
        write_file(&dir.join(CONDS), &f32_bytes(records.iter().map(|r| &r.cond_image)))?;
        let caps: Vec<u8> = records.iter().flat_map(|r| r.caption.ids).collect();
        write_file(&dir.join(CAPTIONS), &caps)?;
        let scenes: Vec<&SceneSpec> = records.iter().map(|r| &r.scene).collect();
        let annos = serde_json::to_vec(&scenes).expect("scenes serialize");
        write_file(&dir.join(ANNOS), &annos)?;
    }
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST), &json)?;
    Ok(manifest)
}

fn read_exact_len(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            reason: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    Ok(bytes)
}

fn images_from(bytes: &[u8], count: usize) -> Vec<Tensor<f32>> {
    let per = IMAGE_SHAPE.iter().product::<usize>() * 4;
    (0..count)
        .map(|i| {
            let data = bytes[i * per..(i + 1) * per]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::from_vec(&IMAGE_SHAPE, data).expect("image shape")
        })
        .collect()
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(Error::MissingManifest(dir.to_path_buf()));
    }
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&text).map_err(|e| Error::Corrupt {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let version = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path,
            found: version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let m: Manifest = serde_json::from_value(value).map_err(|e| Error::Corrupt {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if m.vocab_version != VOCAB_VERSION {
        return Err(Error::VersionMismatch {
            path,
            found: m.vocab_version,
            expected: VOCAB_VERSION,
        });
    }
    if m.image_shape != IMAGE_SHAPE || m.caption_len != CAPTION_LEN || m.seeds.len() != m.count {
        return Err(Error::Corrupt {
            path,
            reason: "manifest shapes or seed count disagree with the layout".into(),
        });
    }
    Ok(m)
}

/// Reads a dataset written by [`write_dataset`], bit-exactly.
pub fn read_dataset(dir: &Path) -> Result<Vec<DatasetRecord>> {
    let m = read_manifest(dir)?;
    if m.count == 0 {
        return Ok(Vec::new());
    }
    let img_bytes = m.count * IMAGE_SHAPE.iter().product::<usize>() * 4;
    let images = images_from(&read_exact_len(&dir.join(IMAGES), img_bytes)?, m.count);
    let conds = images_from(&read_exact_len(&dir.join(CONDS), img_bytes)?, m.count);
    let caps = read_exact_len(&dir.join(CAPTIONS), m.count * CAPTION_LEN)?;
    let annos_path = dir.join(ANNOS);
    let annos = fs::read(&annos_path).map_err(|e| Error::io(&annos_path, e))?;
    let scenes: Vec<SceneSpec> = serde_json::from_slice(&annos).map_err(|e| Error::Corrupt {
        path: annos_path.clone(),
        reason: e.to_string(),
    })?;
    if scenes.len() != m.count {
        return Err(Error::Corrupt {
            path: annos_path,
            reason: format!("{} scenes for {} records", scenes.len(), m.count),
        });
    }
    let mut out = Vec::with_capacity(m.count);
    for (i, ((scene, (target_image, cond_image)), seed)) in
        scenes.into_iter().zip(images.into_iter().zip(conds)).zip(m.seeds).enumerate()
    {
        let mut ids = [0u8; CAPTION_LEN];
        ids.copy_from_slice(&caps[i * CAPTION_LEN..(i + 1) * CAPTION_LEN]);
        let caption = TokenSeq::new(ids).map_err(|e| Error::Corrupt {
            path: dir.join(CAPTIONS),
            reason: e.to_string(),
        })?;
        out.push(DatasetRecord {
            scene,
            target_image,
            cond_image,
            caption,
            seed,
        });
    }
    Ok(out)
}
