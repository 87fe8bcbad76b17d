//! On-disk dataset layout.
//!
//! ```text
//! <dir>/meta.json          config, prototypes, train/test scene ids
//! <dir>/scenes/<id>.json   objects, audio, image record descriptor
//! <dir>/scenes/<id>.img    raw image: little-endian f64, row-major H×W×3
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassPrototype, Dataset, DatasetConfig, Scene, SceneObject};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const IMAGE_DTYPE: &str = "f64le";
pub const IMAGE_LAYOUT: &str = "row-major HWC";

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    config: DatasetConfig,
    prototypes: Vec<ClassPrototype>,
    train_ids: Vec<u64>,
    test_ids: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageRecord {
    file: String,
    height: usize,
    width: usize,
    channels: usize,
    dtype: String,
    layout: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneRecord {
    scene_id: u64,
    objects: Vec<SceneObject>,
    audio: Vec<f64>,
    image: ImageRecord,
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    let scenes_dir = dir.join("scenes");
    fs::create_dir_all(&scenes_dir)?;
    let meta = Meta {
        config: dataset.config.clone(),
        prototypes: dataset.prototypes.clone(),
        train_ids: dataset.train.iter().map(|s| s.scene_id).collect(),
        test_ids: dataset.test.iter().map(|s| s.scene_id).collect(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    for scene in dataset.train.iter().chain(&dataset.test) {
        write_scene(&scenes_dir, scene)?;
    }
    Ok(())
}

fn write_scene(scenes_dir: &Path, scene: &Scene) -> Result<()> {
    let file = format!("{}.img", scene.scene_id);
    let record = SceneRecord {
        scene_id: scene.scene_id,
        objects: scene.objects.clone(),
        audio: scene.audio.clone(),
        image: ImageRecord {
            file: file.clone(),
            height: scene.height(),
            width: scene.width(),
            channels: 3,
            dtype: IMAGE_DTYPE.into(),
            layout: IMAGE_LAYOUT.into(),
        },
    };
    fs::write(
        scenes_dir.join(format!("{}.json", scene.scene_id)),
        serde_json::to_vec(&record)?,
    )?;
    let mut raw = Vec::with_capacity(scene.image.len() * 8);
    for v in scene.image.data() {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(scenes_dir.join(file), raw)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::MissingArtifact(meta_path));
    }
    let meta: Meta = serde_json::from_slice(&fs::read(&meta_path)?)?;
    let scenes_dir = dir.join("scenes");
    let load = |ids: &[u64]| -> Result<Vec<Scene>> {
        ids.iter().map(|&id| read_scene(&scenes_dir, id)).collect()
    };
    Ok(Dataset {
        train: load(&meta.train_ids)?,
        test: load(&meta.test_ids)?,
        config: meta.config,
        prototypes: meta.prototypes,
    })
}

fn read_scene(scenes_dir: &Path, id: u64) -> Result<Scene> {
    let json_path = scenes_dir.join(format!("{id}.json"));
    if !json_path.exists() {
        return Err(Error::MissingArtifact(json_path));
    }
    let rec: SceneRecord = serde_json::from_slice(&fs::read(&json_path)?)?;
    let img = &rec.image;
    if img.dtype != IMAGE_DTYPE || img.layout != IMAGE_LAYOUT || img.channels != 3 {
        return Err(Error::format(&json_path, "unsupported image record"));
    }
    let img_path = scenes_dir.join(&img.file);
    let raw = fs::read(&img_path)?;
    let n = img.height * img.width * img.channels;
    if raw.len() != n * 8 {
        return Err(Error::format(
            &img_path,
            format!("expected {} bytes, found {}", n * 8, raw.len()),
        ));
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let image = Tensor::from_vec(&[img.height, img.width, img.channels], values)
        .map_err(|e| Error::format(&img_path, e.to_string()))?;
    Ok(Scene {
        scene_id: rec.scene_id,
        image,
        objects: rec.objects,
        audio: rec.audio,
    })
}
