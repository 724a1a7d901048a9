//! On-disk dataset layout.
//!
//! Scenes: `<root>/img/<id>.ppm`, `<root>/mask/<id>.pgm`, `<root>/meta.json`.
//! Videos: per-sequence subdirectories `<root>/img/<id>/frame_000.ppm` and
//! `<root>/mask/<id>/frame_000.pgm`. `meta.json` records seed, generator
//! config and the class list of every instance.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::netpbm;
use super::scene::{generate_scene, generate_video, Scene, SceneConfig, VideoConfig, VideoScene};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{LabelMap, Mask, TensorOf};
use crate::util::substream;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetaItem {
    pub id: String,
    /// Class id of instance k (mask label k+1).
    pub classes: Vec<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frames: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetaConfig {
    Scenes { config: SceneConfig },
    Videos { config: VideoConfig },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Meta {
    pub seed: u64,
    #[serde(flatten)]
    pub config: MetaConfig,
    pub items: Vec<MetaItem>,
}

fn id_string(index: usize, total: usize) -> String {
    let width = total.saturating_sub(1).to_string().len().max(3);
    format!("{index:0width$}")
}

fn frame_name(index: usize) -> String {
    format!("frame_{index:03}")
}

/// Generate and write `n` scenes; item `i` uses seed `seed + i`.
pub fn write_scene_dataset<S: Scalar>(
    root: &Path,
    seed: u64,
    n: usize,
    cfg: &SceneConfig,
) -> Result<Meta> {
    fs::create_dir_all(root.join("img"))?;
    fs::create_dir_all(root.join("mask"))?;
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let scene: Scene<S> = generate_scene(seed.wrapping_add(i as u64), cfg)?;
        let id = id_string(i, n);
        netpbm::write_image(&root.join("img").join(format!("{id}.ppm")), &scene.image)?;
        netpbm::write_labelmap(&root.join("mask").join(format!("{id}.pgm")), &scene.label_map())?;
        items.push(MetaItem { id, classes: scene.class_ids.clone(), frames: None });
    }
    let meta =
        Meta { seed, config: MetaConfig::Scenes { config: cfg.clone() }, items };
    fs::write(root.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

/// Generate and write `n` videos with per-sequence subdirectories.
pub fn write_video_dataset<S: Scalar>(
    root: &Path,
    seed: u64,
    n: usize,
    cfg: &VideoConfig,
) -> Result<Meta> {
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let video: VideoScene<S> = generate_video(seed.wrapping_add(i as u64), cfg)?;
        let id = id_string(i, n);
        let img_dir = root.join("img").join(&id);
        let mask_dir = root.join("mask").join(&id);
        fs::create_dir_all(&img_dir)?;
        fs::create_dir_all(&mask_dir)?;
        for (f, frame) in video.frames.iter().enumerate() {
            netpbm::write_image(&img_dir.join(format!("{}.ppm", frame_name(f))), &frame.image)?;
            netpbm::write_labelmap(
                &mask_dir.join(format!("{}.pgm", frame_name(f))),
                &frame.label_map(),
            )?;
        }
        items.push(MetaItem {
            id,
            classes: video.frames[0].class_ids.clone(),
            frames: Some(video.frames.len()),
        });
    }
    let meta =
        Meta { seed, config: MetaConfig::Videos { config: cfg.clone() }, items };
    fs::write(root.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

/// A scene loaded back from disk.
#[derive(Clone, Debug)]
pub struct LoadedScene<S> {
    pub id: String,
    pub image: TensorOf<S>,
    pub labels: LabelMap,
    pub classes: Vec<u8>,
}

impl<S: Scalar> LoadedScene<S> {
    /// Ground-truth instance masks, one per class entry.
    pub fn instance_masks(&self) -> Vec<Mask> {
        (0..self.classes.len()).map(|k| self.labels.mask_of((k + 1) as u8)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LoadedVideo<S> {
    pub id: String,
    pub frames: Vec<TensorOf<S>>,
    pub frame_labels: Vec<LabelMap>,
    pub classes: Vec<u8>,
}

pub fn read_meta(root: &Path) -> Result<Meta> {
    let path = root.join("meta.json");
    let bytes = fs::read(&path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn load_scene_dataset<S: Scalar>(root: &Path) -> Result<Vec<LoadedScene<S>>> {
    let meta = read_meta(root)?;
    if matches!(meta.config, MetaConfig::Videos { .. }) {
        return Err(Error::data("expected a scene dataset, found videos"));
    }
    meta.items
        .iter()
        .map(|item| {
            let image = netpbm::read_image(&root.join("img").join(format!("{}.ppm", item.id)))?;
            let labels =
                netpbm::read_labelmap(&root.join("mask").join(format!("{}.pgm", item.id)))?;
            Ok(LoadedScene { id: item.id.clone(), image, labels, classes: item.classes.clone() })
        })
        .collect()
}

pub fn load_video_dataset<S: Scalar>(root: &Path) -> Result<Vec<LoadedVideo<S>>> {
    let meta = read_meta(root)?;
    if matches!(meta.config, MetaConfig::Scenes { .. }) {
        return Err(Error::data("expected a video dataset, found scenes"));
    }
    meta.items
        .iter()
        .map(|item| {
            let frames_n = item
                .frames
                .ok_or_else(|| Error::data(format!("item {} lacks a frame count", item.id)))?;
            let mut frames = Vec::with_capacity(frames_n);
            let mut frame_labels = Vec::with_capacity(frames_n);
            for f in 0..frames_n {
                frames.push(netpbm::read_image(
                    &root.join("img").join(&item.id).join(format!("{}.ppm", frame_name(f))),
                )?);
                frame_labels.push(netpbm::read_labelmap(
                    &root.join("mask").join(&item.id).join(format!("{}.pgm", frame_name(f))),
                )?);
            }
            Ok(LoadedVideo {
                id: item.id.clone(),
                frames,
                frame_labels,
                classes: item.classes.clone(),
            })
        })
        .collect()
}

/// Convenience for tests and fixtures: an in-memory scene set without disk IO.
pub fn generate_scenes_in_memory<S: Scalar>(
    seed: u64,
    n: usize,
    cfg: &SceneConfig,
) -> Result<Vec<LoadedScene<S>>> {
    (0..n)
        .map(|i| {
            let scene: Scene<S> = generate_scene(seed.wrapping_add(i as u64), cfg)?;
            // Round-trip through the 8-bit quantization used on disk so
            // in-memory fixtures and written datasets behave identically.
            let image = netpbm::decode_image(&netpbm::encode_image(&scene.image)?)?;
            Ok(LoadedScene {
                id: id_string(i, n),
                image,
                labels: scene.label_map(),
                classes: scene.class_ids.clone(),
            })
        })
        .collect()
}

/// SHA-256 digest over every dataset file (sorted relative paths + bytes).
pub fn manifest_digest(root: &Path) -> Result<String> {
    fn collect(dir: &Path, base: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                collect(&path, base, out)?;
            } else {
                let rel = path.strip_prefix(base).expect("under base").to_string_lossy()
                    .replace('\\', "/");
                out.push((rel, path));
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    collect(root, root, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for (rel, path) in files {
        hasher.update(rel.as_bytes());
        hasher.update([0u8]);
        hasher.update(fs::read(&path)?);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Deterministic batch order: a fresh shuffle of `0..n` per epoch.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = substream(seed, 0x0e90c, epoch);
    order.shuffle(&mut rng);
    order
}
