//! Scene ingestion, augmentation, batch sampling and synthetic data.

pub mod augment;
pub mod batching;
pub mod io;
pub mod manifest;
pub mod synth;

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, DepthMap};
use crate::imaging::Image;

pub use augment::{augment_rgb, augment_thermal, AugmentConfig, Augmented, GeometricAug};
pub use batching::{eval_split, partition_counts, sample_batch, sample_batch_with, sweep_split, BatchSpec, TauSource};
pub use manifest::{load_manifest, save_manifest, FrameRecord, PoseRecord, SceneManifest};
pub use synth::{generate_synthetic_scene, SyntheticSceneConfig};

/// A frame with its pixels, depth and pose decoded.
#[derive(Clone, Debug)]
pub struct LoadedFrame {
    pub record: FrameRecord,
    pub image: Image,
    pub depth: Option<DepthMap>,
    pub pose: Option<CameraPose>,
}

/// A scene held in memory.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub manifest: SceneManifest,
    pub frames: Vec<LoadedFrame>,
    index: HashMap<String, usize>,
}

impl SceneData {
    pub fn load(manifest: SceneManifest) -> Result<Self> {
        let mut frames = Vec::with_capacity(manifest.frames.len());
        for record in &manifest.frames {
            let path = manifest.resolve(&record.image_path);
            let image = io::read_png(&path)?;
            if image.channels != record.modality.channels() {
                return Err(Error::InvalidInput(format!(
                    "{}: {} frame has {} channels",
                    path.display(),
                    record.modality,
                    image.channels
                )));
            }
            if (image.width as u32, image.height as u32) != (record.intrinsics.width, record.intrinsics.height) {
                return Err(Error::InvalidInput(format!(
                    "{}: image is {}x{} but intrinsics say {}x{}",
                    path.display(),
                    image.width,
                    image.height,
                    record.intrinsics.width,
                    record.intrinsics.height
                )));
            }
            let depth = record.depth_path.as_ref().map(|d| io::read_depth(&manifest.resolve(d))).transpose()?;
            let pose = record.camera_pose()?;
            frames.push(LoadedFrame { record: record.clone(), image, depth, pose });
        }
        let index = frames.iter().enumerate().map(|(i, f)| (f.record.id.clone(), i)).collect();
        Ok(Self { manifest, frames, index })
    }

    pub fn open(path: &Path) -> Result<Self> {
        Self::load(load_manifest(path)?)
    }

    pub fn name(&self) -> &str {
        &self.manifest.scene
    }

    pub fn frame(&self, id: &str) -> Result<&LoadedFrame> {
        self.index
            .get(id)
            .map(|&i| &self.frames[i])
            .ok_or_else(|| Error::InvalidInput(format!("scene {} has no frame {id}", self.manifest.scene)))
    }
}
