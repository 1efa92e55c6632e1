//! Scene manifests: one JSON document per scene listing every frame.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Intrinsics};
use crate::modality::Modality;

pub const CONVENTION: &str = "camera_from_world";

/// Pose as stored on disk: camera-from-world, quaternion `[w, x, y, z]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub quat: [f64; 4],
    pub t: [f64; 3],
}

impl PoseRecord {
    pub fn from_pose(pose: &CameraPose) -> Self {
        let t = pose.translation;
        Self { quat: pose.wxyz(), t: [t.x, t.y, t.z] }
    }

    pub fn to_pose(&self) -> Result<CameraPose> {
        CameraPose::from_wxyz(self.quat, self.t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub id: String,
    pub modality: Modality,
    /// Relative to the manifest's directory.
    pub image_path: PathBuf,
    pub intrinsics: Intrinsics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<PoseRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_path: Option<PathBuf>,
    pub pose_group: String,
    /// Capture trajectory this frame belongs to, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<String>,
    /// Temperature range mapped linearly onto the 16-bit thermal image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thermal_range: Option<[f64; 2]>,
}

impl FrameRecord {
    pub fn camera_pose(&self) -> Result<Option<CameraPose>> {
        self.pose.as_ref().map(PoseRecord::to_pose).transpose()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub scene: String,
    pub units: String,
    pub split: String,
    pub convention: String,
    pub frames: Vec<FrameRecord>,
    /// Directory relative paths resolve against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl SceneManifest {
    pub fn frame(&self, id: &str) -> Option<&FrameRecord> {
        self.frames.iter().find(|f| f.id == id)
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.root.join(relative)
    }

    /// Frames grouped by pose group, groups in first-appearance order.
    pub fn pose_groups(&self) -> Vec<(String, Vec<&FrameRecord>)> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: BTreeMap<&str, Vec<&FrameRecord>> = BTreeMap::new();
        for f in &self.frames {
            if !groups.contains_key(f.pose_group.as_str()) {
                order.push(f.pose_group.clone());
            }
            groups.entry(f.pose_group.as_str()).or_default().push(f);
        }
        order
            .into_iter()
            .map(|g| {
                let frames = groups.remove(g.as_str()).unwrap_or_default();
                (g, frames)
            })
            .collect()
    }

    /// True when every pose group holds exactly one RGB and one thermal frame.
    pub fn is_paired(&self) -> bool {
        self.pose_groups().iter().all(|(_, fs)| {
            fs.len() == 2 && fs.iter().any(|f| f.modality == Modality::Rgb) && fs.iter().any(|f| f.modality == Modality::Thermal)
        })
    }

    /// Every structural problem with the manifest, including missing files
    /// when `check_files` is set.
    pub fn problems(&self, check_files: bool) -> Vec<String> {
        let mut out = Vec::new();
        if self.convention != CONVENTION {
            out.push(format!("convention must be \"{CONVENTION}\", got \"{}\"", self.convention));
        }
        if self.frames.is_empty() {
            out.push("manifest lists no frames".to_string());
        }
        let mut seen = HashSet::new();
        let mut group_modalities: BTreeMap<&str, Vec<Modality>> = BTreeMap::new();
        for f in &self.frames {
            if !seen.insert(f.id.as_str()) {
                out.push(format!("duplicate frame id \"{}\"", f.id));
            }
            if f.depth_path.is_some() && f.pose.is_none() {
                out.push(format!("frame \"{}\" has a depth map but no pose", f.id));
            }
            if let Some(p) = &f.pose {
                if let Err(e) = p.to_pose() {
                    out.push(format!("frame \"{}\": {e}", f.id));
                }
            }
            if let Err(e) = f.intrinsics.validate() {
                out.push(format!("frame \"{}\": {e}", f.id));
            }
            if let Some([lo, hi]) = f.thermal_range {
                if f.modality != Modality::Thermal {
                    out.push(format!("frame \"{}\" is rgb but carries a thermal range", f.id));
                } else if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    out.push(format!("frame \"{}\" has an invalid thermal range [{lo}, {hi}]", f.id));
                }
            }
            let mods = group_modalities.entry(f.pose_group.as_str()).or_default();
            if mods.contains(&f.modality) {
                out.push(format!("pose group \"{}\" holds two {} frames", f.pose_group, f.modality));
            }
            mods.push(f.modality);
            if check_files {
                let image = self.resolve(&f.image_path);
                if !image.is_file() {
                    out.push(format!("frame \"{}\": image {} does not exist", f.id, image.display()));
                }
                if let Some(d) = &f.depth_path {
                    let depth = self.resolve(d);
                    if !depth.is_file() {
                        out.push(format!("frame \"{}\": depth {} does not exist", f.id, depth.display()));
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self, check_files: bool) -> Result<()> {
        let problems = self.problems(check_files);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Reads and validates a manifest; relative paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<SceneManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: SceneManifest = serde_json::from_str(&text)?;
    manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate(true)?;
    Ok(manifest)
}

pub fn save_manifest(path: &Path, manifest: &SceneManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(id: &str, group: &str, modality: Modality) -> FrameRecord {
        FrameRecord {
            id: id.into(),
            modality,
            image_path: PathBuf::from(format!("{id}.png")),
            intrinsics: Intrinsics::from_fov(1.0, 1.0, 8, 8),
            pose: Some(PoseRecord { quat: [1.0, 0.0, 0.0, 0.0], t: [0.0, 0.0, 0.0] }),
            depth_path: None,
            pose_group: group.into(),
            trajectory: None,
            thermal_range: None,
        }
    }

    fn write_scene(dir: &Path, frames: Vec<FrameRecord>) -> PathBuf {
        for f in &frames {
            fs::write(dir.join(&f.image_path), b"").unwrap();
            if let Some(d) = &f.depth_path {
                fs::write(dir.join(d), b"").unwrap();
            }
        }
        let m = SceneManifest {
            scene: "s".into(),
            units: "meters".into(),
            split: "test".into(),
            convention: CONVENTION.into(),
            frames,
            root: PathBuf::new(),
        };
        let path = dir.join("scene.json");
        save_manifest(&path, &m).unwrap();
        path
    }

    #[test]
    fn minimal_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_scene(dir.path(), vec![frame("a", "g0", Modality::Rgb), frame("b", "g0", Modality::Thermal)]);
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.frames.len(), 2);
        assert!(m.is_paired());
        assert_eq!(m.root, dir.path());
    }

    #[test]
    fn duplicate_id_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_scene(dir.path(), vec![frame("a", "g0", Modality::Rgb), frame("a", "g1", Modality::Rgb)]);
        match load_manifest(&path) {
            Err(Error::Validation(p)) => assert!(p.iter().any(|s| s.contains("duplicate") && s.contains("\"a\""))),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn depth_without_pose_rejected_and_all_errors_listed() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = frame("a", "g0", Modality::Rgb);
        f.pose = None;
        f.depth_path = Some("a.depth".into());
        let path = write_scene(dir.path(), vec![f, frame("b", "g1", Modality::Rgb), frame("b", "g2", Modality::Rgb)]);
        match load_manifest(&path) {
            Err(Error::Validation(p)) => {
                assert!(p.iter().any(|s| s.contains("depth map but no pose")));
                assert!(p.iter().any(|s| s.contains("duplicate")));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_and_convention_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_scene(dir.path(), vec![frame("a", "g0", Modality::Rgb)]);
        fs::remove_file(dir.path().join("a.png")).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace(CONVENTION, "world_from_camera");
        fs::write(&path, text).unwrap();
        match load_manifest(&path) {
            Err(Error::Validation(p)) => {
                assert_eq!(p.len(), 2, "{p:?}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
        assert!(matches!(load_manifest(&dir.path().join("nope.json")), Err(Error::Io { .. })));
    }

    #[test]
    fn pose_json_layout() {
        let json = serde_json::to_value(frame("a", "g", Modality::Thermal)).unwrap();
        assert_eq!(json["pose"]["quat"], serde_json::json!([1.0, 0.0, 0.0, 0.0]));
        assert_eq!(json["modality"], "thermal");
    }
}
