//! Procedural two-modality scenes with exact ground truth.
//!
//! A closed room (floor, ceiling, four walls) holds boxes and spheres. Each
//! primitive carries a 3-D albedo texture for the RGB render and a smooth
//! temperature field for the thermal render, so the two modalities share
//! geometry but not appearance. Cameras follow two look-at trajectories and
//! every pose is rendered in both modalities, with analytic ray casting
//! giving exact z-depth.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::augment::gaussian_blur;
use crate::data::io::{normalize_temperature, write_depth, write_gray16_png, write_rgb_png};
use crate::data::manifest::{save_manifest, FrameRecord, PoseRecord, SceneManifest, CONVENTION};
use crate::error::{Error, Result};
use crate::geometry::{CameraPose, DepthMap, Intrinsics, Vec3};
use crate::imaging::Image;
use crate::modality::Modality;

/// Albedo as a 3-D checkerboard; `cell = 0` gives a solid color.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub color: [f64; 3],
    pub alt: [f64; 3],
    pub cell: f64,
}

impl Texture {
    pub fn solid(color: [f64; 3]) -> Self {
        Self { color, alt: color, cell: 0.0 }
    }

    pub fn at(&self, p: &Vec3) -> [f64; 3] {
        if self.cell <= 0.0 {
            return self.color;
        }
        // nudge off exact cell boundaries, where planes would alias
        let k = |x: f64| ((x + 1e-7) / self.cell).floor() as i64;
        if (k(p.x) + k(p.y) + k(p.z)).rem_euclid(2) == 0 {
            self.color
        } else {
            self.alt
        }
    }
}

/// `T(p) = base + gradient·p + Σ amplitude·exp(-|p - center|² / 2r²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureField {
    pub base: f64,
    pub gradient: [f64; 3],
    pub hotspots: Vec<Hotspot>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hotspot {
    pub center: [f64; 3],
    pub amplitude: f64,
    pub radius: f64,
}

impl TemperatureField {
    pub fn uniform(base: f64) -> Self {
        Self { base, gradient: [0.0; 3], hotspots: Vec::new() }
    }

    pub fn at(&self, p: &Vec3) -> f64 {
        let g = Vec3::from(self.gradient);
        let mut t = self.base + g.dot(p);
        for h in &self.hotspots {
            let d2 = (p - Vec3::from(h.center)).norm_squared();
            t += h.amplitude * (-d2 / (2.0 * h.radius * h.radius)).exp();
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    /// Points with `normal · p = offset`.
    Plane { normal: [f64; 3], offset: f64 },
    /// Axis-aligned box.
    Cuboid { min: [f64; 3], max: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: Texture,
    pub temperature: TemperatureField,
}

/// Nearest intersection along a ray: distance parameter and unit normal.
#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub t: f64,
    pub normal: Vec3,
    pub primitive: usize,
}

const HIT_EPS: f64 = 1e-9;

impl Shape {
    /// Smallest `t > eps` with `origin + t·dir` on the surface.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3)> {
        match self {
            Shape::Plane { normal, offset } => {
                let n = Vec3::from(*normal).normalize();
                let denom = n.dot(dir);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = (offset / Vec3::from(*normal).norm() - n.dot(origin)) / denom;
                (t > HIT_EPS).then_some((t, n))
            }
            Shape::Cuboid { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut n0, mut n1) = (Vec3::zeros(), Vec3::zeros());
                for a in 0..3 {
                    if dir[a].abs() < 1e-15 {
                        if origin[a] < min[a] || origin[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let ta = (min[a] - origin[a]) / dir[a];
                    let tb = (max[a] - origin[a]) / dir[a];
                    let (near, far, sign) = if ta < tb { (ta, tb, -1.0) } else { (tb, ta, 1.0) };
                    if near > t0 {
                        t0 = near;
                        n0 = Vec3::zeros();
                        n0[a] = sign;
                    }
                    if far < t1 {
                        t1 = far;
                        n1 = Vec3::zeros();
                        n1[a] = -sign;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                if t0 > HIT_EPS {
                    Some((t0, n0))
                } else if t1 > HIT_EPS {
                    Some((t1, n1))
                } else {
                    None
                }
            }
            Shape::Sphere { center, radius } => {
                let oc = origin - Vec3::from(*center);
                let a = dir.norm_squared();
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [(-b - sq) / a, (-b + sq) / a].into_iter().find(|&t| t > HIT_EPS)?;
                let p = origin + dir * t;
                Some((t, (p - Vec3::from(*center)) / *radius))
            }
        }
    }

    /// Unsigned distance from `p` to the surface.
    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        match self {
            Shape::Plane { normal, offset } => {
                let n = Vec3::from(*normal);
                ((n.dot(p) - offset) / n.norm()).abs()
            }
            Shape::Cuboid { min, max } => {
                let (lo, hi) = (Vec3::from(*min), Vec3::from(*max));
                let center = (lo + hi) / 2.0;
                let half = (hi - lo) / 2.0;
                let q = (p - center).abs() - half;
                let outside = q.map(|v| v.max(0.0)).norm();
                let inside = q.max().min(0.0);
                (outside + inside).abs()
            }
            Shape::Sphere { center, radius } => ((p - Vec3::from(*center)).norm() - radius).abs(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub name: String,
    pub frames: usize,
    pub radius: f64,
    pub height: f64,
    pub start_deg: f64,
    /// Angular extent; 360 closes the orbit.
    pub sweep_deg: f64,
    pub target: [f64; 3],
}

impl TrajectorySpec {
    pub fn poses(&self) -> Vec<CameraPose> {
        let full = (self.sweep_deg - 360.0).abs() < 1e-9;
        let steps = if full { self.frames } else { self.frames.saturating_sub(1).max(1) };
        (0..self.frames)
            .map(|i| {
                let a = (self.start_deg + self.sweep_deg * i as f64 / steps as f64).to_radians();
                let eye = Vec3::new(self.radius * a.cos(), self.radius * a.sin(), self.height);
                CameraPose::look_at(eye, Vec3::from(self.target), Vec3::new(0.0, 0.0, 1.0))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSceneConfig {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub trajectories: Vec<TrajectorySpec>,
    pub width: u32,
    pub height: u32,
    /// Horizontal field of view per modality, radians.
    pub rgb_fov_x: f64,
    pub thermal_fov_x: f64,
    /// Standard deviation of additive sensor noise, in normalized intensity.
    pub noise: f64,
    /// Thermal optics blur, pixels.
    pub thermal_blur: f64,
    /// Direction towards the light for RGB shading.
    pub light: [f64; 3],
}

impl SyntheticSceneConfig {
    /// A room with random boxes and spheres and two orbit arcs, all drawn from `seed`.
    pub fn random(name: &str, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = 3.0;
        let ceiling = 2.6;
        let mut prims = Vec::new();
        let wall_colors = [[0.75, 0.72, 0.65], [0.55, 0.65, 0.78], [0.78, 0.6, 0.55], [0.6, 0.75, 0.6]];
        let jitter = |rng: &mut ChaCha8Rng, c: [f64; 3]| c.map(|v: f64| (v + rng.gen_range(-0.1..0.1)).clamp(0.05, 0.95));
        // floor and ceiling
        prims.push(Primitive {
            shape: Shape::Plane { normal: [0.0, 0.0, 1.0], offset: 0.0 },
            albedo: Texture { color: jitter(&mut rng, [0.85, 0.85, 0.8]), alt: jitter(&mut rng, [0.25, 0.25, 0.3]), cell: 0.5 },
            temperature: TemperatureField { base: 19.0, gradient: [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 0.0], hotspots: vec![] },
        });
        prims.push(Primitive {
            shape: Shape::Plane { normal: [0.0, 0.0, 1.0], offset: ceiling },
            albedo: Texture::solid([0.9, 0.9, 0.9]),
            temperature: TemperatureField::uniform(23.0),
        });
        for (i, (n, c)) in [([1.0, 0.0, 0.0], -half), ([1.0, 0.0, 0.0], half), ([0.0, 1.0, 0.0], -half), ([0.0, 1.0, 0.0], half)]
            .into_iter()
            .enumerate()
        {
            let base = wall_colors[i];
            prims.push(Primitive {
                shape: Shape::Plane { normal: n, offset: c },
                albedo: Texture { color: jitter(&mut rng, base), alt: base.map(|v| v * 0.6), cell: rng.gen_range(0.4..0.9) },
                temperature: TemperatureField {
                    base: rng.gen_range(17.0..21.0),
                    gradient: [0.0, 0.0, rng.gen_range(0.5..1.5)],
                    hotspots: vec![Hotspot {
                        center: {
                            let along = rng.gen_range(-2.0..2.0);
                            let z = rng.gen_range(0.5..2.0);
                            if n[0] != 0.0 { [c, along, z] } else { [along, c, z] }
                        },
                        amplitude: rng.gen_range(4.0..10.0),
                        radius: rng.gen_range(0.3..0.8),
                    }],
                },
            });
        }
        // objects in a disc around the origin, clear of the camera paths
        for k in 0..5 {
            let ang = rng.gen_range(0.0..std::f64::consts::TAU);
            let dist = rng.gen_range(0.0..0.9);
            let (x, y) = (dist * ang.cos(), dist * ang.sin());
            let color = [rng.gen_range(0.1..0.95), rng.gen_range(0.1..0.95), rng.gen_range(0.1..0.95)];
            let temp = rng.gen_range(24.0..45.0);
            if k < 3 {
                let s = [rng.gen_range(0.2..0.45), rng.gen_range(0.2..0.45), rng.gen_range(0.3..0.9)];
                prims.push(Primitive {
                    shape: Shape::Cuboid { min: [x - s[0], y - s[1], 0.0], max: [x + s[0], y + s[1], s[2]] },
                    albedo: Texture { color, alt: color.map(|v| 1.0 - v), cell: rng.gen_range(0.1..0.3) },
                    temperature: TemperatureField {
                        base: temp,
                        gradient: [0.0, 0.0, rng.gen_range(-6.0..6.0)],
                        hotspots: vec![Hotspot { center: [x, y, s[2]], amplitude: rng.gen_range(5.0..15.0), radius: 0.2 }],
                    },
                });
            } else {
                let r = rng.gen_range(0.15..0.35);
                let z = rng.gen_range(r..1.2);
                prims.push(Primitive {
                    shape: Shape::Sphere { center: [x, y, z], radius: r },
                    albedo: Texture { color, alt: color.map(|v| v * 0.5), cell: rng.gen_range(0.08..0.2) },
                    temperature: TemperatureField {
                        base: temp + 10.0,
                        gradient: [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), 0.0],
                        hotspots: vec![],
                    },
                });
            }
        }
        let start = rng.gen_range(0.0..360.0);
        let trajectories = vec![
            TrajectorySpec {
                name: "orbit_low".into(),
                frames: 12,
                radius: rng.gen_range(1.8..2.1),
                height: rng.gen_range(0.9..1.2),
                start_deg: start,
                sweep_deg: 360.0,
                target: [0.0, 0.0, 0.5],
            },
            TrajectorySpec {
                name: "orbit_high".into(),
                frames: 12,
                radius: rng.gen_range(2.2..2.5),
                height: rng.gen_range(1.5..1.9),
                start_deg: start + 15.0,
                sweep_deg: 360.0,
                target: [0.0, 0.0, 0.4],
            },
        ];
        Self {
            name: name.to_string(),
            primitives: prims,
            trajectories,
            width: 64,
            height: 64,
            rgb_fov_x: 70f64.to_radians(),
            thermal_fov_x: 60f64.to_radians(),
            noise: 0.01,
            thermal_blur: 0.8,
            light: [0.4, 0.3, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.trajectories.len() != 2 {
            problems.push(format!("expected two trajectories, got {}", self.trajectories.len()));
        }
        for t in &self.trajectories {
            if t.frames < 2 {
                problems.push(format!("trajectory {} needs at least 2 frames", t.name));
            }
        }
        if self.primitives.is_empty() {
            problems.push("scene has no primitives".into());
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let f = &p.temperature;
            let finite = f.base.is_finite()
                && f.gradient.iter().all(|v| v.is_finite())
                && f.hotspots.iter().all(|h| h.amplitude.is_finite() && h.radius > 0.0);
            if !finite {
                problems.push(format!("primitive {i} has an unbounded temperature field"));
            }
            if let Shape::Sphere { radius, .. } = p.shape {
                if radius <= 0.0 {
                    problems.push(format!("primitive {i} has non-positive radius"));
                }
            }
        }
        if self.width == 0 || self.height == 0 {
            problems.push("image size must be positive".into());
        }
        for fov in [self.rgb_fov_x, self.thermal_fov_x] {
            if !(fov > 0.0 && fov < std::f64::consts::PI) {
                problems.push(format!("field of view {fov} outside (0, π)"));
            }
        }
        if !(self.noise >= 0.0) || !(self.thermal_blur >= 0.0) {
            problems.push("noise and blur must be non-negative".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn intrinsics(&self, modality: Modality) -> Intrinsics {
        let fov_x = match modality {
            Modality::Rgb => self.rgb_fov_x,
            Modality::Thermal => self.thermal_fov_x,
        };
        let fx = (self.width as f64 - 1.0).max(1.0) / 2.0 / (fov_x / 2.0).tan();
        let fov_y = 2.0 * ((self.height as f64 - 1.0).max(1.0) / 2.0 / fx).atan();
        Intrinsics::from_fov(fov_x, fov_y, self.width, self.height)
    }

    /// Nearest primitive hit by the ray `origin + t·dir`.
    pub fn cast(&self, origin: &Vec3, dir: &Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some((t, normal)) = p.shape.intersect(origin, dir) {
                if best.map_or(true, |b| t < b.t) {
                    best = Some(Hit { t, normal, primitive: i });
                }
            }
        }
        best
    }
}

/// Noise-free render of one view: shaded RGB or raw temperature, plus z-depth.
pub struct RenderedView {
    pub rgb: Option<Image>,
    pub temperature: Option<Vec<f64>>,
    pub depth: DepthMap,
}

pub fn render_view(config: &SyntheticSceneConfig, pose: &CameraPose, k: &Intrinsics, modality: Modality) -> RenderedView {
    let (w, h) = (k.width as usize, k.height as usize);
    let center = pose.center();
    let rot_t = pose.rotation_matrix().transpose();
    let light = Vec3::from(config.light).normalize();
    let mut depth = vec![0.0; w * h];
    let mut rgb = vec![0.0; w * h * 3];
    let mut temps = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            // camera ray with unit z, so the hit parameter is the z-depth
            let ray_cam = k.ray(u as f64, v as f64);
            let dir = rot_t * ray_cam;
            let i = v * w + u;
            let Some(hit) = config.cast(&center, &dir) else {
                depth[i] = f64::NAN;
                continue;
            };
            depth[i] = hit.t;
            let p = center + dir * hit.t;
            let mut n = hit.normal;
            if n.dot(&dir) > 0.0 {
                n = -n;
            }
            let prim = &config.primitives[hit.primitive];
            match modality {
                Modality::Rgb => {
                    let shade = 0.35 + 0.65 * n.dot(&light).max(0.0);
                    let a = prim.albedo.at(&p);
                    for c in 0..3 {
                        rgb[3 * i + c] = (a[c] * shade).clamp(0.0, 1.0);
                    }
                }
                Modality::Thermal => {
                    // mild angular emissivity falloff
                    let cos = n.dot(&(-dir.normalize())).clamp(0.0, 1.0);
                    temps[i] = prim.temperature.at(&p) * (0.9 + 0.1 * cos);
                }
            }
        }
    }
    let depth = DepthMap { width: w, height: h, data: depth };
    match modality {
        Modality::Rgb => RenderedView { rgb: Some(Image { width: w, height: h, channels: 3, data: rgb }), temperature: None, depth },
        Modality::Thermal => RenderedView { rgb: None, temperature: Some(temps), depth },
    }
}

fn frame_stem(traj: &str, i: usize) -> String {
    format!("{traj}_{i:03}")
}

/// Renders the scene into `out_dir` (which must exist) and writes `scene.json`.
pub fn generate_synthetic_scene(config: &SyntheticSceneConfig, seed: u64, out_dir: &Path) -> Result<SceneManifest> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for sub in ["rgb", "thermal", "depth"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let noise = (config.noise > 0.0).then(|| Normal::new(0.0, config.noise).expect("positive noise"));
    let mut frames = Vec::new();
    for traj in &config.trajectories {
        for (i, pose) in traj.poses().iter().enumerate() {
            let stem = frame_stem(&traj.name, i);
            for modality in [Modality::Rgb, Modality::Thermal] {
                let k = config.intrinsics(modality);
                let view = render_view(config, pose, &k, modality);
                let image_path = PathBuf::from(format!("{modality}/{stem}.png"));
                let depth_path = PathBuf::from(format!("depth/{stem}_{modality}.depth"));
                let mut thermal_range = None;
                match modality {
                    Modality::Rgb => {
                        let mut img = view.rgb.expect("rgb render");
                        if let Some(n) = noise {
                            img.data.iter_mut().for_each(|v| *v += n.sample(&mut rng));
                        }
                        img.clamp_unit();
                        write_rgb_png(&out_dir.join(&image_path), &img)?;
                    }
                    Modality::Thermal => {
                        let temps = view.temperature.expect("thermal render");
                        let (w, h) = (k.width as usize, k.height as usize);
                        // optics blur ("ghosting") and sensor noise act on temperatures
                        let blurred = gaussian_blur(&Image { width: w, height: h, channels: 1, data: temps }, config.thermal_blur);
                        let mut t = blurred.data;
                        if let Some(n) = noise {
                            // noise scaled to the frame's temperature span
                            let span = t.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                                - t.iter().copied().fold(f64::INFINITY, f64::min);
                            t.iter_mut().for_each(|v| *v += n.sample(&mut rng) * span);
                        }
                        let (img, range) = normalize_temperature(w, h, &t);
                        write_gray16_png(&out_dir.join(&image_path), &img)?;
                        thermal_range = Some(range);
                    }
                }
                write_depth(&out_dir.join(&depth_path), &view.depth)?;
                frames.push(FrameRecord {
                    id: format!("{stem}_{modality}"),
                    modality,
                    image_path,
                    intrinsics: k,
                    pose: Some(PoseRecord::from_pose(pose)),
                    depth_path: Some(depth_path),
                    pose_group: stem.clone(),
                    trajectory: Some(traj.name.clone()),
                    thermal_range,
                });
            }
        }
    }
    let manifest = SceneManifest {
        scene: config.name.clone(),
        units: "meters; angles in radians".into(),
        split: "synthetic".into(),
        convention: CONVENTION.into(),
        frames,
        root: out_dir.to_path_buf(),
    };
    save_manifest(&out_dir.join("scene.json"), &manifest)?;
    Ok(manifest)
}
