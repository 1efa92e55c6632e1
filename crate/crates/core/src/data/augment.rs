//! Asymmetric RGB / thermal augmentation.
//!
//! Both pipelines share the geometric part (crop at a sampled aspect ratio,
//! resize to the configured resolution, optional 90° rotation) plus noise,
//! blur and sharpness. RGB then gets color jitter and optional grayscale;
//! thermal gets a random linear intensity map followed by a power law. The
//! geometric part is returned alongside the image so depth maps, intrinsics
//! and poses can be transformed consistently.

use nalgebra::Matrix3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, DepthMap, Intrinsics};
use crate::imaging::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RgbJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Maximum hue rotation as a fraction of a full turn.
    pub hue: f64,
    pub grayscale_prob: f64,
}

impl Default for RgbJitter {
    fn default() -> Self {
        Self { brightness: 0.3, contrast: 0.3, saturation: 0.3, hue: 0.05, grayscale_prob: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThermalIntensity {
    pub gain: [f64; 2],
    pub offset: [f64; 2],
    pub gamma: [f64; 2],
}

impl Default for ThermalIntensity {
    fn default() -> Self {
        Self { gain: [0.8, 1.2], offset: [-0.1, 0.1], gamma: [1.0 / 1.5, 1.5] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Fraction of the source area kept by the crop.
    pub crop_scale: [f64; 2],
    /// Short-over-long side ratio of the output.
    pub aspect: [f64; 2],
    /// Probability that the output is taller than wide.
    pub portrait_prob: f64,
    /// Long side of the output in pixels.
    pub output_size: usize,
    /// Output sides are rounded to multiples of this (the patch size).
    pub size_multiple: usize,
    pub noise_sigma: [f64; 2],
    pub blur_sigma: [f64; 2],
    pub sharpness: [f64; 2],
    pub rgb: RgbJitter,
    pub thermal: ThermalIntensity,
    pub rot90_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: [0.6, 1.0],
            aspect: [0.33, 1.0],
            portrait_prob: 0.5,
            output_size: 64,
            size_multiple: 8,
            noise_sigma: [0.0, 0.02],
            blur_sigma: [0.0, 1.5],
            sharpness: [0.5, 2.0],
            rgb: RgbJitter::default(),
            thermal: ThermalIntensity::default(),
            rot90_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Every stage disabled; output equals input when its size matches `output_size`.
    pub fn identity(output_size: usize) -> Self {
        Self {
            crop_scale: [1.0, 1.0],
            aspect: [1.0, 1.0],
            portrait_prob: 0.0,
            output_size,
            size_multiple: 1,
            noise_sigma: [0.0, 0.0],
            blur_sigma: [0.0, 0.0],
            sharpness: [1.0, 1.0],
            rgb: RgbJitter { brightness: 0.0, contrast: 0.0, saturation: 0.0, hue: 0.0, grayscale_prob: 0.0 },
            thermal: ThermalIntensity { gain: [1.0, 1.0], offset: [0.0, 0.0], gamma: [1.0, 1.0] },
            rot90_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut range = |name: &str, r: [f64; 2], lo: f64, hi: f64| {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && r[0] >= lo && r[1] <= hi) {
                problems.push(format!("{name} range {r:?} must be ordered within [{lo}, {hi}]"));
            }
        };
        range("crop_scale", self.crop_scale, 1e-3, 1.0);
        range("aspect", self.aspect, 0.33, 1.0);
        range("noise_sigma", self.noise_sigma, 0.0, 1.0);
        range("blur_sigma", self.blur_sigma, 0.0, 10.0);
        range("sharpness", self.sharpness, 0.0, 10.0);
        range("thermal.gain", self.thermal.gain, 0.0, 10.0);
        range("thermal.offset", self.thermal.offset, -1.0, 1.0);
        range("thermal.gamma", self.thermal.gamma, 1.0 / 1.5 - 1e-12, 1.5 + 1e-12);
        let mut prob = |name: &str, p: f64| {
            if !(0.0..=1.0).contains(&p) {
                problems.push(format!("{name} must be a probability, got {p}"));
            }
        };
        prob("portrait_prob", self.portrait_prob);
        prob("rot90_prob", self.rot90_prob);
        prob("rgb.grayscale_prob", self.rgb.grayscale_prob);
        for (name, v) in [
            ("rgb.brightness", self.rgb.brightness),
            ("rgb.contrast", self.rgb.contrast),
            ("rgb.saturation", self.rgb.saturation),
        ] {
            if !(0.0..=1.0).contains(&v) {
                problems.push(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(0.0..=0.5).contains(&self.rgb.hue) {
            problems.push(format!("rgb.hue must lie in [0, 0.5], got {}", self.rgb.hue));
        }
        if self.output_size == 0 || self.size_multiple == 0 || self.output_size % self.size_multiple != 0 {
            problems.push(format!(
                "output_size {} must be a positive multiple of size_multiple {}",
                self.output_size, self.size_multiple
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Fixes the output shape (aspect, orientation, rotation) for a whole
    /// batch, since every frame of a batch must share one resolution.
    pub fn for_batch(&self, rng: &mut impl Rng) -> AugmentConfig {
        let mut out = self.clone();
        let a = uniform(rng, self.aspect);
        out.aspect = [a, a];
        out.portrait_prob = if rng.gen::<f64>() < self.portrait_prob { 1.0 } else { 0.0 };
        out.rot90_prob = if rng.gen::<f64>() < self.rot90_prob { 1.0 } else { 0.0 };
        out
    }
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// The geometric part of an augmentation: crop box in source pixels, output
/// resolution before rotation, and whether a 90° counter-clockwise rotation follows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometricAug {
    pub src_size: (usize, usize),
    /// `(x0, y0, w, h)`: the crop's outer edges in continuous pixel units.
    pub crop: (f64, f64, f64, f64),
    pub resized: (usize, usize),
    pub rot90: bool,
}

impl GeometricAug {
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            src_size: (width, height),
            crop: (0.0, 0.0, width as f64, height as f64),
            resized: (width, height),
            rot90: false,
        }
    }

    pub fn sample(config: &AugmentConfig, width: usize, height: usize, rng: &mut impl Rng) -> Self {
        let a = uniform(rng, config.aspect);
        let portrait = rng.gen::<f64>() < config.portrait_prob;
        let long = config.output_size;
        let m = config.size_multiple;
        let short = (((long as f64 * a) / m as f64).round() as usize).clamp(1, long / m) * m;
        let (out_w, out_h) = if portrait { (short, long) } else { (long, short) };
        let ratio = out_w as f64 / out_h as f64;
        let scale = uniform(rng, config.crop_scale);
        let area = scale * (width * height) as f64;
        let (mut cw, mut ch) = ((area * ratio).sqrt(), (area / ratio).sqrt());
        let fit = (width as f64 / cw).min(height as f64 / ch).min(1.0);
        cw *= fit;
        ch *= fit;
        let x0 = if width as f64 > cw { rng.gen_range(0.0..=(width as f64 - cw)) } else { 0.0 };
        let y0 = if height as f64 > ch { rng.gen_range(0.0..=(height as f64 - ch)) } else { 0.0 };
        let rot90 = rng.gen::<f64>() < config.rot90_prob;
        Self { src_size: (width, height), crop: (x0, y0, cw, ch), resized: (out_w, out_h), rot90 }
    }

    pub fn output_size(&self) -> (usize, usize) {
        if self.rot90 {
            (self.resized.1, self.resized.0)
        } else {
            self.resized
        }
    }

    /// Source pixel coordinates of output pixel `(u, v)`.
    pub fn source_coords(&self, u: usize, v: usize) -> (f64, f64) {
        let (ur, vr) = if self.rot90 {
            // output (u, v) of a CCW rotation reads resized pixel (W - 1 - v, u)
            (self.resized.0 - 1 - v, u)
        } else {
            (u, v)
        };
        let (x0, y0, cw, ch) = self.crop;
        let sx = cw / self.resized.0 as f64;
        let sy = ch / self.resized.1 as f64;
        (x0 + (ur as f64 + 0.5) * sx - 0.5, y0 + (vr as f64 + 0.5) * sy - 0.5)
    }

    pub fn apply_image(&self, image: &Image) -> Image {
        let (w, h) = self.output_size();
        let mut out = Image::filled(w, h, image.channels, 0.0);
        for v in 0..h {
            for u in 0..w {
                let (x, y) = self.source_coords(u, v);
                for c in 0..image.channels {
                    out.set(u, v, c, image.sample_bilinear(x, y, c));
                }
            }
        }
        out
    }

    /// Nearest-neighbour resampling, so invalid pixels never blend into valid ones.
    pub fn apply_depth(&self, depth: &DepthMap) -> DepthMap {
        let (w, h) = self.output_size();
        let mut data = Vec::with_capacity(w * h);
        for v in 0..h {
            for u in 0..w {
                let (x, y) = self.source_coords(u, v);
                let xi = x.round().clamp(0.0, (depth.width - 1) as f64) as usize;
                let yi = y.round().clamp(0.0, (depth.height - 1) as f64) as usize;
                data.push(depth.at(xi, yi));
            }
        }
        DepthMap { width: w, height: h, data }
    }

    pub fn apply_intrinsics(&self, k: &Intrinsics) -> Intrinsics {
        let (x0, y0, cw, ch) = self.crop;
        let sx = self.resized.0 as f64 / cw;
        let sy = self.resized.1 as f64 / ch;
        let fx = k.fx * sx;
        let fy = k.fy * sy;
        let cx = (k.cx - x0 + 0.5) * sx - 0.5;
        let cy = (k.cy - y0 + 0.5) * sy - 0.5;
        if self.rot90 {
            let w = self.resized.0 as f64;
            Intrinsics {
                fx: fy,
                fy: fx,
                cx: cy,
                cy: w - 1.0 - cx,
                width: self.resized.1 as u32,
                height: self.resized.0 as u32,
            }
        } else {
            Intrinsics { fx, fy, cx, cy, width: self.resized.0 as u32, height: self.resized.1 as u32 }
        }
    }

    /// Camera-from-world pose of the virtual camera that sees the output image.
    pub fn apply_pose(&self, pose: &CameraPose) -> CameraPose {
        if !self.rot90 {
            return *pose;
        }
        let rz = rot90_camera_matrix();
        CameraPose::from_matrix(&(rz * pose.rotation_matrix()), rz * pose.translation)
    }
}

/// Camera-frame change of a 90° counter-clockwise image rotation: `(x, y, z) → (y, -x, z)`.
pub fn rot90_camera_matrix() -> Matrix3<f64> {
    Matrix3::new(0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0)
}

#[derive(Clone, Debug)]
pub struct Augmented {
    pub image: Image,
    pub geometry: GeometricAug,
}

fn add_noise(image: &mut Image, sigma: f64, rng: &mut impl Rng) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    for v in &mut image.data {
        *v += normal.sample(rng);
    }
}

fn convolve_separable(image: &Image, kernel: &[f64]) -> Image {
    let r = kernel.len() / 2;
    let (w, h, c) = (image.width, image.height, image.channels);
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = Image::filled(w, h, c, 0.0);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let s: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * image.at(clampi(x as isize + i as isize - r as isize, w), y, ch))
                    .sum();
                tmp.set(x, y, ch, s);
            }
        }
    }
    let mut out = Image::filled(w, h, c, 0.0);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let s: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * tmp.at(x, clampi(y as isize + i as isize - r as isize, h), ch))
                    .sum();
                out.set(x, y, ch, s);
            }
        }
    }
    out
}

pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    if sigma < 1e-3 {
        return image.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    convolve_separable(image, &kernel)
}

/// Blend between a smoothed copy (factor 0) and the original (factor 1);
/// factors above 1 extrapolate, sharpening edges.
pub fn adjust_sharpness(image: &Image, factor: f64) -> Image {
    if (factor - 1.0).abs() < 1e-12 {
        return image.clone();
    }
    let smooth = convolve_separable(image, &[0.25, 0.5, 0.25]);
    let mut out = image.clone();
    for (o, s) in out.data.iter_mut().zip(&smooth.data) {
        *o = s + factor * (*o - s);
    }
    out
}

fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn color_jitter(image: &mut Image, jitter: &RgbJitter, rng: &mut impl Rng) {
    let b = uniform(rng, [1.0 - jitter.brightness, 1.0 + jitter.brightness]);
    let c = uniform(rng, [1.0 - jitter.contrast, 1.0 + jitter.contrast]);
    let s = uniform(rng, [1.0 - jitter.saturation, 1.0 + jitter.saturation]);
    let hue = uniform(rng, [-jitter.hue, jitter.hue]);
    let n = image.width * image.height;
    if b != 1.0 {
        image.data.iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
    }
    if c != 1.0 {
        let mean = (0..n)
            .map(|i| luminance(image.data[3 * i], image.data[3 * i + 1], image.data[3 * i + 2]))
            .sum::<f64>()
            / n as f64;
        image.data.iter_mut().for_each(|v| *v = (mean + c * (*v - mean)).clamp(0.0, 1.0));
    }
    if s != 1.0 {
        for px in image.data.chunks_exact_mut(3) {
            let l = luminance(px[0], px[1], px[2]);
            px.iter_mut().for_each(|v| *v = (l + s * (*v - l)).clamp(0.0, 1.0));
        }
    }
    if hue != 0.0 {
        // rotation of the chroma plane in YIQ space
        let (sin, cos) = (hue * std::f64::consts::TAU).sin_cos();
        for px in image.data.chunks_exact_mut(3) {
            let (r, g, b) = (px[0], px[1], px[2]);
            let y = luminance(r, g, b);
            let i = 0.596 * r - 0.274 * g - 0.322 * b;
            let q = 0.211 * r - 0.523 * g + 0.312 * b;
            let (i, q) = (cos * i - sin * q, sin * i + cos * q);
            px[0] = (y + 0.956 * i + 0.621 * q).clamp(0.0, 1.0);
            px[1] = (y - 0.272 * i - 0.647 * q).clamp(0.0, 1.0);
            px[2] = (y - 1.106 * i + 1.703 * q).clamp(0.0, 1.0);
        }
    }
}

/// Shared head of both pipelines: geometry, noise, blur, sharpness.
fn shared_stages(image: &Image, config: &AugmentConfig, rng: &mut impl Rng) -> (Image, GeometricAug) {
    let geom = GeometricAug::sample(config, image.width, image.height, rng);
    // rotation is the last stage of both pipelines; resample without it first
    let unrotated = GeometricAug { rot90: false, ..geom };
    let mut out = unrotated.apply_image(image);
    add_noise(&mut out, uniform(rng, config.noise_sigma), rng);
    out.clamp_unit();
    out = gaussian_blur(&out, uniform(rng, config.blur_sigma));
    out = adjust_sharpness(&out, uniform(rng, config.sharpness));
    out.clamp_unit();
    (out, geom)
}

fn rotate_ccw(image: &Image) -> Image {
    let (w, h) = (image.width, image.height);
    let mut out = Image::filled(h, w, image.channels, 0.0);
    for v in 0..w {
        for u in 0..h {
            for c in 0..image.channels {
                out.set(u, v, c, image.at(w - 1 - v, u, c));
            }
        }
    }
    out
}

pub fn augment_rgb(image: &Image, config: &AugmentConfig, rng: &mut impl Rng) -> Augmented {
    assert_eq!(image.channels, 3, "augment_rgb expects a 3-channel image");
    let (mut out, geometry) = shared_stages(image, config, rng);
    color_jitter(&mut out, &config.rgb, rng);
    if rng.gen::<f64>() < config.rgb.grayscale_prob {
        for px in out.data.chunks_exact_mut(3) {
            let l = luminance(px[0], px[1], px[2]);
            px.iter_mut().for_each(|v| *v = l);
        }
    }
    out.clamp_unit();
    if geometry.rot90 {
        out = rotate_ccw(&out);
    }
    Augmented { image: out, geometry }
}

/// Intensity stage of the thermal pipeline: `clamp(a·x + b)` then `x^γ`.
pub fn thermal_intensity(image: &mut Image, a: f64, b: f64, gamma: f64) {
    for v in &mut image.data {
        *v = (a * *v + b).clamp(0.0, 1.0).powf(gamma);
    }
}

pub fn augment_thermal(image: &Image, config: &AugmentConfig, rng: &mut impl Rng) -> Augmented {
    assert_eq!(image.channels, 1, "augment_thermal expects a 1-channel image");
    let (mut out, geometry) = shared_stages(image, config, rng);
    let a = uniform(rng, config.thermal.gain);
    let b = uniform(rng, config.thermal.offset);
    let gamma = uniform(rng, config.thermal.gamma);
    thermal_intensity(&mut out, a, b, gamma);
    out.clamp_unit();
    if geometry.rot90 {
        out = rotate_ccw(&out);
    }
    Augmented { image: out, geometry }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{backproject, project, Vec3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut impl Rng, w: usize, h: usize, c: usize) -> Image {
        Image::new(w, h, c, (0..w * h * c).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn zeroed_config_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rgb = random_image(&mut rng, 16, 16, 3);
        let th = random_image(&mut rng, 16, 16, 1);
        let cfg = AugmentConfig::identity(16);
        let out = augment_rgb(&rgb, &cfg, &mut rng);
        assert_eq!(out.image, rgb);
        assert_eq!(augment_thermal(&th, &cfg, &mut rng).image, th);
        assert_eq!(out.geometry.apply_intrinsics(&Intrinsics::from_fov(1.0, 1.0, 16, 16)), Intrinsics::from_fov(1.0, 1.0, 16, 16));
    }

    #[test]
    fn seeded_output_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 40, 32, 3);
        let cfg = AugmentConfig::default();
        let a = augment_rgb(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).image;
        let b = augment_rgb(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).image;
        assert_eq!(a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn sampled_aspect_stays_in_range() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for _ in 0..10_000 {
            let g = GeometricAug::sample(&cfg, 64, 48, &mut rng);
            let (w, h) = g.output_size();
            assert_eq!(w % 8 + h % 8, 0);
            let a = w.min(h) as f64 / w.max(h) as f64;
            lo = lo.min(a);
            hi = hi.max(a);
        }
        assert!(lo >= 0.33 && hi <= 1.0, "aspect range [{lo}, {hi}]");
    }

    #[test]
    fn gamma_on_constant_image() {
        let mut img = Image::filled(4, 4, 1, 0.5);
        thermal_intensity(&mut img, 1.0, 0.0, 1.5);
        for v in &img.data {
            assert!((v - 0.5f64.powf(1.5)).abs() < 1e-12);
            assert!((v - 0.35355).abs() < 1e-5);
        }
        let mut cfg = AugmentConfig::identity(4);
        cfg.thermal.gamma = [1.5, 1.5];
        let out = augment_thermal(&Image::filled(4, 4, 1, 0.5), &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(out.image.data.iter().all(|v| (v - 0.5f64.powf(1.5)).abs() < 1e-12));
    }

    #[test]
    fn rot90_geometry_is_consistent() {
        // a world point seen at pixel (u, v) of the source must be seen where
        // the rotated image shows that pixel
        let k = Intrinsics::new(30.0, 28.0, 15.2, 11.7, 32, 24).unwrap();
        let pose = CameraPose::look_at(Vec3::new(1.0, -2.0, 0.5), Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0));
        let geom = GeometricAug { src_size: (32, 24), crop: (3.0, 2.0, 24.0, 18.0), resized: (16, 12), rot90: true };
        let k2 = geom.apply_intrinsics(&k);
        let p2 = geom.apply_pose(&pose);
        assert_eq!((k2.width, k2.height), (12, 16));
        for (u, v) in [(0usize, 0usize), (5, 9), (11, 15), (3, 2)] {
            let (x, y) = geom.source_coords(u, v);
            let depth = DepthMap::filled(1, 1, 2.0);
            let k_single = Intrinsics { cx: k.cx - x, cy: k.cy - y, width: 1, height: 1, ..k };
            let cloud = backproject(&depth, None, &pose, &k_single).unwrap();
            let proj = project(&cloud, &p2, &k2)[0];
            assert!((proj.u - u as f64).abs() < 1e-9 && (proj.v - v as f64).abs() < 1e-9, "{proj:?} vs {u},{v}");
            assert!((proj.depth - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rotated_image_matches_source_coords() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 8, 6, 1);
        let geom = GeometricAug { rot90: true, ..GeometricAug::identity(8, 6) };
        let rotated = rotate_ccw(&img);
        let direct = geom.apply_image(&img);
        assert_eq!(rotated, direct);
        assert_eq!((rotated.width, rotated.height), (6, 8));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn prop_outputs_in_unit_range(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rgb = random_image(&mut rng, 24, 24, 3);
            let th = random_image(&mut rng, 24, 24, 1);
            let mut cfg = AugmentConfig::default();
            cfg.output_size = 16;
            let a = augment_rgb(&rgb, &cfg, &mut rng);
            let b = augment_thermal(&th, &cfg, &mut rng);
            prop_assert!(a.image.is_valid_unit() && b.image.is_valid_unit());
            prop_assert_eq!((a.image.width, a.image.height), a.geometry.output_size());
        }

        #[test]
        fn prop_gamma_preserves_order(seed in any::<u64>(), gamma in (1.0 / 1.5)..1.5f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = random_image(&mut rng, 8, 8, 1);
            let mut out = img.clone();
            thermal_intensity(&mut out, 1.0, 0.0, gamma);
            for i in 0..64 {
                for j in 0..64 {
                    if img.data[i] < img.data[j] {
                        prop_assert!(out.data[i] <= out.data[j]);
                    }
                }
            }
        }
    }
}
