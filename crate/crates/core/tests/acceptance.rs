//! Acceptance suite. Every test prints one `PASS`/`FAIL` line for its
//! criterion before asserting, so a full run lists the verdict of each.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use xmodal::adapters::{count_by_enumeration, count_closed_form, inject, shape_inventory, LoraConfig, TokenizerSpec};
use xmodal::analysis::{
    alignment_summary, analysis_batches, bootstrap_medians, bootstrap_quantiles, gaussian_kl, jeffreys_gaussians,
    welch_t_test_one_sided, GaussianFit, PAIR_CAP,
};
use xmodal::data::manifest::CONVENTION;
use xmodal::data::{
    eval_split, generate_synthetic_scene, partition_counts, sample_batch, sample_batch_with, FrameRecord, PoseRecord,
    SceneData, SceneManifest, SyntheticSceneConfig, TauSource,
};
use xmodal::eval::{tau_sweep, EvalConfig, Predictor};
use xmodal::experiment::{run_desk_experiment, DeskConfig, DeskModels, DeskOutcome};
use xmodal::geometry::{umeyama_align, CameraPose, Intrinsics, PointCloud, SimilarityTransform};
use xmodal::imaging::Image;
use xmodal::metrics::{accuracy_at, auc, cloud_metrics, pairwise_errors, Combine, ErrorKind, THRESHOLDS};
use xmodal::model::{FrameInput, Model, ModelConfig, TokenMode};
use xmodal::params::ParamKind;
use xmodal::training::{batch_loss, prepare_batch, step_rng, LossWeights};
use xmodal::Modality;

type Vec3 = Vector3<f64>;

fn verdict(criterion: u32, title: &str, ok: bool, detail: &str) {
    let status = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "{status} criterion {criterion:>2} ({title}): {detail}");
}

fn random_rotation(rng: &mut impl Rng) -> UnitQuaternion<f64> {
    let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]))
}

fn random_vec(rng: &mut impl Rng, scale: f64) -> Vec3 {
    Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)) * scale
}

fn small_rotation(rng: &mut impl Rng, max_deg: f64) -> UnitQuaternion<f64> {
    let axis = random_vec(rng, 1.0).normalize();
    UnitQuaternion::from_scaled_axis(axis * rng.gen_range(0.0..max_deg).to_radians())
}

fn random_image(rng: &mut impl Rng, size: usize, modality: Modality) -> Image {
    let c = modality.channels();
    Image::new(size, size, c, (0..size * size * c).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

fn synthetic_scene(dir: &Path, name: &str, seed: u64, size: u32, frames: usize) -> SceneData {
    let mut cfg = SyntheticSceneConfig::random(name, seed);
    cfg.width = size;
    cfg.height = size;
    for t in &mut cfg.trajectories {
        t.frames = frames;
    }
    SceneData::load(generate_synthetic_scene(&cfg, seed, &dir.join(name)).unwrap()).unwrap()
}

/// In-memory manifest: `paired` groups holding both modalities plus
/// `rgb_only` and `thermal_only` single-modality groups.
fn memory_manifest(paired: usize, rgb_only: usize, thermal_only: usize) -> SceneManifest {
    let mut frames = Vec::new();
    let mut push = |g: usize, m: Modality| {
        frames.push(FrameRecord {
            id: format!("{m}_{g:03}"),
            modality: m,
            image_path: PathBuf::from("x.png"),
            intrinsics: Intrinsics::from_fov(1.2, 1.2, 16, 16),
            pose: Some(PoseRecord { quat: [1.0, 0.0, 0.0, 0.0], t: [g as f64, 0.0, 0.0] }),
            depth_path: None,
            pose_group: format!("g{g:03}"),
            trajectory: None,
            thermal_range: None,
        });
    };
    let mut g = 0;
    for _ in 0..paired {
        push(g, Modality::Rgb);
        push(g, Modality::Thermal);
        g += 1;
    }
    for _ in 0..rgb_only {
        push(g, Modality::Rgb);
        g += 1;
    }
    for _ in 0..thermal_only {
        push(g, Modality::Thermal);
        g += 1;
    }
    SceneManifest {
        scene: "memory".into(),
        units: "m".into(),
        split: "test".into(),
        convention: CONVENTION.into(),
        frames,
        root: PathBuf::new(),
    }
}

// ---------------------------------------------------------------- criterion 1

#[test]
fn criterion_01_zero_init_preservation() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut base = Model::new(ModelConfig {
        patch_size: 4,
        embed_dim: 16,
        num_blocks: 4,
        num_heads: 2,
        token_mode: TokenMode::NoToken,
        seed: 7,
        ..ModelConfig::default()
    })
    .unwrap();
    // an RGB-only base: thermal tokens mirror the RGB tokens
    base.reset_thermal_params();

    let modes = [
        TokenMode::PerModality,
        TokenMode::SharedToken,
        TokenMode::NoToken,
        TokenMode::ThermalProjector,
        TokenMode::ThermalEmbedding,
    ];
    let adapted: Vec<Model> = modes
        .iter()
        .enumerate()
        .map(|(i, &mode)| {
            let mut m = base.clone();
            m.set_token_mode(mode);
            m.reset_thermal_params();
            inject(&mut m, &LoraConfig { rank: 4, alpha: 8.0, seed: i as u64, ..LoraConfig::default() }).unwrap();
            m
        })
        .collect();

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=6);
        let modalities: Vec<Modality> =
            (0..n).map(|_| if rng.gen_bool(0.5) { Modality::Thermal } else { Modality::Rgb }).collect();
        let images: Vec<Image> = modalities.iter().map(|&m| random_image(&mut rng, 16, m)).collect();
        let frames: Vec<FrameInput> =
            images.iter().zip(&modalities).map(|(image, &modality)| FrameInput { image, modality }).collect();
        let mut lengths = Vec::new();
        let mut left = n;
        while left > 0 {
            let l = rng.gen_range(1..=left);
            lengths.push(l);
            left -= l;
        }
        let reference = base.predict(&frames, &lengths).unwrap();
        for model in &adapted {
            let out = model.predict(&frames, &lengths).unwrap();
            for (a, b) in out.poses.iter().zip(&reference.poses) {
                for k in 0..9 {
                    worst = worst.max((a.0[k] - b.0[k]).abs());
                }
            }
            for (a, b) in out.depths.iter().zip(&reference.depths) {
                for (x, y) in a.depth.data.iter().zip(&b.depth.data) {
                    worst = worst.max((x - y).abs());
                }
                for (x, y) in a.log_sigma.data.iter().zip(&b.log_sigma.data) {
                    worst = worst.max((x - y).abs());
                }
            }
            for (a, b) in out.layers.iter().zip(&reference.layers) {
                worst = worst.max((a - b).iter().fold(0.0f64, |m, v| m.max(v.abs())));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst < 1e-6 && secs < 60.0;
    verdict(1, "zero-init preservation", ok, &format!("max |adapted - base| = {worst:.3e} over 100 batches x 5 token modes, {secs:.1}s"));
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 2

fn gradient_check(mode: TokenMode, train_heads: bool, scene: &SceneData) -> (f64, usize, BTreeSet<String>) {
    let mut model = Model::new(ModelConfig {
        patch_size: 4,
        embed_dim: 16,
        num_blocks: 2,
        num_heads: 2,
        seed: 3,
        ..ModelConfig::default()
    })
    .unwrap();
    model.set_token_mode(mode);
    inject(&mut model, &LoraConfig { rank: 2, alpha: 4.0, train_heads, seed: 5, ..LoraConfig::default() }).unwrap();
    // move every trainable parameter off its neutral initialization so no
    // gradient is zero for structural reasons (B = 0 kills dL/dA)
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ids: Vec<_> = model.params.ids().collect();
    for &id in &ids {
        if model.params.get(id).trainable {
            let p = model.params.get_mut(id);
            p.value.mapv_inplace(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal));
        }
    }

    let mut srng = step_rng(17, 0);
    let spec = sample_batch_with(&scene.manifest, 2, TauSource::Fixed(0.5), Some(&[1]), &mut srng).unwrap();
    assert_eq!(spec.thermal_count(), 1);
    let batch = prepare_batch(scene, &spec, None, 4, &mut srng).unwrap();
    let weights = LossWeights::default();
    let (_, analytic) = batch_loss(&model, &batch, &weights, true).unwrap();
    let analytic: BTreeMap<String, _> =
        analytic.into_iter().map(|(id, g)| (model.params.get(id).name.clone(), g)).collect();

    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut groups = BTreeSet::new();
    for &id in &ids {
        if !model.params.get(id).trainable {
            continue;
        }
        let name = model.params.get(id).name.clone();
        let kind = model.params.get(id).kind;
        groups.insert(match kind {
            ParamKind::Lora if name.ends_with("lora_a") => "lora_a".to_string(),
            ParamKind::Lora => "lora_b".to_string(),
            other => format!("{other:?}").to_lowercase(),
        });
        let shape = model.params.value(id).dim();
        // a parameter the batch never touches (say the "rest" token of a
        // modality that only opens sequences) has an exactly zero gradient
        let zero = ndarray::Array2::zeros(shape);
        let grad = analytic.get(&name).unwrap_or(&zero);
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = model.params.value(id)[[r, c]];
                model.params.get_mut(id).value[[r, c]] = orig + eps;
                let plus = batch_loss(&model, &batch, &weights, false).unwrap().0.total;
                model.params.get_mut(id).value[[r, c]] = orig - eps;
                let minus = batch_loss(&model, &batch, &weights, false).unwrap().0.total;
                model.params.get_mut(id).value[[r, c]] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let a = grad[[r, c]];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
                if rel > worst {
                    worst = rel;
                }
                checked += 1;
            }
        }
    }
    (worst, checked, groups)
}

#[test]
fn criterion_02_gradient_correctness() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let scene = synthetic_scene(dir.path(), "grad", 4, 16, 4);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut groups = BTreeSet::new();
    for (mode, heads) in [
        (TokenMode::PerModality, false),
        (TokenMode::PerModality, true),
        (TokenMode::SharedToken, true),
        (TokenMode::ThermalProjector, false),
        (TokenMode::ThermalEmbedding, false),
    ] {
        let (w, n, g) = gradient_check(mode, heads, &scene);
        worst = worst.max(w);
        checked += n;
        groups.extend(g);
    }
    let expected: BTreeSet<String> =
        ["lora_a", "lora_b", "cameratoken", "head", "thermaladapter"].iter().map(|s| s.to_string()).collect();
    let secs = start.elapsed().as_secs_f64();
    let ok = worst < 1e-4 && groups == expected && secs < 120.0;
    verdict(2, "gradient correctness", ok, &format!("worst relative error {worst:.2e} over {checked} scalars in {groups:?}, {secs:.1}s"));
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn criterion_03_trainable_parameter_bound() {
    let config = ModelConfig {
        patch_size: 14,
        embed_dim: 1024,
        num_blocks: 24,
        num_heads: 16,
        token_mode: TokenMode::PerModality,
        ..ModelConfig::default()
    };
    let lora = LoraConfig { rank: 64, alpha: 128.0, train_heads: false, ..LoraConfig::default() };
    let inventory = shape_inventory(&config, &lora, TokenizerSpec::vit_large_14());
    let enumerated = count_by_enumeration(&inventory);
    let closed = count_closed_form(&config, &lora, TokenizerSpec::vit_large_14());
    let fraction = enumerated.0 as f64 / enumerated.1 as f64;

    // the two counts also agree with a model that is actually built
    let small = ModelConfig { embed_dim: 32, num_blocks: 4, num_heads: 4, patch_size: 4, ..ModelConfig::default() };
    let small_lora = LoraConfig { rank: 4, alpha: 8.0, ..LoraConfig::default() };
    let mut built = Model::new(small.clone()).unwrap();
    inject(&mut built, &small_lora).unwrap();
    let built_counts = (built.params.trainable_scalar_count() as u64, built.params.scalar_count() as u64);
    let small_counts = count_by_enumeration(&shape_inventory(&small, &small_lora, TokenizerSpec::LinearPatch));
    let small_closed = count_closed_form(&small, &small_lora, TokenizerSpec::LinearPatch);

    let ok = enumerated == closed && fraction < 0.05 && built_counts == small_counts && small_counts == small_closed;
    verdict(
        3,
        "trainable-parameter bound",
        ok,
        &format!(
            "{} of {} scalars trainable ({:.4}); enumeration {enumerated:?} vs closed form {closed:?}",
            enumerated.0,
            enumerated.1,
            fraction
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 4

/// Rotation angle of a rotation matrix from its skew part and trace.
fn matrix_angle_deg(r: &Matrix3<f64>) -> f64 {
    let skew = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    (0.5 * skew.norm()).atan2(0.5 * (r.trace() - 1.0)).to_degrees()
}

fn direction_angle_deg(u: &Vec3, v: &Vec3) -> f64 {
    match (u.norm() < 1e-12, v.norm() < 1e-12) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 180.0,
        _ => u.cross(v).norm().atan2(u.dot(v)).to_degrees(),
    }
}

/// Brute-force `(i, j, rre, rte)` from 3×3 matrices: relative rotation
/// `R_j R_iᵀ`, relative translation `t_j − R_j R_iᵀ t_i`.
fn oracle_pair_errors(pred: &[CameraPose], gt: &[CameraPose]) -> Vec<(usize, usize, f64, f64)> {
    let rel = |p: &[CameraPose], i: usize, j: usize| {
        let (ri, rj) = (p[i].rotation_matrix(), p[j].rotation_matrix());
        let r = rj * ri.transpose();
        (r, p[j].translation - r * p[i].translation)
    };
    let mut out = Vec::new();
    for i in 0..pred.len() {
        for j in i + 1..pred.len() {
            let (rp, tp) = rel(pred, i, j);
            let (rg, tg) = rel(gt, i, j);
            out.push((i, j, matrix_angle_deg(&(rp.transpose() * rg)), direction_angle_deg(&tp, &tg)));
        }
    }
    out
}

fn brute_nn_mean(queries: &[Vec3], reference: &[Vec3]) -> f64 {
    let total: f64 = queries
        .iter()
        .map(|q| reference.iter().map(|r| (r - q).norm()).fold(f64::INFINITY, f64::min))
        .sum();
    total / queries.len() as f64
}

fn random_cloud(rng: &mut impl Rng, n: usize) -> Vec<Vec3> {
    let mut pts: Vec<Vec3> = (0..n).map(|_| random_vec(rng, 2.0)).collect();
    // a few exact duplicates, as voxel-quantized reconstructions produce
    for _ in 0..n / 10 {
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        pts[j] = pts[i];
    }
    pts
}

#[test]
fn criterion_04_metric_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst_err = 0.0f64;
    let mut worst_rate = 0.0f64;
    for set in 0..200 {
        let n = rng.gen_range(2..=12);
        let gt: Vec<CameraPose> =
            (0..n).map(|_| CameraPose::from_parts(random_rotation(&mut rng), random_vec(&mut rng, 3.0))).collect();
        let pred: Vec<CameraPose> = gt
            .iter()
            .map(|p| {
                if set % 10 == 0 {
                    // unrelated predictions exercise large errors
                    CameraPose::from_parts(random_rotation(&mut rng), random_vec(&mut rng, 3.0))
                } else {
                    let r = small_rotation(&mut rng, 25.0) * p.rotation;
                    CameraPose::from_parts(r, p.translation + random_vec(&mut rng, 0.4))
                }
            })
            .collect();
        let errors = pairwise_errors(&pred, &gt).unwrap();
        let oracle = oracle_pair_errors(&pred, &gt);
        assert_eq!(errors.len(), oracle.len());
        for (e, o) in errors.iter().zip(&oracle) {
            assert_eq!((e.i, e.j), (o.0, o.1));
            worst_err = worst_err.max((e.rre_deg - o.2).abs()).max((e.rte_deg - o.3).abs());
        }
        let m = oracle.len() as f64;
        for &theta in &THRESHOLDS {
            let rra = 100.0 * oracle.iter().filter(|o| o.2 < theta).count() as f64 / m;
            let rta = 100.0 * oracle.iter().filter(|o| o.3 < theta).count() as f64 / m;
            worst_rate = worst_rate.max((accuracy_at(&errors, theta, ErrorKind::Rotation).unwrap() - rra).abs());
            worst_rate = worst_rate.max((accuracy_at(&errors, theta, ErrorKind::Translation).unwrap() - rta).abs());
        }
        for (combine, pick) in [(Combine::MinOfErrors, f64::min as fn(f64, f64) -> f64), (Combine::MaxOfErrors, f64::max)] {
            let area = THRESHOLDS
                .iter()
                .map(|&t| 100.0 * oracle.iter().filter(|o| pick(o.2, o.3) < t).count() as f64 / m)
                .sum::<f64>()
                / THRESHOLDS.len() as f64;
            worst_rate = worst_rate.max((auc(&errors, &THRESHOLDS, combine).unwrap() - area).abs());
        }
    }

    let mut worst_cloud = 0.0f64;
    for _ in 0..40 {
        let (n_gt, n_recon) = (rng.gen_range(1..=500), rng.gen_range(1..=500));
        let gt_cloud = random_cloud(&mut rng, n_gt);
        let recon = random_cloud(&mut rng, n_recon);
        let cams = rng.gen_range(3..=8);
        let gt_poses: Vec<CameraPose> =
            (0..cams).map(|_| CameraPose::from_parts(random_rotation(&mut rng), random_vec(&mut rng, 3.0))).collect();
        let pred_poses: Vec<CameraPose> = gt_poses
            .iter()
            .map(|p| CameraPose::from_parts(p.rotation, p.translation + random_vec(&mut rng, 0.3)))
            .collect();
        let (metrics, sim) =
            cloud_metrics(&PointCloud::new(recon.clone()), &PointCloud::new(gt_cloud.clone()), &pred_poses, &gt_poses)
                .unwrap();
        let aligned: Vec<Vec3> = recon.iter().map(|p| sim.apply(p)).collect();
        let pcc = brute_nn_mean(&aligned, &gt_cloud);
        let pca = brute_nn_mean(&gt_cloud, &aligned);
        worst_cloud = worst_cloud
            .max((metrics.pcc - pcc).abs())
            .max((metrics.pca - pca).abs())
            .max((metrics.chamfer - (pca + pcc) / 2.0).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst_err < 1e-9 && worst_rate < 1e-9 && worst_cloud < 1e-9 && secs < 120.0;
    verdict(
        4,
        "metric oracle equivalence",
        ok,
        &format!("pair errors {worst_err:.1e}, rates/AUC {worst_rate:.1e}, clouds {worst_cloud:.1e} ({secs:.1}s)"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 5

fn random_similarity(rng: &mut impl Rng) -> SimilarityTransform {
    SimilarityTransform {
        scale: 10f64.powf(rng.gen_range(-1.0..=1.0)),
        rotation: random_rotation(rng).to_rotation_matrix().into_inner(),
        translation: random_vec(rng, 5.0),
    }
}

#[test]
fn criterion_05_umeyama_recovery() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst_exact = 0.0f64;
    let mut worst_rms = 0.0f64;
    for _ in 0..200 {
        let truth = random_similarity(&mut rng);
        let n = rng.gen_range(10..=60);
        let src: Vec<Vec3> = (0..n).map(|_| random_vec(&mut rng, 1.0)).collect();
        let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
        let fit = umeyama_align(&src, &dst).unwrap();
        worst_exact = worst_exact
            .max((fit.scale - truth.scale).abs() / truth.scale)
            .max((fit.rotation - truth.rotation).amax())
            .max((fit.translation - truth.translation).amax());

        let noisy: Vec<Vec3> = dst.iter().map(|p| p + random_vec(&mut rng, 0.01)).collect();
        let fit = umeyama_align(&src, &noisy).unwrap();
        // per-coordinate RMS, the same units as the per-coordinate noise σ
        let rms = (src.iter().zip(&noisy).map(|(s, d)| (fit.apply(s) - d).norm_squared()).sum::<f64>()
            / (3 * n) as f64)
            .sqrt();
        worst_rms = worst_rms.max(rms);
    }
    let ok = worst_exact < 1e-9 && worst_rms <= 0.02;
    verdict(
        5,
        "umeyama recovery",
        ok,
        &format!("exact-recovery error {worst_exact:.1e}; worst residual RMS with sigma=0.01 noise {worst_rms:.4}"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn criterion_06_gauge_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst_pose = 0.0f64;
    let mut worst_chamfer = 0.0f64;
    for _ in 0..50 {
        let n = rng.gen_range(3..=10);
        let gt: Vec<CameraPose> =
            (0..n).map(|_| CameraPose::from_parts(random_rotation(&mut rng), random_vec(&mut rng, 3.0))).collect();
        let pred: Vec<CameraPose> = gt
            .iter()
            .map(|p| CameraPose::from_parts(small_rotation(&mut rng, 20.0) * p.rotation, p.translation + random_vec(&mut rng, 0.3)))
            .collect();
        let gt_cloud: Vec<Vec3> = (0..300).map(|_| random_vec(&mut rng, 2.0)).collect();
        // the reconstruction lives in the prediction's own (arbitrary) frame
        let frame = random_similarity(&mut rng);
        let recon: Vec<Vec3> = gt_cloud.iter().map(|p| frame.apply(&(p + random_vec(&mut rng, 0.05)))).collect();
        let pred: Vec<CameraPose> = pred.iter().map(|p| frame.transform_pose(p)).collect();

        let measure = |pred: &[CameraPose], recon: &[Vec3]| {
            let errors = pairwise_errors(pred, &gt).unwrap();
            let (cloud, _) =
                cloud_metrics(&PointCloud::new(recon.to_vec()), &PointCloud::new(gt_cloud.clone()), pred, &gt).unwrap();
            (
                auc(&errors, &THRESHOLDS, Combine::default()).unwrap(),
                accuracy_at(&errors, 30.0, ErrorKind::Rotation).unwrap(),
                accuracy_at(&errors, 30.0, ErrorKind::Translation).unwrap(),
                cloud.chamfer,
            )
        };
        let before = measure(&pred, &recon);
        let g = random_similarity(&mut rng);
        let moved_pred: Vec<CameraPose> = pred.iter().map(|p| g.transform_pose(p)).collect();
        let moved_recon: Vec<Vec3> = recon.iter().map(|p| g.apply(p)).collect();
        let after = measure(&moved_pred, &moved_recon);
        worst_pose = worst_pose.max((before.0 - after.0).abs()).max((before.1 - after.1).abs()).max((before.2 - after.2).abs());
        worst_chamfer = worst_chamfer.max((before.3 - after.3).abs());
    }
    let ok = worst_pose < 1e-9 && worst_chamfer < 1e-6;
    verdict(6, "gauge invariance", ok, &format!("AUC/RRA/RTA change {worst_pose:.1e}, Chamfer change {worst_chamfer:.1e}"));
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn criterion_07_batching_contract() {
    let scene = memory_manifest(40, 6, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let allowed: BTreeSet<usize> = [1, 2, 3, 4, 6, 12].into_iter().collect();
    let counts_ok = partition_counts(24).into_iter().collect::<BTreeSet<_>>() == allowed;
    let mut violations = 0;
    let mut bad_partitions = 0;
    let mut bad_tau = 0;
    let mut seen_partitions = BTreeSet::new();
    let mut taus = Vec::with_capacity(10_000);
    for _ in 0..10_000 {
        let b = sample_batch(&scene, 24, &mut rng).unwrap();
        if !b.shared_pose_groups().is_empty() {
            violations += 1;
        }
        let d = b.sequence_lengths.len();
        seen_partitions.insert(d);
        if !allowed.contains(&d) || b.sequence_lengths.iter().any(|&l| l != 24 / d) || b.len() != 24 {
            bad_partitions += 1;
        }
        let thermal = b.thermal_count();
        if thermal != (b.sampled_tau * 24.0).round() as usize || (b.tau - thermal as f64 / 24.0).abs() > 1e-12 {
            bad_tau += 1;
        }
        taus.push(b.sampled_tau);
    }
    taus.sort_by(f64::total_cmp);
    let n = taus.len() as f64;
    let ks = taus
        .iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / n - x).max(x - i as f64 / n))
        .fold(0.0f64, f64::max);
    let ok = counts_ok && violations == 0 && bad_partitions == 0 && bad_tau == 0 && ks < 0.02 && seen_partitions == allowed;
    verdict(
        7,
        "batching contract",
        ok,
        &format!(
            "{violations} shared-pose violations in 10^4 batches, KS {ks:.4}, partitions seen {seen_partitions:?}, {bad_partitions} bad partitions, {bad_tau} bad thermal counts"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------- criteria 8 and 9

struct Desk {
    config: DeskConfig,
    outcome: DeskOutcome,
    models: DeskModels,
    scenes: Vec<SceneData>,
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let config = DeskConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let (outcome, models, scenes) = run_desk_experiment(&config, dir.path()).unwrap();
        Desk { config, outcome, models, scenes }
    })
}

#[test]
fn criterion_08_desk_scale_learning_signal() {
    let d = desk();
    let c = &d.config;
    let setup_ok = c.scene_seeds.len() == 2
        && c.image_size == 64
        && c.model.embed_dim == 64
        && c.model.num_blocks == 6
        && c.finetune.total_steps() <= 2000
        && (c.eval.tau - 0.5).abs() < 1e-12;
    let o = &d.outcome;
    let (gain, shared_gain) = (o.gain_per_modality(), o.gain_shared_token());
    let ok = setup_ok && gain >= 10.0 && shared_gain < gain && o.seconds < 1800.0;
    verdict(
        8,
        "desk-scale learning signal",
        ok,
        &format!(
            "mixed AUC@30 base {:.2}, per-modality {:.2} (gain {:+.2}), shared-token {:.2} (gain {:+.2}); {:.0}s",
            o.base.pooled.auc_30,
            o.per_modality.pooled.auc_30,
            gain,
            o.shared_token.pooled.auc_30,
            shared_gain,
            o.seconds
        ),
    );
    assert!(setup_ok, "desk configuration outside the prescribed scale");
    assert!(gain >= 10.0, "per-modality gain {gain:.2} < 10");
    assert!(shared_gain < gain, "shared-token gain {shared_gain:.2} not below per-modality gain {gain:.2}");
    assert!(o.seconds < 1800.0, "experiment took {:.0}s", o.seconds);
}

#[test]
fn criterion_09_alignment_diagnostic_direction() {
    // statistical oracles first: they do not depend on the trained models
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let g = |m: f64, v: f64| GaussianFit::new(DVector::from_element(1, m), DMatrix::from_element(1, 1, v));
    let closed = |m1: f64, v1: f64, m2: f64, v2: f64| 0.5 * ((v2 / v1).ln() + (v1 + (m1 - m2).powi(2)) / v2 - 1.0);
    let mut worst_j = 0.0f64;
    for _ in 0..100 {
        let (m1, m2) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        let (v1, v2) = (rng.gen_range(0.1..4.0), rng.gen_range(0.1..4.0));
        let j = jeffreys_gaussians(&g(m1, v1), &g(m2, v2)).unwrap();
        worst_j = worst_j.max((j - (closed(m1, v1, m2, v2) + closed(m2, v2, m1, v1))).abs());
        worst_j = worst_j.max((gaussian_kl(&g(m1, v1), &g(m2, v2)).unwrap() - closed(m1, v1, m2, v2)).abs());
    }
    let (a, b) = (rng.gen_range(-1.0..0.0), rng.gen_range(0.0..1.0));
    let mid = (a + b) / 2.0;
    let mut medians = bootstrap_medians(&[a, b], 2000, &mut rng).unwrap();
    medians.sort_by(f64::total_cmp);
    let bands = bootstrap_quantiles(&[a, b], 2000, &[0.25, 0.75], &mut rng).unwrap();
    // exhaustive: resamples (a,a), (a,b), (b,a), (b,b) with medians a, mid, mid, b
    let enumeration_ok = medians == vec![a, mid, mid, b]
        && (bands[0] - (a + 0.75 * (mid - a))).abs() < 1e-12
        && (bands[1] - (mid + 0.25 * (b - mid))).abs() < 1e-12;

    let d = desk();
    let patch = d.config.model.patch_size;
    let batches = analysis_batches(&d.scenes, 12, (0.25, 0.75), 4, patch, 0).unwrap();
    let base = alignment_summary(&d.models.base, &batches, PAIR_CAP, 2000, 0).unwrap();
    let tuned = alignment_summary(&d.models.per_modality, &batches, PAIR_CAP, 2000, 0).unwrap();
    let direction_ok = tuned.last_third_mean < base.last_third_mean && tuned.final_jeffreys < base.final_jeffreys;
    let ok = worst_j < 1e-9 && enumeration_ok && direction_ok;
    verdict(
        9,
        "alignment diagnostic direction",
        ok,
        &format!(
            "last-third mean(r2r - r2t) base {:.4} vs fine-tuned {:.4}; final Jeffreys base {:.3} vs fine-tuned {:.3}; 1-D Jeffreys error {worst_j:.1e}; n=2 bootstrap enumeration {}",
            base.last_third_mean,
            tuned.last_third_mean,
            base.final_jeffreys,
            tuned.final_jeffreys,
            if enumeration_ok { "exact" } else { "mismatch" }
        ),
    );
    assert!(ok);
}

// --------------------------------------------------------------- criterion 10

/// Lanczos log-gamma and the Numerical Recipes continued fraction for the
/// regularized incomplete beta; shares no code with the library.
fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let a = G.iter().enumerate().skip(1).fold(G[0], |acc, (i, g)| acc + g / (x + i as f64));
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let guard = |v: f64| if v.abs() < tiny { tiny } else { v };
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 / guard(1.0 - qab * x / qap);
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 / guard(1.0 + aa * d);
        c = guard(1.0 + aa / c);
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 / guard(1.0 + aa * d);
        c = guard(1.0 + aa / c);
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

fn beta_inc(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let bt = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * beta_cf(a, b, x) / a
    } else {
        1.0 - bt * beta_cf(b, a, 1.0 - x) / b
    }
}

fn t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * beta_inc(df / 2.0, 0.5, df / (df + t * t));
    if t < 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

#[test]
fn criterion_10_statistics_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let sample = [2.0, 3.5, 1.0, 4.25, 3.0];
    let mirrored: Vec<f64> = sample.iter().rev().copied().collect();
    let zero = welch_t_test_one_sided(&sample, &mirrored).unwrap();
    let zero_ok = zero.t == 0.0 && zero.p == 0.5;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (na, nb) = (rng.gen_range(2..15), rng.gen_range(2..15));
        let (sa, sb) = (rng.gen_range(0.2..3.0), rng.gen_range(0.2..3.0));
        let shift = rng.gen_range(-2.0..2.0);
        let a: Vec<f64> = (0..na).map(|_| sa * rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = (0..nb).map(|_| shift + sb * rng.sample::<f64, _>(StandardNormal)).collect();
        let r = welch_t_test_one_sided(&a, &b).unwrap();
        // recompute t and the Welch–Satterthwaite df from scratch as well
        let stats = |x: &[f64]| {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0) / x.len() as f64)
        };
        let ((ma, ea), (mb, eb)) = (stats(&a), stats(&b));
        let t = (ma - mb) / (ea + eb).sqrt();
        let df = (ea + eb).powi(2) / (ea * ea / (na as f64 - 1.0) + eb * eb / (nb as f64 - 1.0));
        worst = worst.max((r.p - t_cdf(t, df)).abs()).max((r.t - t).abs()).max((r.df - df).abs() / df);
    }
    let ok = zero_ok && worst < 1e-9;
    verdict(10, "statistics oracle", ok, &format!("t=0 gives p={}; worst deviation from the incomplete-beta oracle {worst:.1e}", zero.p));
    assert!(ok);
}

// --------------------------------------------------------------- criterion 11

#[test]
fn criterion_11_protocol_fidelity() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = vec![synthetic_scene(dir.path(), "proto_a", 21, 16, 6), synthetic_scene(dir.path(), "proto_b", 22, 16, 6)];

    // two-trajectory scenes: every frame is used once over the two runs
    let mut coverage_ok = true;
    for scene in &scenes {
        let runs = eval_split(&scene.manifest, 0.5).unwrap();
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for run in &runs {
            for id in &run.frame_ids {
                *seen.entry(id.as_str()).or_default() += 1;
            }
        }
        coverage_ok &= seen.len() == scene.manifest.frames.len() && seen.values().all(|&c| c == 1);
    }
    // paired scenes: every pose group is seen once as RGB and once as thermal
    for tau in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let scene = memory_manifest(24, 0, 0);
        let runs = eval_split(&scene, tau).unwrap();
        let mut roles: BTreeMap<(&str, Modality), usize> = BTreeMap::new();
        for run in &runs {
            for (g, &m) in run.pose_groups.iter().zip(&run.modalities) {
                *roles.entry((g.as_str(), m)).or_default() += 1;
            }
        }
        coverage_ok &= roles.len() == 48 && roles.values().all(|&c| c == 1);
    }

    let model = Model::new(ModelConfig { patch_size: 4, embed_dim: 16, num_blocks: 2, num_heads: 2, ..ModelConfig::default() })
        .unwrap();
    let cfg = EvalConfig::default();
    let rows = tau_sweep(Predictor::Model(&model), &scenes, 4, &cfg).unwrap();
    let again = tau_sweep(Predictor::Model(&model), &scenes, 4, &cfg).unwrap();
    let mut reps: BTreeMap<(u64, String), BTreeSet<usize>> = BTreeMap::new();
    for r in &rows {
        reps.entry((r.tau.to_bits(), r.scene.clone())).or_default().insert(r.repetition);
    }
    let seeds: BTreeSet<u64> = rows.iter().map(|r| r.seed).collect();
    let deterministic = rows
        .iter()
        .zip(&again)
        .all(|(a, b)| a.seed == b.seed && a.auc_30 == b.auc_30 && a.realized_tau == b.realized_tau);
    let sweep_ok = cfg.sweep_repetitions == 3
        && rows.len() == cfg.sweep_taus.len() * scenes.len() * 3
        && reps.len() == cfg.sweep_taus.len() * scenes.len()
        && reps.values().all(|r| *r == (0..3).collect())
        && seeds.len() == rows.len()
        && deterministic;
    let ok = coverage_ok && sweep_ok;
    verdict(
        11,
        "protocol fidelity",
        ok,
        &format!(
            "dual-run coverage {}; tau sweep {} rows = {} taus x {} scenes x 3 seeded repetitions, deterministic {deterministic}",
            if coverage_ok { "exact" } else { "broken" },
            rows.len(),
            cfg.sweep_taus.len(),
            scenes.len()
        ),
    );
    assert!(ok);
}
