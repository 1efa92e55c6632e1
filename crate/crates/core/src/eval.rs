//! Evaluation protocol: dual-run mixed-modality splits per scene, pooled
//! reports across scenes and the τ-sweep with seeded repetitions.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{eval_split, sweep_split, BatchSpec, SceneData};
use crate::error::{Error, Result};
use crate::geometry::{backproject, CameraPose, DepthMap, Intrinsics, PointCloud};
use crate::metrics::{cloud_metrics, fps_measure, fps_stats, pairwise_errors, Combine, MetricsReport, PosePairError};
use crate::model::{Model, PoseEncoding};
use crate::training::prepare_batch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tau: f64,
    pub combine: Combine,
    /// Keep every `cloud_stride`-th pixel along both axes when building clouds.
    pub cloud_stride: usize,
    pub sweep_taus: Vec<f64>,
    pub sweep_repetitions: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            combine: Combine::default(),
            cloud_stride: 4,
            sweep_taus: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            sweep_repetitions: 3,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(0.0..=1.0).contains(&self.tau) {
            problems.push(format!("tau {} outside [0, 1]", self.tau));
        }
        if self.cloud_stride == 0 {
            problems.push("cloud_stride must be positive".into());
        }
        if self.sweep_taus.iter().any(|t| !(0.0..=1.0).contains(t)) {
            problems.push("sweep taus must lie in [0, 1]".into());
        }
        if self.sweep_repetitions == 0 {
            problems.push("sweep_repetitions must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Source of predictions: a network, or the ground truth itself (a sanity
/// check of the harness that must score perfectly).
#[derive(Clone, Copy)]
pub enum Predictor<'a> {
    Model(&'a Model),
    GroundTruth,
}

/// Predictions for one batch, poses relative to the first frame of each sequence.
struct BatchPrediction {
    poses: Vec<CameraPose>,
    intrinsics: Vec<Intrinsics>,
    depths: Vec<DepthMap>,
    masks: Vec<Option<Vec<bool>>>,
    seconds: f64,
}

fn predict(predictor: Predictor<'_>, scene: &SceneData, spec: &BatchSpec, patch: usize) -> Result<BatchPrediction> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = prepare_batch(scene, spec, None, patch, &mut rng)?;
    let (w, h) = (batch.images[0].width as u32, batch.images[0].height as u32);
    match predictor {
        Predictor::Model(model) => {
            let frames = batch.frames();
            let start = Instant::now();
            let pred = model.predict(&frames, &batch.sequence_lengths)?;
            let seconds = start.elapsed().as_secs_f64();
            Ok(BatchPrediction {
                poses: pred.poses.iter().map(PoseEncoding::to_pose).collect(),
                intrinsics: pred.poses.iter().map(|p| p.intrinsics(w, h)).collect(),
                masks: vec![None; pred.depths.len()],
                depths: pred.depths.into_iter().map(|d| d.depth).collect(),
                seconds,
            })
        }
        Predictor::GroundTruth => {
            let start = Instant::now();
            let mut depths = Vec::new();
            let mut masks = Vec::new();
            for id in &spec.frame_ids {
                let frame = scene.frame(id)?;
                let depth = frame
                    .depth
                    .clone()
                    .ok_or_else(|| Error::InvalidInput(format!("frame {id} has no depth")))?;
                masks.push(Some(depth.data.iter().map(|d| d.is_finite() && *d > 0.0).collect()));
                depths.push(depth);
            }
            let intrinsics = spec.frame_ids.iter().map(|id| scene.frame(id).map(|f| f.record.intrinsics)).collect::<Result<_>>()?;
            Ok(BatchPrediction {
                poses: batch.gt_poses.iter().map(PoseEncoding::to_pose).collect(),
                intrinsics,
                depths,
                masks,
                seconds: start.elapsed().as_secs_f64().max(1e-9),
            })
        }
    }
}

fn stride_mask(depth: &DepthMap, valid: Option<&[bool]>, stride: usize) -> Vec<bool> {
    (0..depth.data.len())
        .map(|i| {
            let (u, v) = (i % depth.width, i / depth.width);
            u % stride == 0 && v % stride == 0 && valid.map_or(true, |m| m[i])
        })
        .collect()
}

/// Metrics of one evaluation batch together with its raw pair errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub frame_ids: Vec<String>,
    pub tau: f64,
    pub metrics: MetricsReport,
    pub errors: Vec<PosePairError>,
}

/// Runs `predictor` on one batch and scores it against the scene's ground truth.
pub fn evaluate_batch(
    predictor: Predictor<'_>,
    scene: &SceneData,
    spec: &BatchSpec,
    patch: usize,
    config: &EvalConfig,
) -> Result<RunReport> {
    let pred = predict(predictor, scene, spec, patch)?;
    let gt_poses: Vec<CameraPose> = spec
        .frame_ids
        .iter()
        .map(|id| {
            scene.frame(id)?.pose.ok_or_else(|| Error::InvalidInput(format!("frame {id} has no ground-truth pose")))
        })
        .collect::<Result<_>>()?;

    // relative poses are only meaningful inside one sequence
    let mut errors = Vec::new();
    let mut start = 0;
    for &len in &spec.sequence_lengths {
        if len >= 2 {
            for mut e in pairwise_errors(&pred.poses[start..start + len], &gt_poses[start..start + len])? {
                e.i += start;
                e.j += start;
                errors.push(e);
            }
        }
        start += len;
    }
    if errors.is_empty() {
        return Err(Error::InvalidInput("evaluation batch has no frame pairs".into()));
    }
    let mut metrics = MetricsReport::from_errors(&errors, config.combine, spec.len(), pred.poses.len())?;

    let mut recon = PointCloud::default();
    let mut gt_cloud = PointCloud::default();
    for (i, id) in spec.frame_ids.iter().enumerate() {
        let frame = scene.frame(id)?;
        let depth = &pred.depths[i];
        let keep = stride_mask(depth, pred.masks[i].as_deref(), config.cloud_stride);
        recon.extend(backproject(depth, Some(&keep), &pred.poses[i], &pred.intrinsics[i])?);
        if let Some(gt_depth) = &frame.depth {
            let valid: Vec<bool> = gt_depth.data.iter().map(|d| d.is_finite() && *d > 0.0).collect();
            let keep = stride_mask(gt_depth, Some(&valid), config.cloud_stride);
            gt_cloud.extend(backproject(gt_depth, Some(&keep), &gt_poses[i], &frame.record.intrinsics)?);
        }
    }
    // sequences are predicted in their own gauge, so clouds are aligned per batch only
    // when the whole batch is one sequence
    if spec.sequence_lengths.len() == 1 && !recon.is_empty() && !gt_cloud.is_empty() {
        let (cloud, _) = cloud_metrics(&recon, &gt_cloud, &pred.poses, &gt_poses)?;
        metrics.pca = cloud.pca;
        metrics.pcc = cloud.pcc;
        metrics.chamfer = cloud.chamfer;
    }
    metrics.fps = fps_measure(spec.len(), pred.seconds)?;
    metrics.fps_variance = 0.0;
    Ok(RunReport { frame_ids: spec.frame_ids.clone(), tau: spec.tau, metrics, errors })
}

/// Merges runs: pair errors are pooled before thresholding, cloud metrics and
/// FPS are averaged over runs.
pub fn pool_runs(runs: &[&RunReport], combine: Combine) -> Result<MetricsReport> {
    if runs.is_empty() {
        return Err(Error::InvalidInput("nothing to pool".into()));
    }
    let errors: Vec<PosePairError> = runs.iter().flat_map(|r| r.errors.iter().copied()).collect();
    let frames = runs.iter().map(|r| r.metrics.frames).sum();
    let registered = runs.iter().map(|r| (r.metrics.registration_rate_pct / 100.0 * r.metrics.frames as f64).round() as usize).sum();
    let mut report = MetricsReport::from_errors(&errors, combine, frames, registered)?;
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| runs.iter().map(|r| f(&r.metrics)).sum::<f64>() / runs.len() as f64;
    report.pca = mean(&|m| m.pca);
    report.pcc = mean(&|m| m.pcc);
    report.chamfer = (report.pca + report.pcc) / 2.0;
    let fps = fps_stats(&runs.iter().map(|r| r.metrics.fps).collect::<Vec<_>>());
    report.fps = fps.mean;
    report.fps_variance = fps.variance;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub scene: String,
    pub runs: Vec<RunReport>,
    pub combined: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: Vec<SceneReport>,
    pub pooled: MetricsReport,
}

/// Dual-run evaluation of every scene at the configured τ, plus the pooled report.
pub fn evaluate(predictor: Predictor<'_>, scenes: &[SceneData], patch: usize, config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidInput("no scenes to evaluate".into()));
    }
    let mut reports = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let runs = eval_split(&scene.manifest, config.tau)?
            .iter()
            .map(|spec| evaluate_batch(predictor, scene, spec, patch, config))
            .collect::<Result<Vec<_>>>()?;
        let combined = pool_runs(&runs.iter().collect::<Vec<_>>(), config.combine)?;
        reports.push(SceneReport { scene: scene.name().to_string(), runs, combined });
    }
    let all: Vec<&RunReport> = reports.iter().flat_map(|s| s.runs.iter()).collect();
    let pooled = pool_runs(&all, config.combine)?;
    Ok(EvalReport { scenes: reports, pooled })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub scene: String,
    pub repetition: usize,
    pub seed: u64,
    pub realized_tau: f64,
    pub auc_30: f64,
    pub rra_30: f64,
    pub rta_30: f64,
    pub chamfer: f64,
}

pub const SWEEP_CSV_HEADER: &str = "tau,scene,repetition,seed,realized_tau,AUC,RRA,RTA,Chamfer";

impl SweepRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.6}",
            self.tau, self.scene, self.repetition, self.seed, self.realized_tau, self.auc_30, self.rra_30, self.rta_30, self.chamfer
        )
    }
}

/// Seed of one sweep repetition; distinct per (τ index, scene, repetition).
pub fn sweep_seed(base: u64, tau_index: usize, scene_index: usize, repetition: usize) -> u64 {
    base.wrapping_mul(1_000_003)
        .wrapping_add((tau_index as u64) << 32)
        .wrapping_add((scene_index as u64) << 16)
        .wrapping_add(repetition as u64)
}

/// τ-sweep: for every τ in the grid and every scene, `sweep_repetitions`
/// random modality assignments, each with its own recorded seed.
pub fn tau_sweep(predictor: Predictor<'_>, scenes: &[SceneData], patch: usize, config: &EvalConfig) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let mut rows = Vec::with_capacity(config.sweep_taus.len() * scenes.len() * config.sweep_repetitions);
    for (ti, &tau) in config.sweep_taus.iter().enumerate() {
        for (si, scene) in scenes.iter().enumerate() {
            for rep in 0..config.sweep_repetitions {
                let seed = sweep_seed(config.seed, ti, si, rep);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let spec = sweep_split(&scene.manifest, tau, &mut rng)?;
                let run = evaluate_batch(predictor, scene, &spec, patch, config)?;
                rows.push(SweepRow {
                    tau,
                    scene: scene.name().to_string(),
                    repetition: rep,
                    seed,
                    realized_tau: spec.tau,
                    auc_30: run.metrics.auc_30,
                    rra_30: run.metrics.rra_30,
                    rta_30: run.metrics.rta_30,
                    chamfer: run.metrics.chamfer,
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_scene, SyntheticSceneConfig};
    use crate::model::ModelConfig;
    use std::collections::BTreeMap;

    fn small_scene(dir: &std::path::Path, seed: u64) -> SceneData {
        let mut cfg = SyntheticSceneConfig::random(&format!("s{seed}"), seed);
        cfg.width = 32;
        cfg.height = 32;
        for t in &mut cfg.trajectories {
            t.frames = 4;
        }
        let manifest = generate_synthetic_scene(&cfg, seed, &dir.join(format!("s{seed}"))).unwrap();
        SceneData::load(manifest).unwrap()
    }

    #[test]
    fn ground_truth_scores_perfectly() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = vec![small_scene(dir.path(), 1), small_scene(dir.path(), 2)];
        let report = evaluate(Predictor::GroundTruth, &scenes, 8, &EvalConfig::default()).unwrap();
        for m in std::iter::once(&report.pooled).chain(report.scenes.iter().map(|s| &s.combined)) {
            assert!((m.auc_30 - 100.0).abs() < 1e-9, "{m:?}");
            assert!(m.chamfer < 1e-9, "{m:?}");
            assert_eq!(m.registration_rate_pct, 100.0);
        }
        // 2 scenes × 2 runs × C(8, 2) pairs pooled
        assert_eq!(report.pooled.pairs, 4 * 28);
    }

    #[test]
    fn dual_runs_cover_each_frame_once_per_role() {
        let dir = tempfile::tempdir().unwrap();
        let scene = small_scene(dir.path(), 3);
        let runs = eval_split(&scene.manifest, 0.5).unwrap();
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for run in &runs {
            for id in &run.frame_ids {
                *seen.entry(id.as_str()).or_default() += 1;
            }
        }
        assert_eq!(seen.len(), scene.manifest.frames.len());
        assert!(seen.values().all(|&c| c == 1));
    }

    #[test]
    fn sweep_row_count_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = vec![small_scene(dir.path(), 4), small_scene(dir.path(), 5)];
        let model = Model::new(ModelConfig { embed_dim: 16, num_blocks: 2, num_heads: 2, ..ModelConfig::default() }).unwrap();
        let cfg = EvalConfig { sweep_taus: vec![0.25, 0.5, 0.75], ..EvalConfig::default() };
        let rows = tau_sweep(Predictor::Model(&model), &scenes, 8, &cfg).unwrap();
        assert_eq!(rows.len(), 3 * 2 * 3);
        let again = tau_sweep(Predictor::Model(&model), &scenes, 8, &cfg).unwrap();
        for (a, b) in rows.iter().zip(&again) {
            assert_eq!((a.seed, a.auc_30, a.realized_tau), (b.seed, b.auc_30, b.realized_tau));
        }
        let seeds: std::collections::BTreeSet<u64> = rows.iter().map(|r| r.seed).collect();
        assert_eq!(seeds.len(), rows.len());
    }
}
