//! Pose accuracy over all image pairs, registration rate, aligned point-cloud
//! metrics and throughput.

use std::collections::HashSet;

use kiddo::KdTree;
use kiddo::SquaredEuclidean;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    relative_pose, rotation_error_deg, translation_angle_deg, umeyama_align, CameraPose, PointCloud,
    SimilarityTransform, Vec3,
};

/// Thresholds of the multi-view accuracy curve, degrees.
pub const THRESHOLDS: [f64; 3] = [5.0, 15.0, 30.0];
/// Thresholds of the two-view report, degrees.
pub const TWO_VIEW_THRESHOLDS: [f64; 3] = [5.0, 10.0, 20.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosePairError {
    pub i: usize,
    pub j: usize,
    pub rre_deg: f64,
    pub rte_deg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Rotation,
    Translation,
}

/// How rotation and translation errors of a pair merge into the one error
/// thresholded by the AUC.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Combine {
    /// Smaller of the two errors: the per-pair maximum of RRA and RTA hits.
    #[default]
    MinOfErrors,
    /// Larger of the two errors: a pair counts only if both are accurate.
    MaxOfErrors,
}

impl Combine {
    pub fn apply(self, rre: f64, rte: f64) -> f64 {
        match self {
            Combine::MinOfErrors => rre.min(rte),
            Combine::MaxOfErrors => rre.max(rte),
        }
    }
}

/// Errors of every unordered pair `i < j` of relative poses.
pub fn pairwise_errors(pred: &[CameraPose], gt: &[CameraPose]) -> Result<Vec<PosePairError>> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidInput(format!("{} predicted vs {} ground-truth poses", pred.len(), gt.len())));
    }
    if pred.len() < 2 {
        return Err(Error::InvalidInput("pairwise errors need at least two poses".into()));
    }
    let n = pred.len();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let rp = relative_pose(&pred[i], &pred[j]);
            let rg = relative_pose(&gt[i], &gt[j]);
            out.push(PosePairError {
                i,
                j,
                rre_deg: rotation_error_deg(&rp.rotation, &rg.rotation),
                rte_deg: translation_angle_deg(&rp.translation, &rg.translation),
            });
        }
    }
    Ok(out)
}

/// Percentage of pairs whose error is strictly below `theta_deg`.
pub fn accuracy_at(errors: &[PosePairError], theta_deg: f64, kind: ErrorKind) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::InvalidInput("accuracy of an empty error list".into()));
    }
    let hits = errors
        .iter()
        .filter(|e| {
            let v = match kind {
                ErrorKind::Rotation => e.rre_deg,
                ErrorKind::Translation => e.rte_deg,
            };
            v < theta_deg
        })
        .count();
    Ok(100.0 * hits as f64 / errors.len() as f64)
}

/// Discrete AUC: mean over `thresholds` of the accuracy of the combined error.
pub fn auc(errors: &[PosePairError], thresholds: &[f64], combine: Combine) -> Result<f64> {
    if errors.is_empty() || thresholds.is_empty() {
        return Err(Error::InvalidInput("auc needs errors and thresholds".into()));
    }
    let n = errors.len() as f64;
    let sum: f64 = thresholds
        .iter()
        .map(|&t| 100.0 * errors.iter().filter(|e| combine.apply(e.rre_deg, e.rte_deg) < t).count() as f64 / n)
        .sum();
    Ok(sum / thresholds.len() as f64)
}

pub fn registration_rate(total_frames: usize, registered_frames: usize) -> Result<f64> {
    if total_frames == 0 {
        return Err(Error::InvalidInput("registration rate of zero frames".into()));
    }
    if registered_frames > total_frames {
        return Err(Error::InvalidInput(format!("{registered_frames} registered of {total_frames} frames")));
    }
    Ok(100.0 * registered_frames as f64 / total_frames as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudMetrics {
    pub pca: f64,
    pub pcc: f64,
    pub chamfer: f64,
}

/// Exact nearest-neighbour distances from every query to the reference set.
pub fn nearest_distances(queries: &[Vec3], reference: &[Vec3]) -> Vec<f64> {
    // a bucket cannot be split when it fills with identical points, so exact
    // duplicates are collapsed first; they cannot change a nearest distance
    let mut seen = HashSet::new();
    let mut tree: KdTree<f64, 3> = KdTree::with_capacity(reference.len());
    for (i, p) in reference.iter().enumerate() {
        if seen.insert([p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]) {
            tree.add(&[p.x, p.y, p.z], i as u64);
        }
    }
    queries
        .iter()
        .map(|q| {
            let nn = tree.nearest_one::<SquaredEuclidean>(&[q.x, q.y, q.z]);
            // recompute from the coordinates so the value does not depend on
            // the tree's accumulation order
            (reference[nn.item as usize] - q).norm()
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Completeness / accuracy of already-aligned clouds.
pub fn cloud_distances(recon: &PointCloud, gt: &PointCloud) -> Result<CloudMetrics> {
    if recon.is_empty() || gt.is_empty() {
        return Err(Error::InvalidInput("cloud metrics need nonempty clouds".into()));
    }
    let pcc = mean(&nearest_distances(&recon.points, &gt.points));
    let pca = mean(&nearest_distances(&gt.points, &recon.points));
    Ok(CloudMetrics { pca, pcc, chamfer: (pca + pcc) / 2.0 })
}

/// Aligns the reconstruction with a similarity fitted on camera centers
/// (prediction → ground truth), then measures nearest-neighbour distances:
/// PCC from reconstruction to ground truth, PCA the other way round.
pub fn cloud_metrics(
    recon: &PointCloud,
    gt: &PointCloud,
    pred_poses: &[CameraPose],
    gt_poses: &[CameraPose],
) -> Result<(CloudMetrics, SimilarityTransform)> {
    if pred_poses.len() != gt_poses.len() {
        return Err(Error::InvalidInput("pose lists differ in length".into()));
    }
    if pred_poses.len() < 3 {
        return Err(Error::Degenerate("alignment needs at least three registered cameras".into()));
    }
    let src: Vec<Vec3> = pred_poses.iter().map(CameraPose::center).collect();
    let dst: Vec<Vec3> = gt_poses.iter().map(CameraPose::center).collect();
    let sim = umeyama_align(&src, &dst)?;
    let aligned = recon.transformed(&sim);
    Ok((cloud_distances(&aligned, gt)?, sim))
}

/// Frames per second of one timed inference call.
pub fn fps_measure(frames: usize, seconds: f64) -> Result<f64> {
    if frames == 0 {
        return Err(Error::InvalidInput("fps of zero frames".into()));
    }
    if !(seconds > 0.0) {
        return Err(Error::InvalidInput(format!("elapsed time {seconds} must be positive")));
    }
    Ok(frames as f64 / seconds)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FpsStats {
    pub mean: f64,
    pub variance: f64,
    pub runs: usize,
}

/// Mean and sample variance over repeated measurements.
pub fn fps_stats(samples: &[f64]) -> FpsStats {
    if samples.is_empty() {
        return FpsStats::default();
    }
    let m = mean(samples);
    let var = if samples.len() > 1 {
        samples.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (samples.len() - 1) as f64
    } else {
        0.0
    };
    FpsStats { mean: m, variance: var, runs: samples.len() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub theta_deg: f64,
    pub rra: f64,
    pub rta: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoViewReport {
    pub rre_deg: f64,
    pub rte_deg: f64,
    pub rows: Vec<ThresholdRow>,
}

/// Single relative-pose error thresholded at 5/10/20°.
pub fn two_view_report(pred: &[CameraPose; 2], gt: &[CameraPose; 2], combine: Combine) -> Result<TwoViewReport> {
    let e = pairwise_errors(pred, gt)?;
    let rows = TWO_VIEW_THRESHOLDS
        .iter()
        .map(|&t| {
            Ok(ThresholdRow {
                theta_deg: t,
                rra: accuracy_at(&e, t, ErrorKind::Rotation)?,
                rta: accuracy_at(&e, t, ErrorKind::Translation)?,
                accuracy: auc(&e, &[t], combine)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TwoViewReport { rre_deg: e[0].rre_deg, rte_deg: e[0].rte_deg, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc_30: f64,
    pub rra_30: f64,
    pub rta_30: f64,
    pub thresholds: Vec<ThresholdRow>,
    pub registration_rate_pct: f64,
    pub pca: f64,
    pub pcc: f64,
    pub chamfer: f64,
    pub fps: f64,
    pub fps_variance: f64,
    pub combine: Combine,
    pub pairs: usize,
    pub frames: usize,
}

pub const CSV_HEADER: &str = "AUC,RRA,RTA,PCA,PCC,Chamfer,Reg,FPS";

impl MetricsReport {
    /// Pose part from pooled pair errors; cloud and FPS fields are filled by the caller.
    pub fn from_errors(errors: &[PosePairError], combine: Combine, frames: usize, registered: usize) -> Result<Self> {
        let thresholds = THRESHOLDS
            .iter()
            .map(|&t| {
                Ok(ThresholdRow {
                    theta_deg: t,
                    rra: accuracy_at(errors, t, ErrorKind::Rotation)?,
                    rta: accuracy_at(errors, t, ErrorKind::Translation)?,
                    accuracy: auc(errors, &[t], combine)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            auc_30: auc(errors, &THRESHOLDS, combine)?,
            rra_30: thresholds[2].rra,
            rta_30: thresholds[2].rta,
            thresholds,
            registration_rate_pct: registration_rate(frames, registered)?,
            pca: f64::NAN,
            pcc: f64::NAN,
            chamfer: f64::NAN,
            fps: f64::NAN,
            fps_variance: f64::NAN,
            combine,
            pairs: errors.len(),
            frames,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.4},{:.4},{:.4},{:.6},{:.6},{:.6},{:.2},{:.3}",
            self.auc_30, self.rra_30, self.rta_30, self.pca, self.pcc, self.chamfer, self.registration_rate_pct, self.fps
        )
    }
}
