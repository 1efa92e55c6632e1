//! Multitask objective: `λ·L_camera + L_depth`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PoseEncoding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_camera: f64,
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_camera: 5.0, huber_delta: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_camera > 0.0 && self.lambda_camera.is_finite()) {
            return Err(Error::Config(format!("lambda_camera must be positive, got {}", self.lambda_camera)));
        }
        if !(self.huber_delta > 0.0 && self.huber_delta.is_finite()) {
            return Err(Error::Config(format!("huber_delta must be positive, got {}", self.huber_delta)));
        }
        Ok(())
    }
}

pub fn huber(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a <= delta {
        0.5 * x * x
    } else {
        delta * (a - 0.5 * delta)
    }
}

pub fn huber_grad(x: f64, delta: f64) -> f64 {
    x.clamp(-delta, delta)
}

/// Loss value with its gradient w.r.t. the predicted encodings.
#[derive(Clone, Debug)]
pub struct CameraLoss {
    pub value: f64,
    pub grad: Vec<[f64; 9]>,
}

/// Mean over frames of the summed element-wise Huber loss between 9-vector
/// encodings. The ground-truth quaternion is taken with `w ≥ 0` and the
/// predicted one is flipped onto the same hemisphere before differencing.
pub fn camera_loss(pred: &[PoseEncoding], gt: &[PoseEncoding], weights: &LossWeights) -> Result<CameraLoss> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidInput(format!("{} predicted poses vs {} targets", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Ok(CameraLoss { value: 0.0, grad: Vec::new() });
    }
    let n = pred.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        let mut g = g.0;
        if g[0] < 0.0 {
            g[..4].iter_mut().for_each(|v| *v = -*v);
        }
        let dot: f64 = (0..4).map(|i| p.0[i] * g[i]).sum();
        let sign = if dot < 0.0 { -1.0 } else { 1.0 };
        let mut gr = [0.0; 9];
        for i in 0..9 {
            let s = if i < 4 { sign } else { 1.0 };
            let r = s * p.0[i] - g[i];
            value += huber(r, weights.huber_delta);
            gr[i] = s * huber_grad(r, weights.huber_delta) / n;
        }
        grad.push(gr);
    }
    Ok(CameraLoss { value: value / n, grad })
}

#[derive(Clone, Debug)]
pub struct DepthLoss {
    pub value: f64,
    pub d_depth: Vec<f64>,
    pub d_log_sigma: Vec<f64>,
    /// Set when no pixel was valid; the loss is then defined as zero.
    pub empty_mask: bool,
}

/// Laplace negative log-likelihood `|d - d̂|/σ + log σ`, `σ = exp(log_sigma)`,
/// averaged over valid pixels.
pub fn depth_loss(pred: &[f64], log_sigma: &[f64], gt: &[f64], mask: &[bool]) -> Result<DepthLoss> {
    if pred.len() != gt.len() || log_sigma.len() != gt.len() || mask.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "depth loss shapes differ: pred {}, log_sigma {}, gt {}, mask {}",
            pred.len(),
            log_sigma.len(),
            gt.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    let mut d_depth = vec![0.0; gt.len()];
    let mut d_log_sigma = vec![0.0; gt.len()];
    if count == 0 {
        return Ok(DepthLoss { value: 0.0, d_depth, d_log_sigma, empty_mask: true });
    }
    let n = count as f64;
    let mut value = 0.0;
    for i in 0..gt.len() {
        if !mask[i] {
            continue;
        }
        let inv_sigma = (-log_sigma[i]).exp();
        let diff = pred[i] - gt[i];
        value += diff.abs() * inv_sigma + log_sigma[i];
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        d_depth[i] = sign * inv_sigma / n;
        d_log_sigma[i] = (1.0 - diff.abs() * inv_sigma) / n;
    }
    Ok(DepthLoss { value: value / n, d_depth, d_log_sigma, empty_mask: false })
}

/// `λ·camera + depth`; non-finite inputs abort training.
pub fn total_loss(camera: f64, depth: f64, weights: &LossWeights) -> Result<f64> {
    if !camera.is_finite() || !depth.is_finite() {
        return Err(Error::NonFinite { batch: format!("camera loss {camera}, depth loss {depth}") });
    }
    Ok(weights.lambda_camera * camera + depth)
}
