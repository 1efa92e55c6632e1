//! Feature-space diagnostics: RGB/thermal cosine-alignment profiles per layer,
//! Gaussian-fit Jeffreys divergence, PCA embeddings, scene bootstrap and
//! Welch significance tests.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{sample_batch_with, SceneData, TauSource};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::model::{BatchLayout, Model};
use crate::training::{prepare_batch, PreparedBatch};

/// Cap on token pairs per layer and pair kind.
pub const PAIR_CAP: usize = 100_000;

/// Mean cosine similarity over pairs, or over `cap` pairs drawn uniformly
/// with a fixed seed when there are more.
fn mean_pair_cosine(
    unit: &[Vec<f64>],
    left: &[usize],
    right: &[usize],
    frame: &[usize],
    same_set: bool,
    cap: usize,
    seed: u64,
) -> Option<f64> {
    let dot = |i: usize, j: usize| unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum::<f64>();
    // pairs from distinct frames; within one set each unordered pair once
    let total: usize = if same_set {
        let mut per_frame = std::collections::BTreeMap::<usize, usize>::new();
        for &i in left {
            *per_frame.entry(frame[i]).or_default() += 1;
        }
        let n = left.len();
        (n * n.saturating_sub(1) - per_frame.values().map(|c| c * (c - 1)).sum::<usize>()) / 2
    } else {
        left.iter().map(|&i| right.iter().filter(|&&j| frame[j] != frame[i]).count()).sum()
    };
    if total == 0 {
        return None;
    }
    let (mut sum, mut count) = (0.0, 0usize);
    if total <= cap {
        for (a, &i) in left.iter().enumerate() {
            let others = if same_set { &right[a + 1..] } else { right };
            for &j in others {
                if frame[i] != frame[j] {
                    sum += dot(i, j);
                    count += 1;
                }
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        while count < cap {
            let i = left[rng.gen_range(0..left.len())];
            let j = right[rng.gen_range(0..right.len())];
            if frame[i] != frame[j] {
                sum += dot(i, j);
                count += 1;
            }
        }
    }
    Some(sum / count as f64)
}

/// `(x_r2r, x_r2t)` of one layer: mean cosine similarity of patch tokens over
/// RGB/RGB pairs and RGB/thermal pairs, always from distinct frames. Camera
/// tokens are excluded.
pub fn cosine_alignment(layer: &Array2<f64>, layout: &BatchLayout, cap: usize, seed: u64) -> Result<(f64, f64)> {
    let rows = layout.patch_rows();
    let t = layout.tokens_per_frame();
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|&r| {
            let v: Vec<f64> = layer.row(r).to_vec();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                v.iter().map(|x| x / n).collect()
            } else {
                v
            }
        })
        .collect();
    let frame: Vec<usize> = rows.iter().map(|&r| r / t).collect();
    let of = |m: Modality| -> Vec<usize> {
        (0..rows.len()).filter(|&k| layout.frames[frame[k]].modality == m).collect()
    };
    let (rgb, thermal) = (of(Modality::Rgb), of(Modality::Thermal));
    if rgb.is_empty() || thermal.is_empty() {
        return Err(Error::InvalidInput("cosine alignment needs both modalities in the batch".into()));
    }
    let r2r = mean_pair_cosine(&unit, &rgb, &rgb, &frame, true, cap, seed)
        .ok_or_else(|| Error::InvalidInput("cosine alignment needs RGB tokens from two frames".into()))?;
    let r2t = mean_pair_cosine(&unit, &rgb, &thermal, &frame, false, cap, seed.wrapping_add(1)).expect("distinct frames");
    Ok((r2r, r2t))
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn median(values: &[f64]) -> f64 {
    quantile(&sorted(values), 0.5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStat {
    pub layer: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub count: usize,
}

/// Per layer, the spread across scenes of the scene-mean `x_r2r − x_r2t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAlignmentProfile {
    pub layers: Vec<LayerStat>,
    /// `per_scene[s][l]`: mean difference of scene `s` at layer `l`.
    pub per_scene: Vec<Vec<f64>>,
    pub scenes: Vec<String>,
}

impl LayerAlignmentProfile {
    /// Mean of the per-layer medians over the last third of the layers.
    pub fn last_third_mean(&self) -> f64 {
        let n = self.layers.len();
        let tail = &self.layers[n - n.div_ceil(3)..];
        tail.iter().map(|l| l.median).sum::<f64>() / tail.len() as f64
    }
}

/// Aggregates per-batch layer differences: mean within each scene, then
/// median and quartiles across scenes.
pub fn aggregate_profile(per_batch: &[(String, Vec<f64>)]) -> Result<LayerAlignmentProfile> {
    if per_batch.is_empty() {
        return Err(Error::InvalidInput("no batches to profile".into()));
    }
    let layers = per_batch[0].1.len();
    let mut scenes: Vec<String> = Vec::new();
    for (s, _) in per_batch {
        if !scenes.contains(s) {
            scenes.push(s.clone());
        }
    }
    let per_scene: Vec<Vec<f64>> = scenes
        .iter()
        .map(|s| {
            let rows: Vec<&Vec<f64>> = per_batch.iter().filter(|(n, _)| n == s).map(|(_, v)| v).collect();
            (0..layers).map(|l| rows.iter().map(|r| r[l]).sum::<f64>() / rows.len() as f64).collect()
        })
        .collect();
    let stats = (0..layers)
        .map(|l| {
            let v = sorted(&per_scene.iter().map(|s| s[l]).collect::<Vec<_>>());
            LayerStat { layer: l, median: quantile(&v, 0.5), q25: quantile(&v, 0.25), q75: quantile(&v, 0.75), count: v.len() }
        })
        .collect();
    Ok(LayerAlignmentProfile { layers: stats, per_scene, scenes })
}

/// Differences `x_r2r − x_r2t` at every block output of one batch.
pub fn batch_layer_differences(model: &Model, batch: &PreparedBatch, cap: usize, seed: u64) -> Result<Vec<f64>> {
    let pred = model.predict(&batch.frames(), &batch.sequence_lengths)?;
    pred.layers
        .iter()
        .enumerate()
        .map(|(l, layer)| cosine_alignment(layer, &pred.layout, cap, seed.wrapping_add(l as u64 * 2)).map(|(a, b)| a - b))
        .collect()
}

pub fn layer_cosine_profile(model: &Model, batches: &[(String, PreparedBatch)], cap: usize, seed: u64) -> Result<LayerAlignmentProfile> {
    let per_batch = batches
        .iter()
        .map(|(scene, b)| Ok((scene.clone(), batch_layer_differences(model, b, cap, seed)?)))
        .collect::<Result<Vec<_>>>()?;
    aggregate_profile(&per_batch)
}

/// Analysis batches: one unaugmented sequence of `batch_size` frames per
/// draw, τ uniform in `tau_range`, `per_scene` draws for every scene.
pub fn analysis_batches(
    scenes: &[SceneData],
    batch_size: usize,
    tau_range: (f64, f64),
    per_scene: usize,
    patch: usize,
    seed: u64,
) -> Result<Vec<(String, PreparedBatch)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for scene in scenes {
        for _ in 0..per_scene {
            let tau = rng.gen_range(tau_range.0..=tau_range.1);
            let spec = sample_batch_with(&scene.manifest, batch_size, TauSource::Fixed(tau), Some(&[1]), &mut rng)?;
            out.push((scene.name().to_string(), prepare_batch(scene, &spec, None, patch, &mut rng)?));
        }
    }
    Ok(out)
}

/// Patch tokens of one modality at one layer, stacked over batches.
pub fn modality_tokens(model: &Model, batches: &[(String, PreparedBatch)], layer: usize, modality: Modality) -> Result<Array2<f64>> {
    let mut rows: Vec<f64> = Vec::new();
    let mut n = 0;
    let d = model.config.embed_dim;
    for (_, b) in batches {
        let pred = model.predict(&b.frames(), &b.sequence_lengths)?;
        let l = pred.layers.get(layer).ok_or_else(|| Error::InvalidInput(format!("layer {layer} out of range")))?;
        let t = pred.layout.tokens_per_frame();
        for r in pred.layout.patch_rows() {
            if pred.layout.frames[r / t].modality == modality {
                rows.extend(l.row(r).iter());
                n += 1;
            }
        }
    }
    Ok(Array2::from_shape_vec((n, d), rows).expect("token rows"))
}

/// Everything the alignment study reports for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub profile: LayerAlignmentProfile,
    /// Per layer, `[q25, q75]` of the scene-bootstrapped median.
    pub bootstrap_bands: Vec<[f64; 2]>,
    pub last_third_mean: f64,
    /// Jeffreys divergence between RGB and thermal patch tokens of the last block.
    pub final_jeffreys: f64,
}

pub fn alignment_summary(
    model: &Model,
    batches: &[(String, PreparedBatch)],
    cap: usize,
    resamples: usize,
    seed: u64,
) -> Result<AlignmentSummary> {
    let profile = layer_cosine_profile(model, batches, cap, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bootstrap_bands = (0..profile.layers.len())
        .map(|l| {
            let values: Vec<f64> = profile.per_scene.iter().map(|s| s[l]).collect();
            bootstrap_quantiles(&values, resamples, &[0.25, 0.75], &mut rng).map(|q| [q[0], q[1]])
        })
        .collect::<Result<Vec<_>>>()?;
    let last = model.config.num_blocks - 1;
    let rgb = modality_tokens(model, batches, last, Modality::Rgb)?;
    let thermal = modality_tokens(model, batches, last, Modality::Thermal)?;
    Ok(AlignmentSummary {
        last_third_mean: profile.last_third_mean(),
        final_jeffreys: jeffreys_divergence(&rgb, &thermal)?,
        profile,
        bootstrap_bands,
    })
}

/// Mean and ridge-regularized sample covariance of a token population.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub epsilon: f64,
}

impl GaussianFit {
    /// Sample mean and unbiased covariance plus `ε·I` with
    /// `ε = 1e-6 · trace(Σ) / d`.
    pub fn fit(samples: &Array2<f64>) -> Result<Self> {
        let (n, d) = samples.dim();
        if n < 2 || d == 0 {
            return Err(Error::InvalidInput(format!("gaussian fit needs >= 2 samples, got {n}")));
        }
        let x = DMatrix::from_row_iterator(n, d, samples.iter().copied());
        let mean = DVector::from_iterator(d, (0..d).map(|j| x.column(j).sum() / n as f64));
        let mut centered = x;
        for j in 0..d {
            let m = mean[j];
            centered.column_mut(j).add_scalar_mut(-m);
        }
        let mut cov = centered.transpose() * &centered / (n - 1) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        let epsilon = 1e-6 * cov.trace() / d as f64;
        let epsilon = if epsilon > 0.0 { epsilon } else { 1e-12 };
        for i in 0..d {
            cov[(i, i)] += epsilon;
        }
        Ok(Self { mean, covariance: cov, epsilon })
    }

    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Self {
        Self { mean, covariance, epsilon: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Closed-form `KL(p ‖ q)` between two Gaussians.
pub fn gaussian_kl(p: &GaussianFit, q: &GaussianFit) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::InvalidInput(format!("dimensions {} and {} differ", p.dim(), q.dim())));
    }
    let d = p.dim() as f64;
    let cq = q.covariance.clone().cholesky().ok_or_else(|| Error::Degenerate("covariance not positive definite".into()))?;
    let cp = p.covariance.clone().cholesky().ok_or_else(|| Error::Degenerate("covariance not positive definite".into()))?;
    let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let trace = cq.solve(&p.covariance).trace();
    let diff = &q.mean - &p.mean;
    let maha = diff.dot(&cq.solve(&diff));
    Ok(0.5 * (trace + maha - d + logdet(&cq.l()) - logdet(&cp.l())))
}

/// Symmetrized KL of two fitted Gaussians.
pub fn jeffreys_gaussians(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    // clamp rounding noise: the divergence is nonnegative by construction
    Ok((gaussian_kl(a, b)? + gaussian_kl(b, a)?).max(0.0))
}

/// Jeffreys divergence between Gaussian fits of two token populations.
pub fn jeffreys_divergence(tokens_a: &Array2<f64>, tokens_b: &Array2<f64>) -> Result<f64> {
    if tokens_a.ncols() != tokens_b.ncols() {
        return Err(Error::InvalidInput(format!("token dimensions {} and {} differ", tokens_a.ncols(), tokens_b.ncols())));
    }
    jeffreys_gaussians(&GaussianFit::fit(tokens_a)?, &GaussianFit::fit(tokens_b)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaEmbedding {
    pub coords: Array2<f64>,
    pub explained_variance_ratio: Vec<f64>,
    /// `k × d` principal axes.
    pub components: Array2<f64>,
    pub mean: Vec<f64>,
    /// All squared singular values of the centered data, descending.
    pub singular_values_sq: Vec<f64>,
}

/// Projection of mean-centered features onto the top-`k` right singular
/// vectors. Each axis is signed so its largest-magnitude entry is positive.
pub fn pca_embed(features: &Array2<f64>, k: usize) -> Result<PcaEmbedding> {
    let (n, d) = features.dim();
    if k == 0 || n < k + 1 {
        return Err(Error::InvalidInput(format!("pca with k = {k} needs at least {} samples, got {n}", k + 1)));
    }
    let x = DMatrix::from_row_iterator(n, d, features.iter().copied());
    let mean: Vec<f64> = (0..d).map(|j| x.column(j).sum() / n as f64).collect();
    let mut c = x;
    for j in 0..d {
        c.column_mut(j).add_scalar_mut(-mean[j]);
    }
    let svd = c.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s2: Vec<f64> = order.iter().map(|&i| svd.singular_values[i].powi(2)).collect();
    let total: f64 = s2.iter().sum();
    let tol = s2.first().copied().unwrap_or(0.0) * 1e-20 + f64::MIN_POSITIVE;
    let rank = s2.iter().filter(|&&v| v > tol).count();
    if k > rank {
        return Err(Error::InvalidInput(format!("k = {k} exceeds the data rank {rank}")));
    }
    let mut components = Array2::zeros((k, d));
    for (a, &i) in order.iter().take(k).enumerate() {
        let row = v_t.row(i);
        let big = row.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if big < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[[a, j]] = sign * row[j];
        }
    }
    let mut coords = Array2::zeros((n, k));
    for r in 0..n {
        for a in 0..k {
            coords[[r, a]] = (0..d).map(|j| c[(r, j)] * components[[a, j]]).sum();
        }
    }
    Ok(PcaEmbedding {
        coords,
        explained_variance_ratio: s2.iter().take(k).map(|v| v / total).collect(),
        components,
        mean,
        singular_values_sq: s2,
    })
}

/// Medians of `resamples` scene resamples drawn with replacement.
///
/// When the `nⁿ` ordered resamples are no more than `resamples`, every one
/// of them is enumerated instead, giving the exact bootstrap distribution.
pub fn bootstrap_medians(values: &[f64], resamples: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::InvalidInput("bootstrap of an empty sample".into()));
    }
    let n = values.len();
    if let Some(space) = u32::try_from(n).ok().and_then(|e| n.checked_pow(e)).filter(|&s| s <= resamples) {
        let mut buf = vec![0.0; n];
        return Ok((0..space)
            .map(|mut code| {
                for b in &mut buf {
                    *b = values[code % n];
                    code /= n;
                }
                median(&buf)
            })
            .collect());
    }
    let mut buf = vec![0.0; values.len()];
    Ok((0..resamples)
        .map(|_| {
            for b in &mut buf {
                *b = *values.choose(rng).expect("nonempty");
            }
            median(&buf)
        })
        .collect())
}

/// Requested quantiles of the bootstrapped median.
pub fn bootstrap_quantiles(values: &[f64], resamples: usize, quantiles: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
    let medians = sorted(&bootstrap_medians(values, resamples, rng)?);
    Ok(quantiles.iter().map(|&q| quantile(&medians, q)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64)
}

/// One-sided Welch test of the null "A is at least as good as B" (higher is
/// better): `p = P(T ≤ t)` with Satterthwaite degrees of freedom, so a small
/// p is evidence against A's superiority.
pub fn welch_t_test_one_sided(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidInput("welch test needs two samples of size >= 2".into()));
    }
    let ((ma, va), (mb, vb)) = (mean_var(a), mean_var(b));
    if !(va > 0.0 && vb > 0.0) {
        return Err(Error::Degenerate("welch test needs nonzero variance in both samples".into()));
    }
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Degenerate(e.to_string()))?;
    Ok(WelchResult { t, df, p: dist.cdf(t) })
}

/// Row-vs-column p-values; the diagonal is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PValueMatrix {
    pub names: Vec<String>,
    pub p: Vec<Vec<Option<f64>>>,
}

pub fn p_value_matrix(results: &[(String, Vec<f64>)]) -> Result<PValueMatrix> {
    if results.len() < 2 {
        return Err(Error::InvalidInput("a p-value matrix needs at least two result sets".into()));
    }
    let p = results
        .iter()
        .enumerate()
        .map(|(i, (_, a))| {
            results
                .iter()
                .enumerate()
                .map(|(j, (_, b))| if i == j { Ok(None) } else { welch_t_test_one_sided(a, b).map(|r| Some(r.p)) })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PValueMatrix { names: results.iter().map(|(n, _)| n.clone()).collect(), p })
}

impl PValueMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = format!("row\\col,{}\n", self.names.join(","));
        for (name, row) in self.names.iter().zip(&self.p) {
            let cells: Vec<String> = row.iter().map(|c| c.map_or("-".to_string(), |p| format!("{p:.6}"))).collect();
            out.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FrameMeta;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn layout(modalities: &[Modality], patches: usize) -> BatchLayout {
        BatchLayout {
            frames: modalities.iter().enumerate().map(|(i, &modality)| FrameMeta { modality, sequence: 0, position: i }).collect(),
            sequence_lengths: vec![modalities.len()],
            patches_per_frame: patches,
            grid: (1, patches),
        }
    }

    fn random_layer(rng: &mut impl Rng, rows: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, d), |_| rng.sample::<f64, _>(StandardNormal))
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    }

    #[test]
    fn cosine_matches_brute_force_on_two_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lay = layout(&[Modality::Rgb, Modality::Rgb, Modality::Thermal], 3);
        let layer = random_layer(&mut rng, 12, 5);
        let (r2r, r2t) = cosine_alignment(&layer, &lay, PAIR_CAP, 0).unwrap();
        let row = |r: usize| layer.row(r).to_vec();
        let (mut s, mut n) = (0.0, 0);
        for i in 1..4 {
            for j in 5..8 {
                s += cos(&row(i), &row(j));
                n += 1;
            }
        }
        assert!((r2r - s / n as f64).abs() < 1e-12);
        let (mut s, mut n) = (0.0, 0);
        for i in (1..4).chain(5..8) {
            for j in 9..12 {
                s += cos(&row(i), &row(j));
                n += 1;
            }
        }
        assert!((r2t - s / n as f64).abs() < 1e-12);
    }

    #[test]
    fn cosine_examples() {
        // every frame carries the same tokens: thermal copies RGB exactly
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tokens = random_layer(&mut rng, 4, 6);
        let lay = layout(&[Modality::Rgb, Modality::Rgb, Modality::Thermal], 4);
        let mut layer = Array2::zeros((15, 6));
        for f in 0..3 {
            for p in 0..4 {
                layer.row_mut(f * 5 + 1 + p).assign(&tokens.row(p));
            }
        }
        let (rr, rt) = cosine_alignment(&layer, &lay, PAIR_CAP, 0).unwrap();
        assert!((rr - rt).abs() < 1e-12);

        // thermal tokens orthogonal to every RGB token
        let mut orth = Array2::zeros((15, 3));
        for r in [1, 2, 3, 4, 6, 7, 8, 9] {
            orth.row_mut(r).assign(&ndarray::arr1(&[1.0, r as f64 * 0.1, 0.0]));
        }
        for r in 11..15 {
            orth.row_mut(r).assign(&ndarray::arr1(&[0.0, 0.0, 1.0]));
        }
        let (rr, rt) = cosine_alignment(&orth, &lay, PAIR_CAP, 0).unwrap();
        assert_eq!(rt, 0.0);
        assert_eq!(rr - rt, rr);

        let single = layout(&[Modality::Rgb, Modality::Rgb], 2);
        assert!(cosine_alignment(&Array2::ones((6, 3)), &single, PAIR_CAP, 0).is_err());
    }

    #[test]
    fn cap_subsamples_deterministically() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lay = layout(&[Modality::Rgb, Modality::Rgb, Modality::Thermal, Modality::Rgb], 20);
        let layer = random_layer(&mut rng, 84, 4);
        let full = cosine_alignment(&layer, &lay, PAIR_CAP, 5).unwrap();
        let a = cosine_alignment(&layer, &lay, 50, 5).unwrap();
        let b = cosine_alignment(&layer, &lay, 50, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, full);
        let big = cosine_alignment(&layer, &lay, 200_000, 5).unwrap();
        assert_eq!(big, full);
    }

    #[test]
    fn profile_quartiles_ordered() {
        let per_batch = vec![
            ("a".to_string(), vec![0.1, 0.5, 0.2]),
            ("a".to_string(), vec![0.3, 0.1, 0.2]),
            ("b".to_string(), vec![0.0, 0.2, 0.9]),
            ("c".to_string(), vec![0.4, 0.4, -0.1]),
        ];
        let p = aggregate_profile(&per_batch).unwrap();
        assert_eq!(p.scenes, vec!["a", "b", "c"]);
        assert!((p.per_scene[0][0] - 0.2).abs() < 1e-15);
        for l in &p.layers {
            assert!(l.q25 <= l.median && l.median <= l.q75);
            assert_eq!(l.count, 3);
        }
        assert_eq!(p.layers[0].median, 0.2);
        assert_eq!(p.last_third_mean(), p.layers[2].median);
    }

    #[test]
    fn jeffreys_closed_form_cases() {
        let g = |m: f64, v: f64| GaussianFit::new(DVector::from_element(1, m), DMatrix::from_element(1, 1, v));
        assert!((jeffreys_gaussians(&g(0.0, 1.0), &g(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        // KL(N(0,σ1²)‖N(0,σ2²)) = ln(σ2/σ1) + σ1²/(2σ2²) − ½
        let kl = gaussian_kl(&g(0.0, 1.0), &g(0.0, 4.0)).unwrap();
        assert!((kl - (2f64.ln() + 1.0 / 8.0 - 0.5)).abs() < 1e-12);
        let j = jeffreys_gaussians(&g(0.5, 2.0), &g(-1.0, 0.5)).unwrap();
        let closed = |m1: f64, v1: f64, m2: f64, v2: f64| 0.5 * ((v2 / v1).ln() + (v1 + (m1 - m2).powi(2)) / v2 - 1.0);
        assert!((j - (closed(0.5, 2.0, -1.0, 0.5) + closed(-1.0, 0.5, 0.5, 2.0))).abs() < 1e-9);
    }

    #[test]
    fn jeffreys_sample_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_layer(&mut rng, 40, 6);
        let b = random_layer(&mut rng, 30, 6) + 0.5;
        assert!(jeffreys_divergence(&a, &a).unwrap().abs() < 1e-9);
        assert_eq!(jeffreys_divergence(&a, &b).unwrap(), jeffreys_divergence(&b, &a).unwrap());
        assert!(jeffreys_divergence(&a, &b).unwrap() > 0.0);
        assert!(jeffreys_divergence(&a, &random_layer(&mut rng, 10, 5)).is_err());
        // fewer samples than dimensions stays finite thanks to the ridge
        let few = random_layer(&mut rng, 3, 8);
        let other = random_layer(&mut rng, 4, 8);
        assert!(jeffreys_divergence(&few, &other).unwrap().is_finite());
        let fit = GaussianFit::fit(&few).unwrap();
        let sym = &fit.covariance - fit.covariance.transpose();
        assert!(sym.amax() < 1e-12);
        let min_eig = fit.covariance.clone().symmetric_eigenvalues().min();
        assert!(min_eig >= fit.epsilon * (1.0 - 1e-6));
    }

    #[test]
    fn pca_examples() {
        let line = Array2::from_shape_fn((10, 3), |(i, j)| i as f64 * [1.0, 2.0, -1.0][j] + 3.0);
        let e = pca_embed(&line, 1).unwrap();
        assert!((e.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
        assert!(pca_embed(&line, 2).is_err());
        assert!(pca_embed(&line.slice(ndarray::s![..2, ..]).to_owned(), 2).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let iso = random_layer(&mut rng, 5000, 4);
        let e = pca_embed(&iso, 4).unwrap();
        for r in &e.explained_variance_ratio {
            assert!((r - 0.25).abs() < 0.025, "{r}");
        }
        // reconstruction error equals the discarded spectrum / n
        let x = random_layer(&mut rng, 50, 6);
        let e = pca_embed(&x, 2).unwrap();
        let mut err = 0.0;
        for r in 0..50 {
            for j in 0..6 {
                let rec = e.mean[j] + (0..2).map(|a| e.coords[[r, a]] * e.components[[a, j]]).sum::<f64>();
                err += (x[[r, j]] - rec).powi(2);
            }
        }
        let discarded: f64 = e.singular_values_sq[2..].iter().sum();
        assert!((err / 50.0 - discarded / 50.0).abs() < 1e-9);
        for a in 0..2 {
            let row = e.components.row(a);
            let big = row.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn bootstrap_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(bootstrap_quantiles(&[3.0; 5], 200, &[0.25, 0.75], &mut rng).unwrap(), vec![3.0, 3.0]);
        let a = bootstrap_quantiles(&[1.0, 4.0, 2.0, 8.0], 2000, &[0.25, 0.75], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = bootstrap_quantiles(&[1.0, 4.0, 2.0, 8.0], 2000, &[0.25, 0.75], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(bootstrap_quantiles(&[], 10, &[0.5], &mut rng).is_err());
    }

    #[test]
    fn bootstrap_two_values_matches_enumeration() {
        // the four ordered resamples of {a, b}: medians a, (a+b)/2, (a+b)/2, b
        let (a, b) = (0.3, 1.7);
        let mid = (a + b) / 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut meds = bootstrap_medians(&[a, b], 2000, &mut rng).unwrap();
        meds.sort_by(f64::total_cmp);
        assert_eq!(meds, vec![a, mid, mid, b]);
        let bands = bootstrap_quantiles(&[a, b], 2000, &[0.25, 0.75], &mut rng).unwrap();
        assert!((bands[0] - (a + 0.75 * (mid - a))).abs() < 1e-12);
        assert!((bands[1] - (mid + 0.25 * (b - mid))).abs() < 1e-12);
        // with too few resamples to enumerate, draws stay on the support
        let drawn = bootstrap_medians(&[a, b], 3, &mut rng).unwrap();
        assert_eq!(drawn.len(), 3);
        assert!(drawn.iter().all(|m| [a, mid, b].contains(m)));
    }

    /// Regularized incomplete beta via the continued fraction of Numerical
    /// Recipes, with a Lanczos log-gamma: independent of the library code.
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
        let mut a = G[0];
        let t = x + 7.5;
        for (i, g) in G.iter().enumerate().skip(1) {
            a += g / (x + i as f64);
        }
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }

    fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
        let tiny = 1e-300;
        let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
        let mut c = 1.0;
        let mut d = 1.0 - qab * x / qap;
        if d.abs() < tiny {
            d = tiny;
        }
        d = 1.0 / d;
        let mut h = d;
        for m in 1..10_000 {
            let m = m as f64;
            let m2 = 2.0 * m;
            let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
            d = 1.0 + aa * d;
            d = if d.abs() < tiny { tiny } else { d };
            c = 1.0 + aa / c;
            c = if c.abs() < tiny { tiny } else { c };
            d = 1.0 / d;
            h *= d * c;
            let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
            d = 1.0 + aa * d;
            d = if d.abs() < tiny { tiny } else { d };
            c = 1.0 + aa / c;
            c = if c.abs() < tiny { tiny } else { c };
            d = 1.0 / d;
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

    fn t_cdf_oracle(t: f64, df: f64) -> f64 {
        let tail = 0.5 * beta_inc(df / 2.0, 0.5, df / (df + t * t));
        if t < 0.0 {
            tail
        } else {
            1.0 - tail
        }
    }

    #[test]
    fn welch_examples() {
        let a = [1.0, 2.0, 3.0, 4.5];
        assert_eq!(welch_t_test_one_sided(&a, &a).unwrap().p, 0.5);
        let hi = [10.0, 10.001, 9.999];
        let lo = [0.0, 0.001, -0.001];
        assert!(welch_t_test_one_sided(&hi, &lo).unwrap().p > 1.0 - 1e-9);
        assert!(welch_t_test_one_sided(&lo, &hi).unwrap().p < 1e-9);
        assert!(welch_t_test_one_sided(&[1.0, 1.0], &a).is_err());
        assert!(welch_t_test_one_sided(&[1.0], &a).is_err());
        // textbook case: t = -1.5, df = 10 gives a lower tail of about 0.0822
        assert!((t_cdf_oracle(-1.5, 10.0) - 0.082_253).abs() < 1e-5);
    }

    #[test]
    fn welch_matches_incomplete_beta_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let na = rng.gen_range(2..12);
            let nb = rng.gen_range(2..12);
            let shift: f64 = rng.gen_range(-2.0..2.0);
            let a: Vec<f64> = (0..na).map(|_| rng.sample::<f64, _>(StandardNormal) * rng.gen_range(0.5..2.0)).collect();
            let b: Vec<f64> = (0..nb).map(|_| rng.sample::<f64, _>(StandardNormal) + shift).collect();
            let r = welch_t_test_one_sided(&a, &b).unwrap();
            let oracle = t_cdf_oracle(r.t, r.df);
            assert!((r.p - oracle).abs() < 1e-9, "t {} df {}: {} vs {}", r.t, r.df, r.p, oracle);
        }
    }

    #[test]
    fn p_value_matrix_layout() {
        let sets = vec![
            ("full".to_string(), vec![70.0, 71.0, 69.5]),
            ("no-token".to_string(), vec![60.0, 62.0, 61.0]),
            ("projector".to_string(), vec![65.0, 64.0, 66.5]),
        ];
        let m = p_value_matrix(&sets).unwrap();
        assert_eq!(m.p.len(), 3);
        assert!(m.p[0][0].is_none() && m.p[1][2].is_some());
        assert!(m.p[0][1].unwrap() > 0.99 && m.p[1][0].unwrap() < 0.01);
        let csv = m.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("row\\col,full,no-token,projector"));
        assert!(p_value_matrix(&sets[..1]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn prop_cosine_scale_invariant(seed in any::<u64>(), scale in 0.01..100.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lay = layout(&[Modality::Rgb, Modality::Thermal, Modality::Rgb], 4);
            let layer = random_layer(&mut rng, 15, 5);
            let (a, b) = cosine_alignment(&layer, &lay, PAIR_CAP, 0).unwrap();
            let (c, d) = cosine_alignment(&(&layer * scale), &lay, PAIR_CAP, 0).unwrap();
            prop_assert!((a - c).abs() < 1e-12 && (b - d).abs() < 1e-12);
        }

        #[test]
        fn prop_jeffreys_nonnegative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = rng.gen_range(1..6);
            let (na, nb, scale) = (rng.gen_range(2..30), rng.gen_range(2..30), rng.gen_range(0.1..3.0));
            let a = random_layer(&mut rng, na, d);
            let b = random_layer(&mut rng, nb, d) * scale;
            prop_assert!(jeffreys_divergence(&a, &b).unwrap() >= 0.0);
        }

        #[test]
        fn prop_pca_translation_invariant(seed in any::<u64>(), shift in -50.0..50.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_layer(&mut rng, 20, 4);
            let a = pca_embed(&x, 2).unwrap();
            let b = pca_embed(&(&x + shift), 2).unwrap();
            for (p, q) in a.coords.iter().zip(b.coords.iter()) {
                prop_assert!((p - q).abs() < 1e-8);
            }
        }

        #[test]
        fn prop_profile_bands_ordered(values in proptest::collection::vec(proptest::collection::vec(-1.0..1.0f64, 3), 1..8)) {
            let per_batch: Vec<(String, Vec<f64>)> = values.iter().enumerate().map(|(i, v)| (format!("s{i}"), v.clone())).collect();
            let p = aggregate_profile(&per_batch).unwrap();
            for l in &p.layers {
                prop_assert!(l.q25 <= l.median && l.median <= l.q75);
            }
        }
    }
}
