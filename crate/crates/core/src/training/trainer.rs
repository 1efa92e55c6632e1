//! The optimization loop shared by base pretraining and adapter fine-tuning.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{camera_loss, depth_loss, total_loss, LossWeights};
use super::optim::{clip_grad_norm, lr_schedule, AdamW, OptimConfig};
use crate::data::augment::{augment_rgb, augment_thermal, AugmentConfig, GeometricAug};
use crate::data::batching::{sample_batch_with, BatchSpec, TauSource};
use crate::data::SceneData;
use crate::error::{Error, Result};
use crate::geometry::relative_pose;
use crate::imaging::Image;
use crate::modality::Modality;
use crate::model::{patch_pixel_index, FrameInput, Model, PoseEncoding};
use crate::params::{ParamId, ParamKind};

/// Independent random stream for one training step, so a run resumed at
/// step `k` draws exactly the batches an uninterrupted run would have.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// Trainability for base pretraining: everything except thermal-only
/// parameters, and the tokenizer when the config freezes it.
pub fn apply_pretrain_trainability(model: &mut Model) {
    let thermal = [model.tokens.thermal_first, model.tokens.thermal_rest];
    let freeze_tok = model.config.freeze_tokenizer;
    let ids: Vec<ParamId> = model.params.ids().collect();
    for id in ids {
        let kind = model.params.get(id).kind;
        let trainable = match kind {
            ParamKind::Tokenizer => !freeze_tok,
            ParamKind::CameraToken => !thermal.contains(&id),
            ParamKind::ThermalAdapter | ParamKind::Lora => false,
            ParamKind::Backbone | ParamKind::Head => true,
        };
        model.params.set_trainable(id, trainable);
    }
}

/// Network-ready batch with targets in the model's output layout.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub id: String,
    pub images: Vec<Image>,
    pub modalities: Vec<Modality>,
    pub sequence_lengths: Vec<usize>,
    /// Encodings relative to the first frame of each sequence.
    pub gt_poses: Vec<PoseEncoding>,
    /// Depth targets in per-patch layout (`F·P` rows of `p²`), row-major.
    pub gt_depth: Vec<f64>,
    pub mask: Vec<bool>,
}

impl PreparedBatch {
    pub fn frames(&self) -> Vec<FrameInput<'_>> {
        self.images.iter().zip(&self.modalities).map(|(image, &modality)| FrameInput { image, modality }).collect()
    }
}

/// Loads, augments (when `augment` is given) and arranges one batch.
pub fn prepare_batch(
    scene: &SceneData,
    spec: &BatchSpec,
    augment: Option<&AugmentConfig>,
    patch: usize,
    rng: &mut impl Rng,
) -> Result<PreparedBatch> {
    let mut images = Vec::with_capacity(spec.len());
    let mut poses = Vec::with_capacity(spec.len());
    let mut intrinsics = Vec::with_capacity(spec.len());
    let mut depths = Vec::with_capacity(spec.len());
    for id in &spec.frame_ids {
        let frame = scene.frame(id)?;
        let pose = frame
            .pose
            .ok_or_else(|| Error::InvalidInput(format!("frame {id} has no ground-truth pose")))?;
        let (image, geom) = match augment {
            Some(cfg) => {
                let out = match frame.record.modality {
                    Modality::Rgb => augment_rgb(&frame.image, cfg, rng),
                    Modality::Thermal => augment_thermal(&frame.image, cfg, rng),
                };
                (out.image, out.geometry)
            }
            None => (frame.image.clone(), GeometricAug::identity(frame.image.width, frame.image.height)),
        };
        poses.push(geom.apply_pose(&pose));
        intrinsics.push(geom.apply_intrinsics(&frame.record.intrinsics));
        depths.push(frame.depth.as_ref().map(|d| geom.apply_depth(d)));
        images.push(image);
    }
    let (w, h) = (images[0].width, images[0].height);
    if images.iter().any(|im| (im.width, im.height) != (w, h)) {
        return Err(Error::InvalidInput("batch frames differ in size".into()));
    }
    if w % patch != 0 || h % patch != 0 {
        return Err(Error::InvalidInput(format!("frame size {w}x{h} not divisible by patch {patch}")));
    }

    let mut gt_poses = Vec::with_capacity(spec.len());
    let mut start = 0;
    for &len in &spec.sequence_lengths {
        let first = poses[start];
        for i in start..start + len {
            gt_poses.push(PoseEncoding::from_pose(&relative_pose(&first, &poses[i]), &intrinsics[i]));
        }
        start += len;
    }

    let (gw, pp) = (w / patch, patch * patch);
    let per_frame = (w / patch) * (h / patch) * pp;
    let mut gt_depth = vec![0.0; per_frame * spec.len()];
    let mut mask = vec![false; per_frame * spec.len()];
    for (f, depth) in depths.iter().enumerate() {
        let Some(depth) = depth else { continue };
        for y in 0..h {
            for x in 0..w {
                let (r, c) = patch_pixel_index(x, y, gw, patch);
                let idx = f * per_frame + r * pp + c;
                let d = depth.at(x, y);
                if d.is_finite() && d > 0.0 {
                    gt_depth[idx] = d;
                    mask[idx] = true;
                }
            }
        }
    }
    Ok(PreparedBatch {
        id: spec.frame_ids.join(","),
        images,
        modalities: spec.modalities.clone(),
        sequence_lengths: spec.sequence_lengths.clone(),
        gt_poses,
        gt_depth,
        mask,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub total: f64,
    pub camera: f64,
    pub depth: f64,
    pub empty_depth: bool,
}

/// Forward pass, Eq. 1 loss and (when `grads`) back-propagated parameter gradients.
pub fn batch_loss(
    model: &Model,
    batch: &PreparedBatch,
    weights: &LossWeights,
    grads: bool,
) -> Result<(BatchLoss, Vec<(ParamId, Array2<f64>)>)> {
    let frames = batch.frames();
    let mut pass = model.forward(&frames, &batch.sequence_lengths, grads, false)?;
    let pred: Vec<PoseEncoding> = pass
        .graph
        .value(pass.poses)
        .rows()
        .into_iter()
        .map(|r| {
            let mut v = [0.0; 9];
            v.iter_mut().zip(r.iter()).for_each(|(a, b)| *a = *b);
            PoseEncoding(v)
        })
        .collect();
    let cam = camera_loss(&pred, &batch.gt_poses, weights)?;
    let depth_pred = pass.graph.value(pass.depth);
    let dim = depth_pred.dim();
    // logical row-major order, whatever the memory layout
    let depth_flat: Vec<f64> = depth_pred.iter().copied().collect();
    let sigma_flat: Vec<f64> = pass.graph.value(pass.log_sigma).iter().copied().collect();
    let dl = depth_loss(&depth_flat, &sigma_flat, &batch.gt_depth, &batch.mask)?;
    let total = total_loss(cam.value, dl.value, weights).map_err(|_| Error::NonFinite { batch: batch.id.clone() })?;
    let loss = BatchLoss { total, camera: cam.value, depth: dl.value, empty_depth: dl.empty_mask };
    if !grads {
        return Ok((loss, Vec::new()));
    }
    let cam_seed = Array2::from_shape_fn((pred.len(), 9), |(i, j)| weights.lambda_camera * cam.grad[i][j]);
    let depth_seed = Array2::from_shape_vec(dim, dl.d_depth).expect("depth grad shape");
    let sigma_seed = Array2::from_shape_vec(dim, dl.d_log_sigma).expect("sigma grad shape");
    let mut g = pass.graph.backward(&[(pass.poses, cam_seed), (pass.depth, depth_seed), (pass.log_sigma, sigma_seed)]);
    let out = pass.bindings.collect(&mut g);
    pass.layers.clear();
    Ok((loss, out))
}

/// One line of the JSON-lines training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_cam: f64,
    pub loss_depth: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_cam: f64,
    pub loss_depth: f64,
}

/// Progress of a run; `lr` always equals `lr_schedule(step)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub running_total: f64,
    pub running_cam: f64,
    pub running_depth: f64,
    /// The data stream of step `k` is `step_rng(seed, k)`.
    pub seed: u64,
}

pub struct TrainOptions<'a> {
    pub tau: TauSource,
    /// `None` trains on raw frames.
    pub augment: Option<AugmentConfig>,
    pub log_path: Option<&'a Path>,
    /// Step to resume from, with the optimizer state saved at that step.
    pub start_step: usize,
    pub optimizer: Option<AdamW>,
    /// Stop before this step (the schedule still spans the full run).
    pub stop_step: Option<usize>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self { tau: TauSource::Uniform, augment: None, log_path: None, start_step: 0, optimizer: None, stop_step: None }
    }
}

pub struct TrainReport {
    pub state: TrainState,
    pub epochs: Vec<EpochLoss>,
    pub optimizer: AdamW,
}

/// Runs `optim.total_steps()` AdamW updates of the model's trainable
/// parameters, drawing one batch per step from a uniformly chosen scene.
pub fn train(
    model: &mut Model,
    scenes: &[SceneData],
    optim: &OptimConfig,
    weights: &LossWeights,
    options: TrainOptions<'_>,
) -> Result<TrainReport> {
    optim.validate()?;
    weights.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidInput("training needs at least one scene".into()));
    }
    let patch = model.config.patch_size;
    let augment = match options.augment {
        Some(mut a) => {
            a.validate()?;
            if a.output_size % patch != 0 || a.size_multiple % patch != 0 {
                a.size_multiple = patch;
                a.output_size = a.output_size.div_ceil(patch) * patch;
            }
            Some(a)
        }
        None => None,
    };
    let total_steps = optim.total_steps();
    let mut log: Option<File> = match options.log_path {
        Some(p) => Some(OpenOptions::new().create(true).append(true).open(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let mut opt = options.optimizer.unwrap_or_else(|| AdamW::new(optim));
    let mut state = TrainState {
        step: options.start_step,
        epoch: options.start_step / optim.steps_per_epoch,
        lr: lr_schedule(options.start_step.min(total_steps), total_steps, optim),
        running_total: 0.0,
        running_cam: 0.0,
        running_depth: 0.0,
        seed: optim.seed,
    };
    let mut epochs = Vec::new();
    let mut acc = (0.0, 0.0, 0.0, 0usize);
    let end = options.stop_step.map_or(total_steps, |s| s.min(total_steps));
    for step in options.start_step..end {
        let mut rng = step_rng(optim.seed, step);
        let scene = &scenes[rng.gen_range(0..scenes.len())];
        let spec = sample_batch_with(&scene.manifest, optim.batch_size, options.tau, None, &mut rng)?;
        let batch_aug = augment.as_ref().map(|a| a.for_batch(&mut rng));
        let batch = prepare_batch(scene, &spec, batch_aug.as_ref(), patch, &mut rng)?;
        let (loss, mut grads) = batch_loss(model, &batch, weights, true).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFinite { batch: format!("step {step} [{}]", batch.id) },
            other => other,
        })?;
        if let Some(max) = optim.max_grad_norm {
            let norm = clip_grad_norm(&mut grads, max);
            if !norm.is_finite() {
                return Err(Error::NonFinite { batch: format!("step {step} [{}] gradient", batch.id) });
            }
        }
        let lr = lr_schedule(step, total_steps, optim);
        opt.step(&mut model.params, &grads, lr);

        let record = StepRecord { step, lr, loss_total: loss.total, loss_cam: loss.camera, loss_depth: loss.depth };
        if let Some(f) = log.as_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(f, "{line}").map_err(|e| Error::io(options.log_path.unwrap(), e))?;
        }
        let decay = 0.9;
        if step == options.start_step {
            (state.running_total, state.running_cam, state.running_depth) = (loss.total, loss.camera, loss.depth);
        } else {
            state.running_total = decay * state.running_total + (1.0 - decay) * loss.total;
            state.running_cam = decay * state.running_cam + (1.0 - decay) * loss.camera;
            state.running_depth = decay * state.running_depth + (1.0 - decay) * loss.depth;
        }
        acc = (acc.0 + loss.total, acc.1 + loss.camera, acc.2 + loss.depth, acc.3 + 1);
        state.step = step + 1;
        state.lr = lr_schedule(state.step.min(total_steps), total_steps, optim);
        if state.step % optim.steps_per_epoch == 0 {
            let n = acc.3.max(1) as f64;
            epochs.push(EpochLoss {
                epoch: state.step / optim.steps_per_epoch - 1,
                loss_total: acc.0 / n,
                loss_cam: acc.1 / n,
                loss_depth: acc.2 / n,
            });
            acc = (0.0, 0.0, 0.0, 0);
            state.epoch = state.step / optim.steps_per_epoch;
        }
    }
    Ok(TrainReport { state, epochs, optimizer: opt })
}
