//! Desk-scale end-to-end experiment: pretrain an RGB-only base on a small
//! synthetic corpus, fine-tune it for mixed RGB/thermal input in two token
//! modes and compare the three models under the dual-run protocol.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::{inject, LoraConfig};
use crate::data::{generate_synthetic_scene, AugmentConfig, SceneData, SyntheticSceneConfig, TauSource};
use crate::error::Result;
use crate::eval::{evaluate, EvalConfig, EvalReport, Predictor};
use crate::model::{Model, ModelConfig, TokenMode};
use crate::training::{apply_pretrain_trainability, train, LossWeights, OptimConfig, TrainOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskConfig {
    pub scene_seeds: Vec<u64>,
    pub image_size: u32,
    /// Angular extent of every capture trajectory; `None` keeps the
    /// generator's full orbits.
    pub arc_deg: Option<f64>,
    pub model: ModelConfig,
    pub pretrain: OptimConfig,
    pub finetune: OptimConfig,
    pub lora: LoraConfig,
    pub loss: LossWeights,
    pub augment: Option<AugmentConfig>,
    pub eval: EvalConfig,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            scene_seeds: vec![11, 12],
            image_size: 64,
            arc_deg: Some(120.0),
            model: ModelConfig::default(),
            pretrain: OptimConfig {
                learning_rate: 1e-3,
                epochs: 150,
                steps_per_epoch: 10,
                batch_size: 8,
                ..OptimConfig::default()
            },
            finetune: OptimConfig {
                learning_rate: 1e-3,
                epochs: 100,
                steps_per_epoch: 10,
                batch_size: 8,
                seed: 1,
                ..OptimConfig::default()
            },
            lora: LoraConfig { rank: 8, alpha: 16.0, ..LoraConfig::default() },
            loss: LossWeights::default(),
            augment: None,
            eval: EvalConfig::default(),
        }
    }
}

/// Generates the experiment's scenes under `dir`.
pub fn desk_corpus(config: &DeskConfig, dir: &Path) -> Result<Vec<SceneData>> {
    config
        .scene_seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| {
            let name = format!("desk_{i}");
            let mut scene = SyntheticSceneConfig::random(&name, seed);
            scene.width = config.image_size;
            scene.height = config.image_size;
            if let Some(arc) = config.arc_deg {
                for t in &mut scene.trajectories {
                    t.sweep_deg = arc;
                }
            }
            let manifest = generate_synthetic_scene(&scene, seed, &dir.join(&name))?;
            SceneData::load(manifest)
        })
        .collect()
}

/// Trains the RGB-only base. Thermal tokens are reset to copies of the RGB
/// tokens afterwards, so thermal frames are seen exactly like RGB frames.
pub fn pretrain_base(config: &DeskConfig, scenes: &[SceneData]) -> Result<Model> {
    let mut model = Model::new(ModelConfig { token_mode: TokenMode::PerModality, ..config.model.clone() })?;
    apply_pretrain_trainability(&mut model);
    let options = TrainOptions { tau: TauSource::Fixed(0.0), augment: config.augment.clone(), ..TrainOptions::default() };
    train(&mut model, scenes, &config.pretrain, &config.loss, options)?;
    model.reset_thermal_params();
    Ok(model)
}

/// LoRA fine-tuning of a copy of `base` on mixed batches with τ ~ U(0, 1).
pub fn finetune(config: &DeskConfig, base: &Model, mode: TokenMode, scenes: &[SceneData]) -> Result<Model> {
    let mut model = base.clone();
    model.set_token_mode(mode);
    model.reset_thermal_params();
    inject(&mut model, &config.lora)?;
    let options = TrainOptions { tau: TauSource::Uniform, augment: config.augment.clone(), ..TrainOptions::default() };
    train(&mut model, scenes, &config.finetune, &config.loss, options)?;
    Ok(model)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeskOutcome {
    pub base: EvalReport,
    pub per_modality: EvalReport,
    pub shared_token: EvalReport,
    pub seconds: f64,
}

impl DeskOutcome {
    pub fn gain_per_modality(&self) -> f64 {
        self.per_modality.pooled.auc_30 - self.base.pooled.auc_30
    }

    pub fn gain_shared_token(&self) -> f64 {
        self.shared_token.pooled.auc_30 - self.base.pooled.auc_30
    }
}

/// The trained models of one experiment.
pub struct DeskModels {
    pub base: Model,
    pub per_modality: Model,
    pub shared_token: Model,
}

pub fn run_desk_experiment(config: &DeskConfig, dir: &Path) -> Result<(DeskOutcome, DeskModels, Vec<SceneData>)> {
    let start = Instant::now();
    let scenes = desk_corpus(config, dir)?;
    let base = pretrain_base(config, &scenes)?;
    let per_modality = finetune(config, &base, TokenMode::PerModality, &scenes)?;
    let shared_token = finetune(config, &base, TokenMode::SharedToken, &scenes)?;
    let patch = config.model.patch_size;
    let outcome = DeskOutcome {
        base: evaluate(Predictor::Model(&base), &scenes, patch, &config.eval)?,
        per_modality: evaluate(Predictor::Model(&per_modality), &scenes, patch, &config.eval)?,
        shared_token: evaluate(Predictor::Model(&shared_token), &scenes, patch, &config.eval)?,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((outcome, DeskModels { base, per_modality, shared_token }, scenes))
}
