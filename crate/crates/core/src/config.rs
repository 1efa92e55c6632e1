//! Run configuration: one JSON document, with command-line overrides of
//! dotted paths such as `--optim.learning_rate 1e-4`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapters::LoraConfig;
use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::training::{LossWeights, OptimConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// RGB-only training of every base parameter.
    #[default]
    Pretrain,
    /// LoRA fine-tuning of a base checkpoint on mixed batches.
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub scenes: usize,
    pub width: u32,
    pub height: u32,
    pub frames_per_trajectory: usize,
    /// Angular extent of each trajectory; `None` keeps full orbits.
    pub arc_deg: Option<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { scenes: 2, width: 64, height: 64, frames_per_trajectory: 12, arc_deg: Some(120.0) }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Scene manifests; empty means every `scenes/*/scene.json` under the output directory.
    pub manifests: Vec<PathBuf>,
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Base model to adapt (fine-tuning only).
    pub base_checkpoint: Option<PathBuf>,
    /// Checkpoint to continue from; its step counter and optimizer state are restored.
    pub resume: Option<PathBuf>,
    /// Fixed thermal ratio; `None` draws τ ~ U(0, 1) (pretraining always uses 0).
    pub tau: Option<f64>,
    /// Train on raw frames when false.
    pub augment: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRunConfig {
    pub checkpoint: Option<PathBuf>,
    /// Score the ground truth itself instead of a model (harness check).
    pub ground_truth: bool,
    pub dual_run: bool,
    pub sweep: bool,
    pub protocol: EvalConfig,
}

impl Default for EvalRunConfig {
    fn default() -> Self {
        Self { checkpoint: None, ground_truth: false, dual_run: true, sweep: false, protocol: EvalConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub base_checkpoint: Option<PathBuf>,
    pub adapted_checkpoint: Option<PathBuf>,
    pub batch_size: usize,
    pub tau_range: [f64; 2],
    pub batches_per_scene: usize,
    pub pair_cap: usize,
    pub pca_components: usize,
    pub bootstrap_resamples: usize,
    /// Per-variant result files (`{"name": .., "values": [..]}`) for the
    /// ablation significance matrix.
    pub ablation_results: Vec<PathBuf>,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            base_checkpoint: None,
            adapted_checkpoint: None,
            batch_size: 12,
            tau_range: [0.25, 0.75],
            batches_per_scene: 4,
            pair_cap: crate::analysis::PAIR_CAP,
            pca_components: 2,
            bootstrap_resamples: 2000,
            ablation_results: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalRunConfig,
    pub analyze: AnalyzeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            lora: LoraConfig { rank: 8, alpha: 16.0, ..LoraConfig::default() },
            optim: OptimConfig { learning_rate: 1e-3, batch_size: 8, ..OptimConfig::default() },
            loss: LossWeights::default(),
            augment: AugmentConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalRunConfig::default(),
            analyze: AnalyzeConfig::default(),
        }
    }
}

/// Short flag names accepted in place of full dotted paths.
const ALIASES: [(&str, &str); 4] = [
    ("epochs", "optim.epochs"),
    ("optim.lr", "optim.learning_rate"),
    ("lr", "optim.learning_rate"),
    ("checkpoint", "eval.checkpoint"),
];

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `(dotted.path, value)` overrides. Values parse as JSON when
    /// they can and are taken as strings otherwise; unknown paths are errors.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for (key, raw) in overrides {
            let key = ALIASES.iter().find(|(a, _)| a == key).map_or(key.as_str(), |(_, full)| full);
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            set_path(&mut doc, key, value)?;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("override produced an invalid config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lora.validate()?;
        self.optim.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.eval.protocol.validate()?;
        if let Some(t) = self.train.tau {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("train.tau {t} outside [0, 1]")));
            }
        }
        let [lo, hi] = self.analyze.tau_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("analyze.tau_range [{lo}, {hi}] invalid")));
        }
        if self.data.synth.scenes == 0 || self.data.synth.frames_per_trajectory < 2 {
            return Err(Error::Config("synthesis needs at least one scene and two frames per trajectory".into()));
        }
        Ok(())
    }
}

fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("'{}' is not an object", parts[..i].join("."))))?;
        let entry = obj.get_mut(*part).ok_or_else(|| Error::Config(format!("unknown config key '{path}'")))?;
        if i + 1 == parts.len() {
            *entry = value;
            return Ok(());
        }
        node = entry;
    }
    unreachable!("split yields at least one part")
}

/// Splits trailing `--key value` / `--key=value` arguments into pairs.
pub fn parse_override_args(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let arg = args[i]
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("unexpected argument '{}'", args[i])))?;
        if let Some((k, v)) = arg.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            i += 1;
        } else {
            let v = args.get(i + 1).ok_or_else(|| Error::Config(format!("flag --{arg} needs a value")))?;
            out.push((arg.to_string(), v.clone()));
            i += 2;
        }
    }
    Ok(out)
}
