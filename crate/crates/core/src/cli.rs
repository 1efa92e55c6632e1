//! Command-line front end: `synth`, `train`, `eval` and `analyze`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::adapters::inject;
use crate::analysis::{alignment_summary, analysis_batches, modality_tokens, p_value_matrix, pca_embed, AlignmentSummary};
use crate::config::{parse_override_args, RunConfig, Stage};
use crate::data::{generate_synthetic_scene, SceneData, SceneManifest, SyntheticSceneConfig, TauSource};
use crate::error::{Error, Result};
use crate::eval::{evaluate, tau_sweep, EvalReport, Predictor, SweepRow, SWEEP_CSV_HEADER};
use crate::metrics::CSV_HEADER;
use crate::modality::Modality;
use crate::model::{load_checkpoint, save_adapters, save_checkpoint, TrainProgress};
use crate::model::Model;
use crate::training::{apply_pretrain_trainability, train, AdamW, TrainOptions, TrainReport};

#[derive(Debug, Parser)]
#[command(name = "xmodal", version, about = "RGB + thermal multi-view pose estimation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render procedural RGB/thermal scenes with exact ground truth.
    Synth(CommonArgs),
    /// Pretrain a base model or fine-tune one with adapters.
    Train(CommonArgs),
    /// Dual-run evaluation and τ-sweeps.
    Eval(CommonArgs),
    /// Feature-alignment diagnostics and ablation significance tests.
    Analyze(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run configuration; defaults apply to everything it omits.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream of the run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
    /// Dotted-path overrides, e.g. `--optim.learning_rate 1e-4`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    pub overrides: Vec<String>,
}

impl CommonArgs {
    /// Moves shared flags that clap left among the trailing overrides (they
    /// may follow a dotted override) back into their fields.
    pub fn normalized(&self) -> Result<CommonArgs> {
        let mut out = CommonArgs {
            config: self.config.clone(),
            seed: self.seed,
            out: self.out.clone(),
            force: self.force,
            overrides: Vec::new(),
        };
        let mut rest = self.overrides.iter();
        while let Some(arg) = rest.next() {
            let (key, inline) = match arg.split_once('=') {
                Some((k, v)) => (k, Some(v.to_string())),
                None => (arg.as_str(), None),
            };
            let mut value = || {
                inline.clone().or_else(|| rest.next().cloned()).ok_or_else(|| Error::Config(format!("flag {key} needs a value")))
            };
            match key {
                "--force" => out.force = true,
                "--seed" => {
                    let v = value()?;
                    out.seed = Some(v.parse().map_err(|_| Error::Config(format!("--seed expects an integer, got '{v}'")))?);
                }
                "--out" => out.out = Some(PathBuf::from(value()?)),
                "--config" => out.config = Some(PathBuf::from(value()?)),
                _ => {
                    out.overrides.push(arg.clone());
                    if inline.is_none() {
                        if let Some(v) = rest.next() {
                            out.overrides.push(v.clone());
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Config file, then dotted overrides, then the dedicated flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut cfg = base.with_overrides(&parse_override_args(&self.overrides)?)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.model.seed = seed;
            cfg.lora.seed = seed;
            cfg.optim.seed = seed;
            cfg.eval.protocol.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let (args, name) = match &cli.command {
        Command::Synth(a) => (a, "synth"),
        Command::Train(a) => (a, "train"),
        Command::Eval(a) => (a, "eval"),
        Command::Analyze(a) => (a, "analyze"),
    };
    let args = args.normalized()?;
    let cfg = args.resolve()?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    write_json(&cfg.out.join("config.json"), &cfg)?;
    log::info!("{name}: resolved config written to {}", cfg.out.join("config.json").display());
    match cli.command {
        Command::Synth(_) => cmd_synth(&cfg, args.force).map(|_| ()),
        Command::Train(_) => cmd_train(&cfg, args.force).map(|_| ()),
        Command::Eval(_) => cmd_eval(&cfg, args.force).map(|_| ()),
        Command::Analyze(_) => cmd_analyze(&cfg, args.force).map(|_| ()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn claim(path: &Path, force: bool) -> Result<()> {
    if path.exists() {
        if !force {
            return Err(Error::Exists(path.to_path_buf()));
        }
        let removed = if path.is_dir() { fs::remove_dir_all(path) } else { fs::remove_file(path) };
        removed.map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Synthetic scene configuration `index` of a run.
pub fn synth_scene_config(cfg: &RunConfig, index: usize) -> SyntheticSceneConfig {
    let mut scene = SyntheticSceneConfig::random(&format!("scene_{index}"), cfg.seed + index as u64);
    scene.width = cfg.data.synth.width;
    scene.height = cfg.data.synth.height;
    for t in &mut scene.trajectories {
        t.frames = cfg.data.synth.frames_per_trajectory;
        if let Some(arc) = cfg.data.synth.arc_deg {
            t.sweep_deg = arc;
        }
    }
    scene
}

pub fn cmd_synth(cfg: &RunConfig, force: bool) -> Result<Vec<PathBuf>> {
    let mut manifests = Vec::new();
    for i in 0..cfg.data.synth.scenes {
        let scene = synth_scene_config(cfg, i);
        let dir = cfg.out.join("scenes").join(&scene.name);
        claim(&dir, force)?;
        generate_synthetic_scene(&scene, cfg.seed + i as u64, &dir)?;
        manifests.push(dir.join("scene.json"));
    }
    Ok(manifests)
}

/// Scenes named by the config, or every synthesized scene under the output directory.
pub fn load_scenes(cfg: &RunConfig) -> Result<Vec<SceneData>> {
    let paths: Vec<PathBuf> = if cfg.data.manifests.is_empty() {
        let root = cfg.out.join("scenes");
        let mut found: Vec<PathBuf> = match fs::read_dir(&root) {
            Ok(entries) => entries
                .filter_map(|e| e.ok())
                .map(|e| e.path().join("scene.json"))
                .filter(|p| p.is_file())
                .collect(),
            Err(_) => Vec::new(),
        };
        found.sort();
        found
    } else {
        cfg.data.manifests.clone()
    };
    if paths.is_empty() {
        return Err(Error::Config(format!(
            "no scenes: set data.manifests or run `synth` into {}",
            cfg.out.display()
        )));
    }
    paths.iter().map(|p| SceneData::open(p)).collect()
}

fn open_checkpoint(path: Option<&PathBuf>, what: &str) -> Result<Model> {
    let path = path.ok_or_else(|| Error::Config(format!("missing {what} checkpoint")))?;
    if !path.is_file() {
        return Err(Error::Config(format!("{what} checkpoint {} does not exist", path.display())));
    }
    Ok(load_checkpoint(path)?.model)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage: Stage,
    pub steps: usize,
    pub epochs: usize,
    pub final_running_loss: f64,
    pub trainable_fraction: f64,
    pub checkpoint: PathBuf,
}

pub fn cmd_train(cfg: &RunConfig, force: bool) -> Result<TrainSummary> {
    let scenes = load_scenes(cfg)?;
    let ckpt_dir = cfg.out.join("checkpoints");
    let final_path = ckpt_dir.join("final.ckpt");
    let log_path = cfg.out.join("train_log.jsonl");
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let (mut model, start_step, optimizer) = match &cfg.train.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let opt = AdamW::import(&cfg.optim, &ck.model.params, &ck.optimizer)?;
            (ck.model, ck.progress.step as usize, Some(opt))
        }
        None => {
            claim(&final_path, force)?;
            claim(&log_path, force)?;
            let model = match cfg.train.stage {
                Stage::Pretrain => {
                    let mut m = Model::new(cfg.model.clone())?;
                    apply_pretrain_trainability(&mut m);
                    m
                }
                Stage::Finetune => {
                    let mut m = open_checkpoint(cfg.train.base_checkpoint.as_ref(), "base")?;
                    m.set_token_mode(cfg.model.token_mode);
                    m.reset_thermal_params();
                    inject(&mut m, &cfg.lora)?;
                    m
                }
            };
            (model, 0, None)
        }
    };
    let tau = match cfg.train.stage {
        Stage::Pretrain => TauSource::Fixed(0.0),
        Stage::Finetune => cfg.train.tau.map_or(TauSource::Uniform, TauSource::Fixed),
    };
    let options = TrainOptions {
        tau,
        augment: cfg.train.augment.then(|| cfg.augment.clone()),
        log_path: Some(&log_path),
        start_step,
        optimizer,
        stop_step: None,
    };
    let TrainReport { state, epochs, optimizer } = train(&mut model, &scenes, &cfg.optim, &cfg.loss, options)?;
    if cfg.train.stage == Stage::Pretrain {
        // thermal frames of a fresh base are read through the RGB tokens
        model.reset_thermal_params();
    }
    let progress = TrainProgress { step: state.step as u64, epoch: state.epoch as u64 };
    save_checkpoint(&final_path, &model, progress, &optimizer.export(&model.params))?;
    if model.lora.is_some() {
        save_adapters(&ckpt_dir.join("adapters.bin"), &model)?;
    }
    write_json(&cfg.out.join("metrics").join("train_epochs.json"), &epochs)?;
    let summary = TrainSummary {
        stage: cfg.train.stage,
        steps: state.step,
        epochs: state.epoch,
        final_running_loss: state.running_total,
        trainable_fraction: model.trainable_fraction(),
        checkpoint: final_path,
    };
    write_json(&cfg.out.join("metrics").join("train_summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalOutputs {
    pub report: Option<EvalReport>,
    pub sweep: Option<Vec<SweepRow>>,
}

pub fn cmd_eval(cfg: &RunConfig, force: bool) -> Result<EvalOutputs> {
    let model = if cfg.eval.ground_truth { None } else { Some(open_checkpoint(cfg.eval.checkpoint.as_ref(), "evaluation")?) };
    let scenes = load_scenes(cfg)?;
    let metrics_dir = cfg.out.join("metrics");
    let summary_path = metrics_dir.join("summary.csv");
    claim(&summary_path, force)?;
    let predictor = model.as_ref().map_or(Predictor::GroundTruth, Predictor::Model);
    let patch = model.as_ref().map_or(cfg.model.patch_size, |m| m.config.patch_size);
    let protocol = &cfg.eval.protocol;

    let mut csv = format!("scene,{CSV_HEADER}\n");
    let report = if cfg.eval.dual_run {
        let report = evaluate(predictor, &scenes, patch, protocol)?;
        for s in &report.scenes {
            write_json(&metrics_dir.join(format!("{}.json", s.scene)), s)?;
            csv.push_str(&format!("{},{}\n", s.scene, s.combined.csv_row()));
        }
        write_json(&metrics_dir.join("pooled.json"), &report.pooled)?;
        csv.push_str(&format!("pooled,{}\n", report.pooled.csv_row()));
        Some(report)
    } else {
        None
    };
    write_text(&summary_path, &csv)?;
    let sweep = if cfg.eval.sweep {
        let rows = tau_sweep(predictor, &scenes, patch, protocol)?;
        let mut text = format!("{SWEEP_CSV_HEADER}\n");
        for r in &rows {
            text.push_str(&r.csv_row());
            text.push('\n');
        }
        write_text(&metrics_dir.join("tau_sweep.csv"), &text)?;
        write_json(&metrics_dir.join("tau_sweep.json"), &rows)?;
        Some(rows)
    } else {
        None
    };
    Ok(EvalOutputs { report, sweep })
}

/// One variant's per-run scores for the ablation significance matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnalysisOutputs {
    pub base: Option<AlignmentSummary>,
    pub adapted: Option<AlignmentSummary>,
}

fn profile_json(summary: &AlignmentSummary) -> serde_json::Value {
    let layers: serde_json::Map<String, serde_json::Value> = summary
        .profile
        .layers
        .iter()
        .zip(&summary.bootstrap_bands)
        .map(|(l, band)| {
            (
                l.layer.to_string(),
                serde_json::json!({
                    "median": l.median, "q25": l.q25, "q75": l.q75, "scenes": l.count,
                    "bootstrap_q25": band[0], "bootstrap_q75": band[1],
                }),
            )
        })
        .collect();
    serde_json::json!({
        "layers": layers,
        "last_third_mean": summary.last_third_mean,
        "final_layer_jeffreys": summary.final_jeffreys,
    })
}

fn pca_csv(model: &Model, batches: &[(String, crate::training::PreparedBatch)], k: usize) -> Result<String> {
    let last = model.config.num_blocks - 1;
    let rgb = modality_tokens(model, batches, last, Modality::Rgb)?;
    let thermal = modality_tokens(model, batches, last, Modality::Thermal)?;
    let all = ndarray::concatenate(ndarray::Axis(0), &[rgb.view(), thermal.view()]).expect("same width");
    let e = pca_embed(&all, k)?;
    let header: Vec<String> = (1..=k).map(|i| format!("pc{i}")).collect();
    let mut out = format!("modality,{}\n", header.join(","));
    for (r, row) in e.coords.rows().into_iter().enumerate() {
        let m = if r < rgb.nrows() { Modality::Rgb } else { Modality::Thermal };
        let vals: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&format!("{m},{}\n", vals.join(",")));
    }
    Ok(out)
}

pub fn cmd_analyze(cfg: &RunConfig, force: bool) -> Result<AnalysisOutputs> {
    let a = &cfg.analyze;
    let dir = cfg.out.join("analysis");
    let wants_profiles = a.base_checkpoint.is_some() || a.adapted_checkpoint.is_some();
    if !wants_profiles && a.ablation_results.is_empty() {
        return Err(Error::Config("analyze needs checkpoints to profile or ablation results to compare".into()));
    }
    claim(&dir, force)?;
    let mut outputs = AnalysisOutputs { base: None, adapted: None };
    if wants_profiles {
        let base = open_checkpoint(a.base_checkpoint.as_ref(), "base")?;
        let adapted = open_checkpoint(a.adapted_checkpoint.as_ref(), "adapted")?;
        let scenes = load_scenes(cfg)?;
        let batches = analysis_batches(
            &scenes,
            a.batch_size,
            (a.tau_range[0], a.tau_range[1]),
            a.batches_per_scene,
            base.config.patch_size,
            cfg.seed,
        )?;
        let sb = alignment_summary(&base, &batches, a.pair_cap, a.bootstrap_resamples, cfg.seed)?;
        let sa = alignment_summary(&adapted, &batches, a.pair_cap, a.bootstrap_resamples, cfg.seed)?;
        write_json(&dir.join("alignment.json"), &serde_json::json!({ "base": profile_json(&sb), "adapted": profile_json(&sa) }))?;
        write_text(&dir.join("pca_base.csv"), &pca_csv(&base, &batches, a.pca_components)?)?;
        write_text(&dir.join("pca_adapted.csv"), &pca_csv(&adapted, &batches, a.pca_components)?)?;
        outputs.base = Some(sb);
        outputs.adapted = Some(sa);
    }
    if !a.ablation_results.is_empty() {
        if a.ablation_results.len() < 2 {
            return Err(Error::Config("ablation mode needs at least two result sets".into()));
        }
        let sets = a
            .ablation_results
            .iter()
            .map(|p| {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let r: AblationResult = serde_json::from_str(&text)?;
                Ok((r.name, r.values))
            })
            .collect::<Result<Vec<_>>>()?;
        let matrix = p_value_matrix(&sets)?;
        write_json(&dir.join("pvalues.json"), &matrix)?;
        write_text(&dir.join("pvalues.csv"), &matrix.to_csv())?;
    }
    Ok(outputs)
}

/// Manifest of a synthesized scene directory.
pub fn scene_manifest(dir: &Path) -> Result<SceneManifest> {
    crate::data::load_manifest(&dir.join("scene.json"))
}
