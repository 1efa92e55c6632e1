//! Low-rank adapters on the alternating-attention stack.
//!
//! An adapted linear map computes `W·x + b + (α/r)·B·(A·x)` with `B` zero at
//! injection, so an adapted model reproduces its base exactly until training
//! moves `B`.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionKind, Linear, Model, ModelConfig, Sublayer, TokenMode};
use crate::params::{kaiming_uniform, ParamId, ParamKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoraTarget {
    Both,
    GlobalOnly,
    FrameOnly,
}

impl LoraTarget {
    pub fn covers(self, kind: AttentionKind) -> bool {
        matches!(
            (self, kind),
            (LoraTarget::Both, _) | (LoraTarget::GlobalOnly, AttentionKind::Global) | (LoraTarget::FrameOnly, AttentionKind::Frame)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub target: LoraTarget,
    pub sublayers: BTreeSet<Sublayer>,
    /// Whether the prediction heads train alongside the adapters.
    pub train_heads: bool,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 64,
            alpha: 128.0,
            target: LoraTarget::Both,
            sublayers: Sublayer::ALL.into_iter().collect(),
            train_heads: false,
            seed: 0,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be >= 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("LoRA alpha must be > 0, got {}", self.alpha)));
        }
        if self.sublayers.is_empty() {
            return Err(Error::Config("LoRA needs at least one target sublayer".into()));
        }
        Ok(())
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Adapter attached to one frozen linear map. `a` is `r × d_in`, `b` is `d_out × r`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    pub a: ParamId,
    pub b: ParamId,
    pub scaling: f64,
}

/// Attaches adapters to every selected sublayer of every targeted block,
/// freezes the backbone and applies the fine-tuning trainability policy.
/// Returns the adapter paths in injection order.
pub fn inject(model: &mut Model, config: &LoraConfig) -> Result<Vec<String>> {
    config.validate()?;
    if model.lora.is_some() {
        return Err(Error::State("model already carries adapters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut registry = Vec::new();
    let scaling = config.scaling();
    for (i, block) in model.blocks.iter_mut().enumerate() {
        if !config.target.covers(block.kind) {
            continue;
        }
        for &s in &config.sublayers {
            let lin = block.sublayer_mut(s);
            let path = format!("blocks.{i}.{}", s.path());
            let a = model
                .params
                .insert(format!("{path}.lora_a"), ParamKind::Lora, kaiming_uniform(&mut rng, config.rank, lin.d_in));
            let b = model
                .params
                .insert(format!("{path}.lora_b"), ParamKind::Lora, Array2::zeros((lin.d_out, config.rank)));
            lin.lora = Some(LoraLayer { a, b, scaling });
            registry.push(path);
        }
    }
    model.lora = Some(config.clone());
    apply_finetune_trainability(model, config.train_heads);
    Ok(registry)
}

/// Freezes everything except what fine-tuning may update in the current
/// token mode: adapters, camera tokens, thermal adapters and optionally heads.
pub fn apply_finetune_trainability(model: &mut Model, train_heads: bool) {
    let mode = model.config.token_mode;
    let rgb = [model.tokens.rgb_first, model.tokens.rgb_rest];
    let ids: Vec<ParamId> = model.params.ids().collect();
    for id in ids {
        let kind = model.params.get(id).kind;
        let trainable = match kind {
            ParamKind::Lora => true,
            ParamKind::Head => train_heads,
            ParamKind::ThermalAdapter => true,
            // the whole bank adapts in per-modality mode; the shared-token
            // ablation only has the RGB pair in play; the remaining
            // ablations keep every token frozen
            ParamKind::CameraToken => match mode {
                TokenMode::PerModality => true,
                TokenMode::SharedToken => rgb.contains(&id),
                _ => false,
            },
            ParamKind::Tokenizer | ParamKind::Backbone => false,
        };
        model.params.set_trainable(id, trainable);
    }
}

/// Dense evaluation of a linear map (with its adapter, if any) on row vectors.
pub fn adapted_apply(model: &Model, layer: &Linear, x: &Array2<f64>) -> Array2<f64> {
    let w = model.params.value(layer.weight);
    let bias = model.params.value(layer.bias);
    let mut y = x.dot(&w.t()) + bias;
    if let Some(lora) = &layer.lora {
        let a = model.params.value(lora.a);
        let b = model.params.value(lora.b);
        y = y + x.dot(&a.t()).dot(&b.t()) * lora.scaling;
    }
    y
}

/// `W + (α/r)·B·A` for an adapted layer, `W` for a plain one.
pub fn merge(model: &Model, layer: &Linear) -> Array2<f64> {
    let w = model.params.value(layer.weight).clone();
    match &layer.lora {
        None => w,
        Some(lora) => w + model.params.value(lora.b).dot(model.params.value(lora.a)) * lora.scaling,
    }
}

/// Folds every adapter into its base weight and zeroes the adapter's `B`, so
/// outputs are unchanged and a second merge is a no-op.
pub fn merge_all(model: &mut Model) {
    let mut updates = Vec::new();
    for block in &model.blocks {
        for s in Sublayer::ALL {
            let lin = block.sublayer(s);
            if let Some(lora) = &lin.lora {
                updates.push((lin.weight, merge(model, lin), lora.b));
            }
        }
    }
    for (w, merged, b) in updates {
        model.params.get_mut(w).value = merged;
        model.params.get_mut(b).value.fill(0.0);
    }
}

/// Trainable scalars over all scalars, by direct enumeration of the model.
pub fn trainable_fraction(model: &Model) -> f64 {
    model.trainable_fraction()
}

/// Shape of a tokenizer used for counting parameters at arbitrary scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TokenizerSpec {
    /// Linear patch embedding (`3p² → D` plus bias), as built by [`Model`].
    LinearPatch,
    /// Frozen ViT feature extractor with learned positions, class and register
    /// tokens, and layer-scale.
    Vit { depth: usize, dim: usize, mlp_dim: usize, patch: usize, positions: usize, registers: usize },
}

impl TokenizerSpec {
    /// ViT-L/14 with four registers at 518-pixel input.
    pub fn vit_large_14() -> Self {
        TokenizerSpec::Vit { depth: 24, dim: 1024, mlp_dim: 4096, patch: 14, positions: 37 * 37 + 1, registers: 4 }
    }
}

/// One named tensor shape with its trainability under a fine-tuning setup.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
}

impl ShapeEntry {
    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

/// Enumerates every tensor of an adapted model without allocating it.
pub fn shape_inventory(config: &ModelConfig, lora: &LoraConfig, tokenizer: TokenizerSpec) -> Vec<ShapeEntry> {
    let mut out = Vec::new();
    let mut push = |name: String, rows: usize, cols: usize, trainable: bool| {
        out.push(ShapeEntry { name, rows, cols, trainable });
    };
    let d = config.embed_dim;
    let p = config.patch_size;
    let mode = config.token_mode;

    match tokenizer {
        TokenizerSpec::LinearPatch => {
            push("tokenizer.weight".into(), d, 3 * p * p, false);
            push("tokenizer.bias".into(), 1, d, false);
        }
        TokenizerSpec::Vit { depth, dim, mlp_dim, patch, positions, registers } => {
            push("tokenizer.patch.weight".into(), dim, 3 * patch * patch, false);
            push("tokenizer.patch.bias".into(), 1, dim, false);
            push("tokenizer.cls".into(), 1, dim, false);
            push("tokenizer.registers".into(), registers, dim, false);
            push("tokenizer.positions".into(), positions, dim, false);
            for i in 0..depth {
                let n = format!("tokenizer.blocks.{i}");
                push(format!("{n}.norm1.gamma"), 1, dim, false);
                push(format!("{n}.norm1.beta"), 1, dim, false);
                push(format!("{n}.qkv.weight"), 3 * dim, dim, false);
                push(format!("{n}.qkv.bias"), 1, 3 * dim, false);
                push(format!("{n}.proj.weight"), dim, dim, false);
                push(format!("{n}.proj.bias"), 1, dim, false);
                push(format!("{n}.ls1"), 1, dim, false);
                push(format!("{n}.norm2.gamma"), 1, dim, false);
                push(format!("{n}.norm2.beta"), 1, dim, false);
                push(format!("{n}.fc1.weight"), mlp_dim, dim, false);
                push(format!("{n}.fc1.bias"), 1, mlp_dim, false);
                push(format!("{n}.fc2.weight"), dim, mlp_dim, false);
                push(format!("{n}.fc2.bias"), 1, dim, false);
                push(format!("{n}.ls2"), 1, dim, false);
            }
            push("tokenizer.norm.gamma".into(), 1, dim, false);
            push("tokenizer.norm.beta".into(), 1, dim, false);
        }
    }

    for (name, thermal) in [("rgb_first", false), ("rgb_rest", false), ("thermal_first", true), ("thermal_rest", true)] {
        let trainable = match mode {
            TokenMode::PerModality => true,
            TokenMode::SharedToken => !thermal,
            _ => false,
        };
        push(format!("camera_token.{name}"), 1, d, trainable);
    }

    let mlp = config.mlp_dim();
    for i in 0..config.num_blocks {
        let n = format!("blocks.{i}");
        push(format!("{n}.norm1.gamma"), 1, d, false);
        push(format!("{n}.norm1.beta"), 1, d, false);
        for (s, d_in, d_out) in [
            (Sublayer::AttentionQ, d, d),
            (Sublayer::AttentionK, d, d),
            (Sublayer::AttentionV, d, d),
            (Sublayer::AttentionOut, d, d),
        ] {
            push(format!("{n}.{}.weight", s.path()), d_out, d_in, false);
            push(format!("{n}.{}.bias", s.path()), 1, d_out, false);
        }
        push(format!("{n}.norm2.gamma"), 1, d, false);
        push(format!("{n}.norm2.beta"), 1, d, false);
        push(format!("{n}.mlp.in.weight"), mlp, d, false);
        push(format!("{n}.mlp.in.bias"), 1, mlp, false);
        push(format!("{n}.mlp.out.weight"), d, mlp, false);
        push(format!("{n}.mlp.out.bias"), 1, d, false);
    }

    let h = lora.train_heads;
    push("camera_head.norm.gamma".into(), 1, d, h);
    push("camera_head.norm.beta".into(), 1, d, h);
    push("camera_head.fc1.weight".into(), d, d, h);
    push("camera_head.fc1.bias".into(), 1, d, h);
    push("camera_head.fc2.weight".into(), 9, d, h);
    push("camera_head.fc2.bias".into(), 1, 9, h);
    let taps = config.head_tap_fractions.len();
    let hidden = config.depth_hidden();
    push("depth_head.fc1.weight".into(), hidden, taps * d, h);
    push("depth_head.fc1.bias".into(), 1, hidden, h);
    push("depth_head.fc2.weight".into(), 2 * p * p, hidden, h);
    push("depth_head.fc2.bias".into(), 1, 2 * p * p, h);

    match mode {
        TokenMode::ThermalProjector => push("thermal.projector".into(), d, d, true),
        TokenMode::ThermalEmbedding => push("thermal.embedding".into(), 1, d, true),
        _ => {}
    }

    for i in 0..config.num_blocks {
        if !lora.target.covers(config.attention_kind(i)) {
            continue;
        }
        for &s in &lora.sublayers {
            let (d_in, d_out) = match s {
                Sublayer::MlpIn => (d, mlp),
                Sublayer::MlpOut => (mlp, d),
                _ => (d, d),
            };
            let path = format!("blocks.{i}.{}", s.path());
            push(format!("{path}.lora_a"), lora.rank, d_in, true);
            push(format!("{path}.lora_b"), d_out, lora.rank, true);
        }
    }
    out
}

/// `(trainable, total)` scalar counts from the inventory.
pub fn count_by_enumeration(entries: &[ShapeEntry]) -> (u64, u64) {
    entries.iter().fold((0, 0), |(t, all), e| {
        let n = e.numel() as u64;
        (t + if e.trainable { n } else { 0 }, all + n)
    })
}

/// `(trainable, total)` scalar counts from closed-form per-component formulas.
pub fn count_closed_form(config: &ModelConfig, lora: &LoraConfig, tokenizer: TokenizerSpec) -> (u64, u64) {
    let d = config.embed_dim as u64;
    let p = config.patch_size as u64;
    let r = lora.rank as u64;
    let mlp = config.mlp_dim() as u64;
    let blocks = config.num_blocks as u64;

    let tokenizer_total = match tokenizer {
        TokenizerSpec::LinearPatch => 3 * p * p * d + d,
        TokenizerSpec::Vit { depth, dim, mlp_dim, patch, positions, registers } => {
            let (dv, mv, pv) = (dim as u64, mlp_dim as u64, patch as u64);
            let per_block = 4 * dv + (3 * dv * dv + 3 * dv) + (dv * dv + dv) + 2 * dv + (2 * dv * mv + mv + dv);
            (3 * pv * pv * dv + dv) + dv + registers as u64 * dv + positions as u64 * dv + depth as u64 * per_block + 2 * dv
        }
    };
    let per_block = 4 * d + 4 * (d * d + d) + (2 * d * mlp + mlp + d);
    let taps = config.head_tap_fractions.len() as u64;
    let hidden = config.depth_hidden() as u64;
    let heads = (2 * d + d * d + d + 9 * d + 9) + (taps * d * hidden + hidden + hidden * 2 * p * p + 2 * p * p);
    let tokens = 4 * d;
    let thermal_adapter = match config.token_mode {
        TokenMode::ThermalProjector => d * d,
        TokenMode::ThermalEmbedding => d,
        _ => 0,
    };

    let adapted_blocks = (0..config.num_blocks).filter(|&i| lora.target.covers(config.attention_kind(i))).count() as u64;
    let per_block_lora: u64 = lora
        .sublayers
        .iter()
        .map(|s| match s {
            Sublayer::MlpIn | Sublayer::MlpOut => r * (d + mlp),
            _ => r * 2 * d,
        })
        .sum();
    let lora_total = adapted_blocks * per_block_lora;

    let trainable_tokens = match config.token_mode {
        TokenMode::PerModality => 4 * d,
        TokenMode::SharedToken => 2 * d,
        _ => 0,
    };
    let trainable = lora_total + trainable_tokens + thermal_adapter + if lora.train_heads { heads } else { 0 };
    let total = tokenizer_total + tokens + blocks * per_block + heads + thermal_adapter + lora_total;
    (trainable, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::Rng;

    fn tiny() -> Model {
        Model::new(ModelConfig { embed_dim: 16, num_blocks: 4, num_heads: 2, patch_size: 4, ..Default::default() }).unwrap()
    }

    fn small_lora(target: LoraTarget) -> LoraConfig {
        LoraConfig { rank: 4, alpha: 8.0, target, ..Default::default() }
    }

    #[test]
    fn inject_counts() {
        let mut m = tiny();
        assert_eq!(inject(&mut m, &small_lora(LoraTarget::Both)).unwrap().len(), 24);
        let mut m = tiny();
        let reg = inject(&mut m, &small_lora(LoraTarget::GlobalOnly)).unwrap();
        assert_eq!(reg.len(), 12);
        assert!(reg.iter().all(|p| p.starts_with("blocks.1.") || p.starts_with("blocks.3.")));
    }

    #[test]
    fn double_injection_is_state_error() {
        let mut m = tiny();
        inject(&mut m, &small_lora(LoraTarget::Both)).unwrap();
        assert!(matches!(inject(&mut m, &small_lora(LoraTarget::Both)), Err(Error::State(_))));
    }

    #[test]
    fn lora_config_validation() {
        assert!(LoraConfig { rank: 0, ..Default::default() }.validate().is_err());
        assert!(LoraConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn init_b_zero_and_base_frozen() {
        let mut m = tiny();
        inject(&mut m, &small_lora(LoraTarget::Both)).unwrap();
        for (_, p) in m.params.iter() {
            match p.kind {
                ParamKind::Lora if p.name.ends_with("lora_b") => assert!(p.value.iter().all(|v| *v == 0.0)),
                ParamKind::Lora => {
                    let bound = 1.0 / (p.value.ncols() as f64).sqrt();
                    assert!(p.value.iter().all(|v| v.abs() <= bound) && p.value.iter().any(|v| *v != 0.0));
                }
                ParamKind::Backbone | ParamKind::Tokenizer | ParamKind::Head => assert!(!p.trainable, "{}", p.name),
                _ => {}
            }
        }
    }

    #[test]
    fn adapted_apply_cases() {
        let mut m = tiny();
        inject(&mut m, &small_lora(LoraTarget::Both)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((5, 16), |_| rng.gen_range(-1.0..1.0));
        let lin = m.blocks[0].q.clone();
        let base = x.dot(&m.params.value(lin.weight).t()) + m.params.value(lin.bias);
        assert_eq!(adapted_apply(&m, &lin, &x), base);

        // rank = d with B·A = ΔW chosen
        let mut m = tiny();
        inject(&mut m, &LoraConfig { rank: 16, alpha: 16.0, ..Default::default() }).unwrap();
        let lin = m.blocks[0].q.clone();
        let lora = lin.lora.clone().unwrap();
        let delta = Array2::from_shape_fn((16, 16), |_| rng.gen_range(-0.5..0.5));
        m.params.get_mut(lora.a).value = Array2::eye(16);
        m.params.get_mut(lora.b).value = delta.clone();
        let dense = x.dot(&(m.params.value(lin.weight) + &delta).t()) + m.params.value(lin.bias);
        let got = adapted_apply(&m, &lin, &x);
        assert!((got - dense).iter().all(|d| d.abs() < 1e-6));

        // doubling alpha doubles the adapter contribution
        let base = x.dot(&m.params.value(lin.weight).t()) + m.params.value(lin.bias);
        let contrib = adapted_apply(&m, &lin, &x) - &base;
        let mut doubled = lin.clone();
        doubled.lora.as_mut().unwrap().scaling *= 2.0;
        let contrib2 = adapted_apply(&m, &doubled, &x) - &base;
        assert!((contrib2 - contrib * 2.0).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn merge_matches_adapted_apply() {
        let mut m = tiny();
        inject(&mut m, &small_lora(LoraTarget::Both)).unwrap();
        let lin = m.blocks[1].mlp_in.clone();
        assert_eq!(merge(&m, &lin), *m.params.value(lin.weight));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lora = lin.lora.clone().unwrap();
        m.params.get_mut(lora.b).value.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let x = Array2::from_shape_fn((3, 16), |_| rng.gen_range(-1.0..1.0));
        let merged = x.dot(&merge(&m, &lin).t()) + m.params.value(lin.bias);
        assert!((merged - adapted_apply(&m, &lin, &x)).iter().all(|d| d.abs() < 1e-6));

        let before = adapted_apply(&m, &lin, &x);
        merge_all(&mut m);
        let once = adapted_apply(&m, &lin, &x);
        merge_all(&mut m);
        let twice = adapted_apply(&m, &lin, &x);
        assert!((&once - &before).iter().all(|d| d.abs() < 1e-9));
        assert_eq!(once, twice);
    }

    #[test]
    fn fraction_zero_when_all_frozen() {
        let mut m = tiny();
        m.params.freeze_all();
        assert_eq!(trainable_fraction(&m), 0.0);
    }

    #[test]
    fn inventory_matches_model_and_closed_form() {
        for mode in [TokenMode::PerModality, TokenMode::SharedToken, TokenMode::NoToken, TokenMode::ThermalProjector, TokenMode::ThermalEmbedding] {
            for target in [LoraTarget::Both, LoraTarget::GlobalOnly, LoraTarget::FrameOnly] {
                for train_heads in [false, true] {
                    let cfg = ModelConfig { embed_dim: 16, num_blocks: 4, num_heads: 2, patch_size: 4, token_mode: mode, ..Default::default() };
                    let lora = LoraConfig { rank: 3, alpha: 6.0, target, train_heads, ..Default::default() };
                    let mut m = Model::new(cfg.clone()).unwrap();
                    inject(&mut m, &lora).unwrap();
                    let inv = shape_inventory(&cfg, &lora, TokenizerSpec::LinearPatch);
                    let mut from_model: Vec<(String, usize, usize, bool)> =
                        m.params.iter().map(|(_, p)| (p.name.clone(), p.value.nrows(), p.value.ncols(), p.trainable)).collect();
                    let mut from_inv: Vec<(String, usize, usize, bool)> =
                        inv.iter().map(|e| (e.name.clone(), e.rows, e.cols, e.trainable)).collect();
                    from_model.sort();
                    from_inv.sort();
                    assert_eq!(from_model, from_inv, "{mode:?} {target:?}");
                    let (t, all) = count_by_enumeration(&inv);
                    assert_eq!((t, all), count_closed_form(&cfg, &lora, TokenizerSpec::LinearPatch));
                    assert_eq!(t as usize, m.params.trainable_scalar_count());
                    assert!((trainable_fraction(&m) - t as f64 / all as f64).abs() < 1e-15);
                }
            }
        }
    }
}
