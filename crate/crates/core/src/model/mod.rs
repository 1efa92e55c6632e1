//! Miniature alternating-attention geometry transformer.
//!
//! A frame is tokenized into `P` patch tokens plus one camera token at row 0.
//! Blocks alternate between frame-wise attention (block 0, 2, ...) and global
//! attention over every frame of a sequence (block 1, 3, ...). The camera head
//! reads the final camera token; the depth head reads patch tokens tapped from
//! intermediate blocks.

mod checkpoint;

use std::f64::consts::PI;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_adapters, load_checkpoint, round_to_storage_precision, save_adapters, save_checkpoint, Checkpoint,
    TrainProgress,
};

use crate::adapters::{LoraConfig, LoraLayer};
use crate::autograd::{Graph, Segment, Var};
use crate::error::{Error, Result};
use crate::geometry::{CameraPose, DepthMap, Intrinsics};
use crate::imaging::Image;
use crate::modality::Modality;
use crate::params::{kaiming_uniform, normal_init, Bindings, ParamId, ParamKind, ParamStore};

/// How thermal frames are distinguished from RGB frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenMode {
    /// Dedicated learnable thermal camera tokens.
    PerModality,
    /// Both modalities use the RGB tokens, which stay learnable.
    SharedToken,
    /// Thermal frames use the frozen RGB tokens.
    NoToken,
    /// Frozen RGB tokens plus a learnable `D × D` map on thermal patch tokens.
    ThermalProjector,
    /// Frozen RGB tokens plus a learnable vector added to thermal patch tokens.
    ThermalEmbedding,
}

impl std::str::FromStr for TokenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown token mode '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub head_tap_fractions: Vec<f64>,
    pub token_mode: TokenMode,
    /// Keeps the patch embedding frozen even when the backbone trains.
    pub freeze_tokenizer: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            num_blocks: 6,
            num_heads: 4,
            mlp_ratio: 4,
            head_tap_fractions: vec![1.0 / 6.0, 0.5, 0.75, 23.0 / 24.0],
            token_mode: TokenMode::PerModality,
            freeze_tokenizer: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_blocks == 0 || self.num_blocks % 2 != 0 {
            problems.push(format!("num_blocks must be positive and even, got {}", self.num_blocks));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            problems.push(format!("embed_dim {} not divisible by num_heads {}", self.embed_dim, self.num_heads));
        }
        if self.embed_dim % 4 != 0 {
            problems.push(format!("embed_dim {} must be a multiple of 4 for 2-D positions", self.embed_dim));
        }
        if self.patch_size == 0 || self.mlp_ratio == 0 {
            problems.push("patch_size and mlp_ratio must be positive".into());
        }
        if self.head_tap_fractions.is_empty() || self.head_tap_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            problems.push(format!("head_tap_fractions must lie in (0, 1], got {:?}", self.head_tap_fractions));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Block indices feeding the depth head: `ceil(f·L) - 1` for each fraction.
    pub fn tap_indices(&self) -> Vec<usize> {
        let l = self.num_blocks as f64;
        self.head_tap_fractions
            .iter()
            .map(|f| ((f * l - 1e-9).ceil() as usize).saturating_sub(1).min(self.num_blocks - 1))
            .collect()
    }

    pub fn attention_kind(&self, block: usize) -> AttentionKind {
        if block % 2 == 0 {
            AttentionKind::Frame
        } else {
            AttentionKind::Global
        }
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn depth_hidden(&self) -> usize {
        self.embed_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    Frame,
    Global,
}

/// The six adaptable linear sublayers of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sublayer {
    AttentionQ,
    AttentionK,
    AttentionV,
    AttentionOut,
    MlpIn,
    MlpOut,
}

impl Sublayer {
    pub const ALL: [Sublayer; 6] = [
        Sublayer::AttentionQ,
        Sublayer::AttentionK,
        Sublayer::AttentionV,
        Sublayer::AttentionOut,
        Sublayer::MlpIn,
        Sublayer::MlpOut,
    ];

    pub fn path(self) -> &'static str {
        match self {
            Sublayer::AttentionQ => "attn.q",
            Sublayer::AttentionK => "attn.k",
            Sublayer::AttentionV => "attn.v",
            Sublayer::AttentionOut => "attn.out",
            Sublayer::MlpIn => "mlp.in",
            Sublayer::MlpOut => "mlp.out",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub lora: Option<LoraLayer>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, kind: ParamKind, d_in: usize, d_out: usize) -> Self {
        let weight = store.insert(format!("{name}.weight"), kind, kaiming_uniform(rng, d_out, d_in));
        let bias = store.insert(format!("{name}.bias"), kind, Array2::zeros((1, d_out)));
        Self { weight, bias, lora: None, d_in, d_out }
    }

    pub fn apply(&self, g: &mut Graph, b: &mut Bindings, store: &ParamStore, x: Var) -> Var {
        let w = b.bind(g, store, self.weight);
        let bias = b.bind(g, store, self.bias);
        let y = g.matmul_nt(x, w);
        let y = g.add_row(y, bias);
        match &self.lora {
            None => y,
            Some(lora) => {
                let a = b.bind(g, store, lora.a);
                let bm = b.bind(g, store, lora.b);
                let low = g.matmul_nt(x, a);
                let up = g.matmul_nt(low, bm);
                let up = g.scale(up, lora.scaling);
                g.add(y, up)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, kind: ParamKind, dim: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), kind, Array2::ones((1, dim))),
            beta: store.insert(format!("{name}.beta"), kind, Array2::zeros((1, dim))),
        }
    }

    fn apply(&self, g: &mut Graph, b: &mut Bindings, store: &ParamStore, x: Var) -> Var {
        let gamma = b.bind(g, store, self.gamma);
        let beta = b.bind(g, store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub kind: AttentionKind,
    pub norm1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub norm2: Norm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl Block {
    pub fn sublayer(&self, s: Sublayer) -> &Linear {
        match s {
            Sublayer::AttentionQ => &self.q,
            Sublayer::AttentionK => &self.k,
            Sublayer::AttentionV => &self.v,
            Sublayer::AttentionOut => &self.out,
            Sublayer::MlpIn => &self.mlp_in,
            Sublayer::MlpOut => &self.mlp_out,
        }
    }

    pub fn sublayer_mut(&mut self, s: Sublayer) -> &mut Linear {
        match s {
            Sublayer::AttentionQ => &mut self.q,
            Sublayer::AttentionK => &mut self.k,
            Sublayer::AttentionV => &mut self.v,
            Sublayer::AttentionOut => &mut self.out,
            Sublayer::MlpIn => &mut self.mlp_in,
            Sublayer::MlpOut => &mut self.mlp_out,
        }
    }

    fn forward(&self, g: &mut Graph, b: &mut Bindings, store: &ParamStore, x: Var, heads: usize, segments: Vec<Segment>) -> Var {
        let h = self.norm1.apply(g, b, store, x);
        let q = self.q.apply(g, b, store, h);
        let k = self.k.apply(g, b, store, h);
        let v = self.v.apply(g, b, store, h);
        let a = g.attention(q, k, v, heads, segments);
        let o = self.out.apply(g, b, store, a);
        let x = g.add(x, o);
        let h = self.norm2.apply(g, b, store, x);
        let m = self.mlp_in.apply(g, b, store, h);
        let m = g.gelu(m);
        let m = self.mlp_out.apply(g, b, store, m);
        g.add(x, m)
    }
}

/// The four camera tokens; thermal entries start as copies of the RGB ones.
#[derive(Clone, Debug)]
pub struct CameraTokenBank {
    pub rgb_first: ParamId,
    pub rgb_rest: ParamId,
    pub thermal_first: ParamId,
    pub thermal_rest: ParamId,
}

impl CameraTokenBank {
    pub fn select(&self, modality: Modality, first: bool, mode: TokenMode) -> ParamId {
        let thermal = modality == Modality::Thermal && mode == TokenMode::PerModality;
        match (thermal, first) {
            (true, true) => self.thermal_first,
            (true, false) => self.thermal_rest,
            (false, true) => self.rgb_first,
            (false, false) => self.rgb_rest,
        }
    }
}

/// Per-frame metadata of a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameMeta {
    pub modality: Modality,
    pub sequence: usize,
    pub position: usize,
}

/// Row layout of a batch: frames are contiguous `(1 + P)`-row blocks and
/// sequences are contiguous runs of frames.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLayout {
    pub frames: Vec<FrameMeta>,
    pub sequence_lengths: Vec<usize>,
    pub patches_per_frame: usize,
    pub grid: (usize, usize),
}

impl BatchLayout {
    pub fn tokens_per_frame(&self) -> usize {
        self.patches_per_frame + 1
    }

    pub fn frame_segments(&self) -> Vec<Segment> {
        let t = self.tokens_per_frame();
        (0..self.frames.len()).map(|f| (f * t, t)).collect()
    }

    pub fn sequence_segments(&self) -> Vec<Segment> {
        let t = self.tokens_per_frame();
        let mut start = 0;
        self.sequence_lengths
            .iter()
            .map(|&n| {
                let seg = (start * t, n * t);
                start += n;
                seg
            })
            .collect()
    }

    /// Row of each frame's camera token.
    pub fn camera_rows(&self) -> Vec<usize> {
        let t = self.tokens_per_frame();
        (0..self.frames.len()).map(|f| f * t).collect()
    }

    /// Rows of all patch tokens, frame-major.
    pub fn patch_rows(&self) -> Vec<usize> {
        let t = self.tokens_per_frame();
        (0..self.frames.len()).flat_map(|f| (f * t + 1)..((f + 1) * t)).collect()
    }
}

/// Token matrix of a batch plus its layout.
pub struct TokenBatch {
    pub tokens: Var,
    pub layout: BatchLayout,
}

/// One input frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameInput<'a> {
    pub image: &'a Image,
    pub modality: Modality,
}

/// Unit quaternion (w, x, y, z), translation and horizontal/vertical field of view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseEncoding(pub [f64; 9]);

impl PoseEncoding {
    pub fn from_pose(pose: &CameraPose, k: &Intrinsics) -> Self {
        let q = pose.wxyz();
        let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
        let (fx, fy) = k.fov();
        let t = pose.translation;
        PoseEncoding([sign * q[0], sign * q[1], sign * q[2], sign * q[3], t.x, t.y, t.z, fx, fy])
    }

    pub fn to_pose(&self) -> CameraPose {
        let v = &self.0;
        let q = nalgebra::Quaternion::new(v[0], v[1], v[2], v[3]);
        CameraPose::from_parts(nalgebra::UnitQuaternion::from_quaternion(q), nalgebra::Vector3::new(v[4], v[5], v[6]))
    }

    pub fn intrinsics(&self, width: u32, height: u32) -> Intrinsics {
        Intrinsics::from_fov(self.0[7], self.0[8], width, height)
    }
}

/// Full-resolution depth and log-scale uncertainty of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthPrediction {
    pub depth: DepthMap,
    pub log_sigma: DepthMap,
}

/// Graph handles of one forward pass.
pub struct ForwardPass {
    pub graph: Graph,
    pub bindings: Bindings,
    pub layout: BatchLayout,
    /// Output of every block, all rows.
    pub layers: Vec<Var>,
    /// `F × 9` activated pose encodings.
    pub poses: Var,
    /// `F·P × p²` positive depth per patch pixel.
    pub depth: Var,
    /// `F·P × p²` log-sigma per patch pixel.
    pub log_sigma: Var,
}

/// Detached results of inference.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub poses: Vec<PoseEncoding>,
    pub depths: Vec<DepthPrediction>,
    pub layers: Vec<Array2<f64>>,
    pub layout: BatchLayout,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub patch_weight: ParamId,
    pub patch_bias: ParamId,
    pub tokens: CameraTokenBank,
    pub thermal_projector: Option<ParamId>,
    pub thermal_embedding: Option<ParamId>,
    pub blocks: Vec<Block>,
    pub camera_norm: Norm,
    pub camera_fc1: Linear,
    pub camera_fc2: Linear,
    pub depth_fc1: Linear,
    pub depth_fc2: Linear,
    pub lora: Option<LoraConfig>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let d = config.embed_dim;
        let p = config.patch_size;

        let patch_in = 3 * p * p;
        let patch_weight = params.insert("tokenizer.weight", ParamKind::Tokenizer, kaiming_uniform(&mut rng, d, patch_in));
        let patch_bias = params.insert("tokenizer.bias", ParamKind::Tokenizer, Array2::zeros((1, d)));

        let rgb_first_v = normal_init(&mut rng, 1, d, 0.5);
        let rgb_rest_v = normal_init(&mut rng, 1, d, 0.5);
        let tokens = CameraTokenBank {
            rgb_first: params.insert("camera_token.rgb_first", ParamKind::CameraToken, rgb_first_v.clone()),
            rgb_rest: params.insert("camera_token.rgb_rest", ParamKind::CameraToken, rgb_rest_v.clone()),
            thermal_first: params.insert("camera_token.thermal_first", ParamKind::CameraToken, rgb_first_v),
            thermal_rest: params.insert("camera_token.thermal_rest", ParamKind::CameraToken, rgb_rest_v),
        };

        let mut blocks = Vec::with_capacity(config.num_blocks);
        for i in 0..config.num_blocks {
            let name = format!("blocks.{i}");
            let kind = ParamKind::Backbone;
            let mlp = config.mlp_dim();
            let mut block = Block {
                kind: config.attention_kind(i),
                norm1: Norm::new(&mut params, &format!("{name}.norm1"), kind, d),
                q: Linear::new(&mut params, &mut rng, &format!("{name}.attn.q"), kind, d, d),
                k: Linear::new(&mut params, &mut rng, &format!("{name}.attn.k"), kind, d, d),
                v: Linear::new(&mut params, &mut rng, &format!("{name}.attn.v"), kind, d, d),
                out: Linear::new(&mut params, &mut rng, &format!("{name}.attn.out"), kind, d, d),
                norm2: Norm::new(&mut params, &format!("{name}.norm2"), kind, d),
                mlp_in: Linear::new(&mut params, &mut rng, &format!("{name}.mlp.in"), kind, d, mlp),
                mlp_out: Linear::new(&mut params, &mut rng, &format!("{name}.mlp.out"), kind, mlp, d),
            };
            // residual branches start small so the stack is near-identity at init
            for s in [Sublayer::AttentionOut, Sublayer::MlpOut] {
                let w = block.sublayer_mut(s).weight;
                params.get_mut(w).value *= 0.5;
            }
            blocks.push(block);
        }

        let camera_norm = Norm::new(&mut params, "camera_head.norm", ParamKind::Head, d);
        let camera_fc1 = Linear::new(&mut params, &mut rng, "camera_head.fc1", ParamKind::Head, d, d);
        let camera_fc2 = Linear::new(&mut params, &mut rng, "camera_head.fc2", ParamKind::Head, d, 9);
        {
            let w = &mut params.get_mut(camera_fc2.weight).value;
            *w *= 0.1;
            params.get_mut(camera_fc2.bias).value[[0, 0]] = 1.0;
        }

        let taps = config.head_tap_fractions.len();
        let depth_fc1 = Linear::new(&mut params, &mut rng, "depth_head.fc1", ParamKind::Head, taps * d, config.depth_hidden());
        let depth_fc2 = Linear::new(&mut params, &mut rng, "depth_head.fc2", ParamKind::Head, config.depth_hidden(), 2 * p * p);

        let mut model = Self {
            config,
            params,
            patch_weight,
            patch_bias,
            tokens,
            thermal_projector: None,
            thermal_embedding: None,
            blocks,
            camera_norm,
            camera_fc1,
            camera_fc2,
            depth_fc1,
            depth_fc2,
            lora: None,
        };
        model.ensure_mode_params();
        Ok(model)
    }

    /// Switches the thermal handling mode, creating mode-specific parameters.
    pub fn set_token_mode(&mut self, mode: TokenMode) {
        self.config.token_mode = mode;
        self.ensure_mode_params();
    }

    fn ensure_mode_params(&mut self) {
        let d = self.config.embed_dim;
        match self.config.token_mode {
            TokenMode::ThermalProjector if self.thermal_projector.is_none() => {
                self.thermal_projector =
                    Some(self.params.insert("thermal.projector", ParamKind::ThermalAdapter, Array2::eye(d)));
            }
            TokenMode::ThermalEmbedding if self.thermal_embedding.is_none() => {
                self.thermal_embedding =
                    Some(self.params.insert("thermal.embedding", ParamKind::ThermalAdapter, Array2::zeros((1, d))));
            }
            _ => {}
        }
    }

    /// Resets every thermal-specific parameter to its neutral value: thermal
    /// tokens copy the RGB tokens, the projector is the identity and the
    /// additive embedding is zero.
    pub fn reset_thermal_params(&mut self) {
        let first = self.params.value(self.tokens.rgb_first).clone();
        let rest = self.params.value(self.tokens.rgb_rest).clone();
        self.params.get_mut(self.tokens.thermal_first).value = first;
        self.params.get_mut(self.tokens.thermal_rest).value = rest;
        if let Some(p) = self.thermal_projector {
            self.params.get_mut(p).value = Array2::eye(self.config.embed_dim);
        }
        if let Some(e) = self.thermal_embedding {
            self.params.get_mut(e).value.fill(0.0);
        }
    }

    pub fn camera_head_linears(&self) -> [&Linear; 2] {
        [&self.camera_fc1, &self.camera_fc2]
    }

    /// Patch embedding of one image: `P × D` tokens including positional encoding.
    pub fn patch_tokenize(&self, g: &mut Graph, b: &mut Bindings, image: &Image) -> Result<Var> {
        let p = self.config.patch_size;
        if image.width % p != 0 || image.height % p != 0 {
            return Err(Error::InvalidInput(format!(
                "image {}x{} not divisible by patch size {p}",
                image.width, image.height
            )));
        }
        if image.channels != 1 && image.channels != 3 {
            return Err(Error::InvalidInput(format!("unsupported channel count {}", image.channels)));
        }
        let rgb = image.to_rgb();
        let patches = patchify(&rgb, p);
        let (gh, gw) = (image.height / p, image.width / p);
        let x = g.constant(patches);
        let w = b.bind(g, &self.params, self.patch_weight);
        let bias = b.bind(g, &self.params, self.patch_bias);
        let t = g.matmul_nt(x, w);
        let t = g.add_row(t, bias);
        let pos = g.constant(sinusoidal_positions(gh, gw, self.config.embed_dim));
        Ok(g.add(t, pos))
    }

    /// Applies thermal patch-token transforms and prepends the selected camera token.
    pub fn attach_camera_token(
        &self,
        g: &mut Graph,
        b: &mut Bindings,
        patches: Var,
        modality: Modality,
        first_in_sequence: bool,
    ) -> Var {
        let mode = self.config.token_mode;
        let mut patches = patches;
        if modality == Modality::Thermal {
            match mode {
                TokenMode::ThermalProjector => {
                    let proj = self.thermal_projector.expect("projector created with mode");
                    let w = b.bind(g, &self.params, proj);
                    patches = g.matmul_nt(patches, w);
                }
                TokenMode::ThermalEmbedding => {
                    let emb = self.thermal_embedding.expect("embedding created with mode");
                    let e = b.bind(g, &self.params, emb);
                    patches = g.add_row(patches, e);
                }
                _ => {}
            }
        }
        let token = self.tokens.select(modality, first_in_sequence, mode);
        let token = b.bind(g, &self.params, token);
        g.concat_rows(&[token, patches])
    }

    /// Tokenizes frames into one batch. `sequence_lengths` partitions the frames
    /// into contiguous sequences; the first frame of each gets the "first" token.
    pub fn build_batch(
        &self,
        g: &mut Graph,
        b: &mut Bindings,
        frames: &[FrameInput<'_>],
        sequence_lengths: &[usize],
    ) -> Result<TokenBatch> {
        if frames.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if sequence_lengths.iter().sum::<usize>() != frames.len() || sequence_lengths.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "sequence lengths {sequence_lengths:?} do not partition {} frames",
                frames.len()
            )));
        }
        let (w, h) = (frames[0].image.width, frames[0].image.height);
        if frames.iter().any(|f| f.image.width != w || f.image.height != h) {
            return Err(Error::InvalidInput("all frames in a batch must share one size".into()));
        }
        let mut metas = Vec::with_capacity(frames.len());
        for (seq, &len) in sequence_lengths.iter().enumerate() {
            for position in 0..len {
                metas.push((seq, position));
            }
        }
        let mut parts = Vec::with_capacity(frames.len());
        let mut frame_meta = Vec::with_capacity(frames.len());
        for (frame, &(sequence, position)) in frames.iter().zip(&metas) {
            let patches = self.patch_tokenize(g, b, frame.image)?;
            parts.push(self.attach_camera_token(g, b, patches, frame.modality, position == 0));
            frame_meta.push(FrameMeta { modality: frame.modality, sequence, position });
        }
        let tokens = g.concat_rows(&parts);
        let p = self.config.patch_size;
        let grid = (h / p, w / p);
        Ok(TokenBatch {
            tokens,
            layout: BatchLayout {
                frames: frame_meta,
                sequence_lengths: sequence_lengths.to_vec(),
                patches_per_frame: grid.0 * grid.1,
                grid,
            },
        })
    }

    /// Runs the alternating-attention stack, returning every block's output.
    pub fn aa_forward(&self, g: &mut Graph, b: &mut Bindings, batch: &TokenBatch) -> Vec<Var> {
        let heads = self.config.num_heads;
        let mut x = batch.tokens;
        let mut outputs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let segments = match block.kind {
                AttentionKind::Frame => batch.layout.frame_segments(),
                AttentionKind::Global => batch.layout.sequence_segments(),
            };
            x = block.forward(g, b, &self.params, x, heads, segments);
            outputs.push(x);
        }
        outputs
    }

    /// Camera head on the final camera tokens: `F × 9` activated encodings.
    pub fn camera_head(&self, g: &mut Graph, b: &mut Bindings, final_tokens: Var, layout: &BatchLayout) -> Var {
        let cams = g.gather_rows(final_tokens, layout.camera_rows());
        self.camera_head_on_tokens(g, b, cams)
    }

    pub fn camera_head_on_tokens(&self, g: &mut Graph, b: &mut Bindings, cams: Var) -> Var {
        let h = self.camera_norm.apply(g, b, &self.params, cams);
        let h = self.camera_fc1.apply(g, b, &self.params, h);
        let h = g.gelu(h);
        let raw = self.camera_fc2.apply(g, b, &self.params, h);
        g.pose_activation(raw)
    }

    /// Depth head on tapped patch tokens: `(depth, log_sigma)`, each `F·P × p²`.
    pub fn depth_head(&self, g: &mut Graph, b: &mut Bindings, taps: &[Var], layout: &BatchLayout) -> (Var, Var) {
        let rows = layout.patch_rows();
        let gathered: Vec<Var> = taps.iter().map(|&t| g.gather_rows(t, rows.clone())).collect();
        let x = g.concat_cols(&gathered);
        self.depth_head_on_features(g, b, x)
    }

    pub fn depth_head_on_features(&self, g: &mut Graph, b: &mut Bindings, features: Var) -> (Var, Var) {
        let pp = self.config.patch_size * self.config.patch_size;
        let h = self.depth_fc1.apply(g, b, &self.params, features);
        let h = g.gelu(h);
        let raw = self.depth_fc2.apply(g, b, &self.params, h);
        let depth_raw = g.slice_cols(raw, 0, pp);
        let depth = g.exp(depth_raw);
        let log_sigma = g.slice_cols(raw, pp, pp);
        (depth, log_sigma)
    }

    /// Full forward pass. `all_grads` makes every parameter differentiable.
    pub fn forward(
        &self,
        frames: &[FrameInput<'_>],
        sequence_lengths: &[usize],
        train: bool,
        all_grads: bool,
    ) -> Result<ForwardPass> {
        let mut graph = if train { Graph::new() } else { Graph::inference() };
        let mut bindings = if all_grads { Bindings::with_all_grads(&self.params) } else { Bindings::new(&self.params) };
        let batch = self.build_batch(&mut graph, &mut bindings, frames, sequence_lengths)?;
        let layers = self.aa_forward(&mut graph, &mut bindings, &batch);
        let last = *layers.last().expect("at least one block");
        let poses = self.camera_head(&mut graph, &mut bindings, last, &batch.layout);
        let taps: Vec<Var> = self.config.tap_indices().into_iter().map(|i| layers[i]).collect();
        let (depth, log_sigma) = self.depth_head(&mut graph, &mut bindings, &taps, &batch.layout);
        Ok(ForwardPass { graph, bindings, layout: batch.layout, layers, poses, depth, log_sigma })
    }

    /// Inference returning detached poses, full-resolution depth and block outputs.
    pub fn predict(&self, frames: &[FrameInput<'_>], sequence_lengths: &[usize]) -> Result<Prediction> {
        let pass = self.forward(frames, sequence_lengths, false, false)?;
        Ok(pass.detach(self.config.patch_size))
    }

    pub fn trainable_fraction(&self) -> f64 {
        let total = self.params.scalar_count();
        if total == 0 {
            return 0.0;
        }
        self.params.trainable_scalar_count() as f64 / total as f64
    }
}

impl ForwardPass {
    pub fn detach(&self, patch_size: usize) -> Prediction {
        let poses = self
            .graph
            .value(self.poses)
            .rows()
            .into_iter()
            .map(|r| {
                let mut v = [0.0; 9];
                v.iter_mut().zip(r.iter()).for_each(|(a, b)| *a = *b);
                PoseEncoding(v)
            })
            .collect();
        let depth = unpatchify_all(self.graph.value(self.depth), &self.layout, patch_size);
        let log_sigma = unpatchify_all(self.graph.value(self.log_sigma), &self.layout, patch_size);
        let depths = depth
            .into_iter()
            .zip(log_sigma)
            .map(|(depth, log_sigma)| DepthPrediction { depth, log_sigma })
            .collect();
        Prediction {
            poses,
            depths,
            layers: self.layers.iter().map(|&v| self.graph.value(v).clone()).collect(),
            layout: self.layout.clone(),
        }
    }
}

/// `P × 3p²` patch matrix, patches row-major, each patch flattened as (dy, dx, c).
pub fn patchify(image: &Image, p: usize) -> Array2<f64> {
    let (gh, gw) = (image.height / p, image.width / p);
    let c = image.channels;
    let mut out = Array2::zeros((gh * gw, p * p * c));
    for py in 0..gh {
        for px in 0..gw {
            let mut row = out.row_mut(py * gw + px);
            let mut k = 0;
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        row[k] = image.at(px * p + dx, py * p + dy, ch);
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

/// Index of pixel `(x, y)` in the `F·P × p²` per-patch layout: `(row, col)`.
pub fn patch_pixel_index(x: usize, y: usize, grid_w: usize, p: usize) -> (usize, usize) {
    ((y / p) * grid_w + x / p, (y % p) * p + x % p)
}

fn unpatchify_all(values: &Array2<f64>, layout: &BatchLayout, p: usize) -> Vec<DepthMap> {
    let (gh, gw) = layout.grid;
    let (h, w) = (gh * p, gw * p);
    let ppf = layout.patches_per_frame;
    (0..layout.frames.len())
        .map(|f| {
            let block = values.slice(s![f * ppf..(f + 1) * ppf, ..]);
            let mut data = vec![0.0; w * h];
            for y in 0..h {
                for x in 0..w {
                    let (r, c) = patch_pixel_index(x, y, gw, p);
                    data[y * w + x] = block[[r, c]];
                }
            }
            DepthMap { width: w, height: h, data }
        })
        .collect()
}

/// Fixed 2-D sinusoidal encoding: first half of the channels encodes the row,
/// second half the column.
pub fn sinusoidal_positions(gh: usize, gw: usize, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let quarter = half / 2;
    let mut out = Array2::zeros((gh * gw, dim));
    for y in 0..gh {
        for x in 0..gw {
            let mut row = out.row_mut(y * gw + x);
            for i in 0..quarter {
                let freq = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                row[2 * i] = (y as f64 * freq * PI / 2.0).sin();
                row[2 * i + 1] = (y as f64 * freq * PI / 2.0).cos();
                row[half + 2 * i] = (x as f64 * freq * PI / 2.0).sin();
                row[half + 2 * i + 1] = (x as f64 * freq * PI / 2.0).cos();
            }
        }
    }
    out
}
