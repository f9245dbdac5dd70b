//! The segmentation network: convolutional stem, three-level attention encoder
//! with semantic maps, semantic-map fusion, attention decoder and a
//! convolutional decoder back to full resolution.
//!
//! Parameter names are dot separated paths, for example
//! `enc1.block0.attn.x_qk.dw.weight`; checkpoints store them sorted.

mod checkpoint;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttnConfig, BmhaAttention, BmhaBlock, LowRankBlock};
use crate::config::{join, KvReader};
use crate::error::{Error, Result};
use crate::fusion::{fuse_semantic_maps, SemanticFusion};
use crate::layers::{Conv2d, GroupNorm, ParamBuilder, ParamStore};
use crate::semantic_map::{init_semantic_map_traced, SemanticMapInit};
use crate::tensor::{Float, PadMode, Tensor};

pub const LEVELS: usize = 3;
/// Stem residual blocks per resolution, mirrored by the convolutional decoder.
pub const STEM_BLOCKS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Bidirectional attention with semantic maps and fusion.
    Bidirectional,
    /// Linear low-rank attention with bilinear key/value reduction; no semantic maps.
    LowRank,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Bidirectional => "bmha",
            AttentionKind::LowRank => "lowrank",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bmha" => Ok(AttentionKind::Bidirectional),
            "lowrank" => Ok(AttentionKind::LowRank),
            _ => Err("expected bmha or lowrank".into()),
        }
    }
}

fn pad_mode_name(p: PadMode) -> &'static str {
    match p {
        PadMode::Zero => "zero",
        PadMode::Circular => "circular",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Stem and convolutional decoder width.
    pub base_width: usize,
    pub widths: [usize; LEVELS],
    pub blocks: [usize; LEVELS],
    pub heads: [usize; LEVELS],
    pub semantic_hw: (usize, usize),
    pub aux_loss_weight: f64,
    pub spatial_rank: usize,
    pub kernel: usize,
    pub fusion_width: usize,
    pub fusion_blocks: usize,
    pub fusion_heads: usize,
    pub share_qk: bool,
    pub attention: AttentionKind,
    pub pad_mode: PadMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            num_classes: 2,
            base_width: 16,
            widths: [32, 64, 128],
            blocks: [2, 2, 2],
            heads: [2, 4, 8],
            semantic_hw: (4, 4),
            aux_loss_weight: 0.5,
            spatial_rank: 2,
            kernel: 3,
            fusion_width: 32,
            fusion_blocks: 2,
            fusion_heads: 4,
            share_qk: true,
            attention: AttentionKind::Bidirectional,
            pad_mode: PadMode::Zero,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for smoke training.
    pub fn tiny() -> Self {
        ModelConfig {
            blocks: [1, 1, 1],
            ..Default::default()
        }
    }

    /// Very small configuration for gradient checks on 16×16 inputs.
    pub fn micro() -> Self {
        ModelConfig {
            base_width: 4,
            widths: [4, 8, 8],
            blocks: [1, 1, 1],
            heads: [2, 2, 2],
            semantic_hw: (2, 2),
            fusion_width: 4,
            fusion_blocks: 1,
            fusion_heads: 2,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |f: &str, r: String| Err(Error::config(f, r));
        if self.spatial_rank != 2 {
            return fail("spatial_rank", format!("{} not supported, only 2", self.spatial_rank));
        }
        if self.in_channels == 0 {
            return fail("in_channels", "must be positive".into());
        }
        if self.num_classes < 2 {
            return fail("num_classes", "need at least 2 classes".into());
        }
        if self.base_width == 0 {
            return fail("base_width", "must be positive".into());
        }
        for i in 0..LEVELS {
            if self.widths[i] == 0 {
                return fail("widths", format!("level {} width is zero", i + 1));
            }
            if self.heads[i] == 0 || !self.widths[i].is_multiple_of(self.heads[i]) {
                return fail(
                    "heads",
                    format!("level {} width {} not divisible by {} heads", i + 1, self.widths[i], self.heads[i]),
                );
            }
            if self.blocks[i] == 0 {
                return fail("blocks", format!("level {} needs at least one block", i + 1));
            }
        }
        if self.semantic_hw.0 == 0 || self.semantic_hw.1 == 0 {
            return fail("semantic_hw", "must contain at least one token".into());
        }
        if !(self.aux_loss_weight >= 0.0 && self.aux_loss_weight.is_finite()) {
            return fail("aux_loss_weight", format!("{} must be finite and ≥ 0", self.aux_loss_weight));
        }
        if self.kernel.is_multiple_of(2) {
            return fail("kernel", "must be odd".into());
        }
        if self.attention == AttentionKind::Bidirectional {
            if self.fusion_heads == 0 || self.fusion_width == 0 || !self.fusion_width.is_multiple_of(self.fusion_heads) {
                return fail(
                    "fusion_heads",
                    format!("fusion width {} not divisible by {} heads", self.fusion_width, self.fusion_heads),
                );
            }
            if self.fusion_blocks == 0 {
                return fail("fusion_blocks", "must be positive".into());
            }
        }
        Ok(())
    }

    fn attn(&self, level: usize) -> AttnConfig {
        AttnConfig {
            d: self.widths[level],
            n_heads: self.heads[level],
            k: self.kernel,
            semantic_hw: self.semantic_hw,
            share_qk: self.share_qk,
            pad_mode: self.pad_mode,
        }
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("in_channels", self.in_channels.to_string());
        put("num_classes", self.num_classes.to_string());
        put("base_width", self.base_width.to_string());
        put("widths", join(&self.widths));
        put("blocks", join(&self.blocks));
        put("heads", join(&self.heads));
        put("semantic_hw", join(&[self.semantic_hw.0, self.semantic_hw.1]));
        put("aux_loss_weight", self.aux_loss_weight.to_string());
        put("spatial_rank", self.spatial_rank.to_string());
        put("kernel", self.kernel.to_string());
        put("fusion_width", self.fusion_width.to_string());
        put("fusion_blocks", self.fusion_blocks.to_string());
        put("fusion_heads", self.fusion_heads.to_string());
        put("share_qk", self.share_qk.to_string());
        put("attention", self.attention.to_string());
        put("pad_mode", pad_mode_name(self.pad_mode).to_string());
        m
    }

    /// Reads the model keys from `r`, leaving other keys in place.
    pub fn from_reader(r: &mut KvReader) -> Result<Self> {
        let d = ModelConfig::default();
        let triple = |r: &mut KvReader, key: &str, dflt: [usize; 3]| -> Result<[usize; 3]> {
            let v = r.get_list(key, dflt.to_vec())?;
            v.try_into().map_err(|_| Error::config(key, "expected three values"))
        };
        let hw = r.get_list("semantic_hw", vec![d.semantic_hw.0, d.semantic_hw.1])?;
        let semantic_hw = match hw[..] {
            [a] => (a, a),
            [a, b] => (a, b),
            _ => return Err(Error::config("semantic_hw", "expected h,w")),
        };
        let pad_mode = match r.take_raw("pad_mode").as_deref() {
            None | Some("zero") => PadMode::Zero,
            Some("circular") => PadMode::Circular,
            Some(o) => return Err(Error::config("pad_mode", format!("`{o}`: expected zero or circular"))),
        };
        let cfg = ModelConfig {
            in_channels: r.get("in_channels", d.in_channels)?,
            num_classes: r.get("num_classes", d.num_classes)?,
            base_width: r.get("base_width", d.base_width)?,
            widths: triple(r, "widths", d.widths)?,
            blocks: triple(r, "blocks", d.blocks)?,
            heads: triple(r, "heads", d.heads)?,
            semantic_hw,
            aux_loss_weight: r.get("aux_loss_weight", d.aux_loss_weight)?,
            spatial_rank: r.get("spatial_rank", d.spatial_rank)?,
            kernel: r.get("kernel", d.kernel)?,
            fusion_width: r.get("fusion_width", d.fusion_width)?,
            fusion_blocks: r.get("fusion_blocks", d.fusion_blocks)?,
            fusion_heads: r.get("fusion_heads", d.fusion_heads)?,
            share_qk: r.get("share_qk", d.share_qk)?,
            attention: r.get("attention", d.attention)?,
            pad_mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Pre-activation residual block: `x + conv(gelu(gn(conv(gelu(gn(x))))))`.
#[derive(Clone, Debug)]
pub struct ResBlock<T: Float> {
    pub norm1: GroupNorm<T>,
    pub conv1: Conv2d<T>,
    pub norm2: GroupNorm<T>,
    pub conv2: Conv2d<T>,
}

impl<T: Float> ResBlock<T> {
    pub fn new(pb: &mut ParamBuilder<'_, T>, d: usize) -> Self {
        ResBlock {
            norm1: GroupNorm::new(&mut pb.sub("norm1"), d),
            conv1: Conv2d::same(&mut pb.sub("conv1"), d, d, 3),
            norm2: GroupNorm::new(&mut pb.sub("norm2"), d),
            conv2: Conv2d::same(&mut pb.sub("conv2"), d, d, 3),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.gelu())?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.gelu())?;
        x.add(&h)
    }
}

fn res_stack<T: Float>(pb: &mut ParamBuilder<'_, T>, name: &str, d: usize) -> Vec<ResBlock<T>> {
    (0..STEM_BLOCKS).map(|i| ResBlock::new(&mut pb.sub(&format!("{name}{i}")), d)).collect()
}

fn run_res<T: Float>(blocks: &[ResBlock<T>], x: Tensor<T>) -> Result<Tensor<T>> {
    blocks.iter().try_fold(x, |x, b| b.forward(&x))
}

#[derive(Clone, Debug)]
struct Stem<T: Float> {
    conv_in: Conv2d<T>,
    full: Vec<ResBlock<T>>,
    down1: Conv2d<T>,
    half: Vec<ResBlock<T>>,
    down2: Conv2d<T>,
}

/// Upsampling step: nearest 2× then 3×3 conv, concat with a skip, 1×1 reduction.
#[derive(Clone, Debug)]
struct UpMerge<T: Float> {
    up: Conv2d<T>,
    reduce: Conv2d<T>,
}

impl<T: Float> UpMerge<T> {
    fn new(pb: &mut ParamBuilder<'_, T>, din: usize, dout: usize) -> Self {
        UpMerge {
            up: Conv2d::same(&mut pb.sub("up"), din, dout, 3),
            reduce: Conv2d::pointwise(&mut pb.sub("reduce"), 2 * dout, dout),
        }
    }

    fn forward(&self, x: &Tensor<T>, skip: &Tensor<T>) -> Result<Tensor<T>> {
        let up = self.up.forward(&x.upsample2x()?)?;
        self.reduce.forward(&Tensor::concat(&[up, skip.clone()], 0)?)
    }
}

#[derive(Clone, Debug)]
enum Stage<T: Float> {
    Bidirectional(Vec<BmhaBlock<T>>),
    LowRank(Vec<LowRankBlock<T>>),
}

/// Trace of one attention stage.
pub struct StageTrace<T: Float> {
    /// Aggregation weights `[h·w, H·W]` of the semantic map initialisation
    /// (encoder levels only).
    pub init_weights: Option<Tensor<T>>,
    pub blocks: Vec<BmhaAttention<T>>,
}

impl<T: Float> Stage<T> {
    fn new(pb: &mut ParamBuilder<'_, T>, cfg: &ModelConfig, level: usize, n: usize, last_updates_m: bool) -> Self {
        let acfg = cfg.attn(level);
        match cfg.attention {
            AttentionKind::Bidirectional => Stage::Bidirectional(
                (0..n)
                    .map(|j| {
                        let update = last_updates_m || j + 1 < n;
                        BmhaBlock::with_streams(&mut pb.sub(&format!("block{j}")), &acfg, update)
                    })
                    .collect(),
            ),
            AttentionKind::LowRank => {
                Stage::LowRank((0..n).map(|j| LowRankBlock::new(&mut pb.sub(&format!("block{j}")), &acfg)).collect())
            }
        }
    }

    fn forward(
        &self,
        x: Tensor<T>,
        m: Option<Tensor<T>>,
        trace: Option<&mut Vec<BmhaAttention<T>>>,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        match self {
            Stage::Bidirectional(blocks) => {
                let mut m = m.ok_or_else(|| Error::Contract("bidirectional stage needs a semantic map".into()))?;
                let mut x = x;
                let mut trace = trace;
                for b in blocks {
                    let (nx, nm, att) = b.forward_traced(&x, &m)?;
                    if let Some(t) = trace.as_deref_mut() {
                        t.push(att);
                    }
                    x = nx;
                    m = nm;
                }
                Ok((x, Some(m)))
            }
            Stage::LowRank(blocks) => Ok((blocks.iter().try_fold(x, |x, b| b.forward(&x))?, None)),
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel<T: Float> {
    semantic: Option<SemanticMapInit<T>>,
    stage: Stage<T>,
}

#[derive(Clone, Debug)]
struct ConvDecoder<T: Float> {
    up_half: UpMerge<T>,
    half: Vec<ResBlock<T>>,
    up_full: UpMerge<T>,
    full: Vec<ResBlock<T>>,
    norm: GroupNorm<T>,
    head: Conv2d<T>,
}

/// Everything produced by one forward pass.
pub struct ForwardOutput<T: Float> {
    /// `[C, H, W]`, pre-softmax.
    pub logits: Tensor<T>,
    /// `[C, H/4, W/4]` from the last attention block of the decoder.
    pub aux_logits: Tensor<T>,
    /// Encoder token maps after each level's blocks (4×, 8×, 16×).
    pub encoder_maps: Vec<Tensor<T>>,
    /// Encoder semantic maps after each level's blocks, before fusion.
    pub semantic_maps: Vec<Tensor<T>>,
    pub fused_maps: Vec<Tensor<T>>,
    /// Semantic maps refined by the decoder (16×, 8×, 4×).
    pub decoder_semantic_maps: Vec<Tensor<T>>,
    /// Attention records per encoder level, filled by [`Model::forward_traced`].
    pub encoder_trace: Vec<StageTrace<T>>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Float = f32> {
    pub cfg: ModelConfig,
    params: ParamStore<T>,
    stem: Stem<T>,
    encoder: Vec<EncoderLevel<T>>,
    merges: Vec<Conv2d<T>>,
    fusion: Option<SemanticFusion<T>>,
    /// Attention stages at 16×, 8×, 4×; the first has no upsampling step.
    decoder: Vec<Stage<T>>,
    ups: Vec<UpMerge<T>>,
    conv_decoder: ConvDecoder<T>,
    aux_head: Conv2d<T>,
}

impl<T: Float> Model<T> {
    /// Deterministically initialised model.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut root = ParamBuilder::new(&mut params, &mut rng).with_pad_mode(cfg.pad_mode);
        let pb = &mut root;
        let (d0, w) = (cfg.base_width, cfg.widths);
        let bidir = cfg.attention == AttentionKind::Bidirectional;

        let stem = {
            let mut s = pb.sub("stem");
            Stem {
                conv_in: Conv2d::same(&mut s.sub("conv_in"), cfg.in_channels, d0, 3),
                full: res_stack(&mut s, "full", d0),
                down1: Conv2d::new(&mut s.sub("down1"), d0, d0, 2, 2, 0),
                half: res_stack(&mut s, "half", d0),
                down2: Conv2d::new(&mut s.sub("down2"), d0, w[0], 2, 2, 0),
            }
        };
        let encoder = (0..LEVELS)
            .map(|i| {
                let mut e = pb.sub(&format!("enc{i}"));
                EncoderLevel {
                    semantic: bidir.then(|| SemanticMapInit::new(&mut e.sub("semantic"), w[i], cfg.semantic_hw)),
                    stage: Stage::new(&mut e, cfg, i, cfg.blocks[i], true),
                }
            })
            .collect();
        let merges = (0..LEVELS - 1)
            .map(|i| Conv2d::pointwise(&mut pb.sub(&format!("merge{i}")), 4 * w[i], w[i + 1]))
            .collect();
        let fusion = bidir.then(|| {
            SemanticFusion::new(&mut pb.sub("fusion"), &w, cfg.fusion_width, cfg.fusion_blocks, cfg.fusion_heads)
        });
        // one block at 16×, then the encoder block counts at 8× and 4×; a level's
        // refined semantic map is not passed on, so its last block skips that update
        let decoder = [(2, 1), (1, cfg.blocks[1]), (0, cfg.blocks[0])]
            .iter()
            .map(|&(lvl, n)| Stage::new(&mut pb.sub(&format!("dec{lvl}")), cfg, lvl, n, false))
            .collect();
        let ups = (0..LEVELS - 1)
            .rev()
            .map(|i| UpMerge::new(&mut pb.sub(&format!("dec{i}")), w[i + 1], w[i]))
            .collect();
        let conv_decoder = {
            let mut c = pb.sub("convdec");
            ConvDecoder {
                up_half: UpMerge::new(&mut c.sub("half"), w[0], d0),
                half: res_stack(&mut c, "half_res", d0),
                up_full: UpMerge::new(&mut c.sub("full"), d0, d0),
                full: res_stack(&mut c, "full_res", d0),
                norm: GroupNorm::new(&mut c.sub("norm"), d0),
                head: Conv2d::pointwise(&mut c.sub("head"), d0, cfg.num_classes),
            }
        };
        let aux_head = Conv2d::pointwise(&mut pb.sub("aux_head"), w[0], cfg.num_classes);
        Ok(Model {
            cfg: cfg.clone(),
            params,
            stem,
            encoder,
            merges,
            fusion,
            decoder,
            ups,
            conv_decoder,
            aux_head,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn named_parameters(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<ForwardOutput<T>> {
        self.run(image, false)
    }

    /// Like [`Model::forward`] but also records encoder attention weights.
    pub fn forward_traced(&self, image: &Tensor<T>) -> Result<ForwardOutput<T>> {
        self.run(image, true)
    }

    fn run(&self, image: &Tensor<T>, trace: bool) -> Result<ForwardOutput<T>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != self.cfg.in_channels {
            return Err(Error::shape(
                "model forward",
                format!("image {s:?}, expected [{}, H, W]", self.cfg.in_channels),
            ));
        }
        if !s[1].is_multiple_of(16) || !s[2].is_multiple_of(16) || s[1] == 0 || s[2] == 0 {
            return Err(Error::shape("model forward", format!("extent {}×{} not divisible by 16", s[1], s[2])));
        }

        let st = &self.stem;
        let skip_full = run_res(&st.full, st.conv_in.forward(image)?)?;
        let skip_half = run_res(&st.half, st.down1.forward(&skip_full)?)?;
        let mut x = st.down2.forward(&skip_half)?;

        let mut encoder_maps = Vec::with_capacity(LEVELS);
        let mut semantic_maps = Vec::with_capacity(LEVELS);
        let mut encoder_trace = Vec::new();
        for (i, level) in self.encoder.iter().enumerate() {
            if i > 0 {
                x = self.merges[i - 1].forward(&x.space_to_depth2()?)?;
            }
            let (m, init_weights) = match &level.semantic {
                Some(init) => {
                    let t = init_semantic_map_traced(&x, init)?;
                    (Some(t.map), Some(t.weights))
                }
                None => (None, None),
            };
            let mut blocks = Vec::new();
            let (nx, nm) = level.stage.forward(x, m, trace.then_some(&mut blocks))?;
            if trace {
                encoder_trace.push(StageTrace { init_weights, blocks });
            }
            x = nx;
            encoder_maps.push(x.clone());
            semantic_maps.extend(nm);
        }

        let fused_maps = match &self.fusion {
            Some(f) => fuse_semantic_maps(&semantic_maps, f)?,
            None => Vec::new(),
        };
        let mut decoder_semantic_maps = Vec::new();
        let mut y = x;
        for (j, stage) in self.decoder.iter().enumerate() {
            let lvl = LEVELS - 1 - j;
            if j > 0 {
                y = self.ups[j - 1].forward(&y, &encoder_maps[lvl])?;
            }
            let (ny, nm) = stage.forward(y, fused_maps.get(lvl).cloned(), None)?;
            y = ny;
            decoder_semantic_maps.extend(nm);
        }
        let aux_logits = self.aux_head.forward(&y)?;

        let cd = &self.conv_decoder;
        let h = run_res(&cd.half, cd.up_half.forward(&y, &skip_half)?)?;
        let h = run_res(&cd.full, cd.up_full.forward(&h, &skip_full)?)?;
        let logits = cd.head.forward(&cd.norm.forward(&h)?.gelu())?;
        Ok(ForwardOutput {
            logits,
            aux_logits,
            encoder_maps,
            semantic_maps,
            fused_maps,
            decoder_semantic_maps,
            encoder_trace,
        })
    }

    /// Forwards each image independently.
    pub fn forward_batch(&self, images: &[Tensor<T>]) -> Result<Vec<ForwardOutput<T>>> {
        images.iter().map(|im| self.forward(im)).collect()
    }

    /// Overwrites every parameter from a `name -> (shape, values)` map; names
    /// and shapes must match exactly.
    pub fn load_parameters(&self, values: &BTreeMap<String, (Vec<usize>, Vec<T>)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Data(format!(
                "{} stored parameters for a model with {}",
                values.len(),
                self.params.len()
            )));
        }
        for (name, t) in self.params.iter() {
            let (shape, data) = values
                .get(name)
                .ok_or_else(|| Error::Data(format!("missing parameter {name}")))?;
            if shape.as_slice() != t.shape() {
                return Err(Error::Data(format!("parameter {name}: stored {shape:?}, model {:?}", t.shape())));
            }
            t.assign(data)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
