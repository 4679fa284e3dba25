//! The full encoder/decoder segmentation network.
//!
//! Encoder (default sizes for a 256x256 input):
//!
//! | stage | blocks                                   | output          |
//! |-------|------------------------------------------|-----------------|
//! | 1     | residual, conv-relu, LoG, avg-pool       | 128 x 128 x 64  |
//! | 2     | residual, conv-relu, LoG, max-pool       | 64 x 64 x 128   |
//! | 3     | 1x1 proj, 2 Swin blocks, LoG, avg-pool   | 32 x 32 x 256   |
//! | 4     | 1x1 proj, 2 Swin blocks, LoG, max-pool   | 16 x 16 x 512   |
//!
//! The decoder upsamples three times; at each level the matching encoder
//! output goes through MSCAS, is concatenated with the upsampled features and
//! fused by a residual block down to the skip width. The head is a 40-filter
//! conv-relu, a final upsample, pixel attention, a 1x1 conv and a sigmoid.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, PoolMode, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvRelu, ResidualBlock, LN_EPS};
use crate::param::{fnv1a64, Ctx, ParamStore};
use crate::refine::{log_enhance, Mscas, PixelAttention};
use crate::swin::{SwinBlock, WindowGrid};
use crate::tensor::{Element, Shape, Tensor};

pub const BASE_INPUT: usize = 256;
pub const BASE_CHANNELS: [usize; 4] = [64, 128, 256, 512];
pub const BASE_HEAD_FILTERS: usize = 40;

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Positive rational scale factor applied to input size and channel widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scale {
    num: u32,
    den: u32,
}

impl Scale {
    pub const ONE: Scale = Scale { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Validation(format!("scale {num}/{den} must be positive")));
        }
        let g = gcd(num, den);
        Ok(Scale { num: num / g, den: den / g })
    }

    pub fn num(&self) -> u32 {
        self.num
    }
    pub fn den(&self) -> u32 {
        self.den
    }

    /// `v * scale` when exact.
    pub fn apply(&self, v: usize) -> Option<usize> {
        let p = v * self.num as usize;
        p.is_multiple_of(self.den as usize).then(|| p / self.den as usize)
    }

    pub fn apply_ceil(&self, v: usize) -> usize {
        (v * self.num as usize).div_ceil(self.den as usize)
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Scale {
    type Err = Error;

    /// Accepts `"1"`, `"1/4"` or a decimal such as `"0.25"`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Validation(format!("cannot parse scale {s:?}"));
        if let Some((a, b)) = s.split_once('/') {
            let a = a.trim().parse().map_err(|_| bad())?;
            let b = b.trim().parse().map_err(|_| bad())?;
            return Scale::new(a, b);
        }
        match s.split_once('.') {
            None => Scale::new(s.parse().map_err(|_| bad())?, 1),
            Some((int, frac)) => {
                if frac.len() > 6 || !frac.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(bad());
                }
                let den = 10u32.pow(frac.len() as u32);
                let int: u32 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
                let frac: u32 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
                Scale::new(int * den + frac, den)
            }
        }
    }
}

/// Every architectural hyperparameter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub stage_channels: [usize; 4],
    pub stage_pool: [PoolMode; 4],
    pub window: usize,
    pub heads: usize,
    pub swin_blocks_per_stage: usize,
    pub decoder_final_filters: usize,
    pub scale: Scale,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: BASE_INPUT,
            in_channels: 3,
            stage_channels: BASE_CHANNELS,
            stage_pool: [PoolMode::Avg, PoolMode::Max, PoolMode::Avg, PoolMode::Max],
            window: 4,
            heads: 8,
            swin_blocks_per_stage: 2,
            decoder_final_filters: BASE_HEAD_FILTERS,
            scale: Scale::ONE,
        }
    }
}

impl ModelConfig {
    /// Default architecture with input size and every width multiplied by `scale`.
    pub fn scaled(scale: Scale) -> Result<Self> {
        let exact = |v: usize| {
            scale
                .apply(v)
                .filter(|&r| r > 0)
                .ok_or_else(|| Error::Validation(format!("scale {scale} does not divide {v}")))
        };
        let cfg = ModelConfig {
            input_size: exact(BASE_INPUT)?,
            stage_channels: [
                exact(BASE_CHANNELS[0])?,
                exact(BASE_CHANNELS[1])?,
                exact(BASE_CHANNELS[2])?,
                exact(BASE_CHANNELS[3])?,
            ],
            decoder_final_filters: scale.apply_ceil(BASE_HEAD_FILTERS).max(1),
            scale,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Spatial side of the map entering each encoder stage.
    pub fn stage_input_sizes(&self) -> [usize; 4] {
        let s = self.input_size;
        [s, s / 2, s / 4, s / 8]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            return fail(format!("input size {} must be a positive multiple of 16", self.input_size));
        }
        if self.in_channels == 0 {
            return fail("in_channels must be >= 1".into());
        }
        let c = self.stage_channels;
        if c[0] == 0 || (1..4).any(|i| c[i] != 2 * c[i - 1]) {
            return fail(format!("stage channels {c:?} must double each stage"));
        }
        if self.heads == 0 || !c[2].is_multiple_of(self.heads) || !c[3].is_multiple_of(self.heads) {
            return fail(format!("{} heads must divide Swin widths {} and {}", self.heads, c[2], c[3]));
        }
        if self.swin_blocks_per_stage == 0 {
            return fail("swin_blocks_per_stage must be >= 1".into());
        }
        if self.decoder_final_filters == 0 {
            return fail("decoder_final_filters must be >= 1".into());
        }
        if self.window == 0 {
            return fail("window must be >= 1".into());
        }
        for side in &self.stage_input_sizes()[2..] {
            if WindowGrid::for_block(*side, *side, self.window, 1).is_err() {
                return fail(format!("window {} does not tile a {side}x{side} Swin stage", self.window));
            }
        }
        Ok(())
    }

    /// 32-bit fingerprint of the architecture, stored in checkpoints.
    pub fn config_hash(&self) -> u32 {
        let canon = format!(
            "in={};cin={};ch={:?};pool={:?};win={};heads={};blocks={};head={};scale={}",
            self.input_size,
            self.in_channels,
            self.stage_channels,
            self.stage_pool,
            self.window,
            self.heads,
            self.swin_blocks_per_stage,
            self.decoder_final_filters,
            self.scale
        );
        let h = fnv1a64(canon.as_bytes());
        (h ^ (h >> 32)) as u32
    }
}

#[derive(Clone, Debug)]
struct ConvStage {
    res: ResidualBlock,
    conv: ConvRelu,
}

#[derive(Clone, Debug)]
struct SwinStage {
    proj: Conv2d,
    blocks: Vec<SwinBlock>,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    mscas: Mscas,
    fuse: ResidualBlock,
}

#[derive(Clone, Debug)]
struct Architecture {
    stage1: ConvStage,
    stage2: ConvStage,
    stage3: SwinStage,
    stage4: SwinStage,
    /// Deepest first: fuses with encoder outputs 3, 2, 1.
    decoder: [DecoderStage; 3],
    head: ConvRelu,
    pixel_attention: PixelAttention,
    out: Conv2d,
}

pub struct ForwardOutput {
    /// `(N, 1, H, W)` lesion probabilities.
    pub probs: Var,
    pub logits: Var,
    /// Pooled output of each encoder stage.
    pub encoder: [Var; 4],
    /// Decoder outputs, deepest first.
    pub decoder: [Var; 3],
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub store: ParamStore,
    arch: Architecture,
}

/// Per-image, per-channel standardization with no learned parameters.
fn standardize_input<T: Element>(cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
    let s = cx.graph.shape(x);
    let plane = s.h() * s.w();
    let rows = cx.graph.reshape(x, Shape::new(s.n(), s.c(), 1, plane))?;
    let gamma = cx.graph.input(Tensor::full(Shape::new(1, 1, 1, plane), T::one()));
    let beta = cx.graph.input(Tensor::zeros(Shape::new(1, 1, 1, plane)));
    let y = cx.graph.layer_norm(rows, gamma, beta, LN_EPS)?;
    cx.graph.reshape(y, s)
}

impl Model {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::assemble(config, ParamStore::new(seed))
    }

    fn assemble(config: &ModelConfig, mut store: ParamStore) -> Result<Self> {
        config.validate()?;
        let s = &mut store;
        let c = config.stage_channels;
        let conv_stage = |s: &mut ParamStore, name: &str, cin: usize, cout: usize| -> Result<ConvStage> {
            Ok(ConvStage {
                res: ResidualBlock::new(s, &format!("{name}.res"), cin, cout)?,
                conv: ConvRelu::new(s, &format!("{name}.conv"), cout, cout)?,
            })
        };
        let swin_stage = |s: &mut ParamStore, name: &str, cin: usize, cout: usize| -> Result<SwinStage> {
            let proj = Conv2d::new(s, &format!("{name}.proj"), cin, cout, 1)?;
            let blocks = (0..config.swin_blocks_per_stage)
                .map(|i| SwinBlock::new(s, &format!("{name}.swin{i}"), cout, config.heads, config.window, i))
                .collect::<Result<_>>()?;
            Ok(SwinStage { proj, blocks })
        };
        let dec = |s: &mut ParamStore, name: &str, skip: usize, below: usize| -> Result<DecoderStage> {
            Ok(DecoderStage {
                mscas: Mscas::new(s, &format!("{name}.mscas"), skip)?,
                fuse: ResidualBlock::new(s, &format!("{name}.fuse"), skip + below, skip)?,
            })
        };
        let arch = Architecture {
            stage1: conv_stage(s, "enc1", config.in_channels, c[0])?,
            stage2: conv_stage(s, "enc2", c[0], c[1])?,
            stage3: swin_stage(s, "enc3", c[1], c[2])?,
            stage4: swin_stage(s, "enc4", c[2], c[3])?,
            decoder: [dec(s, "dec3", c[2], c[3])?, dec(s, "dec2", c[1], c[2])?, dec(s, "dec1", c[0], c[1])?],
            head: ConvRelu::new(s, "head.conv", c[0], config.decoder_final_filters)?,
            pixel_attention: PixelAttention::new(s, "head.pa", config.decoder_final_filters)?,
            out: Conv2d::new(s, "head.out", config.decoder_final_filters, 1, 1)?,
        };
        Ok(Model { config: config.clone(), store, arch })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_shape(&self, n: usize) -> Shape {
        let s = self.config.input_size;
        Shape::new(n, self.config.in_channels, s, s)
    }

    /// Run the network on `(N, 3, S, S)` images in `[0, 1]`. Each image
    /// channel is standardized to zero mean and unit variance first.
    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<ForwardOutput> {
        let xs = cx.graph.shape(x);
        let want = self.input_shape(xs.n());
        if xs != want {
            return Err(Error::dim("forward", format!("input {xs:?}, model expects {want:?}")));
        }
        let x = standardize_input(cx, x)?;
        let pool = self.config.stage_pool;
        let a = &self.arch;

        let conv_stage = |cx: &mut Ctx<'_, T>, st: &ConvStage, x: Var, mode: PoolMode| -> Result<Var> {
            let h = st.res.forward(cx, x)?;
            let h = st.conv.forward(cx, h)?;
            let h = log_enhance(cx, h)?;
            cx.graph.pool2d(h, mode, 2)
        };
        let swin_stage = |cx: &mut Ctx<'_, T>, st: &SwinStage, x: Var, mode: PoolMode| -> Result<Var> {
            let mut h = st.proj.forward(cx, x)?;
            for b in &st.blocks {
                h = b.forward(cx, h)?;
            }
            let h = log_enhance(cx, h)?;
            cx.graph.pool2d(h, mode, 2)
        };

        let e1 = conv_stage(cx, &a.stage1, x, pool[0])?;
        let e2 = conv_stage(cx, &a.stage2, e1, pool[1])?;
        let e3 = swin_stage(cx, &a.stage3, e2, pool[2])?;
        let e4 = swin_stage(cx, &a.stage4, e3, pool[3])?;

        let mut d = e4;
        let mut decoder = [d; 3];
        for (i, (stage, skip)) in a.decoder.iter().zip([e3, e2, e1]).enumerate() {
            let up = cx.graph.upsample2x(d)?;
            let refined = stage.mscas.refine_skip(cx, skip)?;
            let fused = cx.graph.concat_channels(refined, up)?;
            d = stage.fuse.forward(cx, fused)?;
            decoder[i] = d;
        }

        let h = a.head.forward(cx, d)?;
        let s_mn = cx.graph.upsample2x(h)?;
        let z_enh = log_enhance(cx, s_mn)?;
        let attended = a.pixel_attention.forward(cx, z_enh, s_mn)?;
        let logits = a.out.forward(cx, attended)?;
        let probs = cx.graph.sigmoid(logits);
        Ok(ForwardOutput { probs, logits, encoder: [e1, e2, e3, e4], decoder })
    }

    /// Eval-mode probabilities for a batch.
    pub fn predict(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &self.store, false);
        let x = cx.graph.input(batch.clone());
        let out = self.forward(&mut cx, x)?;
        Ok(g.value(out.probs).clone())
    }

    /// Encoder, decoder and output shapes for a batch of `n`, traced through
    /// the real forward on a shape-only graph (no arithmetic).
    pub fn trace_shapes(config: &ModelConfig, n: usize) -> Result<ShapeSchedule> {
        let model = Model::assemble(config, ParamStore::placeholder())?;
        let mut g = Graph::<f32>::shape_only();
        let mut cx = Ctx::new(&mut g, &model.store, false);
        let x = cx.graph.input(Tensor::zeros(model.input_shape(n)));
        let out = model.forward(&mut cx, x)?;
        Ok(ShapeSchedule {
            encoder: out.encoder.map(|v| g.shape(v)),
            decoder: out.decoder.map(|v| g.shape(v)),
            output: g.shape(out.probs),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShapeSchedule {
    pub encoder: [Shape; 4],
    pub decoder: [Shape; 3],
    pub output: Shape,
}
