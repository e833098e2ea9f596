//! The Siamese encoder-decoder with latent fusion and mutual attention.
//!
//! Layout for `n` stages with widths `c_0..c_{n-1}`:
//!
//! ```text
//! encoder k:  ResDown(c_{k-1} -> c_k), output at 1/2^(k+1)     (c_{-1} = 3)
//!             attention on the outputs of the 3 deepest stages
//! fusion:     Fl = relu(conv(cat(El, Er))), Fr = relu(conv'(cat(Er, El)))
//! decoder d:  for d = n-1 .. 0, attention on the inputs of the first 3 blocks,
//!             ResUp(x, skip E_{d-1}) -> dec_d channels at 1/2^d
//! head s:     Ω_s = sigmoid(conv(D_s)) for s < m
//! ```
//!
//! Both branches run through the same stored blocks; only the two fusion
//! convolutions are branch specific.

use serde::{Deserialize, Serialize};

use crate::attention::{attention_block_traced, AttentionMode, AttentionParams, BlockTrace};
use crate::error::{Error, Result};
use crate::layers::{join, Conv, Parameters};
use crate::ops::{self, ConvSpec};
use crate::ot::SinkhornConfig;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Number of deepest encoder stages and leading decoder blocks that carry attention.
pub const ATTENTION_SITES: usize = 3;
const ATTENTION_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Encoder channel width per stage; its length is the stage count.
    pub widths: Vec<usize>,
    /// Output scales per branch.
    pub scales: usize,
    pub attention: AttentionMode,
    #[serde(default)]
    pub sinkhorn: SinkhornConfig,
}

impl ModelConfig {
    /// The end-to-end gradient-check configuration.
    pub fn tiny() -> Self {
        Self {
            height: 8,
            width: 16,
            widths: vec![4, 8],
            scales: 2,
            attention: AttentionMode::Off,
            sinkhorn: SinkhornConfig::default(),
        }
    }

    /// The toy training configuration.
    pub fn toy() -> Self {
        Self {
            height: 32,
            width: 64,
            widths: vec![8, 16, 32],
            scales: 3,
            attention: AttentionMode::OtMea,
            sinkhorn: SinkhornConfig::default(),
        }
    }

    /// Builds the attention mode from the ablation switches.
    pub fn with_flags(mut self, attention: bool, epipolar: bool, ot: bool) -> Self {
        self.attention = AttentionMode::from_flags(attention, epipolar, ot);
        self
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stages();
        if n == 0 {
            return Err(Error::InvalidConfig("widths: at least one stage required".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidConfig("widths: every stage width must be positive".into()));
        }
        if self.scales == 0 || self.scales > n {
            return Err(Error::InvalidConfig(format!(
                "scales: need 1 <= m <= n_stage, got m = {} with {n} stages",
                self.scales
            )));
        }
        let f = 1usize << n;
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return Err(Error::InvalidConfig(format!(
                "size: {}x{} is not divisible by 2^{n} = {f}",
                self.height, self.width
            )));
        }
        if self.attention.is_enabled() && n < ATTENTION_SITES {
            return Err(Error::InvalidConfig(format!(
                "attention: needs at least {ATTENTION_SITES} stages, got {n}"
            )));
        }
        self.sinkhorn.validate()
    }

    /// Decoder width for block `d`.
    pub fn decoder_width(&self, d: usize) -> usize {
        (self.widths[d] / 2).max(1)
    }

    fn encoder_in(&self, k: usize) -> usize {
        if k == 0 {
            3
        } else {
            self.widths[k - 1]
        }
    }

    /// Channels entering decoder block `d` (before the skip).
    fn decoder_in(&self, d: usize) -> usize {
        let n = self.stages();
        if d == n - 1 {
            self.widths[n - 1]
        } else {
            self.decoder_width(d + 1)
        }
    }

    fn decoder_skip(&self, d: usize) -> usize {
        if d == 0 {
            0
        } else {
            self.widths[d - 1]
        }
    }

    fn has_attention(&self, site: usize) -> bool {
        self.attention.is_enabled() && site + ATTENTION_SITES >= self.stages()
    }

    /// Channels of the encoder attention at stage `k`, if present.
    pub fn encoder_attention_channels(&self, k: usize) -> Option<usize> {
        self.has_attention(k).then(|| self.widths[k])
    }

    /// Channels of the decoder attention before block `d`, if present.
    pub fn decoder_attention_channels(&self, d: usize) -> Option<usize> {
        self.has_attention(d).then(|| self.decoder_in(d))
    }

    /// Spatial size of the scale-`s` output.
    pub fn output_size(&self, s: usize) -> (usize, usize) {
        (self.height >> s, self.width >> s)
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Blocks

/// Strided residual block with a projection shortcut.
#[derive(Debug, Clone, PartialEq)]
pub struct ResDown {
    pub conv1: Conv,
    pub conv2: Conv,
    pub proj: Conv,
}

#[derive(Debug, Clone)]
struct ResDownTrace {
    x: Tensor,
    a1: Tensor,
    h1: Tensor,
    s: Tensor,
}

impl ResDown {
    fn init(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        Self {
            conv1: Conv::init(cin, cout, ConvSpec::DOWN3, rng),
            conv2: Conv::init(cout, cout, ConvSpec::SAME3, rng),
            proj: Conv::init(cin, cout, ConvSpec::DOWN1, rng),
        }
    }

    fn param_count(cin: usize, cout: usize) -> usize {
        Conv::param_count(cin, cout, 3) + Conv::param_count(cout, cout, 3) + Conv::param_count(cin, cout, 1)
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, ResDownTrace)> {
        let a1 = self.conv1.forward(x)?;
        let h1 = ops::relu(&a1);
        let s = ops::add(&self.conv2.forward(&h1)?, &self.proj.forward(x)?)?;
        let y = ops::relu(&s);
        Ok((y, ResDownTrace { x: x.clone(), a1, h1, s }))
    }

    fn vjp(&self, t: &ResDownTrace, gy: &Tensor, grads: &mut ResDown) -> Result<Tensor> {
        let gs = ops::relu_vjp(&t.s, gy)?;
        let (gh1, gc2) = self.conv2.vjp(&t.h1, &gs)?;
        let ga1 = ops::relu_vjp(&t.a1, &gh1)?;
        let (mut gx, gc1) = self.conv1.vjp(&t.x, &ga1)?;
        let (gxp, gp) = self.proj.vjp(&t.x, &gs)?;
        gx.add_assign(&gxp)?;
        grads.conv1.accumulate(&gc1)?;
        grads.conv2.accumulate(&gc2)?;
        grads.proj.accumulate(&gp)?;
        Ok(gx)
    }

    fn zeros_like(&self) -> Self {
        Self {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            proj: self.proj.zeros_like(),
        }
    }
}

impl Parameters for ResDown {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.conv1.visit(&join(prefix, "conv1"), out);
        self.conv2.visit(&join(prefix, "conv2"), out);
        self.proj.visit(&join(prefix, "proj"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.conv1.visit_mut(&join(prefix, "conv1"), out);
        self.conv2.visit_mut(&join(prefix, "conv2"), out);
        self.proj.visit_mut(&join(prefix, "proj"), out);
    }
}

/// ×2 bilinear upsampling, optional skip concatenation, residual pair of convs.
#[derive(Debug, Clone, PartialEq)]
pub struct ResUp {
    pub conv1: Conv,
    pub conv2: Conv,
    pub proj: Conv,
}

#[derive(Debug, Clone)]
struct ResUpTrace {
    in_shape: Vec<usize>,
    up_channels: usize,
    z: Tensor,
    a1: Tensor,
    h1: Tensor,
    s: Tensor,
    y: Tensor,
}

impl ResUp {
    fn init(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        Self {
            conv1: Conv::init(cin, cout, ConvSpec::SAME3, rng),
            conv2: Conv::init(cout, cout, ConvSpec::SAME3, rng),
            proj: Conv::init(cin, cout, ConvSpec::POINT, rng),
        }
    }

    fn param_count(cin: usize, cout: usize) -> usize {
        Conv::param_count(cin, cout, 3) + Conv::param_count(cout, cout, 3) + Conv::param_count(cin, cout, 1)
    }

    fn forward(&self, x: &Tensor, skip: Option<&Tensor>) -> Result<(Tensor, ResUpTrace)> {
        let u = ops::upsample_bilinear(x, 2)?;
        let up_channels = u.shape()[0];
        let z = match skip {
            Some(s) => ops::concat_channels(&u, s)?,
            None => u,
        };
        let a1 = self.conv1.forward(&z)?;
        let h1 = ops::relu(&a1);
        let s = ops::add(&self.conv2.forward(&h1)?, &self.proj.forward(&z)?)?;
        let y = ops::relu(&s);
        let trace = ResUpTrace {
            in_shape: x.shape().to_vec(),
            up_channels,
            z,
            a1,
            h1,
            s,
            y: y.clone(),
        };
        Ok((y, trace))
    }

    /// Returns the cotangents of the input and of the skip (if any).
    fn vjp(&self, t: &ResUpTrace, gy: &Tensor, grads: &mut ResUp) -> Result<(Tensor, Option<Tensor>)> {
        let gs = ops::relu_vjp(&t.s, gy)?;
        let (gh1, gc2) = self.conv2.vjp(&t.h1, &gs)?;
        let ga1 = ops::relu_vjp(&t.a1, &gh1)?;
        let (mut gz, gc1) = self.conv1.vjp(&t.z, &ga1)?;
        let (gzp, gp) = self.proj.vjp(&t.z, &gs)?;
        gz.add_assign(&gzp)?;
        grads.conv1.accumulate(&gc1)?;
        grads.conv2.accumulate(&gc2)?;
        grads.proj.accumulate(&gp)?;
        let (gu, gskip) = if gz.shape()[0] > t.up_channels {
            let (gu, gs) = ops::split_channels(&gz, t.up_channels)?;
            (gu, Some(gs))
        } else {
            (gz, None)
        };
        Ok((ops::upsample_bilinear_vjp(&t.in_shape, 2, &gu)?, gskip))
    }

    fn zeros_like(&self) -> Self {
        Self {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            proj: self.proj.zeros_like(),
        }
    }
}

impl Parameters for ResUp {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.conv1.visit(&join(prefix, "conv1"), out);
        self.conv2.visit(&join(prefix, "conv2"), out);
        self.proj.visit(&join(prefix, "proj"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.conv1.visit_mut(&join(prefix, "conv1"), out);
        self.conv2.visit_mut(&join(prefix, "conv2"), out);
        self.proj.visit_mut(&join(prefix, "proj"), out);
    }
}

// ---------------------------------------------------------------------------
// Parameters

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: Vec<ResDown>,
    pub encoder_attention: Vec<Option<AttentionParams>>,
    pub fusion_left: Conv,
    pub fusion_right: Conv,
    /// Indexed by block `d`; runs from `n-1` down to 0.
    pub decoder: Vec<ResUp>,
    pub decoder_attention: Vec<Option<AttentionParams>>,
    pub heads: Vec<Conv>,
}

/// Draws all weights. Backbone weights come from `rng`; attention weights
/// from a separate stream of the same seed, so enabling attention leaves the
/// backbone draw unchanged.
pub fn build(config: &ModelConfig, rng: &mut Rng) -> Result<ModelParams> {
    config.validate()?;
    let n = config.stages();
    let encoder = (0..n)
        .map(|k| ResDown::init(config.encoder_in(k), config.widths[k], rng))
        .collect();
    let c = config.widths[n - 1];
    let fusion_left = Conv::init(2 * c, c, ConvSpec::SAME3, rng);
    let fusion_right = Conv::init(2 * c, c, ConvSpec::SAME3, rng);
    let decoder = (0..n)
        .map(|d| {
            ResUp::init(
                config.decoder_in(d) + config.decoder_skip(d),
                config.decoder_width(d),
                rng,
            )
        })
        .collect();
    let heads = (0..config.scales)
        .map(|s| Conv::init(config.decoder_width(s), 1, ConvSpec::SAME3, rng))
        .collect();

    let mut arng = Rng::with_stream(rng.seed(), ATTENTION_STREAM);
    let mut attn = |ch: Option<usize>| -> Result<Option<AttentionParams>> {
        ch.map(|c| AttentionParams::init(c, config.attention, &mut arng)).transpose()
    };
    let encoder_attention = (0..n)
        .map(|k| attn(config.encoder_attention_channels(k)))
        .collect::<Result<_>>()?;
    let decoder_attention = (0..n)
        .map(|d| attn(config.decoder_attention_channels(d)))
        .collect::<Result<_>>()?;

    Ok(ModelParams {
        config: config.clone(),
        encoder,
        encoder_attention,
        fusion_left,
        fusion_right,
        decoder,
        decoder_attention,
        heads,
    })
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        let opt = |a: &Option<AttentionParams>| a.as_ref().map(AttentionParams::zeros_like);
        Self {
            config: self.config.clone(),
            encoder: self.encoder.iter().map(ResDown::zeros_like).collect(),
            encoder_attention: self.encoder_attention.iter().map(opt).collect(),
            fusion_left: self.fusion_left.zeros_like(),
            fusion_right: self.fusion_right.zeros_like(),
            decoder: self.decoder.iter().map(ResUp::zeros_like).collect(),
            decoder_attention: self.decoder_attention.iter().map(opt).collect(),
            heads: self.heads.iter().map(Conv::zeros_like).collect(),
        }
    }

    /// Flattens every parameter in visiting order.
    pub fn to_flat(&self) -> Tensor {
        let data: Vec<f64> = self.named().iter().flat_map(|(_, t)| t.data().iter().copied()).collect();
        let n = data.len();
        Tensor::from_parts(vec![n], data)
    }

    /// Inverse of [`ModelParams::to_flat`].
    pub fn load_flat(&mut self, flat: &Tensor) -> Result<()> {
        if flat.len() != self.count() {
            return Err(Error::shape("load_flat", flat.shape(), &[self.count()]));
        }
        let mut off = 0;
        for (_, t) in self.named_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat.data()[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

impl Parameters for ModelParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (k, b) in self.encoder.iter().enumerate() {
            b.visit(&join(prefix, &format!("encoder.{k}")), out);
        }
        for (k, a) in self.encoder_attention.iter().enumerate() {
            if let Some(a) = a {
                a.visit(&join(prefix, &format!("encoder_attention.{k}")), out);
            }
        }
        self.fusion_left.visit(&join(prefix, "fusion.left"), out);
        self.fusion_right.visit(&join(prefix, "fusion.right"), out);
        for (d, a) in self.decoder_attention.iter().enumerate() {
            if let Some(a) = a {
                a.visit(&join(prefix, &format!("decoder_attention.{d}")), out);
            }
        }
        for (d, b) in self.decoder.iter().enumerate() {
            b.visit(&join(prefix, &format!("decoder.{d}")), out);
        }
        for (s, h) in self.heads.iter().enumerate() {
            h.visit(&join(prefix, &format!("heads.{s}")), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (k, b) in self.encoder.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("encoder.{k}")), out);
        }
        for (k, a) in self.encoder_attention.iter_mut().enumerate() {
            if let Some(a) = a {
                a.visit_mut(&join(prefix, &format!("encoder_attention.{k}")), out);
            }
        }
        self.fusion_left.visit_mut(&join(prefix, "fusion.left"), out);
        self.fusion_right.visit_mut(&join(prefix, "fusion.right"), out);
        for (d, a) in self.decoder_attention.iter_mut().enumerate() {
            if let Some(a) = a {
                a.visit_mut(&join(prefix, &format!("decoder_attention.{d}")), out);
            }
        }
        for (d, b) in self.decoder.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("decoder.{d}")), out);
        }
        for (s, h) in self.heads.iter_mut().enumerate() {
            h.visit_mut(&join(prefix, &format!("heads.{s}")), out);
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter accounting

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamBreakdown {
    pub encoder: usize,
    pub fusion: usize,
    pub decoder: usize,
    pub heads: usize,
    pub attention: usize,
}

impl ParamBreakdown {
    pub fn backbone(&self) -> usize {
        self.encoder + self.fusion + self.decoder + self.heads
    }

    pub fn total(&self) -> usize {
        self.backbone() + self.attention
    }

    /// Attention parameters relative to the backbone.
    pub fn attention_overhead(&self) -> f64 {
        self.attention as f64 / self.backbone() as f64
    }

    /// Counted from formulas, without building anything.
    pub fn analytic(config: &ModelConfig) -> Self {
        let n = config.stages();
        let c = config.widths[n - 1];
        let attn = |ch: Option<usize>| ch.map_or(0, |c| AttentionParams::param_count(c, config.attention));
        Self {
            encoder: (0..n).map(|k| ResDown::param_count(config.encoder_in(k), config.widths[k])).sum(),
            fusion: 2 * Conv::param_count(2 * c, c, 3),
            decoder: (0..n)
                .map(|d| {
                    ResUp::param_count(
                        config.decoder_in(d) + config.decoder_skip(d),
                        config.decoder_width(d),
                    )
                })
                .sum(),
            heads: (0..config.scales)
                .map(|s| Conv::param_count(config.decoder_width(s), 1, 3))
                .sum(),
            attention: (0..n)
                .map(|i| attn(config.encoder_attention_channels(i)) + attn(config.decoder_attention_channels(i)))
                .sum(),
        }
    }
}

/// Counts stored tensors, grouped by component.
pub fn param_count(params: &ModelParams) -> ParamBreakdown {
    let mut b = ParamBreakdown::default();
    for (name, t) in params.named() {
        let slot = match name.split('.').next().unwrap_or("") {
            "encoder" => &mut b.encoder,
            "fusion" => &mut b.fusion,
            "decoder" => &mut b.decoder,
            "heads" => &mut b.heads,
            _ => &mut b.attention,
        };
        *slot += t.len();
    }
    b
}

// ---------------------------------------------------------------------------
// Forward and reverse passes

/// Per-scale sigmoid maps of one branch; scale `s` is `[1, h/2^s, w/2^s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleOutput {
    pub scales: Vec<Tensor>,
}

impl MultiScaleOutput {
    pub fn finest(&self) -> &Tensor {
        &self.scales[0]
    }
}

struct BranchTrace {
    encoder: Vec<ResDownTrace>,
    /// Encoder stage outputs after attention (skip sources).
    features: Vec<Tensor>,
    fusion_in: Tensor,
    fusion_pre: Tensor,
    decoder: Vec<Option<ResUpTrace>>,
    outputs: Vec<Tensor>,
}

/// Everything needed to run the reverse pass of [`forward`].
pub struct ForwardTrace {
    left: BranchTrace,
    right: BranchTrace,
    encoder_attention: Vec<Option<BlockTrace>>,
    decoder_attention: Vec<Option<BlockTrace>>,
}

impl ForwardTrace {
    pub fn outputs(&self) -> (MultiScaleOutput, MultiScaleOutput) {
        (
            MultiScaleOutput {
                scales: self.left.outputs.clone(),
            },
            MultiScaleOutput {
                scales: self.right.outputs.clone(),
            },
        )
    }

    /// Encoder stage outputs of the left and right branch.
    pub fn encoder_features(&self) -> (&[Tensor], &[Tensor]) {
        (&self.left.features, &self.right.features)
    }
}

/// Gradients of a scalar objective with respect to the weights and the two images.
pub struct ModelGrads {
    pub params: ModelParams,
    pub left_image: Tensor,
    pub right_image: Tensor,
}

fn check_image(img: &Tensor, config: &ModelConfig) -> Result<()> {
    let want = [3, config.height, config.width];
    if img.shape() != want {
        return Err(Error::shape("forward", img.shape(), &want));
    }
    Ok(())
}

pub fn forward(il: &Tensor, ir: &Tensor, params: &ModelParams) -> Result<(MultiScaleOutput, MultiScaleOutput)> {
    Ok(forward_traced(il, ir, params)?.outputs())
}

pub fn forward_traced(il: &Tensor, ir: &Tensor, params: &ModelParams) -> Result<ForwardTrace> {
    let cfg = &params.config;
    check_image(il, cfg)?;
    check_image(ir, cfg)?;
    let n = cfg.stages();
    let sk = &cfg.sinkhorn;

    let (mut xl, mut xr) = (il.clone(), ir.clone());
    let mut enc_l = Vec::with_capacity(n);
    let mut enc_r = Vec::with_capacity(n);
    let mut feat_l = Vec::with_capacity(n);
    let mut feat_r = Vec::with_capacity(n);
    let mut enc_attn = Vec::with_capacity(n);
    for k in 0..n {
        let (mut yl, tl) = params.encoder[k].forward(&xl)?;
        let (mut yr, tr) = params.encoder[k].forward(&xr)?;
        enc_l.push(tl);
        enc_r.push(tr);
        let bt = match &params.encoder_attention[k] {
            Some(p) => {
                let (al, ar, bt) = attention_block_traced(&yl, &yr, p, sk)?;
                yl = al;
                yr = ar;
                Some(bt)
            }
            None => None,
        };
        enc_attn.push(bt);
        feat_l.push(yl.clone());
        feat_r.push(yr.clone());
        xl = yl;
        xr = yr;
    }

    let cat_l = ops::concat_channels(&xl, &xr)?;
    let cat_r = ops::concat_channels(&xr, &xl)?;
    let pre_l = params.fusion_left.forward(&cat_l)?;
    let pre_r = params.fusion_right.forward(&cat_r)?;
    let mut xl = ops::relu(&pre_l);
    let mut xr = ops::relu(&pre_r);

    let mut dec_l: Vec<Option<ResUpTrace>> = (0..n).map(|_| None).collect();
    let mut dec_r: Vec<Option<ResUpTrace>> = (0..n).map(|_| None).collect();
    let mut dec_attn: Vec<Option<BlockTrace>> = (0..n).map(|_| None).collect();
    let mut out_l = vec![Tensor::scalar(0.0); cfg.scales];
    let mut out_r = vec![Tensor::scalar(0.0); cfg.scales];
    for d in (0..n).rev() {
        if let Some(p) = &params.decoder_attention[d] {
            let (al, ar, bt) = attention_block_traced(&xl, &xr, p, sk)?;
            xl = al;
            xr = ar;
            dec_attn[d] = Some(bt);
        }
        let (skip_l, skip_r) = if d > 0 {
            (Some(&feat_l[d - 1]), Some(&feat_r[d - 1]))
        } else {
            (None, None)
        };
        let (yl, tl) = params.decoder[d].forward(&xl, skip_l)?;
        let (yr, tr) = params.decoder[d].forward(&xr, skip_r)?;
        dec_l[d] = Some(tl);
        dec_r[d] = Some(tr);
        if d < cfg.scales {
            out_l[d] = ops::sigmoid(&params.heads[d].forward(&yl)?);
            out_r[d] = ops::sigmoid(&params.heads[d].forward(&yr)?);
        }
        xl = yl;
        xr = yr;
    }

    Ok(ForwardTrace {
        left: BranchTrace {
            encoder: enc_l,
            features: feat_l,
            fusion_in: cat_l,
            fusion_pre: pre_l,
            decoder: dec_l,
            outputs: out_l,
        },
        right: BranchTrace {
            encoder: enc_r,
            features: feat_r,
            fusion_in: cat_r,
            fusion_pre: pre_r,
            decoder: dec_r,
            outputs: out_r,
        },
        encoder_attention: enc_attn,
        decoder_attention: dec_attn,
    })
}

fn add_into(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn attention_grads(slot: &mut Option<AttentionParams>, g: &AttentionParams) -> Result<()> {
    match slot {
        Some(acc) => acc.accumulate(g),
        None => Err(Error::InvalidArgument("attention gradient without parameters".into())),
    }
}

impl ForwardTrace {
    /// Reverse pass for cotangents on every output scale of both branches.
    pub fn backward(&self, params: &ModelParams, g_left: &[Tensor], g_right: &[Tensor]) -> Result<ModelGrads> {
        let cfg = &params.config;
        let n = cfg.stages();
        if g_left.len() != cfg.scales || g_right.len() != cfg.scales {
            return Err(Error::InvalidArgument(format!(
                "backward: expected {} output cotangents per branch",
                cfg.scales
            )));
        }
        let mut grads = params.zeros_like();
        let mut gfeat_l: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut gfeat_r: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();

        // decoder, from the finest block upwards
        let mut carry: Option<(Tensor, Tensor)> = None;
        for d in 0..n {
            let tl = self.left.decoder[d].as_ref().expect("decoder trace");
            let tr = self.right.decoder[d].as_ref().expect("decoder trace");
            let (mut gy_l, mut gy_r) = match carry.take() {
                Some((a, b)) => (Some(a), Some(b)),
                None => (None, None),
            };
            if d < cfg.scales {
                let head = &params.heads[d];
                let ga = ops::sigmoid_vjp(&self.left.outputs[d], &g_left[d])?;
                let (gx, gh) = head.vjp(&tl.y, &ga)?;
                grads.heads[d].accumulate(&gh)?;
                add_into(&mut gy_l, gx)?;
                let ga = ops::sigmoid_vjp(&self.right.outputs[d], &g_right[d])?;
                let (gx, gh) = head.vjp(&tr.y, &ga)?;
                grads.heads[d].accumulate(&gh)?;
                add_into(&mut gy_r, gx)?;
            }
            let gy_l = gy_l.unwrap_or_else(|| Tensor::zeros_like(&tl.y));
            let gy_r = gy_r.unwrap_or_else(|| Tensor::zeros_like(&tr.y));
            let (mut gx_l, gs_l) = params.decoder[d].vjp(tl, &gy_l, &mut grads.decoder[d])?;
            let (mut gx_r, gs_r) = params.decoder[d].vjp(tr, &gy_r, &mut grads.decoder[d])?;
            if let (Some(gs_l), Some(gs_r)) = (gs_l, gs_r) {
                add_into(&mut gfeat_l[d - 1], gs_l)?;
                add_into(&mut gfeat_r[d - 1], gs_r)?;
            }
            if let (Some(bt), Some(p)) = (&self.decoder_attention[d], &params.decoder_attention[d]) {
                let (a, b, gp) = bt.vjp(p, &gx_l, &gx_r)?;
                gx_l = a;
                gx_r = b;
                attention_grads(&mut grads.decoder_attention[d], &gp)?;
            }
            carry = Some((gx_l, gx_r));
        }

        // fusion
        let (gf_l, gf_r) = carry.expect("at least one decoder block");
        let c = cfg.widths[n - 1];
        let ga_l = ops::relu_vjp(&self.left.fusion_pre, &gf_l)?;
        let ga_r = ops::relu_vjp(&self.right.fusion_pre, &gf_r)?;
        let (gcat_l, gconv_l) = params.fusion_left.vjp(&self.left.fusion_in, &ga_l)?;
        let (gcat_r, gconv_r) = params.fusion_right.vjp(&self.right.fusion_in, &ga_r)?;
        grads.fusion_left.accumulate(&gconv_l)?;
        grads.fusion_right.accumulate(&gconv_r)?;
        let (a_l, a_r) = ops::split_channels(&gcat_l, c)?;
        let (b_r, b_l) = ops::split_channels(&gcat_r, c)?;
        add_into(&mut gfeat_l[n - 1], a_l)?;
        add_into(&mut gfeat_l[n - 1], b_l)?;
        add_into(&mut gfeat_r[n - 1], a_r)?;
        add_into(&mut gfeat_r[n - 1], b_r)?;

        // encoder, deepest first
        let mut gimg = (Tensor::zeros_like(&self.left.encoder[0].x), Tensor::zeros_like(&self.right.encoder[0].x));
        for k in (0..n).rev() {
            let mut gl = gfeat_l[k].take().unwrap_or_else(|| Tensor::zeros_like(&self.left.features[k]));
            let mut gr = gfeat_r[k].take().unwrap_or_else(|| Tensor::zeros_like(&self.right.features[k]));
            if let (Some(bt), Some(p)) = (&self.encoder_attention[k], &params.encoder_attention[k]) {
                let (a, b, gp) = bt.vjp(p, &gl, &gr)?;
                gl = a;
                gr = b;
                attention_grads(&mut grads.encoder_attention[k], &gp)?;
            }
            let gx_l = params.encoder[k].vjp(&self.left.encoder[k], &gl, &mut grads.encoder[k])?;
            let gx_r = params.encoder[k].vjp(&self.right.encoder[k], &gr, &mut grads.encoder[k])?;
            if k > 0 {
                add_into(&mut gfeat_l[k - 1], gx_l)?;
                add_into(&mut gfeat_r[k - 1], gx_r)?;
            } else {
                gimg = (gx_l, gx_r);
            }
        }
        Ok(ModelGrads {
            params: grads,
            left_image: gimg.0,
            right_image: gimg.1,
        })
    }
}

// ---------------------------------------------------------------------------
// Depth

/// `D = 1/(aΩ + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthTransform {
    pub a: f64,
    pub b: f64,
}

impl Default for DepthTransform {
    fn default() -> Self {
        Self { a: 9.99, b: 0.01 }
    }
}

impl DepthTransform {
    pub fn d_min(&self) -> f64 {
        1.0 / (self.a + self.b)
    }

    pub fn d_max(&self) -> f64 {
        1.0 / self.b
    }

    /// `1/D = aΩ + b`.
    pub fn inverse_depth(&self, omega: &Tensor) -> Tensor {
        omega.map(|o| self.a * o + self.b)
    }
}

pub fn sigmoid_to_depth(omega: &Tensor, transform: &DepthTransform) -> Tensor {
    omega.map(|o| 1.0 / (transform.a * o + transform.b))
}

/// Cotangent of Ω given the depth `D` and its cotangent: `dD/dΩ = −a·D²`.
pub fn sigmoid_to_depth_vjp(depth: &Tensor, transform: &DepthTransform, g: &Tensor) -> Result<Tensor> {
    let out = depth
        .data()
        .iter()
        .zip(g.data())
        .map(|(&d, &gv)| -transform.a * d * d * gv)
        .collect();
    if depth.shape() != g.shape() {
        return Err(Error::shape("sigmoid_to_depth_vjp", depth.shape(), g.shape()));
    }
    Tensor::new(depth.shape().to_vec(), out)
}

fn check_positive(x: &Tensor, op: &str) -> Result<()> {
    if x.data().iter().all(|&v| v > 0.0 && v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{op}: values must be positive and finite")))
    }
}

/// `disp = focal·baseline / D`.
pub fn depth_to_disparity(depth: &Tensor, focal: f64, baseline: f64) -> Result<Tensor> {
    check_positive(depth, "depth_to_disparity")?;
    let fb = focal * baseline;
    Ok(depth.map(|d| fb / d))
}

/// `D = focal·baseline / disp`.
pub fn disparity_to_depth(disp: &Tensor, focal: f64, baseline: f64) -> Result<Tensor> {
    check_positive(disp, "disparity_to_depth")?;
    let fb = focal * baseline;
    Ok(disp.map(|d| fb / d))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(cfg: &ModelConfig, seed: u64) -> (Tensor, Tensor) {
        let mut rng = Rng::new(seed);
        let s = [3, cfg.height, cfg.width];
        (rng.tensor(&s, 0.0, 1.0), rng.tensor(&s, 0.0, 1.0))
    }

    fn small(mode: AttentionMode) -> ModelConfig {
        ModelConfig {
            height: 8,
            width: 16,
            widths: vec![2, 3, 4],
            scales: 3,
            attention: mode,
            sinkhorn: SinkhornConfig::default(),
        }
    }

    #[test]
    fn config_constraints() {
        let mut c = ModelConfig::tiny();
        c.validate().unwrap();
        c.scales = 3;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(m)) if m.contains("scales")));
        let mut c = ModelConfig::tiny();
        c.width = 18;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(m)) if m.contains("divisible")));
        let c = ModelConfig::tiny().with_flags(true, true, true);
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(m)) if m.contains("attention")));
        let text = ModelConfig::toy().to_text().unwrap();
        assert_eq!(ModelConfig::from_text(&text).unwrap(), ModelConfig::toy());
        assert!(ModelConfig::from_text(&format!("{text}\nextra = 1\n")).is_err());
    }

    #[test]
    fn output_scales_halve() {
        let cfg = small(AttentionMode::EgMea);
        let p = build(&cfg, &mut Rng::new(1)).unwrap();
        let (il, ir) = images(&cfg, 2);
        let (l, r) = forward(&il, &ir, &p).unwrap();
        for out in [&l, &r] {
            assert_eq!(out.scales.len(), 3);
            for (s, t) in out.scales.iter().enumerate() {
                assert_eq!(t.shape(), &[1, 8 >> s, 16 >> s]);
                assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = small(AttentionMode::OtMea);
        let a = build(&cfg, &mut Rng::new(5)).unwrap();
        let b = build(&cfg, &mut Rng::new(5)).unwrap();
        for ((na, ta), (nb, tb)) in a.named().iter().zip(b.named()) {
            assert_eq!(*na, nb);
            assert!(ta.bitwise_eq(tb));
        }
    }

    #[test]
    fn fusion_convs_are_distinct() {
        let p = build(&ModelConfig::tiny(), &mut Rng::new(3)).unwrap();
        assert_ne!(p.fusion_left.weight, p.fusion_right.weight);
    }

    #[test]
    fn breakdown_matches_stored_tensors() {
        for mode in [AttentionMode::Off, AttentionMode::EgMea, AttentionMode::OtMnl] {
            let cfg = small(mode);
            let p = build(&cfg, &mut Rng::new(4)).unwrap();
            assert_eq!(param_count(&p), ParamBreakdown::analytic(&cfg));
            assert_eq!(param_count(&p).total(), p.count());
        }
    }

    #[test]
    fn flat_round_trip() {
        let mut p = build(&small(AttentionMode::EgMnl), &mut Rng::new(6)).unwrap();
        let flat = p.to_flat();
        let q = p.clone();
        p.load_flat(&flat.scale(2.0)).unwrap();
        assert_ne!(p, q);
        p.load_flat(&flat).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn depth_transform_examples() {
        let t = DepthTransform::default();
        let d = sigmoid_to_depth(&Tensor::new(vec![3], vec![1.0, 0.0, 0.5]).unwrap(), &t);
        assert_eq!(d.data()[0], 0.1);
        assert_eq!(d.data()[1], 100.0);
        assert!((d.data()[2] - 1.0 / 5.005).abs() < 1e-15);
        assert_eq!(t.d_min(), 0.1);
        assert_eq!(t.d_max(), 100.0);
    }

    #[test]
    fn disparity_examples() {
        let d = Tensor::new(vec![2], vec![4.0, 100.0]).unwrap();
        let disp = depth_to_disparity(&d, 10.0, 2.0).unwrap();
        assert_eq!(disp.data(), &[5.0, 0.2]);
        let back = disparity_to_depth(&disp, 10.0, 2.0).unwrap();
        assert!(back.max_abs_diff(&d) < 1e-12);
        assert!(depth_to_disparity(&Tensor::zeros(&[1]), 1.0, 1.0).is_err());
    }
}
