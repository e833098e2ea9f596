//! Mutual attention between the two views.
//!
//! Inputs arrive from the host network as `[c,h,w]`. Epipolar (MEA) modes
//! transpose them to `[h,c,w]` so every image row is an independent batch
//! entry; global (MNL) modes flatten all pixels into a single row `[1,c,h·w]`.
//! For a retrieval `Φ` and value map `Ψ` (a 1×1 convolution):
//!
//! ```text
//! Y(l→r) = Ψ(Xl) ⊗ Φ(Xl, Xr)        x̃l = xl + Y(r→l)
//! Y(r→l) = Ψ(Xr) ⊗ Φ(Xr, Xl)        x̃r = xr + Y(l→r)
//! ```
//!
//! `⊗` is the per-row matrix product `[c,w]·[w,w]`. Both directions use the
//! same parameters with the arguments of `Φ` swapped.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{join, Linear, Parameters};
use crate::ops;
use crate::ot::{self, MatchingMatrix, OtTrace, RetrievalParams, SinkhornConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    Off,
    EgMea,
    OtMea,
    EgMnl,
    OtMnl,
}

impl AttentionMode {
    pub const ALL_ENABLED: [AttentionMode; 4] = [
        AttentionMode::EgMea,
        AttentionMode::OtMea,
        AttentionMode::EgMnl,
        AttentionMode::OtMnl,
    ];

    /// Builds a mode from the ablation switches: attention on/off, epipolar
    /// (MEA) vs global (MNL) range, OT vs embedded-Gaussian retrieval.
    pub fn from_flags(enabled: bool, epipolar: bool, ot: bool) -> Self {
        match (enabled, epipolar, ot) {
            (false, _, _) => AttentionMode::Off,
            (true, true, false) => AttentionMode::EgMea,
            (true, true, true) => AttentionMode::OtMea,
            (true, false, false) => AttentionMode::EgMnl,
            (true, false, true) => AttentionMode::OtMnl,
        }
    }

    pub fn is_enabled(self) -> bool {
        self != AttentionMode::Off
    }

    pub fn is_ot(self) -> bool {
        matches!(self, AttentionMode::OtMea | AttentionMode::OtMnl)
    }

    pub fn is_epipolar(self) -> bool {
        matches!(self, AttentionMode::EgMea | AttentionMode::OtMea)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::Off => "off",
            AttentionMode::EgMea => "eg-mea",
            AttentionMode::OtMea => "ot-mea",
            AttentionMode::EgMnl => "eg-mnl",
            AttentionMode::OtMnl => "ot-mnl",
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            AttentionMode::Off,
            AttentionMode::EgMea,
            AttentionMode::OtMea,
            AttentionMode::EgMnl,
            AttentionMode::OtMnl,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown attention mode '{s}'")))
    }
}

/// Retrieval weights: query/key convolutions for EG, cost and mass
/// convolutions for OT.
#[derive(Debug, Clone, PartialEq)]
pub enum Retrieval {
    Eg { conv_q: Linear, conv_k: Linear },
    Ot(RetrievalParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub mode: AttentionMode,
    pub retrieval: Retrieval,
    /// Value map Ψ; preserves the channel count.
    pub conv_v: Linear,
}

impl AttentionParams {
    /// Random retrieval weights and a zero value map, so the block starts as
    /// the identity.
    pub fn init(c: usize, mode: AttentionMode, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::init_random(c, mode, rng)?;
        p.conv_v = Linear::zeros(c, c);
        Ok(p)
    }

    /// Every weight random, including the value map.
    pub fn init_random(c: usize, mode: AttentionMode, rng: &mut Rng) -> Result<Self> {
        let retrieval = match mode {
            AttentionMode::Off => {
                return Err(Error::InvalidArgument("attention mode 'off' has no parameters".into()))
            }
            AttentionMode::EgMea | AttentionMode::EgMnl => Retrieval::Eg {
                conv_q: Linear::init(c, c, rng),
                conv_k: Linear::init(c, c, rng),
            },
            AttentionMode::OtMea | AttentionMode::OtMnl => Retrieval::Ot(RetrievalParams::init(c, rng)),
        };
        Ok(Self {
            mode,
            retrieval,
            conv_v: Linear::init(c, c, rng),
        })
    }

    /// Analytic count for a `c`-channel block.
    pub fn param_count(c: usize, mode: AttentionMode) -> usize {
        let value = Linear::param_count(c, c);
        match mode {
            AttentionMode::Off => 0,
            AttentionMode::EgMea | AttentionMode::EgMnl => 2 * Linear::param_count(c, c) + value,
            AttentionMode::OtMea | AttentionMode::OtMnl => RetrievalParams::param_count(c) + value,
        }
    }

    pub fn channels(&self) -> usize {
        self.conv_v.in_channels()
    }

    pub fn zeros_like(&self) -> Self {
        let retrieval = match &self.retrieval {
            Retrieval::Eg { conv_q, conv_k } => Retrieval::Eg {
                conv_q: conv_q.zeros_like(),
                conv_k: conv_k.zeros_like(),
            },
            Retrieval::Ot(p) => Retrieval::Ot(p.zeros_like()),
        };
        Self {
            mode: self.mode,
            retrieval,
            conv_v: self.conv_v.zeros_like(),
        }
    }

    pub fn accumulate(&mut self, g: &AttentionParams) -> Result<()> {
        self.conv_v.accumulate(&g.conv_v)?;
        match (&mut self.retrieval, &g.retrieval) {
            (Retrieval::Eg { conv_q, conv_k }, Retrieval::Eg { conv_q: gq, conv_k: gk }) => {
                conv_q.accumulate(gq)?;
                conv_k.accumulate(gk)
            }
            (Retrieval::Ot(p), Retrieval::Ot(gp)) => p.accumulate(gp),
            _ => Err(Error::InvalidArgument("attention gradient of a different mode".into())),
        }
    }
}

impl Parameters for AttentionParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        match &self.retrieval {
            Retrieval::Eg { conv_q, conv_k } => {
                conv_q.visit(&join(prefix, "conv_q"), out);
                conv_k.visit(&join(prefix, "conv_k"), out);
            }
            Retrieval::Ot(p) => p.visit(prefix, out),
        }
        self.conv_v.visit(&join(prefix, "conv_v"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        match &mut self.retrieval {
            Retrieval::Eg { conv_q, conv_k } => {
                conv_q.visit_mut(&join(prefix, "conv_q"), out);
                conv_k.visit_mut(&join(prefix, "conv_k"), out);
            }
            Retrieval::Ot(p) => p.visit_mut(prefix, out),
        }
        self.conv_v.visit_mut(&join(prefix, "conv_v"), out);
    }
}

// ---------------------------------------------------------------------------
// Retrieval functions

#[derive(Debug, Clone)]
pub struct EgTrace {
    q_t: Tensor,
    k: Tensor,
    m: MatchingMatrix,
}

/// Embedded-Gaussian retrieval: `softmax_k((C₁X¹)ᵀ·(C₂X²))` per row.
pub fn eg_retrieve(x1: &Tensor, x2: &Tensor, conv_q: &Linear, conv_k: &Linear) -> Result<MatchingMatrix> {
    Ok(eg_retrieve_traced(x1, x2, conv_q, conv_k)?.m)
}

fn eg_retrieve_traced(x1: &Tensor, x2: &Tensor, conv_q: &Linear, conv_k: &Linear) -> Result<EgTrace> {
    if x1.shape() != x2.shape() {
        return Err(Error::shape("eg_retrieve", x1.shape(), x2.shape()));
    }
    let q_t = ops::transpose_last2(&conv_q.rows(x1)?)?;
    let k = conv_k.rows(x2)?;
    let m = MatchingMatrix::new(ops::softmax_lastdim(&ops::batched_matmul(&q_t, &k)?))?;
    Ok(EgTrace { q_t, k, m })
}

impl EgTrace {
    fn vjp(
        &self,
        x1: &Tensor,
        x2: &Tensor,
        conv_q: &Linear,
        conv_k: &Linear,
        g: &Tensor,
    ) -> Result<(Tensor, Tensor, Linear, Linear)> {
        let gs = ops::softmax_lastdim_vjp(self.m.values(), g)?;
        let (gq_t, gk) = ops::batched_matmul_vjp(&self.q_t, &self.k, &gs)?;
        let gq = ops::transpose_last2(&gq_t)?;
        let (gx1, gconv_q) = conv_q.rows_vjp(x1, &gq)?;
        let (gx2, gconv_k) = conv_k.rows_vjp(x2, &gk)?;
        Ok((gx1, gx2, gconv_q, gconv_k))
    }
}

#[derive(Debug, Clone)]
pub enum RetrievalTrace {
    Eg(EgTrace),
    Ot(OtTrace),
}

impl RetrievalTrace {
    pub fn matching(&self) -> &MatchingMatrix {
        match self {
            RetrievalTrace::Eg(t) => &t.m,
            RetrievalTrace::Ot(t) => t.plan(),
        }
    }

    /// Cotangents `(gX¹, gX²)` and a retrieval gradient.
    pub fn vjp(
        &self,
        x1: &Tensor,
        x2: &Tensor,
        retrieval: &Retrieval,
        g: &Tensor,
    ) -> Result<(Tensor, Tensor, Retrieval)> {
        match (self, retrieval) {
            (RetrievalTrace::Eg(t), Retrieval::Eg { conv_q, conv_k }) => {
                let (gx1, gx2, gq, gk) = t.vjp(x1, x2, conv_q, conv_k, g)?;
                Ok((gx1, gx2, Retrieval::Eg { conv_q: gq, conv_k: gk }))
            }
            (RetrievalTrace::Ot(t), Retrieval::Ot(p)) => {
                let (gx1, gx2, gp) = t.vjp(x1, x2, p, g)?;
                Ok((gx1, gx2, Retrieval::Ot(gp)))
            }
            _ => Err(Error::InvalidArgument("retrieval trace does not match parameters".into())),
        }
    }
}

/// Row-wise retrieval `Φ(X¹, X²)` on the `[h,c,w]` layout.
pub fn retrieve_traced(
    x1: &Tensor,
    x2: &Tensor,
    retrieval: &Retrieval,
    sinkhorn: &SinkhornConfig,
) -> Result<RetrievalTrace> {
    match retrieval {
        Retrieval::Eg { conv_q, conv_k } => Ok(RetrievalTrace::Eg(eg_retrieve_traced(x1, x2, conv_q, conv_k)?)),
        Retrieval::Ot(p) => Ok(RetrievalTrace::Ot(ot::ot_retrieve_traced(x1, x2, p, sinkhorn)?)),
    }
}

pub fn retrieve(
    x1: &Tensor,
    x2: &Tensor,
    retrieval: &Retrieval,
    sinkhorn: &SinkhornConfig,
) -> Result<MatchingMatrix> {
    Ok(retrieve_traced(x1, x2, retrieval, sinkhorn)?.matching().clone())
}

/// `[h,c,w] -> [1,c,h·w]`, pixel `(i,j)` at position `i·w + j`.
pub fn flatten_rows(x: &Tensor) -> Result<Tensor> {
    let (h, c, w) = x.dims3("flatten_rows")?;
    ops::swap_leading(x)?.into_reshape(&[1, c, h * w])
}

/// Global retrieval over all pixels as one row; returns `[1, h·w, h·w]`.
pub fn mnl_retrieve(
    x1: &Tensor,
    x2: &Tensor,
    retrieval: &Retrieval,
    sinkhorn: &SinkhornConfig,
) -> Result<MatchingMatrix> {
    if x1.shape() != x2.shape() {
        return Err(Error::shape("mnl_retrieve", x1.shape(), x2.shape()));
    }
    retrieve(&flatten_rows(x1)?, &flatten_rows(x2)?, retrieval, sinkhorn)
}

/// `(Ψ(Xl) ⊗ Φ(Xl,Xr), Ψ(Xr) ⊗ Φ(Xr,Xl))` on the `[h,c,w]` layout for an
/// arbitrary retrieval function.
pub fn mea_apply<F>(xl: &Tensor, xr: &Tensor, conv_v: &Linear, retrieve_fn: F) -> Result<(Tensor, Tensor)>
where
    F: Fn(&Tensor, &Tensor) -> Result<MatchingMatrix>,
{
    if xl.shape() != xr.shape() {
        return Err(Error::shape("mea_apply", xl.shape(), xr.shape()));
    }
    let m_lr = retrieve_fn(xl, xr)?;
    let m_rl = retrieve_fn(xr, xl)?;
    let y_lr = ops::batched_matmul(&conv_v.rows(xl)?, m_lr.values())?;
    let y_rl = ops::batched_matmul(&conv_v.rows(xr)?, m_rl.values())?;
    Ok((y_lr, y_rl))
}

// ---------------------------------------------------------------------------
// Residual block

fn to_rows(x: &Tensor, mode: AttentionMode) -> Result<Tensor> {
    let (c, h, w) = x.dims3("attention_block")?;
    if mode.is_epipolar() {
        ops::swap_leading(x)
    } else {
        x.reshape(&[1, c, h * w])
    }
}

fn from_rows(y: &Tensor, shape: &[usize], mode: AttentionMode) -> Result<Tensor> {
    if mode.is_epipolar() {
        ops::swap_leading(y)
    } else {
        y.reshape(shape)
    }
}

/// Everything the reverse pass of [`attention_block`] needs.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    shape: Vec<usize>,
    xl: Tensor,
    xr: Tensor,
    vl: Tensor,
    vr: Tensor,
    lr: RetrievalTrace,
    rl: RetrievalTrace,
}

impl BlockTrace {
    /// Matching matrix of the `l→r` direction.
    pub fn matching_lr(&self) -> &MatchingMatrix {
        self.lr.matching()
    }
}

/// Residual mutual attention on `[c,h,w]` features:
/// `x̃l = xl + Y(r→l)`, `x̃r = xr + Y(l→r)`.
pub fn attention_block(
    xl: &Tensor,
    xr: &Tensor,
    params: &AttentionParams,
    sinkhorn: &SinkhornConfig,
) -> Result<(Tensor, Tensor)> {
    let (l, r, _) = attention_block_traced(xl, xr, params, sinkhorn)?;
    Ok((l, r))
}

pub fn attention_block_traced(
    xl: &Tensor,
    xr: &Tensor,
    params: &AttentionParams,
    sinkhorn: &SinkhornConfig,
) -> Result<(Tensor, Tensor, BlockTrace)> {
    if xl.shape() != xr.shape() {
        return Err(Error::shape("attention_block", xl.shape(), xr.shape()));
    }
    let (c, _, _) = xl.dims3("attention_block")?;
    if params.channels() != c || params.conv_v.out_channels() != c {
        return Err(Error::shape("attention_block", xl.shape(), params.conv_v.weight.shape()));
    }
    let mode = params.mode;
    let rows_l = to_rows(xl, mode)?;
    let rows_r = to_rows(xr, mode)?;
    let vl = params.conv_v.rows(&rows_l)?;
    let vr = params.conv_v.rows(&rows_r)?;
    let lr = retrieve_traced(&rows_l, &rows_r, &params.retrieval, sinkhorn)?;
    let rl = retrieve_traced(&rows_r, &rows_l, &params.retrieval, sinkhorn)?;
    let y_lr = from_rows(&ops::batched_matmul(&vl, lr.matching().values())?, xl.shape(), mode)?;
    let y_rl = from_rows(&ops::batched_matmul(&vr, rl.matching().values())?, xl.shape(), mode)?;
    let out_l = ops::add(xl, &y_rl)?;
    let out_r = ops::add(xr, &y_lr)?;
    Ok((
        out_l,
        out_r,
        BlockTrace {
            shape: xl.shape().to_vec(),
            xl: rows_l,
            xr: rows_r,
            vl,
            vr,
            lr,
            rl,
        },
    ))
}

impl BlockTrace {
    /// Cotangents of `(xl, xr)` and the parameter gradient, given the
    /// cotangents of `(x̃l, x̃r)`.
    pub fn vjp(
        &self,
        params: &AttentionParams,
        g_out_l: &Tensor,
        g_out_r: &Tensor,
    ) -> Result<(Tensor, Tensor, AttentionParams)> {
        let mode = params.mode;
        let gy_rl = to_rows(g_out_l, mode)?;
        let gy_lr = to_rows(g_out_r, mode)?;
        let (gvl, gm_lr) = ops::batched_matmul_vjp(&self.vl, self.lr.matching().values(), &gy_lr)?;
        let (gvr, gm_rl) = ops::batched_matmul_vjp(&self.vr, self.rl.matching().values(), &gy_rl)?;

        let (mut g_rows_l, mut conv_v) = params.conv_v.rows_vjp(&self.xl, &gvl)?;
        let (mut g_rows_r, gv_r) = params.conv_v.rows_vjp(&self.xr, &gvr)?;
        conv_v.accumulate(&gv_r)?;

        let (gl1, gr1, retrieval) = self.lr.vjp(&self.xl, &self.xr, &params.retrieval, &gm_lr)?;
        let (gr2, gl2, retrieval_rl) = self.rl.vjp(&self.xr, &self.xl, &params.retrieval, &gm_rl)?;
        g_rows_l.add_assign(&gl1)?;
        g_rows_l.add_assign(&gl2)?;
        g_rows_r.add_assign(&gr1)?;
        g_rows_r.add_assign(&gr2)?;
        let zero_v = conv_v.zeros_like();
        let mut grads = AttentionParams { mode, retrieval, conv_v };
        grads.accumulate(&AttentionParams {
            mode,
            retrieval: retrieval_rl,
            conv_v: zero_v,
        })?;

        let mut gxl = from_rows(&g_rows_l, &self.shape, mode)?;
        let mut gxr = from_rows(&g_rows_r, &self.shape, mode)?;
        gxl.add_assign(g_out_l)?;
        gxr.add_assign(g_out_r)?;
        Ok((gxl, gxr, grads))
    }
}
