//! The self-supervised objective: reprojection, photometric and smoothness terms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DepthTransform, MultiScaleOutput};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// SSIM vs L1 mixing weight.
    pub gamma: f64,
    /// Smoothness weight, the same at every scale.
    pub lambda: f64,
    pub scales: usize,
    #[serde(default = "default_c1")]
    pub c1: f64,
    #[serde(default = "default_c2")]
    pub c2: f64,
}

fn default_c1() -> f64 {
    0.01 * 0.01
}

fn default_c2() -> f64 {
    0.03 * 0.03
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.85,
            lambda: 0.001,
            scales: 4,
            c1: default_c1(),
            c2: default_c2(),
        }
    }
}

impl LossConfig {
    pub fn with_scales(scales: usize) -> Self {
        Self {
            scales,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!("gamma: must lie in [0,1], got {}", self.gamma)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("lambda: must be >= 0, got {}", self.lambda)));
        }
        if self.scales == 0 {
            return Err(Error::InvalidConfig("scales: must be >= 1".into()));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::InvalidConfig("ssim constants must be positive".into()));
        }
        Ok(())
    }
}

/// Focal length in pixels and baseline in depth units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub focal: f64,
    pub baseline: f64,
}

impl Camera {
    pub fn fb(&self) -> f64 {
        self.focal * self.baseline
    }
}

// ---------------------------------------------------------------------------
// Warping

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpDirection {
    /// Rebuild the left view from the right one: sample at `j − d`.
    LeftFromRight,
    /// Rebuild the right view from the left one: sample at `j + d`.
    RightFromLeft,
}

impl WarpDirection {
    fn sign(self) -> f64 {
        match self {
            WarpDirection::LeftFromRight => -1.0,
            WarpDirection::RightFromLeft => 1.0,
        }
    }
}

/// Horizontal tap `(x0, x1, t, inside)` for column `j` shifted by `sign·d`;
/// `inside` is false when the sample position was clamped.
fn tap(j: usize, d: f64, sign: f64, w: usize) -> (usize, usize, f64, bool) {
    let raw = j as f64 + sign * d;
    let hi = (w - 1) as f64;
    let x = raw.clamp(0.0, hi);
    let x0 = x.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    (x0, x1, x - x0 as f64, raw > 0.0 && raw < hi)
}

fn check_warp(source: &Tensor, disparity: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = source.dims3("warp")?;
    if disparity.shape() != [1, h, w] {
        return Err(Error::shape("warp", source.shape(), disparity.shape()));
    }
    Ok((c, h, w))
}

/// Bilinear horizontal resampling of `source` by a per-pixel disparity, with
/// border clamping.
pub fn warp(source: &Tensor, disparity: &Tensor, direction: WarpDirection) -> Result<Tensor> {
    let (c, h, w) = check_warp(source, disparity)?;
    let sign = direction.sign();
    let (sd, dd) = (source.data(), disparity.data());
    let mut out = vec![0.0; source.len()];
    for i in 0..h {
        for j in 0..w {
            let (x0, x1, t, _) = tap(j, dd[i * w + j], sign, w);
            for ch in 0..c {
                let row = &sd[(ch * h + i) * w..(ch * h + i + 1) * w];
                out[(ch * h + i) * w + j] = (1.0 - t) * row[x0] + t * row[x1];
            }
        }
    }
    Ok(Tensor::from_parts(source.shape().to_vec(), out))
}

/// Cotangents `(g_source, g_disparity)`.
pub fn warp_vjp(
    source: &Tensor,
    disparity: &Tensor,
    direction: WarpDirection,
    g: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = check_warp(source, disparity)?;
    if g.shape() != source.shape() {
        return Err(Error::shape("warp_vjp", g.shape(), source.shape()));
    }
    let sign = direction.sign();
    let (sd, dd, gd) = (source.data(), disparity.data(), g.data());
    let mut gs = vec![0.0; source.len()];
    let mut gdisp = vec![0.0; disparity.len()];
    for i in 0..h {
        for j in 0..w {
            let (x0, x1, t, inside) = tap(j, dd[i * w + j], sign, w);
            let mut acc = 0.0;
            for ch in 0..c {
                let base = (ch * h + i) * w;
                let gv = gd[base + j];
                gs[base + x0] += (1.0 - t) * gv;
                gs[base + x1] += t * gv;
                if inside {
                    acc += gv * (sd[base + x1] - sd[base + x0]);
                }
            }
            gdisp[i * w + j] = sign * acc;
        }
    }
    Ok((
        Tensor::from_parts(source.shape().to_vec(), gs),
        Tensor::from_parts(disparity.shape().to_vec(), gdisp),
    ))
}

// ---------------------------------------------------------------------------
// SSIM

/// 3×3 box mean over the window clipped to the image, per channel.
fn box3(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            let (i0, i1) = (i.saturating_sub(1), (i + 1).min(h - 1));
            for j in 0..w {
                let (j0, j1) = (j.saturating_sub(1), (j + 1).min(w - 1));
                let mut s = 0.0;
                for r in i0..=i1 {
                    for q in j0..=j1 {
                        s += src[r * w + q];
                    }
                }
                out[(ch * h + i) * w + j] = s / ((i1 - i0 + 1) * (j1 - j0 + 1)) as f64;
            }
        }
    }
    out
}

/// Transpose of [`box3`].
fn box3_t(g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; g.len()];
    for ch in 0..c {
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            let (i0, i1) = (i.saturating_sub(1), (i + 1).min(h - 1));
            for j in 0..w {
                let (j0, j1) = (j.saturating_sub(1), (j + 1).min(w - 1));
                let v = g[(ch * h + i) * w + j] / ((i1 - i0 + 1) * (j1 - j0 + 1)) as f64;
                for r in i0..=i1 {
                    for q in j0..=j1 {
                        dst[r * w + q] += v;
                    }
                }
            }
        }
    }
    out
}

struct SsimStats {
    mx: Vec<f64>,
    my: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    b1: Vec<f64>,
    b2: Vec<f64>,
    s: Vec<f64>,
}

fn ssim_stats(x: &Tensor, y: &Tensor, cfg: &LossConfig) -> Result<SsimStats> {
    if x.shape() != y.shape() {
        return Err(Error::shape("ssim", x.shape(), y.shape()));
    }
    let (c, h, w) = x.dims3("ssim")?;
    let (xd, yd) = (x.data(), y.data());
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = box3(xd, c, h, w);
    let my = box3(yd, c, h, w);
    let exx = box3(&sq(xd, xd), c, h, w);
    let eyy = box3(&sq(yd, yd), c, h, w);
    let exy = box3(&sq(xd, yd), c, h, w);
    let n = x.len();
    let (mut a1, mut a2, mut b1, mut b2, mut s) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for k in 0..n {
        let (u, v) = (mx[k], my[k]);
        a1[k] = 2.0 * u * v + cfg.c1;
        a2[k] = 2.0 * (exy[k] - u * v) + cfg.c2;
        b1[k] = u * u + v * v + cfg.c1;
        b2[k] = (exx[k] - u * u) + (eyy[k] - v * v) + cfg.c2;
        s[k] = a1[k] * a2[k] / (b1[k] * b2[k]);
    }
    Ok(SsimStats { mx, my, a1, a2, b1, b2, s })
}

/// Per-pixel, per-channel SSIM with 3×3 box statistics.
pub fn ssim(x: &Tensor, y: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let st = ssim_stats(x, y, cfg)?;
    Ok(Tensor::from_parts(x.shape().to_vec(), st.s))
}

fn ssim_vjp_from(x: &Tensor, y: &Tensor, st: &SsimStats, g: &[f64]) -> (Tensor, Tensor) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = x.len();
    let (mut gmx, mut gmy, mut gexx, mut geyy, mut gexy) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for k in 0..n {
        let gs = g[k] * st.s[k];
        let (u, v) = (st.mx[k], st.my[k]);
        let (a1, a2, b1, b2) = (st.a1[k], st.a2[k], st.b1[k], st.b2[k]);
        gmx[k] = gs * (2.0 * v / a1 - 2.0 * v / a2 - 2.0 * u / b1 + 2.0 * u / b2);
        gmy[k] = gs * (2.0 * u / a1 - 2.0 * u / a2 - 2.0 * v / b1 + 2.0 * v / b2);
        gexx[k] = -gs / b2;
        geyy[k] = -gs / b2;
        gexy[k] = 2.0 * gs / a2;
    }
    let (tmx, tmy) = (box3_t(&gmx, c, h, w), box3_t(&gmy, c, h, w));
    let (txx, tyy, txy) = (box3_t(&gexx, c, h, w), box3_t(&geyy, c, h, w), box3_t(&gexy, c, h, w));
    let (xd, yd) = (x.data(), y.data());
    let gx = (0..n).map(|k| tmx[k] + 2.0 * xd[k] * txx[k] + yd[k] * txy[k]).collect();
    let gy = (0..n).map(|k| tmy[k] + 2.0 * yd[k] * tyy[k] + xd[k] * txy[k]).collect();
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(y.shape().to_vec(), gy),
    )
}

pub fn ssim_vjp(x: &Tensor, y: &Tensor, cfg: &LossConfig, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let st = ssim_stats(x, y, cfg)?;
    if g.shape() != x.shape() {
        return Err(Error::shape("ssim_vjp", g.shape(), x.shape()));
    }
    Ok(ssim_vjp_from(x, y, &st, g.data()))
}

// ---------------------------------------------------------------------------
// Photometric term

/// Mean over channels and pixels of `(γ/2)(1 − SSIM) + (1 − γ)|I − I*|`.
pub fn photometric_loss(image: &Tensor, recon: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let st = ssim_stats(image, recon, cfg)?;
    let n = image.len() as f64;
    let total: f64 = st
        .s
        .iter()
        .zip(image.data().iter().zip(recon.data()))
        .map(|(s, (a, b))| 0.5 * cfg.gamma * (1.0 - s) + (1.0 - cfg.gamma) * (a - b).abs())
        .sum();
    Ok(total / n)
}

/// Gradients `(g_image, g_recon)` of the photometric loss scaled by `g`.
pub fn photometric_loss_vjp(image: &Tensor, recon: &Tensor, cfg: &LossConfig, g: f64) -> Result<(Tensor, Tensor)> {
    let st = ssim_stats(image, recon, cfg)?;
    let n = image.len() as f64;
    let gs = vec![-0.5 * cfg.gamma * g / n; image.len()];
    let (mut gi, mut gr) = ssim_vjp_from(image, recon, &st, &gs);
    let l1 = (1.0 - cfg.gamma) * g / n;
    for ((gi, gr), (a, b)) in gi
        .data_mut()
        .iter_mut()
        .zip(gr.data_mut().iter_mut())
        .zip(image.data().iter().zip(recon.data()))
    {
        let sgn = if a > b {
            1.0
        } else if a < b {
            -1.0
        } else {
            0.0
        };
        *gi += l1 * sgn;
        *gr -= l1 * sgn;
    }
    Ok((gi, gr))
}

// ---------------------------------------------------------------------------
// Smoothness term

fn smooth_check(d: &Tensor, image: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = image.dims3("smoothness_loss")?;
    if d.shape() != [1, h, w] {
        return Err(Error::shape("smoothness_loss", d.shape(), image.shape()));
    }
    let m = d.sum() / d.len() as f64;
    if !m.is_finite() {
        return Err(Error::NonFinite(format!("smoothness_loss: mean of the disparity-like map is {m}")));
    }
    if m < 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "smoothness_loss: mean of the disparity-like map is {m}, below 1e-12"
        )));
    }
    Ok((c, h, w))
}

/// Edge weights `exp(−mean_c |∂I|)` along x (`[h, w−1]`) and y (`[h−1, w]`).
fn edge_weights(image: &Tensor, c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let id = image.data();
    let at = |ch: usize, i: usize, j: usize| id[(ch * h + i) * w + j];
    let mut wx = vec![0.0; h * w.saturating_sub(1)];
    for i in 0..h {
        for j in 0..w.saturating_sub(1) {
            let g: f64 = (0..c).map(|ch| (at(ch, i, j + 1) - at(ch, i, j)).abs()).sum::<f64>() / c as f64;
            wx[i * (w - 1) + j] = (-g).exp();
        }
    }
    let mut wy = vec![0.0; h.saturating_sub(1) * w];
    for i in 0..h.saturating_sub(1) {
        for j in 0..w {
            let g: f64 = (0..c).map(|ch| (at(ch, i + 1, j) - at(ch, i, j)).abs()).sum::<f64>() / c as f64;
            wy[i * w + j] = (-g).exp();
        }
    }
    (wx, wy)
}

/// Edge-aware smoothness of the mean-normalized map `d/mean(d)`; the x and y
/// terms are each averaged over their valid forward-difference locations.
pub fn smoothness_loss(d: &Tensor, image: &Tensor) -> Result<f64> {
    let (c, h, w) = smooth_check(d, image)?;
    let m = d.sum() / d.len() as f64;
    let dd = d.data();
    let (wx, wy) = edge_weights(image, c, h, w);
    let mut lx = 0.0;
    for i in 0..h {
        for j in 0..w.saturating_sub(1) {
            lx += ((dd[i * w + j + 1] - dd[i * w + j]) / m).abs() * wx[i * (w - 1) + j];
        }
    }
    let mut ly = 0.0;
    for i in 0..h.saturating_sub(1) {
        for j in 0..w {
            ly += ((dd[(i + 1) * w + j] - dd[i * w + j]) / m).abs() * wy[i * w + j];
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(mean(lx, wx.len()) + mean(ly, wy.len()))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient with respect to `d`, scaled by `g`; the image is treated as constant.
pub fn smoothness_loss_vjp(d: &Tensor, image: &Tensor, g: f64) -> Result<Tensor> {
    let (c, h, w) = smooth_check(d, image)?;
    let n = d.len();
    let m = d.sum() / n as f64;
    let dd = d.data();
    let (wx, wy) = edge_weights(image, c, h, w);
    // gradient with respect to d* = d/m
    let mut gn = vec![0.0; n];
    if !wx.is_empty() {
        let k = g / wx.len() as f64;
        for i in 0..h {
            for j in 0..w - 1 {
                let e = k * wx[i * (w - 1) + j] * sign(dd[i * w + j + 1] - dd[i * w + j]);
                gn[i * w + j + 1] += e;
                gn[i * w + j] -= e;
            }
        }
    }
    if !wy.is_empty() {
        let k = g / wy.len() as f64;
        for i in 0..h - 1 {
            for j in 0..w {
                let e = k * wy[i * w + j] * sign(dd[(i + 1) * w + j] - dd[i * w + j]);
                gn[(i + 1) * w + j] += e;
                gn[i * w + j] -= e;
            }
        }
    }
    let dot: f64 = gn.iter().zip(dd).map(|(a, b)| a * b).sum();
    let shift = dot / (m * m * n as f64);
    let out = gn.iter().map(|v| v / m - shift).collect();
    Ok(Tensor::from_parts(d.shape().to_vec(), out))
}

// ---------------------------------------------------------------------------
// Multi-scale total

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermPair {
    pub photometric: f64,
    pub smoothness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// Indexed by scale.
    pub left: Vec<TermPair>,
    pub right: Vec<TermPair>,
    pub lambda: f64,
    pub total: f64,
}

impl LossReport {
    /// `(1/2m)·Σ_s (L^l_s + L^r_s)` recomputed from the stored parts.
    pub fn recombine(&self) -> f64 {
        let m = self.left.len() as f64;
        let sum: f64 = self
            .left
            .iter()
            .chain(&self.right)
            .map(|t| t.photometric + self.lambda * t.smoothness)
            .sum();
        sum / (2.0 * m)
    }

    /// Photometric terms averaged over scales and branches.
    pub fn photometric(&self) -> f64 {
        let m = self.left.len() as f64;
        self.left.iter().chain(&self.right).map(|t| t.photometric).sum::<f64>() / (2.0 * m)
    }

    /// Smoothness terms averaged over scales and branches.
    pub fn smoothness(&self) -> f64 {
        let m = self.left.len() as f64;
        self.left.iter().chain(&self.right).map(|t| t.smoothness).sum::<f64>() / (2.0 * m)
    }
}

struct ScaleEval {
    inv_depth: Tensor,
    disparity: Tensor,
    recon: Tensor,
    terms: TermPair,
}

#[allow(clippy::too_many_arguments)]
fn eval_scale(
    omega: &Tensor,
    target: &Tensor,
    source: &Tensor,
    direction: WarpDirection,
    camera: &Camera,
    transform: &DepthTransform,
    cfg: &LossConfig,
    factor: usize,
) -> Result<ScaleEval> {
    let up = ops::upsample_bilinear(omega, factor)?;
    let inv_depth = transform.inverse_depth(&up);
    let fb = camera.fb();
    let disparity = inv_depth.map(|v| fb * v);
    let recon = warp(source, &disparity, direction)?;
    let photometric = photometric_loss(target, &recon, cfg)?;
    let smoothness = smoothness_loss(&inv_depth, target)?;
    Ok(ScaleEval {
        inv_depth,
        disparity,
        recon,
        terms: TermPair { photometric, smoothness },
    })
}

fn check_outputs(out: &MultiScaleOutput, image: &Tensor, cfg: &LossConfig) -> Result<()> {
    if out.scales.len() != cfg.scales {
        return Err(Error::InvalidArgument(format!(
            "total_loss: {} scales given, {} configured",
            out.scales.len(),
            cfg.scales
        )));
    }
    let (_, h, w) = image.dims3("total_loss")?;
    for (s, t) in out.scales.iter().enumerate() {
        let want = [1, h >> s, w >> s];
        if t.shape() != want || (h >> s) << s != h || (w >> s) << s != w {
            return Err(Error::shape("total_loss", t.shape(), &want));
        }
    }
    Ok(())
}

type BranchGrads = Vec<Tensor>;

#[allow(clippy::too_many_arguments)]
fn total_loss_impl(
    left: &MultiScaleOutput,
    right: &MultiScaleOutput,
    il: &Tensor,
    ir: &Tensor,
    camera: &Camera,
    transform: &DepthTransform,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossReport, Option<(BranchGrads, BranchGrads)>)> {
    cfg.validate()?;
    if il.shape() != ir.shape() {
        return Err(Error::shape("total_loss", il.shape(), ir.shape()));
    }
    check_outputs(left, il, cfg)?;
    check_outputs(right, ir, cfg)?;
    let m = cfg.scales;
    let weight = 1.0 / (2.0 * m as f64);
    let mut report = LossReport {
        left: Vec::with_capacity(m),
        right: Vec::with_capacity(m),
        lambda: cfg.lambda,
        total: 0.0,
    };
    let mut grads = (Vec::new(), Vec::new());
    for s in 0..m {
        let factor = 1 << s;
        for (out, target, source, dir, terms, gs) in [
            (left, il, ir, WarpDirection::LeftFromRight, &mut report.left, &mut grads.0),
            (right, ir, il, WarpDirection::RightFromLeft, &mut report.right, &mut grads.1),
        ] {
            let omega = &out.scales[s];
            let ev = eval_scale(omega, target, source, dir, camera, transform, cfg, factor)?;
            terms.push(ev.terms);
            if want_grad {
                let (_, g_recon) = photometric_loss_vjp(target, &ev.recon, cfg, weight)?;
                let (_, g_disp) = warp_vjp(source, &ev.disparity, dir, &g_recon)?;
                let mut g_inv = g_disp.scale(camera.fb());
                g_inv.add_assign(&smoothness_loss_vjp(&ev.inv_depth, target, weight * cfg.lambda)?)?;
                let g_up = g_inv.scale(transform.a);
                gs.push(ops::upsample_bilinear_vjp(omega.shape(), factor, &g_up)?);
            }
        }
    }
    report.total = report.recombine();
    if !report.total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    Ok((report, want_grad.then_some(grads)))
}

/// Multi-scale objective over both branches.
pub fn total_loss(
    left: &MultiScaleOutput,
    right: &MultiScaleOutput,
    il: &Tensor,
    ir: &Tensor,
    camera: &Camera,
    transform: &DepthTransform,
    cfg: &LossConfig,
) -> Result<LossReport> {
    Ok(total_loss_impl(left, right, il, ir, camera, transform, cfg, false)?.0)
}

/// The report plus the gradient of `report.total` with respect to every
/// output map of each branch.
pub fn total_loss_with_grad(
    left: &MultiScaleOutput,
    right: &MultiScaleOutput,
    il: &Tensor,
    ir: &Tensor,
    camera: &Camera,
    transform: &DepthTransform,
    cfg: &LossConfig,
) -> Result<(LossReport, Vec<Tensor>, Vec<Tensor>)> {
    let (report, grads) = total_loss_impl(left, right, il, ir, camera, transform, cfg, true)?;
    let (gl, gr) = grads.expect("gradients requested");
    Ok((report, gl, gr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn warp_zero_disparity_is_identity() {
        let src = Rng::new(1).tensor(&[3, 4, 5], 0.0, 1.0);
        let out = warp(&src, &Tensor::zeros(&[1, 4, 5]), WarpDirection::LeftFromRight).unwrap();
        assert_eq!(out, src);
    }

    #[test]
    fn warp_integer_shift_duplicates_border() {
        let src = t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let one = Tensor::full(&[1, 1, 4], 1.0);
        let r = warp(&src, &one, WarpDirection::RightFromLeft).unwrap();
        assert_eq!(r.data(), &[2.0, 3.0, 4.0, 4.0]);
        let l = warp(&src, &one, WarpDirection::LeftFromRight).unwrap();
        assert_eq!(l.data(), &[1.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn warp_half_pixel_averages_neighbours() {
        let src = t(&[1, 1, 4], &[1.0, 5.0, 2.0, 8.0]);
        let half = Tensor::full(&[1, 1, 4], 0.5);
        let r = warp(&src, &half, WarpDirection::RightFromLeft).unwrap();
        assert_eq!(&r.data()[..3], &[3.0, 3.5, 5.0]);
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let x = Rng::new(2).tensor(&[3, 5, 4], 0.0, 1.0);
        let s = ssim(&x, &x, &LossConfig::default()).unwrap();
        assert!(s.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn ssim_constant_closed_form() {
        let cfg = LossConfig::default();
        let (a, b) = (0.3, 0.7);
        let s = ssim(&Tensor::full(&[3, 3, 3], a), &Tensor::full(&[3, 3, 3], b), &cfg).unwrap();
        let expect = (2.0 * a * b + cfg.c1) / (a * a + b * b + cfg.c1);
        assert!(s.data().iter().all(|&v| (v - expect).abs() < 1e-12));
    }

    #[test]
    fn photometric_examples() {
        let cfg = LossConfig::default();
        let x = Rng::new(3).tensor(&[3, 4, 4], 0.0, 1.0);
        assert_eq!(photometric_loss(&x, &x, &cfg).unwrap(), 0.0);
        let y = Rng::new(4).tensor(&[3, 4, 4], 0.0, 1.0);
        let l1_only = LossConfig { gamma: 0.0, ..cfg };
        let mae = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64;
        assert!((photometric_loss(&x, &y, &l1_only).unwrap() - mae).abs() < 1e-15);
        // 2x2 constants 0 and 1, worked by hand
        let l = photometric_loss(&Tensor::zeros(&[3, 2, 2]), &Tensor::full(&[3, 2, 2], 1.0), &cfg).unwrap();
        assert!((l - 0.574957504249575).abs() < 1e-14, "{l}");
    }

    #[test]
    fn smoothness_examples() {
        let flat = Tensor::full(&[3, 4, 4], 0.5);
        assert_eq!(smoothness_loss(&Tensor::full(&[1, 4, 4], 2.0), &flat).unwrap(), 0.0);
        let ramp = Tensor::from_fn(&[1, 4, 4], |k| 1.0 + (k % 4) as f64);
        let edge = Tensor::from_fn(&[3, 4, 4], |k| if k % 4 >= 2 { 1.0 } else { 0.0 });
        let on_flat = smoothness_loss(&ramp, &flat).unwrap();
        let on_edge = smoothness_loss(&ramp, &edge).unwrap();
        assert!(on_edge < on_flat);
        // d* = (1+j)/2.5, |∂x d*| = 0.4 everywhere, no y variation
        assert!((on_flat - 0.4).abs() < 1e-15);
        let scaled = smoothness_loss(&ramp.scale(7.5), &edge).unwrap();
        assert!((scaled - on_edge).abs() < 1e-15);
        assert!(smoothness_loss(&Tensor::zeros(&[1, 4, 4]), &flat).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig { gamma: 1.5, ..Default::default() }.validate().is_err());
        assert!(LossConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig::with_scales(0).validate().is_err());
        LossConfig::default().validate().unwrap();
    }
}
