//! Differentiable tensor operations.
//!
//! Every forward map `op` has a matching `op_vjp` that takes the forward
//! inputs (or outputs, where cheaper) and an output cotangent and returns the
//! input cotangents. The model composes these by hand; there is no tape.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor added to norms in [`normalize`].
pub const EPS_NORM: f64 = 1e-12;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Matrix products and layout

/// `out[i] = a[i] · b[i]` for `a: [b,m,k]`, `b: [b,k,n]`.
pub fn batched_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, m, k) = a.dims3("batched_matmul")?;
    let (bb, k2, n) = b.dims3("batched_matmul")?;
    if ba != bb || k != k2 {
        return Err(Error::shape("batched_matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; ba * m * n];
    for bi in 0..ba {
        let ao = bi * m * k;
        let bo = bi * k * n;
        let oo = bi * m * n;
        for r in 0..m {
            let row = &mut out[oo + r * n..oo + (r + 1) * n];
            for t in 0..k {
                let av = ad[ao + r * k + t];
                let brow = &bd[bo + t * n..bo + (t + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![ba, m, n], out))
}

pub fn batched_matmul_vjp(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let ga = batched_matmul(g, &transpose_last2(b)?)?;
    let gb = batched_matmul(&transpose_last2(a)?, g)?;
    Ok((ga, gb))
}

/// `[b,m,n] -> [b,n,m]`. Its own VJP.
pub fn transpose_last2(x: &Tensor) -> Result<Tensor> {
    let (b, m, n) = x.dims3("transpose_last2")?;
    let d = x.data();
    let mut out = vec![0.0; b * m * n];
    for bi in 0..b {
        for r in 0..m {
            for c in 0..n {
                out[(bi * n + c) * m + r] = d[(bi * m + r) * n + c];
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, n, m], out))
}

/// `[a,b,c] -> [b,a,c]`. Its own VJP. Converts between `[c,h,w]` and `[h,c,w]`.
pub fn swap_leading(x: &Tensor) -> Result<Tensor> {
    let (a, b, c) = x.dims3("swap_leading")?;
    let d = x.data();
    let mut out = vec![0.0; a * b * c];
    for i in 0..a {
        for j in 0..b {
            let src = (i * b + j) * c;
            let dst = (j * a + i) * c;
            out[dst..dst + c].copy_from_slice(&d[src..src + c]);
        }
    }
    Ok(Tensor::from_parts(vec![b, a, c], out))
}

/// Channel concatenation of `[ca,h,w]` and `[cb,h,w]`.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, h, w) = a.dims3("concat_channels")?;
    let (cb, h2, w2) = b.dims3("concat_channels")?;
    if h != h2 || w != w2 {
        return Err(Error::shape("concat_channels", a.shape(), b.shape()));
    }
    let mut data = Vec::with_capacity((ca + cb) * h * w);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Ok(Tensor::from_parts(vec![ca + cb, h, w], data))
}

/// VJP of [`concat_channels`]: split the cotangent after `ca` channels.
pub fn split_channels(g: &Tensor, ca: usize) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = g.dims3("split_channels")?;
    if ca == 0 || ca >= c {
        return Err(Error::InvalidArgument(format!(
            "split_channels: cannot split {c} channels at {ca}"
        )));
    }
    let cut = ca * h * w;
    Ok((
        Tensor::from_parts(vec![ca, h, w], g.data()[..cut].to_vec()),
        Tensor::from_parts(vec![c - ca, h, w], g.data()[cut..].to_vec()),
    ))
}

// ---------------------------------------------------------------------------
// Softmax

/// Softmax over the last axis with max subtraction.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let n = *x.shape().last().expect("tensor has at least one axis");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// VJP of [`softmax_lastdim`] given its output `y`.
pub fn softmax_lastdim_vjp(y: &Tensor, g: &Tensor) -> Result<Tensor> {
    same_shape("softmax_lastdim_vjp", y, g)?;
    let n = *y.shape().last().expect("tensor has at least one axis");
    let mut out = vec![0.0; y.len()];
    for ((o, yr), gr) in out.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    Ok(Tensor::from_parts(y.shape().to_vec(), out))
}

// ---------------------------------------------------------------------------
// 1x1 convolutions

/// `x` viewed as `[batch, cin, n]`, mapped per position by `w: [cout,cin]`.
fn channel_map(x: &[f64], batch: usize, cin: usize, n: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let cout = w.shape()[0];
    let (wd, bd) = (w.data(), b.data());
    let mut out = vec![0.0; batch * cout * n];
    for bt in 0..batch {
        for o in 0..cout {
            let dst = &mut out[(bt * cout + o) * n..(bt * cout + o + 1) * n];
            dst.iter_mut().for_each(|v| *v = bd[o]);
            for c in 0..cin {
                let wv = wd[o * cin + c];
                let src = &x[(bt * cin + c) * n..(bt * cin + c + 1) * n];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
    }
    out
}

fn channel_map_vjp(
    x: &[f64],
    batch: usize,
    cin: usize,
    n: usize,
    w: &Tensor,
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cout = w.shape()[0];
    let wd = w.data();
    let mut gx = vec![0.0; batch * cin * n];
    let mut gw = vec![0.0; cout * cin];
    let mut gb = vec![0.0; cout];
    for bt in 0..batch {
        for o in 0..cout {
            let go = &g[(bt * cout + o) * n..(bt * cout + o + 1) * n];
            gb[o] += go.iter().sum::<f64>();
            for c in 0..cin {
                let xs = &x[(bt * cin + c) * n..(bt * cin + c + 1) * n];
                gw[o * cin + c] += xs.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                let wv = wd[o * cin + c];
                let gxs = &mut gx[(bt * cin + c) * n..(bt * cin + c + 1) * n];
                for (d, &gv) in gxs.iter_mut().zip(go) {
                    *d += wv * gv;
                }
            }
        }
    }
    (gx, gw, gb)
}

fn check_linear(op: &'static str, cin: usize, w: &Tensor, b: &Tensor) -> Result<usize> {
    let (cout, wcin) = w.dims2(op)?;
    if wcin != cin {
        return Err(Error::shape(op, &[cin], w.shape()));
    }
    if b.shape() != [cout] {
        return Err(Error::shape(op, w.shape(), b.shape()));
    }
    Ok(cout)
}

/// Per-pixel channel map: `out[o,i,j] = Σ_c w[o,c]·x[c,i,j] + b[o]`.
pub fn conv1x1(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (cin, h, wd) = x.dims3("conv1x1")?;
    let cout = check_linear("conv1x1", cin, w, b)?;
    let out = channel_map(x.data(), 1, cin, h * wd, w, b);
    Ok(Tensor::from_parts(vec![cout, h, wd], out))
}

pub fn conv1x1_vjp(x: &Tensor, w: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (cin, h, wd) = x.dims3("conv1x1_vjp")?;
    let cout = w.shape()[0];
    if g.shape() != [cout, h, wd] {
        return Err(Error::shape("conv1x1_vjp", g.shape(), &[cout, h, wd]));
    }
    let (gx, gw, gb) = channel_map_vjp(x.data(), 1, cin, h * wd, w, g.data());
    Ok((
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(w.shape().to_vec(), gw),
        Tensor::from_parts(vec![cout], gb),
    ))
}

/// The same channel map on the row-major attention layout `[h,c,w]`.
pub fn conv1x1_rows(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (h, cin, wd) = x.dims3("conv1x1_rows")?;
    let cout = check_linear("conv1x1_rows", cin, w, b)?;
    let out = channel_map(x.data(), h, cin, wd, w, b);
    Ok(Tensor::from_parts(vec![h, cout, wd], out))
}

pub fn conv1x1_rows_vjp(x: &Tensor, w: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (h, cin, wd) = x.dims3("conv1x1_rows_vjp")?;
    let cout = w.shape()[0];
    if g.shape() != [h, cout, wd] {
        return Err(Error::shape("conv1x1_rows_vjp", g.shape(), &[h, cout, wd]));
    }
    let (gx, gw, gb) = channel_map_vjp(x.data(), h, cin, wd, w, g.data());
    Ok((
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(w.shape().to_vec(), gw),
        Tensor::from_parts(vec![cout], gb),
    ))
}

// ---------------------------------------------------------------------------
// Normalization

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Euclidean,
    L1,
}

fn axis_layout(x: &Tensor, axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= x.ndim() {
        return Err(Error::InvalidArgument(format!(
            "normalize: axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let outer = x.shape()[..axis].iter().product();
    let n = x.shape()[axis];
    let inner = x.shape()[axis + 1..].iter().product();
    Ok((outer, n, inner))
}

/// Normalizes every fiber along `axis`. Zero fibers map to the uniform vector
/// (`1/√n` for Euclidean, `1/n` for L1); otherwise the norm plus
/// [`EPS_NORM`] divides. L1 mode requires nonnegative input.
pub fn normalize(x: &Tensor, axis: usize, mode: NormMode) -> Result<Tensor> {
    let (outer, n, inner) = axis_layout(x, axis)?;
    if mode == NormMode::L1 && x.data().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument(
            "normalize: l1 mode requires nonnegative input".into(),
        ));
    }
    let xd = x.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let norm = match mode {
                NormMode::Euclidean => (0..n).map(|k| xd[idx(k)].powi(2)).sum::<f64>().sqrt(),
                NormMode::L1 => (0..n).map(|k| xd[idx(k)]).sum::<f64>(),
            };
            if norm == 0.0 {
                let u = match mode {
                    NormMode::Euclidean => 1.0 / (n as f64).sqrt(),
                    NormMode::L1 => 1.0 / n as f64,
                };
                (0..n).for_each(|k| out[idx(k)] = u);
            } else {
                let d = norm + EPS_NORM;
                (0..n).for_each(|k| out[idx(k)] = xd[idx(k)] / d);
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// VJP of [`normalize`]. Zero fibers (uniform output) have zero gradient.
pub fn normalize_vjp(x: &Tensor, axis: usize, mode: NormMode, g: &Tensor) -> Result<Tensor> {
    same_shape("normalize_vjp", x, g)?;
    let (outer, n, inner) = axis_layout(x, axis)?;
    let (xd, gd) = (x.data(), g.data());
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let gx: f64 = (0..n).map(|k| gd[idx(k)] * xd[idx(k)]).sum();
            match mode {
                NormMode::Euclidean => {
                    let norm = (0..n).map(|k| xd[idx(k)].powi(2)).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let d = norm + EPS_NORM;
                    for k in 0..n {
                        out[idx(k)] = gd[idx(k)] / d - xd[idx(k)] * gx / (norm * d * d);
                    }
                }
                NormMode::L1 => {
                    let s: f64 = (0..n).map(|k| xd[idx(k)]).sum();
                    if s == 0.0 {
                        continue;
                    }
                    let d = s + EPS_NORM;
                    for k in 0..n {
                        out[idx(k)] = gd[idx(k)] / d - gx / (d * d);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

// ---------------------------------------------------------------------------
// Elementwise

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_vjp(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    same_shape("relu_vjp", x, g)?;
    let d = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), d))
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// VJP of [`sigmoid`] given its output `y`.
pub fn sigmoid_vjp(y: &Tensor, g: &Tensor) -> Result<Tensor> {
    same_shape("sigmoid_vjp", y, g)?;
    let d = y
        .data()
        .iter()
        .zip(g.data())
        .map(|(&s, &gv)| gv * s * (1.0 - s))
        .collect();
    Ok(Tensor::from_parts(y.shape().to_vec(), d))
}

pub fn exp(x: &Tensor) -> Tensor {
    x.map(f64::exp)
}

/// VJP of [`exp`] given its output `y`.
pub fn exp_vjp(y: &Tensor, g: &Tensor) -> Result<Tensor> {
    mul(y, g)
}

pub fn add(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape("add", x, y)?;
    let d = x.data().iter().zip(y.data()).map(|(a, b)| a + b).collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), d))
}

pub fn mul(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape("mul", x, y)?;
    let d = x.data().iter().zip(y.data()).map(|(a, b)| a * b).collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), d))
}

pub fn mul_vjp(x: &Tensor, y: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((mul(g, y)?, mul(g, x)?))
}

/// Mean of all entries as a one-element tensor.
pub fn mean(x: &Tensor) -> Tensor {
    Tensor::scalar(x.sum() / x.len() as f64)
}

pub fn mean_vjp(shape: &[usize], g: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::full(shape, g / n as f64)
}

// ---------------------------------------------------------------------------
// Bilinear upsampling

/// Source taps for half-pixel-centre resampling of `n` samples by `factor`.
fn upsample_taps(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling of `[c,h,w]` by an integer factor, sampling the input at
/// `(o + 0.5)/f − 0.5` and clamping at the borders.
pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3("upsample_bilinear")?;
    if factor == 0 {
        return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let (ho, wo) = (h * factor, w * factor);
    let rows = upsample_taps(h, factor);
    let cols = upsample_taps(w, factor);
    let xd = x.data();
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let src = &xd[ch * h * w..(ch + 1) * h * w];
        for (oi, &(r0, r1, ty)) in rows.iter().enumerate() {
            for (oj, &(c0, c1, tx)) in cols.iter().enumerate() {
                let top = src[r0 * w + c0] * (1.0 - tx) + src[r0 * w + c1] * tx;
                let bot = src[r1 * w + c0] * (1.0 - tx) + src[r1 * w + c1] * tx;
                out[(ch * ho + oi) * wo + oj] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, ho, wo], out))
}

pub fn upsample_bilinear_vjp(in_shape: &[usize], factor: usize, g: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match in_shape {
        &[c, h, w] => (c, h, w),
        _ => return Err(Error::InvalidArgument("upsample_bilinear_vjp: rank-3 shape".into())),
    };
    if factor == 1 {
        return Ok(g.clone());
    }
    let (ho, wo) = (h * factor, w * factor);
    if g.shape() != [c, ho, wo] {
        return Err(Error::shape("upsample_bilinear_vjp", g.shape(), &[c, ho, wo]));
    }
    let rows = upsample_taps(h, factor);
    let cols = upsample_taps(w, factor);
    let gd = g.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for (oi, &(r0, r1, ty)) in rows.iter().enumerate() {
            for (oj, &(c0, c1, tx)) in cols.iter().enumerate() {
                let gv = gd[(ch * ho + oi) * wo + oj];
                dst[r0 * w + c0] += gv * (1.0 - ty) * (1.0 - tx);
                dst[r0 * w + c1] += gv * (1.0 - ty) * tx;
                dst[r1 * w + c0] += gv * ty * (1.0 - tx);
                dst[r1 * w + c1] += gv * ty * tx;
            }
        }
    }
    Ok(Tensor::from_parts(in_shape.to_vec(), out))
}

// ---------------------------------------------------------------------------
// Spatial convolution

/// Geometry of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub const SAME3: ConvSpec = ConvSpec { kernel: 3, stride: 1, pad: 1 };
    pub const DOWN3: ConvSpec = ConvSpec { kernel: 3, stride: 2, pad: 1 };
    pub const POINT: ConvSpec = ConvSpec { kernel: 1, stride: 1, pad: 0 };
    pub const DOWN1: ConvSpec = ConvSpec { kernel: 1, stride: 2, pad: 0 };

    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

fn conv2d_check(x: &Tensor, w: &Tensor, spec: ConvSpec) -> Result<(usize, usize, usize, usize)> {
    let (cin, h, wd) = x.dims3("conv2d")?;
    match w.shape() {
        &[cout, wc, kh, kw] if wc == cin && kh == spec.kernel && kw == spec.kernel => {
            if h + 2 * spec.pad < spec.kernel || wd + 2 * spec.pad < spec.kernel {
                return Err(Error::shape("conv2d", x.shape(), w.shape()));
            }
            Ok((cout, cin, h, wd))
        }
        _ => Err(Error::shape("conv2d", x.shape(), w.shape())),
    }
}

/// Zero-padded 2-D convolution of `x: [cin,h,w]` by `w: [cout,cin,k,k]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    let (cout, cin, h, wd) = conv2d_check(x, w, spec)?;
    if b.shape() != [cout] {
        return Err(Error::shape("conv2d", w.shape(), b.shape()));
    }
    let (ho, wo) = (spec.out_size(h), spec.out_size(wd));
    let k = spec.kernel;
    let (xd, wdt) = (x.data(), w.data());
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        let dst = &mut out[o * ho * wo..(o + 1) * ho * wo];
        dst.iter_mut().for_each(|v| *v = b.data()[o]);
        for c in 0..cin {
            let src = &xd[c * h * wd..(c + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wdt[((o * cin + c) * k + ky) * k + kx];
                    for oy in 0..ho {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * wd..(iy as usize + 1) * wd];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if ix >= 0 && ix < wd as isize {
                                *d += wv * srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![cout, ho, wo], out))
}

pub fn conv2d_vjp(
    x: &Tensor,
    w: &Tensor,
    spec: ConvSpec,
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (cout, cin, h, wd) = conv2d_check(x, w, spec)?;
    let (ho, wo) = (spec.out_size(h), spec.out_size(wd));
    if g.shape() != [cout, ho, wo] {
        return Err(Error::shape("conv2d_vjp", g.shape(), &[cout, ho, wo]));
    }
    let k = spec.kernel;
    let (xd, wdt, gd) = (x.data(), w.data(), g.data());
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; cout];
    for o in 0..cout {
        let go = &gd[o * ho * wo..(o + 1) * ho * wo];
        gb[o] = go.iter().sum();
        for c in 0..cin {
            let src = &xd[c * h * wd..(c + 1) * h * wd];
            let gsrc = &mut gx[c * h * wd..(c + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let wi = ((o * cin + c) * k + ky) * k + kx;
                    let wv = wdt[wi];
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = iy as usize * wd;
                        for ox in 0..wo {
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if ix >= 0 && ix < wd as isize {
                                let gv = go[oy * wo + ox];
                                acc += gv * src[base + ix as usize];
                                gsrc[base + ix as usize] += wv * gv;
                            }
                        }
                    }
                    gw[wi] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(w.shape().to_vec(), gw),
        Tensor::from_parts(vec![cout], gb),
    ))
}
