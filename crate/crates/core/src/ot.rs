//! Optimal-transport retrieval between two feature maps.
//!
//! For every epipolar row the matching matrix is the entropic transport plan
//! between the two inputs' learned pixel masses under the cost
//! `exp(1 − cos(x̂¹_j, x̂²_k))`. The solver runs log-domain Sinkhorn, scaling the
//! column marginal last so it holds exactly on exit, and differentiates by
//! replaying the executed iterations in reverse.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{join, Linear, Parameters};
use crate::ops::{self, NormMode};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Tolerance on `Σ_j U[i,j] = 1` accepted by the solver.
const MARGINAL_SUM_TOL: f64 = 1e-12;

/// Largest width accepted by [`exact_transport_oracle`].
pub const ORACLE_MAX_WIDTH: usize = 6;

/// Weights of the cost convolutions (C′₁, C′₂) and the two mass heads (Θ).
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalParams {
    pub conv_sim_1: Linear,
    pub conv_sim_2: Linear,
    pub conv_mass_1: Linear,
    pub conv_mass_2: Linear,
}

impl RetrievalParams {
    pub fn init(c: usize, rng: &mut Rng) -> Self {
        Self {
            conv_sim_1: Linear::init(c, c, rng),
            conv_sim_2: Linear::init(c, c, rng),
            conv_mass_1: Linear::init(c, 1, rng),
            conv_mass_2: Linear::init(c, 1, rng),
        }
    }

    pub fn param_count(c: usize) -> usize {
        2 * Linear::param_count(c, c) + Self::mass_param_count(c)
    }

    /// Parameters of the two mass convolutions alone.
    pub fn mass_param_count(c: usize) -> usize {
        2 * Linear::param_count(c, 1)
    }

    pub fn channels(&self) -> usize {
        self.conv_sim_1.in_channels()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            conv_sim_1: self.conv_sim_1.zeros_like(),
            conv_sim_2: self.conv_sim_2.zeros_like(),
            conv_mass_1: self.conv_mass_1.zeros_like(),
            conv_mass_2: self.conv_mass_2.zeros_like(),
        }
    }

    pub fn accumulate(&mut self, g: &RetrievalParams) -> Result<()> {
        self.conv_sim_1.accumulate(&g.conv_sim_1)?;
        self.conv_sim_2.accumulate(&g.conv_sim_2)?;
        self.conv_mass_1.accumulate(&g.conv_mass_1)?;
        self.conv_mass_2.accumulate(&g.conv_mass_2)
    }

    fn check(&self, c: usize) -> Result<()> {
        let ok = self.conv_sim_1.in_channels() == c
            && self.conv_sim_2.in_channels() == c
            && self.conv_sim_1.out_channels() == self.conv_sim_2.out_channels()
            && self.conv_mass_1.in_channels() == c
            && self.conv_mass_2.in_channels() == c
            && self.conv_mass_1.out_channels() == 1
            && self.conv_mass_2.out_channels() == 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "retrieval params do not fit {c}-channel features"
            )))
        }
    }
}

impl Parameters for RetrievalParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.conv_sim_1.visit(&join(prefix, "conv_sim_1"), out);
        self.conv_sim_2.visit(&join(prefix, "conv_sim_2"), out);
        self.conv_mass_1.visit(&join(prefix, "conv_mass_1"), out);
        self.conv_mass_2.visit(&join(prefix, "conv_mass_2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.conv_sim_1.visit_mut(&join(prefix, "conv_sim_1"), out);
        self.conv_sim_2.visit_mut(&join(prefix, "conv_sim_2"), out);
        self.conv_mass_1.visit_mut(&join(prefix, "conv_mass_1"), out);
        self.conv_mass_2.visit_mut(&join(prefix, "conv_mass_2"), out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkhornConfig {
    /// Entropic regularization strength.
    pub epsilon: f64,
    pub max_iters: usize,
    /// Row-marginal residual at which iteration stops.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

impl SinkhornConfig {
    /// A configuration that always runs exactly `iters` iterations.
    pub fn fixed(epsilon: f64, iters: usize) -> Self {
        Self {
            epsilon,
            max_iters: iters,
            tol: f64::MIN_POSITIVE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sinkhorn epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig(format!("sinkhorn tol must be > 0, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("sinkhorn max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-row pixel masses `U: [h,w]`, each row nonnegative and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    values: Tensor,
}

impl Marginals {
    pub fn new(values: Tensor) -> Result<Self> {
        let (_, w) = values.dims2("marginals")?;
        for (i, row) in values.data().chunks(w).enumerate() {
            if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "marginal row {i} has negative or non-finite mass"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > MARGINAL_SUM_TOL {
                return Err(Error::InvalidArgument(format!(
                    "marginal row {i} sums to {s}, expected 1"
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn uniform(h: usize, w: usize) -> Self {
        Self {
            values: Tensor::full(&[h, w], 1.0 / w as f64),
        }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Correspondence weights `M: [h,w,w]`; `M[i,j,k]` links position `j` of the
/// first input to position `k` of the second on row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingMatrix {
    values: Tensor,
}

impl MatchingMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        let (_, a, b) = values.dims3("matching matrix")?;
        if a != b {
            return Err(Error::InvalidArgument(format!(
                "matching matrix must be square per row, got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }

    /// `Σ_k M[i,j,k]` as `[h,w]`.
    pub fn row_sums(&self) -> Tensor {
        let s = self.values.shape();
        let (h, w) = (s[0], s[1]);
        let d = self
            .values
            .data()
            .chunks(w)
            .map(|r| r.iter().sum())
            .collect();
        Tensor::from_parts(vec![h, w], d)
    }

    /// `Σ_j M[i,j,k]` as `[h,w]`.
    pub fn col_sums(&self) -> Tensor {
        let s = self.values.shape();
        let (h, w) = (s[0], s[1]);
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                for k in 0..w {
                    out[i * w + k] += self.values.at3(i, j, k);
                }
            }
        }
        Tensor::from_parts(vec![h, w], out)
    }

    /// Worst absolute violation of the row and column marginal constraints.
    pub fn marginal_residuals(&self, mu: &Marginals, nu: &Marginals) -> (f64, f64) {
        (
            self.row_sums().max_abs_diff(mu.values()),
            self.col_sums().max_abs_diff(nu.values()),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornReport {
    /// Executed iterations per row.
    pub iterations: Vec<usize>,
    /// Every row reached `tol` before `max_iters`.
    pub converged: bool,
    pub row_residual: f64,
    pub col_residual: f64,
}

/// Per-row log-sum-exp values of every executed half-iteration.
#[derive(Debug, Clone)]
struct RowTrace {
    r: Vec<Vec<f64>>,
    s: Vec<Vec<f64>>,
}

/// A solved transport problem, retaining what the reverse pass needs.
#[derive(Debug, Clone)]
pub struct Transport {
    pub plan: MatchingMatrix,
    pub report: SinkhornReport,
    epsilon: f64,
    rows: Vec<RowTrace>,
}

fn lse(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `r_j = LSE_k(K_jk + v_k)`
fn row_lse(k: &[f64], v: &[f64], n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| lse(k[j * n..(j + 1) * n].iter().zip(v).map(|(a, b)| a + b)))
        .collect()
}

/// `s_k = LSE_j(K_jk + u_j)`
fn col_lse(k: &[f64], u: &[f64], n: usize) -> Vec<f64> {
    (0..n)
        .map(|c| lse((0..n).map(|j| k[j * n + c] + u[j])))
        .collect()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn solve_row(
    kmat: &[f64],
    log_mu: &[f64],
    log_nu: &[f64],
    mu: &[f64],
    n: usize,
    cfg: &SinkhornConfig,
    row: usize,
) -> Result<(Vec<f64>, RowTrace, bool)> {
    let mut trace = RowTrace {
        r: Vec::new(),
        s: Vec::new(),
    };
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut converged = false;
    let residual = |u: &[f64], r: &[f64]| {
        (0..n)
            .map(|j| ((u[j] + r[j]).exp() - mu[j]).abs())
            .fold(0.0, f64::max)
    };
    for t in 0..cfg.max_iters {
        let r = row_lse(kmat, &v, n);
        if t > 0 && residual(&u, &r) <= cfg.tol {
            converged = true;
            break;
        }
        u = sub(log_mu, &r);
        let s = col_lse(kmat, &u, n);
        v = sub(log_nu, &s);
        if r.iter().chain(&s).any(|x| x.is_nan()) {
            return Err(Error::Divergence { row });
        }
        trace.r.push(r);
        trace.s.push(s);
    }
    if !converged {
        let r = row_lse(kmat, &v, n);
        converged = residual(&u, &r) <= cfg.tol;
    }
    let mut plan = vec![0.0; n * n];
    for j in 0..n {
        for k in 0..n {
            plan[j * n + k] = (u[j] + kmat[j * n + k] + v[k]).exp();
        }
    }
    if plan.iter().any(|x| !x.is_finite()) {
        return Err(Error::Divergence { row });
    }
    Ok((plan, trace, converged))
}

/// Entropic transport plan per row: `min ⟨M, C⟩ + ε Σ M log M` subject to
/// `Σ_k M[i,j,k] = μ[i,j]` and `Σ_j M[i,j,k] = ν[i,k]`.
pub fn sinkhorn_solve(
    cost: &Tensor,
    mu: &Marginals,
    nu: &Marginals,
    cfg: &SinkhornConfig,
) -> Result<Transport> {
    cfg.validate()?;
    let (h, n, n2) = cost.dims3("sinkhorn_solve")?;
    if n != n2 || mu.values().shape() != [h, n] || nu.values().shape() != [h, n] {
        return Err(Error::shape("sinkhorn_solve", cost.shape(), mu.values().shape()));
    }
    if !cost.is_finite() {
        return Err(Error::InvalidArgument("sinkhorn_solve: cost must be finite".into()));
    }
    let mut plan = Vec::with_capacity(h * n * n);
    let mut rows = Vec::with_capacity(h);
    let mut iterations = Vec::with_capacity(h);
    let mut all_converged = true;
    for i in 0..h {
        let kmat: Vec<f64> = cost.data()[i * n * n..(i + 1) * n * n]
            .iter()
            .map(|c| -c / cfg.epsilon)
            .collect();
        let mu_row = &mu.values().data()[i * n..(i + 1) * n];
        let nu_row = &nu.values().data()[i * n..(i + 1) * n];
        let log_mu: Vec<f64> = mu_row.iter().map(|m| m.ln()).collect();
        let log_nu: Vec<f64> = nu_row.iter().map(|m| m.ln()).collect();
        let (p, trace, converged) = solve_row(&kmat, &log_mu, &log_nu, mu_row, n, cfg, i)?;
        plan.extend(p);
        iterations.push(trace.r.len());
        rows.push(trace);
        all_converged &= converged;
    }
    let plan = MatchingMatrix::new(Tensor::from_parts(vec![h, n, n], plan))?;
    let (row_residual, col_residual) = plan.marginal_residuals(mu, nu);
    Ok(Transport {
        plan,
        report: SinkhornReport {
            iterations,
            converged: all_converged,
            row_residual,
            col_residual,
        },
        epsilon: cfg.epsilon,
        rows,
    })
}

impl Transport {
    /// Reverse pass through the executed iterations: cotangents of
    /// `(cost, μ, ν)` for the plan cotangent `g`. Zero-mass entries get zero
    /// gradient.
    pub fn vjp(
        &self,
        cost: &Tensor,
        mu: &Marginals,
        nu: &Marginals,
        g: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let (h, n, _) = cost.dims3("sinkhorn_vjp")?;
        if g.shape() != cost.shape() || self.plan.values().shape() != cost.shape() {
            return Err(Error::shape("sinkhorn_vjp", g.shape(), cost.shape()));
        }
        let eps = self.epsilon;
        let mut gcost = vec![0.0; h * n * n];
        let mut gmu = vec![0.0; h * n];
        let mut gnu = vec![0.0; h * n];
        for i in 0..h {
            let span = i * n * n..(i + 1) * n * n;
            let kmat: Vec<f64> = cost.data()[span.clone()].iter().map(|c| -c / eps).collect();
            let plan = &self.plan.values().data()[span.clone()];
            let gp = &g.data()[span.clone()];
            let mu_row = &mu.values().data()[i * n..(i + 1) * n];
            let nu_row = &nu.values().data()[i * n..(i + 1) * n];
            let log_mu: Vec<f64> = mu_row.iter().map(|m| m.ln()).collect();
            let log_nu: Vec<f64> = nu_row.iter().map(|m| m.ln()).collect();
            let trace = &self.rows[i];

            let mut gk: Vec<f64> = gp.iter().zip(plan).map(|(a, b)| a * b).collect();
            let mut gu = vec![0.0; n];
            let mut gv = vec![0.0; n];
            for j in 0..n {
                for k in 0..n {
                    gu[j] += gk[j * n + k];
                    gv[k] += gk[j * n + k];
                }
            }
            let mut ga = vec![0.0; n];
            let mut gb = vec![0.0; n];
            for t in (0..trace.r.len()).rev() {
                let r = &trace.r[t];
                let s = &trace.s[t];
                let u = sub(&log_mu, r);
                // v_t = log ν − s_t,  s_t[k] = LSE_j(K_jk + u_t[j])
                for k in 0..n {
                    gb[k] += gv[k];
                    let gs = -gv[k];
                    if gs == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        let p = (kmat[j * n + k] + u[j] - s[k]).exp();
                        gk[j * n + k] += gs * p;
                        gu[j] += gs * p;
                    }
                }
                // u_t = log μ − r_t,  r_t[j] = LSE_k(K_jk + v_{t−1}[k])
                let v_prev = if t > 0 {
                    sub(&log_nu, &trace.s[t - 1])
                } else {
                    vec![0.0; n]
                };
                gv = vec![0.0; n];
                for j in 0..n {
                    ga[j] += gu[j];
                    let gr = -gu[j];
                    if gr == 0.0 {
                        continue;
                    }
                    for k in 0..n {
                        let q = (kmat[j * n + k] + v_prev[k] - r[j]).exp();
                        gk[j * n + k] += gr * q;
                        gv[k] += gr * q;
                    }
                }
                gu = vec![0.0; n];
            }
            for (dst, v) in gcost[span].iter_mut().zip(&gk) {
                *dst = -v / eps;
            }
            for j in 0..n {
                gmu[i * n + j] = if mu_row[j] > 0.0 { ga[j] / mu_row[j] } else { 0.0 };
                gnu[i * n + j] = if nu_row[j] > 0.0 { gb[j] / nu_row[j] } else { 0.0 };
            }
        }
        Ok((
            Tensor::from_parts(vec![h, n, n], gcost),
            Tensor::from_parts(vec![h, n], gmu),
            Tensor::from_parts(vec![h, n], gnu),
        ))
    }
}

// ---------------------------------------------------------------------------
// Cost and mass

#[derive(Debug, Clone)]
pub struct CostTrace {
    z1: Tensor,
    z2: Tensor,
    a_t: Tensor,
    b: Tensor,
    pub cost: Tensor,
}

/// `C[i,j,k] = exp(1 − ⟨x̂¹_{ij}, x̂²_{ik}⟩)` with `x̂` the conv output
/// normalized to unit length over channels.
pub fn build_cost(x1: &Tensor, x2: &Tensor, params: &RetrievalParams) -> Result<Tensor> {
    Ok(build_cost_traced(x1, x2, params)?.cost)
}

pub fn build_cost_traced(x1: &Tensor, x2: &Tensor, params: &RetrievalParams) -> Result<CostTrace> {
    if x1.shape() != x2.shape() {
        return Err(Error::shape("build_cost", x1.shape(), x2.shape()));
    }
    let (_, c, _) = x1.dims3("build_cost")?;
    params.check(c)?;
    let z1 = params.conv_sim_1.rows(x1)?;
    let z2 = params.conv_sim_2.rows(x2)?;
    let a_t = ops::transpose_last2(&ops::normalize(&z1, 1, NormMode::Euclidean)?)?;
    let b = ops::normalize(&z2, 1, NormMode::Euclidean)?;
    let sim = ops::batched_matmul(&a_t, &b)?;
    let cost = sim.map(|s| (1.0 - s).exp());
    Ok(CostTrace { z1, z2, a_t, b, cost })
}

impl CostTrace {
    pub fn vjp(
        &self,
        x1: &Tensor,
        x2: &Tensor,
        params: &RetrievalParams,
        g: &Tensor,
    ) -> Result<(Tensor, Tensor, Linear, Linear)> {
        let gsim = ops::mul(g, &self.cost)?.scale(-1.0);
        let (ga_t, gb) = ops::batched_matmul_vjp(&self.a_t, &self.b, &gsim)?;
        let ga = ops::transpose_last2(&ga_t)?;
        let gz1 = ops::normalize_vjp(&self.z1, 1, NormMode::Euclidean, &ga)?;
        let gz2 = ops::normalize_vjp(&self.z2, 1, NormMode::Euclidean, &gb)?;
        let (gx1, gc1) = params.conv_sim_1.rows_vjp(x1, &gz1)?;
        let (gx2, gc2) = params.conv_sim_2.rows_vjp(x2, &gz2)?;
        Ok((gx1, gx2, gc1, gc2))
    }
}

#[derive(Debug, Clone)]
pub struct MassTrace {
    z: Tensor,
    r: Tensor,
    pub mass: Marginals,
}

/// `U = l1-normalize(relu(conv(X)))` along each row; an all-zero row becomes uniform.
pub fn compute_mass(x: &Tensor, conv_mass: &Linear) -> Result<Marginals> {
    Ok(compute_mass_traced(x, conv_mass)?.mass)
}

/// Divides each row by its exact sum. The input is nonnegative, so no
/// entry can exceed the divisor and the rows sum to one up to rounding.
fn row_l1(r: &[f64], w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(r.len());
    for row in r.chunks(w) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            out.extend(row.iter().map(|v| v / s));
        } else {
            out.extend(std::iter::repeat_n(1.0 / w as f64, w));
        }
    }
    out
}

/// `g_r = (g − ⟨g, u⟩) / s` per row; zero for a row that fell back to uniform.
fn row_l1_vjp(r: &[f64], u: &[f64], g: &[f64], w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(r.len());
    for ((row, ur), gr) in r.chunks(w).zip(u.chunks(w)).zip(g.chunks(w)) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            let dot: f64 = ur.iter().zip(gr).map(|(a, b)| a * b).sum();
            out.extend(gr.iter().map(|gv| (gv - dot) / s));
        } else {
            out.extend(std::iter::repeat_n(0.0, w));
        }
    }
    out
}

pub fn compute_mass_traced(x: &Tensor, conv_mass: &Linear) -> Result<MassTrace> {
    let (h, c, w) = x.dims3("compute_mass")?;
    if conv_mass.in_channels() != c || conv_mass.out_channels() != 1 {
        return Err(Error::shape("compute_mass", x.shape(), conv_mass.weight.shape()));
    }
    let z = conv_mass.rows(x)?;
    let r = ops::relu(&z);
    let mass = Marginals::new(Tensor::new(vec![h, w], row_l1(r.data(), w))?)?;
    Ok(MassTrace { z, r, mass })
}

impl MassTrace {
    pub fn vjp(&self, x: &Tensor, conv_mass: &Linear, g: &Tensor) -> Result<(Tensor, Linear)> {
        if g.shape() != self.mass.values().shape() {
            return Err(Error::shape("compute_mass_vjp", g.shape(), self.mass.values().shape()));
        }
        let w = g.shape()[1];
        let gr = row_l1_vjp(self.r.data(), self.mass.values().data(), g.data(), w);
        let gr = Tensor::new(self.r.shape().to_vec(), gr)?;
        let gz = ops::relu_vjp(&self.z, &gr)?;
        conv_mass.rows_vjp(x, &gz)
    }
}

// ---------------------------------------------------------------------------
// Full retrieval

#[derive(Debug, Clone)]
pub struct OtTrace {
    cost: CostTrace,
    mass1: MassTrace,
    mass2: MassTrace,
    pub transport: Transport,
}

/// The OT retrieval `Φ_OT(X¹, X²)` on `[h,c,w]` inputs.
pub fn ot_retrieve(
    x1: &Tensor,
    x2: &Tensor,
    params: &RetrievalParams,
    cfg: &SinkhornConfig,
) -> Result<MatchingMatrix> {
    Ok(ot_retrieve_traced(x1, x2, params, cfg)?.transport.plan)
}

pub fn ot_retrieve_traced(
    x1: &Tensor,
    x2: &Tensor,
    params: &RetrievalParams,
    cfg: &SinkhornConfig,
) -> Result<OtTrace> {
    let cost = build_cost_traced(x1, x2, params)?;
    let mass1 = compute_mass_traced(x1, &params.conv_mass_1)?;
    let mass2 = compute_mass_traced(x2, &params.conv_mass_2)?;
    let transport = sinkhorn_solve(&cost.cost, &mass1.mass, &mass2.mass, cfg)?;
    Ok(OtTrace {
        cost,
        mass1,
        mass2,
        transport,
    })
}

impl OtTrace {
    pub fn plan(&self) -> &MatchingMatrix {
        &self.transport.plan
    }

    pub fn vjp(
        &self,
        x1: &Tensor,
        x2: &Tensor,
        params: &RetrievalParams,
        g: &Tensor,
    ) -> Result<(Tensor, Tensor, RetrievalParams)> {
        let (gcost, gmu, gnu) =
            self.transport
                .vjp(&self.cost.cost, &self.mass1.mass, &self.mass2.mass, g)?;
        let (mut gx1, mut gx2, conv_sim_1, conv_sim_2) = self.cost.vjp(x1, x2, params, &gcost)?;
        let (gx1m, conv_mass_1) = self.mass1.vjp(x1, &params.conv_mass_1, &gmu)?;
        let (gx2m, conv_mass_2) = self.mass2.vjp(x2, &params.conv_mass_2, &gnu)?;
        gx1.add_assign(&gx1m)?;
        gx2.add_assign(&gx2m)?;
        Ok((
            gx1,
            gx2,
            RetrievalParams {
                conv_sim_1,
                conv_sim_2,
                conv_mass_1,
                conv_mass_2,
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// Exact oracle

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Exact transport under uniform marginals by enumerating all `w!`
/// permutation plans (the vertices of the Birkhoff polytope). Returns the
/// first minimizing plan in lexicographic order and its objective `⟨P, C⟩`.
pub fn exact_transport_oracle(cost: &Tensor) -> Result<(Tensor, f64)> {
    let (w, w2) = cost.dims2("exact_transport_oracle")?;
    if w != w2 {
        return Err(Error::shape("exact_transport_oracle", cost.shape(), &[w, w]));
    }
    if w > ORACLE_MAX_WIDTH {
        return Err(Error::InvalidArgument(format!(
            "exact_transport_oracle: width {w} exceeds {ORACLE_MAX_WIDTH}"
        )));
    }
    let c = cost.data();
    let mass = 1.0 / w as f64;
    let (best, objective) = permutations(w)
        .into_iter()
        .map(|p| {
            let obj: f64 = p.iter().enumerate().map(|(j, &k)| c[j * w + k]).sum::<f64>() * mass;
            (p, obj)
        })
        .fold(None, |acc: Option<(Vec<usize>, f64)>, (p, obj)| match acc {
            Some((bp, bo)) if bo <= obj => Some((bp, bo)),
            _ => Some((p, obj)),
        })
        .expect("at least one permutation");
    let mut plan = Tensor::zeros(&[w, w]);
    for (j, &k) in best.iter().enumerate() {
        plan.data_mut()[j * w + k] = mass;
    }
    Ok((plan, objective))
}

/// Objective of every permutation plan, for exhaustive comparisons.
pub fn permutation_objectives(cost: &Tensor) -> Result<Vec<f64>> {
    let (w, _) = cost.dims2("permutation_objectives")?;
    if w > ORACLE_MAX_WIDTH {
        return Err(Error::InvalidArgument(format!("width {w} exceeds {ORACLE_MAX_WIDTH}")));
    }
    let c = cost.data();
    Ok(permutations(w)
        .into_iter()
        .map(|p| p.iter().enumerate().map(|(j, &k)| c[j * w + k]).sum::<f64>() / w as f64)
        .collect())
}
