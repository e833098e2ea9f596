//! The gradient-check battery run by the `gradcheck` subcommand and the tests.
//!
//! Each entry draws fresh inputs per seed, checks every input of the map with
//! central differences and keeps the worst relative error.

use crate::attention::{self, AttentionMode, AttentionParams};
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck_with, stack_flat, unstack_flat, FnOp, GradcheckOptions, STEP, TOLERANCE};
use crate::layers::{Linear, Parameters};
use crate::losses::{self, Camera, LossConfig, WarpDirection};
use crate::model::{self, DepthTransform, ModelConfig, ModelParams, MultiScaleOutput};
use crate::ops::{self, ConvSpec, NormMode};
use crate::ot::{self, Marginals, RetrievalParams, SinkhornConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Worst error of one entry over all of its seeds.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub worst: f64,
    pub seeds: u64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    /// Seeds for the elementary operations and blocks.
    pub seeds: u64,
    /// Seeds for the whole-model entries.
    pub model_seeds: u64,
    /// Entries checked per model input (evenly strided).
    pub model_entries: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seeds: 10,
            model_seeds: 2,
            model_entries: 400,
        }
    }
}

/// Sinkhorn settings for every check that runs through transport: a fixed
/// iteration count keeps the map smooth in its inputs.
pub fn sinkhorn_for_checks() -> SinkhornConfig {
    SinkhornConfig::fixed(0.05, 50)
}

fn opts(seed: u64, max_entries: Option<usize>) -> GradcheckOptions {
    GradcheckOptions {
        step: STEP,
        seed: 0x5eed ^ seed,
        max_entries,
    }
}

fn over_seeds(name: &str, seeds: u64, mut f: impl FnMut(u64) -> Result<f64>) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let e = f(seed).map_err(|e| Error::InvalidArgument(format!("{name} (seed {seed}): {e}")))?;
        worst = worst.max(e);
    }
    Ok(CheckResult {
        name: name.to_string(),
        worst,
        seeds,
    })
}

fn run<F, G>(name: &'static str, inputs: &[Tensor], seed: u64, max_entries: Option<usize>, forward: F, vjp: G) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
    G: Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>>,
{
    let op = FnOp { name, forward, vjp };
    gradcheck_with(&op, inputs, &opts(seed, max_entries))
}

/// Every trainable tensor of `p`, concatenated in visiting order.
pub fn flatten_params<P: Parameters>(p: &P) -> Tensor {
    let named = p.named();
    stack_flat(&named.iter().map(|(_, t)| *t).collect::<Vec<_>>())
}

/// A copy of `template` with its tensors replaced from `flat`.
pub fn unflatten_params<P: Parameters + Clone>(template: &P, flat: &Tensor) -> Result<P> {
    let mut p = template.clone();
    let mut off = 0;
    for (_, t) in p.named_mut() {
        let n = t.len();
        if off + n > flat.len() {
            return Err(Error::InvalidArgument("flat parameter vector too short".into()));
        }
        t.data_mut().copy_from_slice(&flat.data()[off..off + n]);
        off += n;
    }
    if off != flat.len() {
        return Err(Error::InvalidArgument("flat parameter vector too long".into()));
    }
    Ok(p)
}

fn linear_inputs(rng: &mut Rng, cin: usize, cout: usize) -> (Tensor, Tensor) {
    let l = Linear::init(cin, cout, rng);
    (l.weight, l.bias)
}

// ---------------------------------------------------------------------------
// Elementary operations

fn op_checks(n: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    out.push(over_seeds("batched_matmul", n, |s| {
        let mut r = Rng::new(s);
        let x = [r.tensor(&[2, 3, 4], -1.0, 1.0), r.tensor(&[2, 4, 5], -1.0, 1.0)];
        run("batched_matmul", &x, s, None, |x| ops::batched_matmul(&x[0], &x[1]), |x, g| {
            let (a, b) = ops::batched_matmul_vjp(&x[0], &x[1], g)?;
            Ok(vec![a, b])
        })
    })?);
    out.push(over_seeds("transpose_last2", n, |s| {
        let x = [Rng::new(s).tensor(&[2, 3, 4], -1.0, 1.0)];
        run("transpose_last2", &x, s, None, |x| ops::transpose_last2(&x[0]), |_, g| {
            Ok(vec![ops::transpose_last2(g)?])
        })
    })?);
    out.push(over_seeds("swap_leading", n, |s| {
        let x = [Rng::new(s).tensor(&[2, 3, 4], -1.0, 1.0)];
        run("swap_leading", &x, s, None, |x| ops::swap_leading(&x[0]), |_, g| {
            Ok(vec![ops::swap_leading(g)?])
        })
    })?);
    out.push(over_seeds("concat_channels", n, |s| {
        let mut r = Rng::new(s);
        let x = [r.tensor(&[2, 3, 4], -1.0, 1.0), r.tensor(&[3, 3, 4], -1.0, 1.0)];
        run("concat_channels", &x, s, None, |x| ops::concat_channels(&x[0], &x[1]), |_, g| {
            let (a, b) = ops::split_channels(g, 2)?;
            Ok(vec![a, b])
        })
    })?);
    out.push(over_seeds("softmax_lastdim", n, |s| {
        let x = [Rng::new(s).tensor(&[2, 3, 5], -3.0, 3.0)];
        run("softmax_lastdim", &x, s, None, |x| Ok(ops::softmax_lastdim(&x[0])), |x, g| {
            Ok(vec![ops::softmax_lastdim_vjp(&ops::softmax_lastdim(&x[0]), g)?])
        })
    })?);
    out.push(over_seeds("conv1x1", n, |s| {
        let mut r = Rng::new(s);
        let (w, b) = linear_inputs(&mut r, 3, 4);
        let x = [r.tensor(&[3, 2, 5], -1.0, 1.0), w, b];
        run("conv1x1", &x, s, None, |x| ops::conv1x1(&x[0], &x[1], &x[2]), |x, g| {
            let (a, b, c) = ops::conv1x1_vjp(&x[0], &x[1], g)?;
            Ok(vec![a, b, c])
        })
    })?);
    out.push(over_seeds("conv1x1_rows", n, |s| {
        let mut r = Rng::new(s);
        let (w, b) = linear_inputs(&mut r, 3, 4);
        let x = [r.tensor(&[2, 3, 5], -1.0, 1.0), w, b];
        run("conv1x1_rows", &x, s, None, |x| ops::conv1x1_rows(&x[0], &x[1], &x[2]), |x, g| {
            let (a, b, c) = ops::conv1x1_rows_vjp(&x[0], &x[1], g)?;
            Ok(vec![a, b, c])
        })
    })?);
    for (name, axis, mode, lo) in [
        ("normalize_euclidean", 1, NormMode::Euclidean, -1.0),
        ("normalize_l1", 2, NormMode::L1, 0.05),
    ] {
        out.push(over_seeds(name, n, |s| {
            let x = [Rng::new(s).tensor(&[2, 3, 4], lo, 1.0)];
            run(name, &x, s, None, |x| ops::normalize(&x[0], axis, mode), |x, g| {
                Ok(vec![ops::normalize_vjp(&x[0], axis, mode, g)?])
            })
        })?);
    }
    out.push(over_seeds("relu", n, |s| {
        let x = [Rng::new(s).tensor(&[3, 4, 5], -1.0, 1.0)];
        run("relu", &x, s, None, |x| Ok(ops::relu(&x[0])), |x, g| Ok(vec![ops::relu_vjp(&x[0], g)?]))
    })?);
    out.push(over_seeds("sigmoid", n, |s| {
        let x = [Rng::new(s).tensor(&[3, 4, 5], -4.0, 4.0)];
        run("sigmoid", &x, s, None, |x| Ok(ops::sigmoid(&x[0])), |x, g| {
            Ok(vec![ops::sigmoid_vjp(&ops::sigmoid(&x[0]), g)?])
        })
    })?);
    out.push(over_seeds("exp", n, |s| {
        let x = [Rng::new(s).tensor(&[3, 4, 5], -2.0, 2.0)];
        run("exp", &x, s, None, |x| Ok(ops::exp(&x[0])), |x, g| Ok(vec![ops::exp_vjp(&ops::exp(&x[0]), g)?]))
    })?);
    out.push(over_seeds("mul", n, |s| {
        let mut r = Rng::new(s);
        let x = [r.tensor(&[3, 4], -1.0, 1.0), r.tensor(&[3, 4], -1.0, 1.0)];
        run("mul", &x, s, None, |x| ops::mul(&x[0], &x[1]), |x, g| {
            let (a, b) = ops::mul_vjp(&x[0], &x[1], g)?;
            Ok(vec![a, b])
        })
    })?);
    out.push(over_seeds("mean", n, |s| {
        let x = [Rng::new(s).tensor(&[3, 4, 5], -1.0, 1.0)];
        run("mean", &x, s, None, |x| Ok(ops::mean(&x[0])), |x, g| {
            Ok(vec![ops::mean_vjp(x[0].shape(), g.item())])
        })
    })?);
    for factor in [2usize, 4] {
        let name = if factor == 2 { "upsample_bilinear_x2" } else { "upsample_bilinear_x4" };
        out.push(over_seeds(name, n, |s| {
            let x = [Rng::new(s).tensor(&[2, 3, 4], -1.0, 1.0)];
            run(name, &x, s, None, |x| ops::upsample_bilinear(&x[0], factor), |x, g| {
                Ok(vec![ops::upsample_bilinear_vjp(x[0].shape(), factor, g)?])
            })
        })?);
    }
    for (name, spec) in [
        ("conv2d_3x3", ConvSpec::SAME3),
        ("conv2d_3x3_stride2", ConvSpec::DOWN3),
        ("conv2d_1x1", ConvSpec::POINT),
        ("conv2d_1x1_stride2", ConvSpec::DOWN1),
    ] {
        out.push(over_seeds(name, n, |s| {
            let mut r = Rng::new(s);
            let k = spec.kernel;
            let x = [
                r.tensor(&[2, 5, 6], -1.0, 1.0),
                r.tensor(&[3, 2, k, k], -0.5, 0.5),
                r.tensor(&[3], -0.5, 0.5),
            ];
            run(name, &x, s, None, |x| ops::conv2d(&x[0], &x[1], &x[2], spec), |x, g| {
                let (a, b, c) = ops::conv2d_vjp(&x[0], &x[1], spec, g)?;
                Ok(vec![a, b, c])
            })
        })?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Transport

fn marginals(raw: &Tensor) -> Result<Marginals> {
    Marginals::new(ops::normalize(raw, 1, NormMode::L1)?)
}

fn ot_checks(n: u64) -> Result<Vec<CheckResult>> {
    let sk = sinkhorn_for_checks();
    let mut out = Vec::new();
    // cost in [1, e²] as produced by build_cost; μ, ν from positive raw weights
    out.push(over_seeds("sinkhorn", n, |s| {
        let mut r = Rng::new(s);
        let w = 3 + (s as usize % 2);
        let e2 = std::f64::consts::E.powi(2);
        let x = [
            r.tensor(&[2, w, w], 1.0, e2),
            r.tensor(&[2, w], 0.2, 1.0),
            r.tensor(&[2, w], 0.2, 1.0),
        ];
        let fwd = |x: &[Tensor]| -> Result<Tensor> {
            let t = ot::sinkhorn_solve(&x[0], &marginals(&x[1])?, &marginals(&x[2])?, &sk)?;
            Ok(t.plan.into_tensor())
        };
        run("sinkhorn", &x, s, None, fwd, |x, g| {
            let (mu, nu) = (marginals(&x[1])?, marginals(&x[2])?);
            let t = ot::sinkhorn_solve(&x[0], &mu, &nu, &sk)?;
            let (gc, gmu, gnu) = t.vjp(&x[0], &mu, &nu, g)?;
            Ok(vec![
                gc,
                ops::normalize_vjp(&x[1], 1, NormMode::L1, &gmu)?,
                ops::normalize_vjp(&x[2], 1, NormMode::L1, &gnu)?,
            ])
        })
    })?);

    let params_of = |r: &mut Rng, c| RetrievalParams::init(c, r);
    out.push(over_seeds("build_cost", n, |s| {
        let mut r = Rng::new(s);
        let tmpl = params_of(&mut r, 3);
        let x = [r.tensor(&[2, 3, 4], -1.0, 1.0), r.tensor(&[2, 3, 4], -1.0, 1.0), flatten_params(&tmpl)];
        let tm = &tmpl;
        run("build_cost", &x, s, None, move |x| ot::build_cost(&x[0], &x[1], &unflatten_params(tm, &x[2])?), move |x, g| {
            let p = unflatten_params(tm, &x[2])?;
            let tr = ot::build_cost_traced(&x[0], &x[1], &p)?;
            let (g1, g2, c1, c2) = tr.vjp(&x[0], &x[1], &p, g)?;
            let mut gp = p.zeros_like();
            gp.conv_sim_1 = c1;
            gp.conv_sim_2 = c2;
            Ok(vec![g1, g2, flatten_params(&gp)])
        })
    })?);
    out.push(over_seeds("compute_mass", n, |s| {
        let mut r = Rng::new(s);
        let (w, b) = linear_inputs(&mut r, 3, 1);
        // positive bias keeps most of the relu inputs away from the kink
        let b = b.map(|v| v.abs() + 0.3);
        let x = [r.tensor(&[2, 3, 5], -1.0, 1.0), w, b];
        let lin = |x: &[Tensor]| Linear {
            weight: x[1].clone(),
            bias: x[2].clone(),
        };
        run("compute_mass", &x, s, None, |x| Ok(ot::compute_mass(&x[0], &lin(x))?.values().clone()), |x, g| {
            let l = lin(x);
            let (gx, gl) = ot::compute_mass_traced(&x[0], &l)?.vjp(&x[0], &l, g)?;
            Ok(vec![gx, gl.weight, gl.bias])
        })
    })?);
    out.push(over_seeds("ot_retrieve", n, |s| {
        let mut r = Rng::new(s);
        let mut tmpl = params_of(&mut r, 4);
        tmpl.conv_mass_1.bias = tmpl.conv_mass_1.bias.map(|v| v.abs() + 0.3);
        tmpl.conv_mass_2.bias = tmpl.conv_mass_2.bias.map(|v| v.abs() + 0.3);
        let x = [r.tensor(&[1, 4, 4], -1.0, 1.0), r.tensor(&[1, 4, 4], -1.0, 1.0), flatten_params(&tmpl)];
        let (tm, sk) = (&tmpl, &sk);
        run(
            "ot_retrieve",
            &x,
            s,
            None,
            move |x| Ok(ot::ot_retrieve(&x[0], &x[1], &unflatten_params(tm, &x[2])?, sk)?.into_tensor()),
            move |x, g| {
                let p = unflatten_params(tm, &x[2])?;
                let (g1, g2, gp) = ot::ot_retrieve_traced(&x[0], &x[1], &p, sk)?.vjp(&x[0], &x[1], &p, g)?;
                Ok(vec![g1, g2, flatten_params(&gp)])
            },
        )
    })?);
    out.push(over_seeds("eg_retrieve", n, |s| {
        let mut r = Rng::new(s);
        let tmpl = AttentionParams::init_random(3, AttentionMode::EgMea, &mut r)?.retrieval;
        let x = [r.tensor(&[2, 3, 4], -1.0, 1.0), r.tensor(&[2, 3, 4], -1.0, 1.0), flatten_retrieval(&tmpl)];
        let tm = &tmpl;
        run(
            "eg_retrieve",
            &x,
            s,
            None,
            move |x| Ok(attention::retrieve(&x[0], &x[1], &unflatten_retrieval(tm, &x[2])?, &sk)?.into_tensor()),
            move |x, g| {
                let p = unflatten_retrieval(tm, &x[2])?;
                let (g1, g2, gp) = attention::retrieve_traced(&x[0], &x[1], &p, &sk)?.vjp(&x[0], &x[1], &p, g)?;
                Ok(vec![g1, g2, flatten_retrieval(&gp)])
            },
        )
    })?);
    Ok(out)
}

fn flatten_retrieval(r: &attention::Retrieval) -> Tensor {
    match r {
        attention::Retrieval::Eg { conv_q, conv_k } => stack_flat(&[&conv_q.weight, &conv_q.bias, &conv_k.weight, &conv_k.bias]),
        attention::Retrieval::Ot(p) => flatten_params(p),
    }
}

fn unflatten_retrieval(tmpl: &attention::Retrieval, flat: &Tensor) -> Result<attention::Retrieval> {
    match tmpl {
        attention::Retrieval::Eg { conv_q, conv_k } => {
            let parts = unstack_flat(
                flat,
                &[conv_q.weight.shape(), conv_q.bias.shape(), conv_k.weight.shape(), conv_k.bias.shape()],
            );
            let mut it = parts.into_iter();
            let mut next = || it.next().expect("four parts");
            Ok(attention::Retrieval::Eg {
                conv_q: Linear { weight: next(), bias: next() },
                conv_k: Linear { weight: next(), bias: next() },
            })
        }
        attention::Retrieval::Ot(p) => Ok(attention::Retrieval::Ot(unflatten_params(p, flat)?)),
    }
}

// ---------------------------------------------------------------------------
// Attention blocks

fn attention_checks(n: u64) -> Result<Vec<CheckResult>> {
    let sk = sinkhorn_for_checks();
    let mut out = Vec::new();
    for mode in AttentionMode::ALL_ENABLED {
        let name = format!("attention_block_{}", mode.as_str());
        out.push(over_seeds(&name, n, |s| {
            let mut r = Rng::new(s);
            let mut tmpl = AttentionParams::init_random(3, mode, &mut r)?;
            if let attention::Retrieval::Ot(p) = &mut tmpl.retrieval {
                p.conv_mass_1.bias = p.conv_mass_1.bias.map(|v| v.abs() + 0.3);
                p.conv_mass_2.bias = p.conv_mass_2.bias.map(|v| v.abs() + 0.3);
            }
            let x = [r.tensor(&[3, 2, 4], -1.0, 1.0), r.tensor(&[3, 2, 4], -1.0, 1.0), flatten_params(&tmpl)];
            let (tm, sk) = (&tmpl, &sk);
            run(
                "attention_block",
                &x,
                s,
                None,
                move |x| {
                    let (l, r) = attention::attention_block(&x[0], &x[1], &unflatten_params(tm, &x[2])?, sk)?;
                    Ok(stack_flat(&[&l, &r]))
                },
                move |x, g| {
                    let p = unflatten_params(tm, &x[2])?;
                    let (_, _, tr) = attention::attention_block_traced(&x[0], &x[1], &p, sk)?;
                    let gs = unstack_flat(g, &[x[0].shape(), x[1].shape()]);
                    let (gl, gr, gp) = tr.vjp(&p, &gs[0], &gs[1])?;
                    Ok(vec![gl, gr, flatten_params(&gp)])
                },
            )
        })?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Losses

fn loss_checks(n: u64) -> Result<Vec<CheckResult>> {
    let cfg = LossConfig::default();
    let mut out = Vec::new();
    for (name, dir) in [
        ("warp_left_from_right", WarpDirection::LeftFromRight),
        ("warp_right_from_left", WarpDirection::RightFromLeft),
    ] {
        out.push(over_seeds(name, n, |s| {
            let mut r = Rng::new(s);
            let x = [r.tensor(&[2, 3, 8], 0.0, 1.0), r.tensor(&[1, 3, 8], 0.1, 4.0)];
            run(name, &x, s, None, |x| losses::warp(&x[0], &x[1], dir), |x, g| {
                let (a, b) = losses::warp_vjp(&x[0], &x[1], dir, g)?;
                Ok(vec![a, b])
            })
        })?);
    }
    let c = &cfg;
    out.push(over_seeds("ssim", n, |s| {
        let mut r = Rng::new(s);
        let x = [r.tensor(&[2, 4, 5], 0.0, 1.0), r.tensor(&[2, 4, 5], 0.0, 1.0)];
        run("ssim", &x, s, None, |x| losses::ssim(&x[0], &x[1], c), |x, g| {
            let (a, b) = losses::ssim_vjp(&x[0], &x[1], c, g)?;
            Ok(vec![a, b])
        })
    })?);
    out.push(over_seeds("photometric_loss", n, |s| {
        let mut r = Rng::new(s);
        let x = [r.tensor(&[3, 4, 5], 0.0, 1.0), r.tensor(&[3, 4, 5], 0.0, 1.0)];
        run(
            "photometric_loss",
            &x,
            s,
            None,
            |x| Ok(Tensor::scalar(losses::photometric_loss(&x[0], &x[1], c)?)),
            |x, g| {
                let (a, b) = losses::photometric_loss_vjp(&x[0], &x[1], c, g.item())?;
                Ok(vec![a, b])
            },
        )
    })?);
    out.push(over_seeds("smoothness_loss", n, |s| {
        let mut r = Rng::new(s);
        let image = r.tensor(&[3, 4, 5], 0.0, 1.0);
        let x = [r.tensor(&[1, 4, 5], 0.2, 2.0)];
        let im = &image;
        run(
            "smoothness_loss",
            &x,
            s,
            None,
            move |x| Ok(Tensor::scalar(losses::smoothness_loss(&x[0], im)?)),
            move |x, g| Ok(vec![losses::smoothness_loss_vjp(&x[0], im, g.item())?]),
        )
    })?);
    let tf = DepthTransform::default();
    out.push(over_seeds("sigmoid_to_depth", n, |s| {
        let x = [Rng::new(s).tensor(&[1, 3, 4], 0.01, 0.99)];
        let tf = &tf;
        run("sigmoid_to_depth", &x, s, None, move |x| Ok(model::sigmoid_to_depth(&x[0], tf)), move |x, g| {
            Ok(vec![model::sigmoid_to_depth_vjp(&model::sigmoid_to_depth(&x[0], tf), tf, g)?])
        })
    })?);
    out.push(over_seeds("total_loss", n, |s| {
        let mut r = Rng::new(s);
        let (h, w) = (4, 8);
        let il = r.tensor(&[3, h, w], 0.0, 1.0);
        let ir = r.tensor(&[3, h, w], 0.0, 1.0);
        let cfg = LossConfig::with_scales(2);
        let cam = Camera { focal: 50.0, baseline: 0.02 };
        let x = [
            r.tensor(&[1, h, w], 0.02, 0.5),
            r.tensor(&[1, h / 2, w / 2], 0.02, 0.5),
            r.tensor(&[1, h, w], 0.02, 0.5),
            r.tensor(&[1, h / 2, w / 2], 0.02, 0.5),
        ];
        let split = |x: &[Tensor]| {
            (
                MultiScaleOutput { scales: vec![x[0].clone(), x[1].clone()] },
                MultiScaleOutput { scales: vec![x[2].clone(), x[3].clone()] },
            )
        };
        let (il, ir, cfg, cam, tf) = (&il, &ir, &cfg, &cam, &tf);
        run(
            "total_loss",
            &x,
            s,
            None,
            move |x| {
                let (l, r) = split(x);
                Ok(Tensor::scalar(losses::total_loss(&l, &r, il, ir, cam, tf, cfg)?.total))
            },
            move |x, g| {
                let (l, r) = split(x);
                let (_, gl, gr) = losses::total_loss_with_grad(&l, &r, il, ir, cam, tf, cfg)?;
                Ok(gl.into_iter().chain(gr).map(|t| t.scale(g.item())).collect())
            },
        )
    })?);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Whole model

/// The small model used by the end-to-end checks: 8×16 input, widths {4, 8}.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig::tiny()
}

/// A three-stage variant with attention at every site.
pub fn tiny_attention_config(mode: AttentionMode) -> ModelConfig {
    ModelConfig {
        widths: vec![4, 6, 8],
        scales: 2,
        attention: mode,
        sinkhorn: sinkhorn_for_checks(),
        ..ModelConfig::tiny()
    }
}

/// Parameters for gradient checks: random weights everywhere, including the
/// attention value maps that start at zero in a fresh model.
pub fn check_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let mut p = model::build(config, &mut Rng::new(seed))?;
    let mut rng = Rng::with_stream(seed, 7);
    for site in p.encoder_attention.iter_mut().chain(p.decoder_attention.iter_mut()).flatten() {
        *site = AttentionParams::init_random(site.channels(), site.mode, &mut rng)?;
    }
    Ok(p)
}

fn depth_head_check(config: &ModelConfig, seed: u64, entries: usize) -> Result<f64> {
    let params = check_params(config, seed)?;
    let mut r = Rng::with_stream(seed, 9);
    let (h, w) = (config.height, config.width);
    let x = [r.tensor(&[3, h, w], 0.0, 1.0), r.tensor(&[3, h, w], 0.0, 1.0), params.to_flat()];
    let tf = DepthTransform::default();
    let (tm, tf) = (&params, &tf);
    let load = move |flat: &Tensor| -> Result<ModelParams> {
        let mut p = tm.clone();
        p.load_flat(flat)?;
        Ok(p)
    };
    let fwd = move |x: &[Tensor]| -> Result<Tensor> {
        let (l, r) = model::forward(&x[0], &x[1], &load(&x[2])?)?;
        let depths: Vec<Tensor> = l.scales.iter().chain(&r.scales).map(|o| model::sigmoid_to_depth(o, tf)).collect();
        Ok(stack_flat(&depths.iter().collect::<Vec<_>>()))
    };
    let vjp = move |x: &[Tensor], g: &Tensor| -> Result<Vec<Tensor>> {
        let p = load(&x[2])?;
        let trace = model::forward_traced(&x[0], &x[1], &p)?;
        let (l, r) = trace.outputs();
        let outs: Vec<&Tensor> = l.scales.iter().chain(&r.scales).collect();
        let gs = unstack_flat(g, &outs.iter().map(|t| t.shape()).collect::<Vec<_>>());
        let mut go = Vec::with_capacity(outs.len());
        for (o, gd) in outs.iter().zip(&gs) {
            go.push(model::sigmoid_to_depth_vjp(&model::sigmoid_to_depth(o, tf), tf, gd)?);
        }
        let m = l.scales.len();
        let grads = trace.backward(&p, &go[..m], &go[m..])?;
        Ok(vec![grads.left_image, grads.right_image, grads.params.to_flat()])
    };
    run("model_depth", &x, seed, Some(entries), fwd, vjp)
}

fn total_loss_model_check(config: &ModelConfig, seed: u64, entries: usize) -> Result<f64> {
    let params = check_params(config, seed)?;
    let mut r = Rng::with_stream(seed, 9);
    let (h, w) = (config.height, config.width);
    let il = r.tensor(&[3, h, w], 0.0, 1.0);
    let ir = r.tensor(&[3, h, w], 0.0, 1.0);
    let cfg = LossConfig::with_scales(config.scales);
    let cam = Camera { focal: 50.0, baseline: 0.02 };
    let tf = DepthTransform::default();
    let x = [params.to_flat()];
    let (tm, il, ir, cfg, cam, tf) = (&params, &il, &ir, &cfg, &cam, &tf);
    let load = move |flat: &Tensor| -> Result<ModelParams> {
        let mut p = tm.clone();
        p.load_flat(flat)?;
        Ok(p)
    };
    let fwd = move |x: &[Tensor]| -> Result<Tensor> {
        let (l, r) = model::forward(il, ir, &load(&x[0])?)?;
        Ok(Tensor::scalar(losses::total_loss(&l, &r, il, ir, cam, tf, cfg)?.total))
    };
    let vjp = move |x: &[Tensor], g: &Tensor| -> Result<Vec<Tensor>> {
        let p = load(&x[0])?;
        let trace = model::forward_traced(il, ir, &p)?;
        let (l, r) = trace.outputs();
        let (_, gl, gr) = losses::total_loss_with_grad(&l, &r, il, ir, cam, tf, cfg)?;
        let grads = trace.backward(&p, &gl, &gr)?;
        Ok(vec![grads.params.to_flat().scale(g.item())])
    };
    run("model_total_loss", &x, seed, Some(entries), fwd, vjp)
}

fn model_checks(o: &SuiteOptions) -> Result<Vec<CheckResult>> {
    let tiny = tiny_model_config();
    let attn = tiny_attention_config(AttentionMode::OtMea);
    let attn_eg = tiny_attention_config(AttentionMode::EgMea);
    let e = o.model_entries;
    Ok(vec![
        over_seeds("model_depth_tiny", o.model_seeds, |s| depth_head_check(&tiny, s, e))?,
        over_seeds("model_total_loss_tiny", o.model_seeds, |s| total_loss_model_check(&tiny, s, e))?,
        over_seeds("model_depth_tiny_ot_mea", o.model_seeds, |s| depth_head_check(&attn, s, e))?,
        over_seeds("model_total_loss_tiny_ot_mea", o.model_seeds, |s| total_loss_model_check(&attn, s, e))?,
        over_seeds("model_total_loss_tiny_eg_mea", o.model_seeds, |s| total_loss_model_check(&attn_eg, s, e))?,
    ])
}

/// Runs every entry of the battery.
pub fn run_suite(o: &SuiteOptions) -> Result<Vec<CheckResult>> {
    let mut out = op_checks(o.seeds)?;
    out.extend(ot_checks(o.seeds)?);
    out.extend(attention_checks(o.seeds)?);
    out.extend(loss_checks(o.seeds)?);
    out.extend(model_checks(o)?);
    Ok(out)
}
