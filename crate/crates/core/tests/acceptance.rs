//! Acceptance run: one line per criterion, printed straight to stderr so the
//! lines survive output capture.

use std::io::Write;
use std::time::Instant;

use hnet::attention::{self, AttentionMode, AttentionParams};
use hnet::losses::{self, Camera, LossConfig, WarpDirection};
use hnet::metrics::{self, DEFAULT_CAP};
use hnet::model::{self, DepthTransform, ModelConfig, MultiScaleOutput};
use hnet::ops;
use hnet::ot::{self, Marginals, RetrievalParams, SinkhornConfig};
use hnet::rng::Rng;
use hnet::scene::{self, SceneConfig, PRESETS};
use hnet::suite::{self, SuiteOptions};
use hnet::train::{self, TrainConfig};
use hnet::Tensor;

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
    secs: f64,
}

fn say(line: &str) {
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{line}");
}

fn criterion(name: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let t = Instant::now();
    let (passed, detail) = f();
    let secs = t.elapsed().as_secs_f64();
    say(&format!(
        "[{}] {name} ({secs:.1} s): {detail}",
        if passed { "PASS" } else { "FAIL" }
    ));
    Outcome {
        name,
        passed,
        detail,
        secs,
    }
}

// ---------------------------------------------------------------------------
// Oracles

/// Minimum of `Σ_j C[j, σ(j)] / w` over every permutation σ (Heap's algorithm).
fn permutation_minimum(c: &[f64], w: usize) -> f64 {
    let mut perm: Vec<usize> = (0..w).collect();
    let eval = |p: &[usize]| p.iter().enumerate().map(|(j, &k)| c[j * w + k]).sum::<f64>() / w as f64;
    let mut best = eval(&perm);
    let mut counters = vec![0usize; w];
    let mut i = 1;
    while i < w {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            best = best.min(eval(&perm));
            counters[i] += 1;
            i = 1;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    best
}

/// Attention weights at one site of `c` channels: query, key and value 1×1
/// convs for EG; two cost convs, two single-output mass convs and the value
/// conv for OT.
fn site_params(c: usize, ot: bool) -> usize {
    let square = c * c + c;
    if ot {
        3 * square + 2 * (c + 1)
    } else {
        3 * square
    }
}

/// Channels at every attention site: the three deepest encoder stages, and
/// the inputs of the three deepest decoder blocks (the bottleneck width for
/// the deepest one, half the next stage's width otherwise).
fn attention_site_channels(widths: &[usize]) -> Vec<usize> {
    let n = widths.len();
    let mut out = widths[n.saturating_sub(3)..].to_vec();
    for d in n.saturating_sub(3)..n {
        out.push(if d == n - 1 { widths[n - 1] } else { (widths[d + 1] / 2).max(1) });
    }
    out
}

fn random_scene_images(rng: &mut Rng, h: usize, w: usize) -> (Tensor, Tensor) {
    (rng.tensor(&[3, h, w], 0.0, 1.0), rng.tensor(&[3, h, w], 0.0, 1.0))
}

// ---------------------------------------------------------------------------
// Criteria

fn ot_marginals() -> (bool, String) {
    let cfg = SinkhornConfig {
        epsilon: 0.05,
        max_iters: 2_000_000,
        tol: 1e-7,
    };
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut all_converged = true;
    let mut max_iters = 0;
    for seed in 0..50u64 {
        let mut r = Rng::new(1000 + seed);
        let h = 1 + r.below(4);
        let w = 2 + r.below(7);
        let c = 1 + r.below(8);
        let x1 = r.tensor(&[h, c, w], -1.0, 1.0);
        let x2 = r.tensor(&[h, c, w], -1.0, 1.0);
        let p = RetrievalParams::init(c, &mut r);
        let tr = match ot::ot_retrieve_traced(&x1, &x2, &p, &cfg) {
            Ok(t) => t,
            Err(e) => return (false, format!("seed {seed}: {e}")),
        };
        let plan = tr.plan().values();
        let mu = ot::compute_mass(&x1, &p.conv_mass_1).unwrap();
        let nu = ot::compute_mass(&x2, &p.conv_mass_2).unwrap();
        // marginals summed here rather than through the plan's helpers
        for i in 0..h {
            for j in 0..w {
                let row: f64 = (0..w).map(|k| plan.data()[(i * w + j) * w + k]).sum();
                let col: f64 = (0..w).map(|k| plan.data()[(i * w + k) * w + j]).sum();
                worst = worst
                    .max((row - mu.values().data()[i * w + j]).abs())
                    .max((col - nu.values().data()[i * w + j]).abs());
            }
        }
        all_converged &= tr.transport.report.converged;
        max_iters = max_iters.max(*tr.transport.report.iterations.iter().max().unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    (
        all_converged && worst <= 1e-6 && secs < 5.0,
        format!(
            "50 problems, worst marginal residual {worst:.2e} (need <= 1e-6), all converged {all_converged}, \
             max {max_iters} iterations, {secs:.2} s (need < 5 s)"
        ),
    )
}

fn ot_optimality() -> (bool, String) {
    let cfg = SinkhornConfig {
        epsilon: 0.01,
        max_iters: 50_000,
        tol: 1e-10,
    };
    let e2 = std::f64::consts::E.powi(2);
    let mut worst: f64 = 0.0;
    for w in [4usize, 5] {
        for seed in 0..20u64 {
            let cost = Rng::new(seed + 100 * w as u64).tensor(&[1, w, w], 1.0, e2);
            let t = ot::sinkhorn_solve(&cost, &Marginals::uniform(1, w), &Marginals::uniform(1, w), &cfg).unwrap();
            let objective: f64 = t.plan.values().data().iter().zip(cost.data()).map(|(m, c)| m * c).sum();
            let exact = permutation_minimum(cost.data(), w);
            let lib = ot::exact_transport_oracle(&cost.reshape(&[w, w]).unwrap()).unwrap().1;
            if (lib - exact).abs() > 1e-12 {
                return (false, format!("library oracle {lib} disagrees with enumeration {exact}"));
            }
            worst = worst.max((objective - exact) / exact);
        }
    }
    (
        worst <= 0.01,
        format!("40 costs (20 each 4x4, 5x5), worst relative excess {:.3}% (need <= 1%)", 100.0 * worst),
    )
}

fn gradient_suite() -> (bool, String) {
    let t = Instant::now();
    let results = suite::run_suite(&SuiteOptions::default()).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = results.iter().max_by(|a, b| a.worst.total_cmp(&b.worst)).unwrap();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    (
        failed.is_empty() && secs < 120.0,
        format!(
            "{} entries, worst {:.2e} ({}), failing {:?}, {secs:.1} s (need < 1e-4, < 120 s)",
            results.len(),
            worst.worst,
            worst.name,
            failed
        ),
    )
}

fn epipolar_locality() -> (bool, String) {
    let sk = SinkhornConfig::default();
    let (c, h, w) = (4, 5, 7);
    let mut checked = 0;
    for mode in [AttentionMode::EgMea, AttentionMode::OtMea] {
        for trial in 0..10u64 {
            let mut r = Rng::new(50 + trial);
            let params = AttentionParams::init_random(c, mode, &mut r).unwrap();
            let xl = r.tensor(&[c, h, w], -1.0, 1.0);
            let xr = r.tensor(&[c, h, w], -1.0, 1.0);
            let row = r.below(h);
            let perturb_left = trial % 2 == 0;
            let (mut pl, mut pr) = (xl.clone(), xr.clone());
            let target = if perturb_left { &mut pl } else { &mut pr };
            for ch in 0..c {
                for j in 0..w {
                    target.data_mut()[(ch * h + row) * w + j] += r.uniform(-0.5, 0.5);
                }
            }
            let (l0, r0) = attention::attention_block(&xl, &xr, &params, &sk).unwrap();
            let (l1, r1) = attention::attention_block(&pl, &pr, &params, &sk).unwrap();
            for (a, b) in [(&l0, &l1), (&r0, &r1)] {
                for ch in 0..c {
                    for i in 0..h {
                        let s = (ch * h + i) * w;
                        let same = a.data()[s..s + w]
                            .iter()
                            .zip(&b.data()[s..s + w])
                            .all(|(x, y)| x.to_bits() == y.to_bits());
                        if i != row && !same {
                            return (false, format!("{mode} trial {trial}: row {i} changed after perturbing row {row}"));
                        }
                    }
                }
            }
            // the perturbed row must actually reach the other branch
            let other = if perturb_left { (&r0, &r1) } else { (&l0, &l1) };
            let s = row * w;
            if (0..c).all(|ch| other.0.data()[ch * h * w + s..ch * h * w + s + w] == other.1.data()[ch * h * w + s..ch * h * w + s + w]) {
                return (false, format!("{mode} trial {trial}: perturbation had no cross-view effect"));
            }
            checked += 1;
        }
    }
    (true, format!("{checked} trials over eg-mea and ot-mea, rows outside the perturbed one bitwise unchanged"))
}

fn identity_at_init() -> (bool, String) {
    let mut compared = 0;
    for mode in AttentionMode::ALL_ENABLED {
        for seed in 0..3u64 {
            let on = ModelConfig {
                attention: mode,
                ..ModelConfig::toy()
            };
            let off = ModelConfig {
                attention: AttentionMode::Off,
                ..ModelConfig::toy()
            };
            let p_on = model::build(&on, &mut Rng::new(seed)).unwrap();
            let p_off = model::build(&off, &mut Rng::new(seed)).unwrap();
            let (il, ir) = random_scene_images(&mut Rng::new(77 + seed), on.height, on.width);
            let (a_l, a_r) = model::forward(&il, &ir, &p_on).unwrap();
            let (b_l, b_r) = model::forward(&il, &ir, &p_off).unwrap();
            for (a, b) in a_l.scales.iter().chain(&a_r.scales).zip(b_l.scales.iter().chain(&b_r.scales)) {
                if !a.bitwise_eq(b) {
                    return (false, format!("{mode} seed {seed}: outputs differ"));
                }
                compared += 1;
            }
        }
    }
    (true, format!("{compared} output maps over 4 modes x 3 seeds bitwise identical to attention off"))
}

fn depth_range() -> (bool, String) {
    let tf = DepthTransform::default();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for seed in 0..100u64 {
        let mode = AttentionMode::ALL_ENABLED[seed as usize % 4];
        let cfg = ModelConfig {
            attention: mode,
            ..ModelConfig::toy()
        };
        let p = suite::check_params(&cfg, seed).unwrap();
        let (il, ir) = random_scene_images(&mut Rng::new(5000 + seed), cfg.height, cfg.width);
        let (l, r) = model::forward(&il, &ir, &p).unwrap();
        for o in l.scales.iter().chain(&r.scales) {
            for &d in model::sigmoid_to_depth(o, &tf).data() {
                lo = lo.min(d);
                hi = hi.max(d);
            }
        }
    }
    (
        lo > 0.1 && hi < 100.0,
        format!("100 forwards, depth in [{lo:.4}, {hi:.4}] (need strictly inside (0.1, 100))"),
    )
}

fn parameter_accounting() -> (bool, String) {
    let mut lines = Vec::new();
    for widths in [vec![8, 16, 32], vec![4, 8, 16, 32], vec![3, 5, 7, 9, 11]] {
        let base = ModelConfig {
            widths: widths.clone(),
            scales: 2,
            ..ModelConfig::toy()
        };
        let count = |mode| {
            let cfg = ModelConfig {
                attention: mode,
                ..base.clone()
            };
            model::param_count(&model::build(&cfg, &mut Rng::new(0)).unwrap()).total()
        };
        let (off, eg, ot) = (count(AttentionMode::Off), count(AttentionMode::EgMea), count(AttentionMode::OtMea));
        let sites = attention_site_channels(&widths);
        let ot_inc: usize = sites.iter().map(|&c| site_params(c, true)).sum();
        let mass: usize = sites.iter().map(|&c| 2 * (c + 1)).sum();
        if ot - off != ot_inc || ot - eg != mass {
            return (
                false,
                format!("widths {widths:?}: ot-off {} vs {ot_inc}, ot-eg {} vs {mass}", ot - off, ot - eg),
            );
        }
        lines.push(format!("{widths:?}: +{ot_inc} ({:.1}%), mass {mass}", 100.0 * ot_inc as f64 / off as f64));
    }
    (true, lines.join("; "))
}

fn loss_identities() -> (bool, String) {
    let cfg = LossConfig::default();
    let mut r = Rng::new(3);
    let img = r.tensor(&[3, 12, 20], 0.0, 1.0);
    let same = losses::photometric_loss(&img, &img, &cfg).unwrap();
    let flat = losses::smoothness_loss(&Tensor::full(&[1, 12, 20], 0.37), &img).unwrap();

    // recombination: rebuild the multi-scale objective from its parts
    let (h, w) = (16, 32);
    let m = 3;
    let cfg_m = LossConfig::with_scales(m);
    let cam = Camera { focal: 50.0, baseline: 0.02 };
    let tf = DepthTransform::default();
    let (il, ir) = random_scene_images(&mut r, h, w);
    let maps = |r: &mut Rng| MultiScaleOutput {
        scales: (0..m).map(|s| r.tensor(&[1, h >> s, w >> s], 0.02, 0.6)).collect(),
    };
    let (ol, or) = (maps(&mut r), maps(&mut r));
    let report = losses::total_loss(&ol, &or, &il, &ir, &cam, &tf, &cfg_m).unwrap();
    let mut sum = 0.0;
    for s in 0..m {
        for (o, target, source, dir) in [
            (&ol, &il, &ir, WarpDirection::LeftFromRight),
            (&or, &ir, &il, WarpDirection::RightFromLeft),
        ] {
            let up = ops::upsample_bilinear(&o.scales[s], 1 << s).unwrap();
            let inv = up.map(|v| tf.a * v + tf.b);
            let disp = inv.map(|v| cam.focal * cam.baseline * v);
            let recon = losses::warp(source, &disp, dir).unwrap();
            sum += losses::photometric_loss(target, &recon, &cfg_m).unwrap()
                + cfg_m.lambda * losses::smoothness_loss(&inv, target).unwrap();
        }
    }
    let recombined = sum / (2 * m) as f64;
    let recomb_err = (recombined - report.total).abs();

    let d = r.tensor(&[1, 12, 20], 0.1, 3.0);
    let base = losses::smoothness_loss(&d, &img).unwrap();
    let scale_err = [0.01, 0.5, 7.0, 1e3]
        .iter()
        .map(|&k| (losses::smoothness_loss(&d.scale(k), &img).unwrap() - base).abs() / base)
        .fold(0.0, f64::max);

    (
        same == 0.0 && flat == 0.0 && recomb_err <= 1e-12 && scale_err <= 1e-12,
        format!(
            "photometric(I,I) = {same:e}, smoothness(const) = {flat:e}, recombination error {recomb_err:.1e}, rescaling relative change {scale_err:.1e}"
        ),
    )
}

fn warp_consistency() -> (bool, String) {
    let cfg = LossConfig::default();
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for preset in PRESETS {
        for (h, w) in [(32, 64), (16, 32), (48, 96)] {
            for seed in 0..3u64 {
                let s = scene::generate_scene(&SceneConfig::preset(preset, h, w).unwrap(), seed).unwrap();
                let recon = losses::warp(&s.right, &s.gt_disparity, WarpDirection::LeftFromRight).unwrap();
                let l = scene::masked_photometric_loss(&s.left, &recon, &s.occlusion, &cfg).unwrap();
                worst = worst.max(l);
                n += 1;
            }
        }
    }
    (
        worst < 1e-3,
        format!("{n} scenes over {} presets, worst masked photometric loss {worst:.2e} (need < 1e-3)", PRESETS.len()),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn toy_training() -> (bool, String) {
    let mut finals = Vec::new();
    let mut headline = None;
    for mode in [AttentionMode::OtMea, AttentionMode::EgMea, AttentionMode::Off] {
        let mut photometric = Vec::new();
        for seed in 0..3u64 {
            let mut cfg = TrainConfig::toy(500, 1e-4, seed);
            cfg.model.attention = mode;
            let t = Instant::now();
            let out = train::train(&cfg, |_| {}).unwrap();
            let secs = t.elapsed().as_secs_f64();
            let report = out.final_report.expect("toy run diverged");
            photometric.push(report.photometric());
            if mode == AttentionMode::OtMea && seed == 0 {
                let s = &train::scenes(&cfg).unwrap()[0];
                let p = train::predict(&out.params, &s.left, &s.right, s.camera.fb(), &cfg.depth).unwrap();
                let mae = train::masked_mae(&p.disparity_left, &s.gt_disparity, &s.occlusion).unwrap();
                headline = Some((report.total / out.log[0].total, mae, secs));
            }
        }
        say(&format!("  toy {mode}: final photometric per seed {photometric:.5?}"));
        finals.push((mode, median(photometric)));
    }
    let (ratio, mae, secs) = headline.unwrap();
    let main_ok = ratio <= 0.5 && mae < 1.0 && secs < 900.0;
    let (ot, eg, off) = (finals[0].1, finals[1].1, finals[2].1);
    let order_ok = ot <= eg && eg <= off;
    (
        main_ok && order_ok,
        format!(
            "ot-mea seed 0: final/initial loss {ratio:.3} (need <= 0.5), disparity MAE {mae:.3} px (need < 1), run {secs:.0} s (need < 900); \
             median final photometric over 3 seeds: ot-mea {ot:.5}, eg-mea {eg:.5}, se-sd {off:.5} -> ordering {}",
            if order_ok { "holds" } else { "violated" }
        ),
    )
}

fn metrics_criterion() -> (bool, String) {
    let gt = Tensor::new(vec![1, 2, 3], vec![1.0, 2.5, 10.0, 33.0, 79.0, 80.0]).unwrap();
    let same = metrics::compute_metrics(&gt, &gt, DEFAULT_CAP).unwrap();
    let exact = [same.abs_rel, same.sq_rel, same.rmse, same.rmse_log] == [0.0; 4]
        && [same.delta1, same.delta2, same.delta3] == [1.0; 3]
        && same.n_valid == 6;

    // 0 and values above the cap are excluded; 80 itself is kept
    let gt_cap = Tensor::new(vec![1, 1, 4], vec![0.0, 80.0, 80.5, 200.0]).unwrap();
    let pred_cap = Tensor::new(vec![1, 1, 4], vec![5.0, 40.0, 1.0, 1.0]).unwrap();
    let c = metrics::compute_metrics(&pred_cap, &gt_cap, DEFAULT_CAP).unwrap();
    let cap_ok = c.n_valid == 1 && c.abs_rel == 0.5;

    // a ratio of exactly 1.25 misses δ < 1.25 but meets δ < 1.25²
    let b = metrics::compute_metrics(
        &Tensor::new(vec![1, 1, 2], vec![5.0, 4.0]).unwrap(),
        &Tensor::new(vec![1, 1, 2], vec![4.0, 5.0]).unwrap(),
        DEFAULT_CAP,
    )
    .unwrap();
    let boundary_ok = b.delta1 == 0.0 && b.delta2 == 1.0 && b.delta3 == 1.0;
    (
        exact && cap_ok && boundary_ok,
        format!("pred = gt exact {exact}, cap exclusion {cap_ok}, strict delta boundary {boundary_ok}"),
    )
}

#[test]
fn acceptance() {
    say("acceptance criteria");
    let outcomes = vec![
        criterion("OT marginals", ot_marginals),
        criterion("OT optimality", ot_optimality),
        criterion("gradient suite", gradient_suite),
        criterion("epipolar locality", epipolar_locality),
        criterion("identity at init", identity_at_init),
        criterion("depth range", depth_range),
        criterion("parameter accounting", parameter_accounting),
        criterion("loss identities", loss_identities),
        criterion("warp-consistency oracle", warp_consistency),
        criterion("end-to-end toy training", toy_training),
        criterion("metrics", metrics_criterion),
    ];
    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.passed).collect();
    let total: f64 = outcomes.iter().map(|o| o.secs).sum();
    say(&format!(
        "{} of {} criteria passed in {total:.0} s",
        outcomes.len() - failed.len(),
        outcomes.len()
    ));
    assert!(
        failed.is_empty(),
        "failing criteria: {}",
        failed.iter().map(|o| format!("{} ({})", o.name, o.detail)).collect::<Vec<_>>().join("; ")
    );
}
