//! Randomized properties of the matching, attention, loss and metric code.

use proptest::prelude::*;

use hnet::attention::{self, AttentionMode, AttentionParams, Retrieval};
use hnet::losses;
use hnet::metrics;
use hnet::model::{depth_to_disparity, disparity_to_depth};
use hnet::ot::{self, Marginals, RetrievalParams, SinkhornConfig};
use hnet::rng::Rng;
use hnet::Tensor;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 48,
        ..ProptestConfig::default()
    }
}

/// Column `k` of every row of `x: [h,c,w]` moved to `perm[k]`.
fn permute_positions(x: &Tensor, perm: &[usize]) -> Tensor {
    let (h, c, w) = x.dims3("permute").unwrap();
    let mut out = vec![0.0; x.len()];
    for i in 0..h {
        for ch in 0..c {
            for k in 0..w {
                out[(i * c + ch) * w + perm[k]] = x.at3(i, ch, k);
            }
        }
    }
    Tensor::new(vec![h, c, w], out).unwrap()
}

fn shuffled(w: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..w).collect();
    for i in (1..w).rev() {
        p.swap(i, rng.below(i + 1));
    }
    p
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn mass_rows_sum_to_one(seed in any::<u64>(), h in 1usize..5, c in 1usize..8, w in 1usize..9) {
        let mut rng = Rng::new(seed);
        let x = rng.tensor(&[h, c, w], -2.0, 2.0);
        let p = RetrievalParams::init(c, &mut rng);
        let mass = ot::compute_mass(&x, &p.conv_mass_1).unwrap();
        for i in 0..h {
            let row = &mass.values().data()[i * w..(i + 1) * w];
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn ot_plan_is_equivariant_to_position_permutations(seed in any::<u64>(), c in 1usize..6, w in 2usize..7) {
        let mut rng = Rng::new(seed);
        let x1 = rng.tensor(&[2, c, w], -1.0, 1.0);
        let x2 = rng.tensor(&[2, c, w], -1.0, 1.0);
        let p = RetrievalParams::init(c, &mut rng);
        let perm = shuffled(w, &mut rng);
        let cfg = SinkhornConfig::fixed(0.05, 200);
        let m = ot::ot_retrieve(&x1, &x2, &p, &cfg).unwrap();
        let mp = ot::ot_retrieve(&x1, &permute_positions(&x2, &perm), &p, &cfg).unwrap();
        for i in 0..2 {
            for j in 0..w {
                for k in 0..w {
                    let a = m.values().at3(i, j, k);
                    let b = mp.values().at3(i, j, perm[k]);
                    prop_assert!((a - b).abs() <= 1e-12, "row {i} ({j},{k}): {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn sinkhorn_residual_does_not_grow(seed in any::<u64>(), w in 2usize..7, n in 1usize..200, sharp in any::<bool>()) {
        // uniform marginals and costs in [1, e²], as in the optimality check
        let cost = Rng::new(seed).tensor(&[1, w, w], 1.0, std::f64::consts::E.powi(2));
        let uniform = Marginals::uniform(1, w);
        let epsilon = if sharp { 0.01 } else { 0.05 };
        let residual = |iters| {
            let t = ot::sinkhorn_solve(&cost, &uniform, &uniform, &SinkhornConfig::fixed(epsilon, iters)).unwrap();
            t.plan.marginal_residuals(&uniform, &uniform).0
        };
        let (r1, r2) = (residual(n), residual(2 * n));
        prop_assert!(r2 <= r1 + 1e-15, "{n} iterations: {r1:e}, {}: {r2:e}", 2 * n);
    }

    #[test]
    fn eg_matching_rows_are_stochastic(seed in any::<u64>(), h in 1usize..4, c in 1usize..6, w in 1usize..8) {
        let mut rng = Rng::new(seed);
        let p = AttentionParams::init_random(c, AttentionMode::EgMea, &mut rng).unwrap();
        let Retrieval::Eg { conv_q, conv_k } = &p.retrieval else { unreachable!() };
        let m = attention::eg_retrieve(&rng.tensor(&[h, c, w], -3.0, 3.0), &rng.tensor(&[h, c, w], -3.0, 3.0), conv_q, conv_k).unwrap();
        for row in m.values().data().chunks(w) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn eg_ignores_per_query_logit_shifts(seed in any::<u64>(), c in 1usize..6, w in 1usize..8) {
        // A key bias adds q_j·δ to every logit of query j.
        let mut rng = Rng::new(seed);
        let p = AttentionParams::init_random(c, AttentionMode::EgMea, &mut rng).unwrap();
        let Retrieval::Eg { conv_q, conv_k } = &p.retrieval else { unreachable!() };
        let (x1, x2) = (rng.tensor(&[2, c, w], -1.0, 1.0), rng.tensor(&[2, c, w], -1.0, 1.0));
        let mut shifted = conv_k.clone();
        for (b, d) in shifted.bias.data_mut().iter_mut().zip(rng.tensor(&[c], -2.0, 2.0).data()) {
            *b += d;
        }
        let a = attention::eg_retrieve(&x1, &x2, conv_q, conv_k).unwrap();
        let b = attention::eg_retrieve(&x1, &x2, conv_q, &shifted).unwrap();
        prop_assert!(a.values().max_abs_diff(b.values()) <= 1e-12);
    }

    #[test]
    fn mnl_equals_mea_on_single_row(seed in any::<u64>(), c in 1usize..6, w in 2usize..8, ot_mode in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let (mea, mnl) = if ot_mode {
            (AttentionMode::OtMea, AttentionMode::OtMnl)
        } else {
            (AttentionMode::EgMea, AttentionMode::EgMnl)
        };
        let p = AttentionParams::init_random(c, mea, &mut rng).unwrap();
        let q = AttentionParams { mode: mnl, ..p.clone() };
        let (xl, xr) = (rng.tensor(&[c, 1, w], -1.0, 1.0), rng.tensor(&[c, 1, w], -1.0, 1.0));
        let cfg = SinkhornConfig::default();
        let (al, ar) = attention::attention_block(&xl, &xr, &p, &cfg).unwrap();
        let (bl, br) = attention::attention_block(&xl, &xr, &q, &cfg).unwrap();
        prop_assert!(al.bitwise_eq(&bl) && ar.bitwise_eq(&br));
    }

    #[test]
    fn smoothness_ignores_disparity_scale(seed in any::<u64>(), h in 2usize..8, w in 2usize..8, k in 1e-3f64..1e3) {
        let mut rng = Rng::new(seed);
        let d = rng.tensor(&[1, h, w], 0.1, 1.0);
        let image = rng.tensor(&[3, h, w], 0.0, 1.0);
        let a = losses::smoothness_loss(&d, &image).unwrap();
        let b = losses::smoothness_loss(&d.scale(k), &image).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn photometric_is_nonnegative(seed in any::<u64>(), h in 3usize..8, w in 3usize..8) {
        let mut rng = Rng::new(seed);
        let cfg = losses::LossConfig::default();
        let (a, b) = (rng.tensor(&[3, h, w], 0.0, 1.0), rng.tensor(&[3, h, w], 0.0, 1.0));
        prop_assert!(losses::photometric_loss(&a, &b, &cfg).unwrap() >= 0.0);
    }

    #[test]
    fn disparity_depth_round_trip(seed in any::<u64>(), focal in 1.0f64..500.0, baseline in 0.01f64..2.0) {
        let depth = Rng::new(seed).tensor(&[1, 4, 6], 0.1, 100.0);
        let back = disparity_to_depth(&depth_to_disparity(&depth, focal, baseline).unwrap(), focal, baseline).unwrap();
        for (a, b) in depth.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * a);
        }
    }

    #[test]
    fn metric_ordering_and_log_symmetry(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = Rng::new(seed);
        let pred = rng.tensor(&[n], 0.5, 60.0);
        let gt = rng.tensor(&[n], 0.5, 60.0);
        let m = metrics::compute_metrics(&pred, &gt, metrics::DEFAULT_CAP).unwrap();
        let s = metrics::compute_metrics(&gt, &pred, metrics::DEFAULT_CAP).unwrap();
        prop_assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3);
        prop_assert!((0.0..=1.0).contains(&m.delta1) && m.delta3 <= 1.0);
        prop_assert!((m.rmse_log - s.rmse_log).abs() <= 1e-12 * m.rmse_log.max(1.0));
    }
}

#[test]
fn abs_rel_is_not_symmetric() {
    let a = Tensor::new(vec![1], vec![1.0]).unwrap();
    let b = Tensor::new(vec![1], vec![2.0]).unwrap();
    let ab = metrics::compute_metrics(&a, &b, metrics::DEFAULT_CAP).unwrap().abs_rel;
    let ba = metrics::compute_metrics(&b, &a, metrics::DEFAULT_CAP).unwrap().abs_rel;
    assert_eq!((ab, ba), (0.5, 1.0));
}
