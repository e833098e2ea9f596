//! Depth evaluation metrics over capped ground truth.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ground truth beyond this depth is ignored.
pub const DEFAULT_CAP: f64 = 80.0;

pub const CSV_HEADER: &str = "abs_rel,sq_rel,rmse,rmse_log,d1,d2,d3,n_valid";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_valid: usize,
}

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.delta1, self.delta2, self.delta3, self.n_valid
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "abs_rel {:.4}  sq_rel {:.4}  rmse {:.4}  rmse_log {:.4}  d1 {:.4}  d2 {:.4}  d3 {:.4}  ({} px)",
            self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.delta1, self.delta2, self.delta3, self.n_valid
        )
    }
}

/// Metrics over pixels with `0 < gt <= cap`. No median scaling; the δ
/// thresholds use strict inequality.
pub fn compute_metrics(pred: &Tensor, gt: &Tensor, cap: f64) -> Result<MetricsReport> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("compute_metrics", pred.shape(), gt.shape()));
    }
    let mut n = 0usize;
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log) = (0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if !(g > 0.0 && g <= cap) {
            continue;
        }
        if !(p > 0.0 && p.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "compute_metrics: prediction {p} at a valid pixel is not positive"
            )));
        }
        n += 1;
        let e = p - g;
        abs_rel += e.abs() / g;
        sq_rel += e * e / g;
        sq += e * e;
        let le = p.ln() - g.ln();
        sq_log += le * le;
        let ratio = (p / g).max(g / p);
        let mut thr = 1.25;
        for hit in hits.iter_mut() {
            if ratio < thr {
                *hit += 1;
            }
            thr *= 1.25;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("compute_metrics: no valid pixels".into()));
    }
    let nf = n as f64;
    Ok(MetricsReport {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        rmse_log: (sq_log / nf).sqrt(),
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
        n_valid: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let g = t(&[1.0, 5.0, 30.0]);
        let m = compute_metrics(&g, &g, DEFAULT_CAP).unwrap();
        assert_eq!(
            (m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta1, m.delta2, m.delta3),
            (0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0)
        );
        assert_eq!(m.n_valid, 3);
    }

    #[test]
    fn ratio_exactly_on_threshold() {
        let g = t(&[4.0, 8.0, 16.0]);
        let m = compute_metrics(&g.scale(1.25), &g, DEFAULT_CAP).unwrap();
        assert_eq!(m.abs_rel, 0.25);
        assert_eq!((m.delta1, m.delta2, m.delta3), (0.0, 1.0, 1.0));
    }

    #[test]
    fn capped_pixels_are_ignored() {
        let m1 = compute_metrics(&t(&[2.0, 3.0]), &t(&[2.5, 3.0]), DEFAULT_CAP).unwrap();
        let m2 = compute_metrics(&t(&[2.0, 3.0, 1.0, 7.0]), &t(&[2.5, 3.0, 95.0, 0.0]), DEFAULT_CAP).unwrap();
        assert_eq!(m1, m2);
        assert!(compute_metrics(&t(&[1.0]), &t(&[81.0]), DEFAULT_CAP).is_err());
    }

    #[test]
    fn csv_row_has_header_arity() {
        let g = t(&[1.0]);
        let row = compute_metrics(&g, &g, DEFAULT_CAP).unwrap().csv_row();
        assert_eq!(row.split(',').count(), CSV_HEADER.split(',').count());
    }
}
