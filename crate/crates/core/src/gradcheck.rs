//! Finite-difference verification of vector-Jacobian products.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A differentiable map from a list of tensors to one tensor.
pub trait DiffOp {
    fn name(&self) -> String;
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor>;
    /// Input cotangents for the output cotangent `cotangent`, one per input.
    fn vjp(&self, inputs: &[Tensor], cotangent: &Tensor) -> Result<Vec<Tensor>>;
}

/// Default finite-difference step.
pub const STEP: f64 = 1e-5;
/// Acceptance threshold on the worst relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Gradient magnitudes below this are compared in absolute terms. Central
/// differences at [`STEP`] carry roughly 1e-10 of roundoff on an O(1) scalar,
/// so exact zeros would otherwise read as relative errors near [`TOLERANCE`].
pub const ABS_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Seed of the random cotangent that scalarizes the output.
    pub seed: u64,
    /// Check at most this many entries per input (evenly strided); `None` checks all.
    pub max_entries: Option<usize>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: STEP,
            seed: 0x9e37_79b9,
            max_entries: None,
        }
    }
}

/// `|a − n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Worst relative error between `op.vjp` and central differences of
/// `x ↦ ⟨c, op(x)⟩` over every input entry, for a fixed random cotangent `c`.
pub fn gradcheck(op: &dyn DiffOp, inputs: &[Tensor], step: f64) -> Result<f64> {
    gradcheck_with(
        op,
        inputs,
        &GradcheckOptions {
            step,
            ..Default::default()
        },
    )
}

pub fn gradcheck_with(op: &dyn DiffOp, inputs: &[Tensor], opts: &GradcheckOptions) -> Result<f64> {
    if inputs.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidArgument("gradcheck inputs must be finite".into()));
    }
    let out = op.forward(inputs)?;
    let mut rng = Rng::new(opts.seed);
    let cot = rng.tensor(out.shape(), -1.0, 1.0);
    let grads = op.vjp(inputs, &cot)?;
    if grads.len() != inputs.len() {
        return Err(Error::InvalidArgument(format!(
            "{}: vjp returned {} cotangents for {} inputs",
            op.name(),
            grads.len(),
            inputs.len()
        )));
    }
    let scalar = |xs: &[Tensor]| -> Result<f64> { op.forward(xs)?.dot(&cot) };
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (which, grad) in grads.iter().enumerate() {
        if grad.shape() != inputs[which].shape() {
            return Err(Error::shape("gradcheck", grad.shape(), inputs[which].shape()));
        }
        let n = inputs[which].len();
        let stride = match opts.max_entries {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let orig = inputs[which].data()[idx];
            work[which].data_mut()[idx] = orig + opts.step;
            let plus = scalar(&work)?;
            work[which].data_mut()[idx] = orig - opts.step;
            let minus = scalar(&work)?;
            work[which].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(grad.data()[idx], numeric);
            if !err.is_finite() {
                return Err(Error::NonFinite(format!("{}: gradient entry {idx}", op.name())));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Adapter turning a pair of closures into a [`DiffOp`].
pub struct FnOp<F, G> {
    pub name: &'static str,
    pub forward: F,
    pub vjp: G,
}

impl<F, G> DiffOp for FnOp<F, G>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
    G: Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>>,
{
    fn name(&self) -> String {
        self.name.to_string()
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        (self.forward)(inputs)
    }

    fn vjp(&self, inputs: &[Tensor], cotangent: &Tensor) -> Result<Vec<Tensor>> {
        (self.vjp)(inputs, cotangent)
    }
}

/// Concatenates tensors into one flat tensor (used to scalarize multi-output maps).
pub fn stack_flat(parts: &[&Tensor]) -> Tensor {
    let data: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    let n = data.len();
    Tensor::from_parts(vec![n], data)
}

/// Inverse of [`stack_flat`] for a cotangent.
pub fn unstack_flat(flat: &Tensor, shapes: &[&[usize]]) -> Vec<Tensor> {
    let mut off = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::from_parts(s.to_vec(), flat.data()[off..off + n].to_vec());
            off += n;
            t
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let bad = FnOp {
            name: "square-with-wrong-vjp",
            forward: |x: &[Tensor]| Ok(x[0].map(|v| v * v)),
            vjp: |x: &[Tensor], g: &Tensor| {
                Ok(vec![crate::ops::mul(&x[0], g)?]) // missing factor 2
            },
        };
        let x = Rng::new(1).tensor(&[5], 0.5, 1.0);
        assert!(gradcheck(&bad, &[x], STEP).unwrap() > 0.1);
    }

    #[test]
    fn accepts_a_right_gradient() {
        let good = FnOp {
            name: "square",
            forward: |x: &[Tensor]| Ok(x[0].map(|v| v * v)),
            vjp: |x: &[Tensor], g: &Tensor| Ok(vec![crate::ops::mul(&x[0].scale(2.0), g)?]),
        };
        let x = Rng::new(1).tensor(&[5], -1.0, 1.0);
        assert!(gradcheck(&good, &[x], STEP).unwrap() < 1e-8);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-4).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
