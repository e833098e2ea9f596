//! Parameterized convolution layers and named-parameter traversal.

use crate::error::Result;
use crate::ops::{self, ConvSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Visits every trainable tensor under a dotted name.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>);

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn fan_in_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    rng.tensor(shape, -bound, bound)
}

/// A 1×1 convolution: weight `[cout, cin]`, bias `[cout]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        Self {
            weight: fan_in_uniform(rng, &[cout, cin], cin),
            bias: fan_in_uniform(rng, &[cout], cin),
        }
    }

    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[cout, cin]),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn identity(c: usize) -> Self {
        Self {
            weight: Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 }),
            bias: Tensor::zeros(&[c]),
        }
    }

    pub fn param_count(cin: usize, cout: usize) -> usize {
        cout * cin + cout
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Applies to the `[h,c,w]` layout.
    pub fn rows(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv1x1_rows(x, &self.weight, &self.bias)
    }

    pub fn rows_vjp(&self, x: &Tensor, g: &Tensor) -> Result<(Tensor, Linear)> {
        let (gx, weight, bias) = ops::conv1x1_rows_vjp(x, &self.weight, g)?;
        Ok((gx, Linear { weight, bias }))
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_channels(), self.out_channels())
    }

    pub fn accumulate(&mut self, g: &Linear) -> Result<()> {
        self.weight.add_assign(&g.weight)?;
        self.bias.add_assign(&g.bias)
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// A square-kernel convolution with fixed geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn init(cin: usize, cout: usize, spec: ConvSpec, rng: &mut Rng) -> Self {
        let k = spec.kernel;
        let fan_in = cin * k * k;
        Self {
            weight: fan_in_uniform(rng, &[cout, cin, k, k], fan_in),
            bias: fan_in_uniform(rng, &[cout], fan_in),
            spec,
        }
    }

    pub fn param_count(cin: usize, cout: usize, kernel: usize) -> usize {
        cout * cin * kernel * kernel + cout
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, &self.weight, &self.bias, self.spec)
    }

    pub fn vjp(&self, x: &Tensor, g: &Tensor) -> Result<(Tensor, Conv)> {
        let (gx, weight, bias) = ops::conv2d_vjp(x, &self.weight, self.spec, g)?;
        Ok((
            gx,
            Conv {
                weight,
                bias,
                spec: self.spec,
            },
        ))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros_like(&self.weight),
            bias: Tensor::zeros_like(&self.bias),
            spec: self.spec,
        }
    }

    pub fn accumulate(&mut self, g: &Conv) -> Result<()> {
        self.weight.add_assign(&g.weight)?;
        self.bias.add_assign(&g.bias)
    }
}

impl Parameters for Conv {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}
