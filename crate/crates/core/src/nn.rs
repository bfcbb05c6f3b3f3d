//! Trainable parameters, the [`Module`] visiting protocol, and the layers
//! the generator, discriminators and fusion network are built from.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::tensor::{Real, Tensor};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a parameter within a process. Clones share the id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

#[derive(Clone, Debug)]
pub struct Param<F> {
    id: ParamId,
    value: Tensor<F>,
}

impl<F: Real> Param<F> {
    pub fn new(value: Tensor<F>) -> Self {
        Self { id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)), value }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Tensor<F> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<F> {
        &mut self.value
    }

    /// Same id, converted scalar type.
    fn cast<G: Real>(&self) -> Param<G> {
        Param { id: self.id, value: self.value.cast() }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A collection of named parameters visited in a fixed order.
pub trait Module<F: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>));
}

pub fn param_ids<F: Real>(m: &dyn Module<F>) -> Vec<ParamId> {
    let mut ids = Vec::new();
    m.visit("", &mut |_, p| ids.push(p.id()));
    ids
}

pub fn named_tensors<F: Real>(m: &dyn Module<F>, prefix: &str) -> Vec<(String, Tensor<F>)> {
    let mut out = Vec::new();
    m.visit(prefix, &mut |name, p| out.push((name, p.value().clone())));
    out
}

pub fn param_count<F: Real>(m: &dyn Module<F>) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, p| n += p.value().numel());
    n
}

/// Seeded weight initializer: conv/linear weights ~ N(0, 0.02), biases 0,
/// normalization gains ~ N(1, 0.02).
pub struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    pub const STD: f64 = 0.02;

    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), normal: Normal::new(0.0, Self::STD).expect("valid stdev") }
    }

    pub fn gaussian<F: Real>(&mut self, shape: &[usize], mean: f64) -> Tensor<F> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::lit(mean + self.normal.sample(&mut self.rng))).collect();
        Tensor::from_vec(shape, data)
    }

    pub fn next_seed(&mut self) -> u64 {
        self.rng.random()
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<F> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Real> Conv2d<F> {
    pub fn new(init: &mut Init, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, bias: bool) -> Self {
        Self {
            weight: Param::new(init.gaussian(&[cout, cin, kernel, kernel], 0.0)),
            bias: bias.then(|| Param::new(Tensor::zeros(&[cout]))),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &Graph<F>, x: Var) -> Var {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub(crate) fn cast<G: Real>(&self) -> Conv2d<G> {
        Conv2d { weight: self.weight.cast(), bias: self.bias.as_ref().map(Param::cast), stride: self.stride, pad: self.pad }
    }
}

impl<F: Real> Module<F> for Conv2d<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Transposed convolution, weight `[Cin, Cout, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<F> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Real> ConvTranspose2d<F> {
    pub fn new(init: &mut Init, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, bias: bool) -> Self {
        Self {
            weight: Param::new(init.gaussian(&[cin, cout, kernel, kernel], 0.0)),
            bias: bias.then(|| Param::new(Tensor::zeros(&[cout]))),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &Graph<F>, x: Var) -> Var {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        g.conv_transpose2d(x, w, b, self.stride, self.pad)
    }

    pub(crate) fn cast<G: Real>(&self) -> ConvTranspose2d<G> {
        ConvTranspose2d {
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(Param::cast),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

impl<F: Real> Module<F> for ConvTranspose2d<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct InstanceNorm<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
}

impl<F: Real> InstanceNorm<F> {
    pub const EPS: f64 = 1e-5;

    pub fn new(init: &mut Init, channels: usize) -> Self {
        Self { gamma: Param::new(init.gaussian(&[channels], 1.0)), beta: Param::new(Tensor::zeros(&[channels])) }
    }

    pub fn forward(&self, g: &Graph<F>, x: Var) -> Var {
        g.instance_norm(x, g.param(&self.gamma), g.param(&self.beta), Self::EPS)
    }

    pub(crate) fn cast<G: Real>(&self) -> InstanceNorm<G> {
        InstanceNorm { gamma: self.gamma.cast(), beta: self.beta.cast() }
    }
}

impl<F: Real> Module<F> for InstanceNorm<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

#[derive(Clone, Debug)]
pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Real> Linear<F> {
    pub fn new(init: &mut Init, din: usize, dout: usize) -> Self {
        Self { weight: Param::new(init.gaussian(&[dout, din], 0.0)), bias: Param::new(Tensor::zeros(&[dout])) }
    }

    pub fn forward(&self, g: &Graph<F>, x: Var) -> Var {
        g.linear(x, g.param(&self.weight), g.param(&self.bias))
    }
}

impl<F: Real> Module<F> for Linear<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Bitwise equality of every parameter, in visit order.
pub fn params_equal<F: Real>(a: &dyn Module<F>, b: &dyn Module<F>) -> bool {
    let ta = named_tensors(a, "");
    let tb = named_tensors(b, "");
    ta.len() == tb.len()
        && ta.iter().zip(&tb).all(|((na, va), (nb, vb))| {
            na == nb
                && va.shape() == vb.shape()
                && va.data().iter().zip(vb.data()).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
        })
}
