//! Multi-layer domain discriminator.
//!
//! Encoder taps `e_1..e_L` (shallow first) are consumed by a chain of
//! linear stages mirroring the encoder:
//!
//! ```text
//! d_1 = D_1(σ(e_1))
//! d_l = D_l(σ(γ·d_{l-1} ⊕ e_l))      l = 2..L-1
//! out = H(σ(γ·d_{L-1} ⊕ e_L))
//! ```
//!
//! `D_l` maps the width of `e_l` to the width of `e_{l+1}`, so `⊕` can be
//! element-wise addition; with concatenation the fused input is twice as
//! wide. `H` is an MLP ending in one logit per example.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::NetworkSpec;
use crate::tensor::{add, add_bias, concat_cols, flatten, leaky_relu, matmul, relu, reshape, scale, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    Sum,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    fn apply<T: Element>(self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Relu => relu(x),
            Activation::LeakyRelu(s) => leaky_relu(x, s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorSpec {
    /// Flattened width of each tap, shallow first.
    pub tap_widths: Vec<usize>,
    /// Hidden widths of the head MLP.
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub fusion: Fusion,
    pub activation: Activation,
}

impl DiscriminatorSpec {
    /// Discriminator over the taps of `net` with the given head widths,
    /// decay 0.1, sum fusion and relu.
    pub fn for_network(net: &NetworkSpec, hidden: &[usize]) -> Result<Self> {
        Ok(DiscriminatorSpec {
            tap_widths: net.tap_widths()?,
            hidden: hidden.to_vec(),
            gamma: 0.1,
            fusion: Fusion::Sum,
            activation: Activation::Relu,
        })
    }

    fn fused_width(&self, l: usize) -> usize {
        match self.fusion {
            Fusion::Concat if l > 0 => 2 * self.tap_widths[l],
            _ => self.tap_widths[l],
        }
    }
}

/// Head widths used with [`NetworkSpec::digits_embedding`].
pub const DIGITS_HEAD: [usize; 3] = [500, 500, 500];
/// Head widths used with [`NetworkSpec::lenet`].
pub const LENET_HEAD: [usize; 2] = [500, 500];

#[derive(Clone)]
struct Dense<T: Element> {
    weight: Tensor<T>,
    bias: Tensor<T>,
}

impl<T: Element> Dense<T> {
    fn new(rng: &mut ChaCha8Rng, input: usize, output: usize) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let w = (0..input * output).map(|_| T::c(rng.gen_range(-bound..bound))).collect();
        Dense {
            weight: Tensor::param(&[input, output], w).unwrap(),
            bias: Tensor::param(&[output], vec![T::zero(); output]).unwrap(),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(add_bias(&matmul(x, &self.weight)?, &self.bias)?)
    }
}

pub struct Discriminator<T: Element = f32> {
    spec: DiscriminatorSpec,
    stages: Vec<Dense<T>>,
    head: Vec<Dense<T>>,
}

impl<T: Element> Discriminator<T> {
    pub fn build(spec: &DiscriminatorSpec, seed: u64) -> Result<Self> {
        if spec.tap_widths.is_empty() || spec.tap_widths.contains(&0) {
            return Err(Error::Param(format!("discriminator needs nonzero tap widths, got {:?}", spec.tap_widths)));
        }
        if !(0.0..=1.0).contains(&spec.gamma) {
            return Err(Error::Param(format!("decay γ must lie in [0, 1], got {}", spec.gamma)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = spec.tap_widths.len() - 1;
        let stages = (0..last).map(|l| Dense::new(&mut rng, spec.fused_width(l), spec.tap_widths[l + 1])).collect();
        let mut widths = vec![spec.fused_width(last)];
        widths.extend_from_slice(&spec.hidden);
        widths.push(1);
        let head = widths.windows(2).map(|w| Dense::new(&mut rng, w[0], w[1])).collect();
        Ok(Discriminator {
            spec: spec.clone(),
            stages,
            head,
        })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    /// One logit per example, shape `[n]`.
    pub fn forward(&self, taps: &[Tensor<T>]) -> Result<Tensor<T>> {
        let widths = &self.spec.tap_widths;
        if taps.len() != widths.len() {
            return Err(Error::Param(format!("discriminator expects {} taps, got {}", widths.len(), taps.len())));
        }
        let n = taps[0].shape().first().copied().unwrap_or(0);
        let mut d: Option<Tensor<T>> = None;
        let sigma = self.spec.activation;
        for (l, tap) in taps.iter().enumerate() {
            let e = if tap.ndim() == 2 { tap.clone() } else { flatten(tap)? };
            if e.shape() != [n, widths[l]] {
                return Err(Error::Shape {
                    context: format!("discriminator tap {l}"),
                    expected: vec![n, widths[l]],
                    got: tap.shape().to_vec(),
                });
            }
            let z = match (d.take(), self.spec.fusion) {
                (None, _) => e,
                (Some(prev), Fusion::Sum) => add(&scale(&prev, self.spec.gamma), &e)?,
                (Some(prev), Fusion::Concat) => concat_cols(&scale(&prev, self.spec.gamma), &e)?,
            };
            let a = sigma.apply(&z);
            if l < self.stages.len() {
                d = Some(self.stages[l].forward(&a)?);
            } else {
                let mut h = a;
                for (i, layer) in self.head.iter().enumerate() {
                    if i > 0 {
                        h = sigma.apply(&h);
                    }
                    h = layer.forward(&h)?;
                }
                return Ok(reshape(&h, &[n])?);
            }
        }
        unreachable!("the last tap always reaches the head")
    }

    /// Mirrored stages then head layers, as `(name, tensor)`.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("stage{}.weight", i + 1), s.weight.clone()));
            out.push((format!("stage{}.bias", i + 1), s.bias.clone()));
        }
        for (i, h) in self.head.iter().enumerate() {
            out.push((format!("head{}.weight", i + 1), h.weight.clone()));
            out.push((format!("head{}.bias", i + 1), h.bias.clone()));
        }
        out
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    /// Discriminator that feeds the deepest tap straight into this head,
    /// sharing its parameters.
    pub fn head_only(&self) -> Self {
        let mut spec = self.spec.clone();
        spec.tap_widths = vec![*self.spec.tap_widths.last().unwrap()];
        Discriminator {
            spec,
            stages: Vec::new(),
            head: self.head.clone(),
        }
    }
}

/// Numerically stable logistic sigmoid.
pub fn disc_prob(logit: f64) -> f64 {
    if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    }
}
