//! Declarative sequential networks with named activation taps.
//!
//! A [`NetworkSpec`] lists layers by name; [`Network::build`] validates the
//! list with a symbolic shape pass and allocates parameters. The forward
//! pass returns the logits plus the activations of the layers named in
//! `taps`, which feed the domain discriminator, and the activation named by
//! `embedding`, which feeds the similarity losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    add_bias, batchnorm2d, conv2d, flatten, leaky_relu, matmul, maxpool2d, relu, BatchNormMode, Conv2dParams, Element, Tensor,
};

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        size: usize,
        stride: usize,
    },
    BatchNorm2d,
    Relu,
    LeakyRelu {
        slope: f64,
    },
    Flatten,
    Linear {
        out_features: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec { name: name.into(), kind }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    /// Per-example input shape, e.g. `[1, 32, 32]`.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Layers whose outputs are exposed to the discriminator, shallow first.
    pub taps: Vec<String>,
    /// Layer whose output is the embedding used by similarity losses.
    pub embedding: String,
}

fn pool(layers: &mut Vec<LayerSpec>, name: String) {
    layers.push(LayerSpec::new(name, LayerKind::MaxPool2d { size: 2, stride: 2 }));
}

fn conv_block(layers: &mut Vec<LayerSpec>, i: usize, out_channels: usize, kernel: usize, padding: usize, batchnorm: bool) {
    layers.push(LayerSpec::new(
        format!("conv{i}"),
        LayerKind::Conv2d {
            out_channels,
            kernel,
            stride: 1,
            padding,
        },
    ));
    if batchnorm {
        layers.push(LayerSpec::new(format!("bn{i}"), LayerKind::BatchNorm2d));
    }
    layers.push(LayerSpec::new(format!("relu{i}"), LayerKind::Relu));
    pool(layers, format!("pool{i}"));
}

fn fc_head(layers: &mut Vec<LayerSpec>, hidden: usize, classes: usize) {
    layers.push(LayerSpec::new("flat", LayerKind::Flatten));
    layers.push(LayerSpec::new("fc1", LayerKind::Linear { out_features: hidden }));
    layers.push(LayerSpec::new("fc1_relu", LayerKind::Relu));
    layers.push(LayerSpec::new("fc2", LayerKind::Linear { out_features: classes }));
}

impl NetworkSpec {
    /// Four conv(3×3, 64)-batchnorm-relu-maxpool blocks on 1×32×32, then
    /// fc 64→64 (relu) and fc 64→`classes`.
    ///
    /// Four halvings leave a 2×2 map, so a fifth 2×2 pool reduces it to the
    /// 64 features fc1 expects.
    ///
    /// Taps default to the flattened pool4 output and fc1, the two layers
    /// below the classifier, for transfer between disjoint label sets.
    pub fn digits_embedding(classes: usize) -> Self {
        let mut layers = Vec::new();
        for i in 1..=4 {
            conv_block(&mut layers, i, 64, 3, 1, true);
        }
        pool(&mut layers, "pool5".into());
        fc_head(&mut layers, 64, classes);
        NetworkSpec {
            name: "digits32".into(),
            input: vec![1, 32, 32],
            layers,
            taps: vec!["flat".into(), "fc1_relu".into()],
            embedding: "fc1_relu".into(),
        }
    }

    /// LeNet on 1×28×28: conv(5×5, 20)-relu-pool, conv(5×5, 50)-relu-pool,
    /// fc 800→500 (relu), fc 500→`classes`. Taps default to the last three
    /// layers, for adaptation with a shared label space.
    pub fn lenet(classes: usize) -> Self {
        let mut layers = Vec::new();
        conv_block(&mut layers, 1, 20, 5, 0, false);
        conv_block(&mut layers, 2, 50, 5, 0, false);
        fc_head(&mut layers, 500, classes);
        NetworkSpec {
            name: "lenet28".into(),
            input: vec![1, 28, 28],
            layers,
            taps: vec!["flat".into(), "fc1_relu".into(), "fc2".into()],
            embedding: "fc1_relu".into(),
        }
    }

    /// Small conv-batchnorm-relu-pool network used for quick experiments on
    /// synthetic data.
    pub fn compact(side: usize, channels: usize, hidden: usize, classes: usize) -> Self {
        let mut layers = Vec::new();
        for i in 1..=2 {
            conv_block(&mut layers, i, channels, 3, 1, true);
        }
        fc_head(&mut layers, hidden, classes);
        NetworkSpec {
            name: "compact".into(),
            input: vec![1, side, side],
            layers,
            taps: vec!["flat".into(), "fc1_relu".into()],
            embedding: "fc1_relu".into(),
        }
    }

    pub fn by_name(name: &str, classes: usize) -> Result<Self> {
        match name {
            "digits32" => Ok(Self::digits_embedding(classes)),
            "lenet28" => Ok(Self::lenet(classes)),
            _ => match name.strip_prefix("compact") {
                Some(side) => {
                    let side = side.parse().map_err(|_| Error::Config(format!("unknown architecture `{name}`")))?;
                    Ok(Self::compact(side, 8, 32, classes))
                }
                None => Err(Error::Config(format!("unknown architecture `{name}`"))),
            },
        }
    }

    pub fn with_taps(mut self, taps: &[&str]) -> Self {
        self.taps = taps.iter().map(|s| s.to_string()).collect();
        self
    }

    /// Same network with the final linear layer resized to `classes`.
    pub fn with_classes(mut self, classes: usize) -> Self {
        if let Some(LayerKind::Linear { out_features }) = self.layers.iter_mut().rev().map(|l| &mut l.kind).find(|k| matches!(k, LayerKind::Linear { .. })) {
            *out_features = classes;
        }
        self
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l.kind {
            LayerKind::Linear { out_features } => Some(out_features),
            _ => None,
        })
    }

    fn index_of(&self, name: &str) -> Result<usize> {
        self.layers.iter().position(|l| l.name == name).ok_or_else(|| Error::Build {
            layer: name.to_string(),
            msg: "no layer with this name".into(),
        })
    }

    /// Symbolic shape pass: per-example output shape of every layer.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut names = std::collections::HashSet::new();
        let mut cur = self.input.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            if !names.insert(l.name.as_str()) {
                return Err(Error::Build {
                    layer: l.name.clone(),
                    msg: "duplicate layer name".into(),
                });
            }
            let err = |msg: String| Error::Build { layer: l.name.clone(), msg };
            cur = match (&l.kind, cur.as_slice()) {
                (
                    LayerKind::Conv2d {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    &[_, h, w],
                ) => {
                    let ho = crate::tensor::window_extent(h, *kernel, *stride, *padding).ok_or_else(|| err(format!("kernel {kernel} does not tile {h}×{w}")))?;
                    let wo = crate::tensor::window_extent(w, *kernel, *stride, *padding).ok_or_else(|| err(format!("kernel {kernel} does not tile {h}×{w}")))?;
                    vec![*out_channels, ho, wo]
                }
                (LayerKind::MaxPool2d { size, stride }, &[c, h, w]) => {
                    let ho = crate::tensor::window_extent(h, *size, *stride, 0).ok_or_else(|| err(format!("pool {size} does not tile {h}×{w}")))?;
                    let wo = crate::tensor::window_extent(w, *size, *stride, 0).ok_or_else(|| err(format!("pool {size} does not tile {h}×{w}")))?;
                    vec![c, ho, wo]
                }
                (LayerKind::BatchNorm2d, s @ &[_, _, _]) => s.to_vec(),
                (LayerKind::Relu | LayerKind::LeakyRelu { .. }, s) => s.to_vec(),
                (LayerKind::Flatten, s) => vec![s.iter().product()],
                (LayerKind::Linear { out_features }, &[_]) => vec![*out_features],
                (kind, s) => return Err(err(format!("{kind:?} cannot take input of shape {s:?}"))),
            };
            out.push(cur.clone());
        }
        for t in self.taps.iter().chain(std::iter::once(&self.embedding)) {
            self.index_of(t)?;
        }
        Ok(out)
    }

    pub fn tap_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.shapes()?;
        self.taps.iter().map(|t| Ok(shapes[self.index_of(t)?].clone())).collect()
    }

    /// Flattened width of each tap.
    pub fn tap_widths(&self) -> Result<Vec<usize>> {
        Ok(self.tap_shapes()?.iter().map(|s| s.iter().product()).collect())
    }

    pub fn embedding_width(&self) -> Result<usize> {
        let shapes = self.shapes()?;
        Ok(shapes[self.index_of(&self.embedding)?].iter().product())
    }

    /// Number of learnable scalars.
    pub fn parameter_count(&self) -> Result<usize> {
        let shapes = self.shapes()?;
        let mut prev = self.input.clone();
        let mut total = 0;
        for (l, s) in self.layers.iter().zip(&shapes) {
            total += match l.kind {
                LayerKind::Conv2d { out_channels, kernel, .. } => out_channels * prev[0] * kernel * kernel + out_channels,
                LayerKind::Linear { out_features } => prev[0] * out_features + out_features,
                LayerKind::BatchNorm2d => 2 * prev[0],
                _ => 0,
            };
            prev = s.clone();
        }
        Ok(total)
    }
}

pub(crate) enum Layer<T: Element> {
    Conv2d { weight: Tensor<T>, bias: Tensor<T>, params: Conv2dParams },
    MaxPool2d { size: usize, stride: usize },
    BatchNorm2d { gamma: Tensor<T>, beta: Tensor<T>, running_mean: Tensor<T>, running_var: Tensor<T> },
    Relu,
    LeakyRelu(f64),
    Flatten,
    Linear { weight: Tensor<T>, bias: Tensor<T> },
}

impl<T: Element> Layer<T> {
    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(match self {
            Layer::Conv2d { weight, bias, params } => conv2d(x, weight, bias, *params)?,
            Layer::MaxPool2d { size, stride } => maxpool2d(x, *size, *stride)?,
            Layer::BatchNorm2d {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                let m = match mode {
                    Mode::Train => BatchNormMode::Train,
                    Mode::Eval => BatchNormMode::Eval,
                };
                batchnorm2d(x, gamma, beta, running_mean, running_var, m)?
            }
            Layer::Relu => relu(x),
            Layer::LeakyRelu(s) => leaky_relu(x, *s),
            Layer::Flatten => flatten(x)?,
            Layer::Linear { weight, bias } => add_bias(&matmul(x, weight)?, bias)?,
        })
    }

    /// `(suffix, tensor, trainable)` for every tensor the layer owns.
    fn tensors(&self) -> Vec<(&'static str, &Tensor<T>, bool)> {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::Linear { weight, bias } => vec![("weight", weight, true), ("bias", bias, true)],
            Layer::BatchNorm2d {
                gamma,
                beta,
                running_mean,
                running_var,
            } => vec![
                ("gamma", gamma, true),
                ("beta", beta, true),
                ("running_mean", running_mean, false),
                ("running_var", running_var, false),
            ],
            _ => Vec::new(),
        }
    }
}

fn uniform_fan_in<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::c(rng.gen_range(-bound..bound))).collect();
    Tensor::param(shape, data).expect("shape and data agree")
}

fn build_layer<T: Element>(spec: &LayerSpec, input: &[usize], rng: &mut ChaCha8Rng) -> Layer<T> {
    match spec.kind {
        LayerKind::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let fan_in = input[0] * kernel * kernel;
            Layer::Conv2d {
                weight: uniform_fan_in(rng, &[out_channels, input[0], kernel, kernel], fan_in),
                bias: Tensor::param(&[out_channels], vec![T::zero(); out_channels]).unwrap(),
                params: Conv2dParams { stride, padding },
            }
        }
        LayerKind::Linear { out_features } => Layer::Linear {
            weight: uniform_fan_in(rng, &[input[0], out_features], input[0]),
            bias: Tensor::param(&[out_features], vec![T::zero(); out_features]).unwrap(),
        },
        LayerKind::BatchNorm2d => {
            let c = input[0];
            Layer::BatchNorm2d {
                gamma: Tensor::param(&[c], vec![T::one(); c]).unwrap(),
                beta: Tensor::param(&[c], vec![T::zero(); c]).unwrap(),
                running_mean: Tensor::zeros(&[c]),
                running_var: Tensor::full(&[c], T::one()),
            }
        }
        LayerKind::MaxPool2d { size, stride } => Layer::MaxPool2d { size, stride },
        LayerKind::Relu => Layer::Relu,
        LayerKind::LeakyRelu { slope } => Layer::LeakyRelu(slope),
        LayerKind::Flatten => Layer::Flatten,
    }
}

pub struct ForwardOutput<T: Element> {
    pub logits: Tensor<T>,
    pub taps: Vec<Tensor<T>>,
    pub embedding: Tensor<T>,
}

/// Whether [`Network::clone_into_target`] keeps the classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadInit {
    Copy,
    Reinit { classes: usize, seed: u64 },
}

pub struct Network<T: Element = f32> {
    spec: NetworkSpec,
    layers: Vec<Layer<T>>,
    tap_index: Vec<usize>,
    embedding_index: usize,
}

impl<T: Element> Network<T> {
    /// Builds the network with fan-in uniform weights, zero biases and
    /// identity batchnorm, deterministically from `seed`.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut input = spec.input.clone();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (l, s) in spec.layers.iter().zip(&shapes) {
            layers.push(build_layer(l, &input, &mut rng));
            input = s.clone();
        }
        let tap_index = spec.taps.iter().map(|t| spec.index_of(t)).collect::<Result<_>>()?;
        let embedding_index = spec.index_of(&spec.embedding)?;
        Ok(Network {
            spec: spec.clone(),
            layers,
            tap_index,
            embedding_index,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<ForwardOutput<T>> {
        if x.ndim() != self.spec.input.len() + 1 || x.shape()[1..] != self.spec.input[..] {
            let mut expected = vec![x.shape().first().copied().unwrap_or(0)];
            expected.extend_from_slice(&self.spec.input);
            return Err(Error::Shape {
                context: format!("{} input", self.spec.name),
                expected,
                got: x.shape().to_vec(),
            });
        }
        let mut taps = vec![None; self.tap_index.len()];
        let mut embedding = None;
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.forward(&cur, mode)?;
            for (slot, &ti) in taps.iter_mut().zip(&self.tap_index) {
                if ti == i {
                    *slot = Some(cur.clone());
                }
            }
            if i == self.embedding_index {
                embedding = Some(cur.clone());
            }
        }
        Ok(ForwardOutput {
            logits: cur,
            taps: taps.into_iter().map(|t| t.expect("tap indices are in range")).collect(),
            embedding: embedding.expect("embedding index is in range"),
        })
    }

    pub fn logits(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward(x, mode)?.logits)
    }

    fn named(&self, trainable: Option<bool>) -> Vec<(String, Tensor<T>)> {
        self.spec
            .layers
            .iter()
            .zip(&self.layers)
            .flat_map(|(s, l)| {
                l.tensors()
                    .into_iter()
                    .filter(|(_, _, tr)| trainable.map_or(true, |want| *tr == want))
                    .map(|(suffix, t, _)| (format!("{}.{}", s.name, suffix), t.clone()))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Trainable parameters, in layer order.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        self.named(Some(true))
    }

    /// Parameters plus batchnorm running statistics; everything a
    /// checkpoint needs.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.named(None)
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    fn head_layer_name(&self) -> Option<&str> {
        self.spec.layers.iter().rev().find(|l| matches!(l.kind, LayerKind::Linear { .. })).map(|l| l.name.as_str())
    }

    /// Parameters of the final linear (classifier) layer.
    pub fn head_parameters(&self) -> Vec<Tensor<T>> {
        let head = self.head_layer_name().map(|h| format!("{h}."));
        self.named_parameters()
            .into_iter()
            .filter(|(n, _)| head.as_deref().is_some_and(|h| n.starts_with(h)))
            .map(|(_, t)| t)
            .collect()
    }

    /// Parameters of everything below the classifier layer.
    pub fn body_parameters(&self) -> Vec<Tensor<T>> {
        let head = self.head_layer_name().map(|h| format!("{h}."));
        self.named_parameters()
            .into_iter()
            .filter(|(n, _)| !head.as_deref().is_some_and(|h| n.starts_with(h)))
            .map(|(_, t)| t)
            .collect()
    }

    /// Copies values from `(name, data)` pairs; every tensor of the network
    /// must be present with a matching length.
    pub fn load_values(&self, values: &[(String, Vec<usize>, Vec<T>)]) -> Result<()> {
        for (name, t) in self.named_tensors() {
            let (_, shape, data) = values.iter().find(|(n, _, _)| *n == name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if shape.as_slice() != t.shape() || data.len() != t.numel() {
                return Err(Error::Shape {
                    context: name,
                    expected: t.shape().to_vec(),
                    got: shape.clone(),
                });
            }
            t.data_mut().copy_from_slice(data);
        }
        Ok(())
    }

    fn map_tensors(&self, f: impl Fn(&Tensor<T>) -> Tensor<T>) -> Vec<Layer<T>> {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv2d { weight, bias, params } => Layer::Conv2d {
                    weight: f(weight),
                    bias: f(bias),
                    params: *params,
                },
                Layer::Linear { weight, bias } => Layer::Linear {
                    weight: f(weight),
                    bias: f(bias),
                },
                Layer::BatchNorm2d {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => Layer::BatchNorm2d {
                    gamma: f(gamma),
                    beta: f(beta),
                    running_mean: running_mean.detach(),
                    running_var: running_var.detach(),
                },
                Layer::MaxPool2d { size, stride } => Layer::MaxPool2d { size: *size, stride: *stride },
                Layer::Relu => Layer::Relu,
                Layer::LeakyRelu(s) => Layer::LeakyRelu(*s),
                Layer::Flatten => Layer::Flatten,
            })
            .collect()
    }

    fn with_layers(&self, layers: Vec<Layer<T>>) -> Self {
        Network {
            spec: self.spec.clone(),
            layers,
            tap_index: self.tap_index.clone(),
            embedding_index: self.embedding_index,
        }
    }

    /// Independent copy with its own storage.
    pub fn deep_clone(&self) -> Self {
        self.with_layers(self.map_tensors(|t| if t.requires_grad() { t.detach_param() } else { t.detach() }))
    }

    /// Independent copy whose parameters do not require gradients.
    pub fn frozen(&self) -> Self {
        self.with_layers(self.map_tensors(|t| t.detach()))
    }

    /// Initializes a target network from this (source) network. With
    /// [`HeadInit::Reinit`] the classifier layer is rebuilt for a new class
    /// count from `seed`; every other tensor is copied bit for bit.
    pub fn clone_into_target(&self, head: HeadInit) -> Result<Self> {
        match head {
            HeadInit::Copy => Ok(self.deep_clone()),
            HeadInit::Reinit { classes, seed } => {
                let spec = self.spec.clone().with_classes(classes);
                let target = Network::<T>::build(&spec, seed)?;
                let head_name = self.head_layer_name().unwrap_or_default().to_string();
                let src = self.named_tensors();
                for (name, t) in target.named_tensors() {
                    if name.starts_with(&format!("{head_name}.")) {
                        continue;
                    }
                    let (_, s) = src.iter().find(|(n, _)| *n == name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
                    t.data_mut().copy_from_slice(&s.data());
                }
                Ok(target)
            }
        }
    }

    /// Copy in another element type, e.g. `f64` for gradient checks.
    pub fn cast<U: Element>(&self) -> Network<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv2d { weight, bias, params } => Layer::Conv2d {
                    weight: weight.cast(),
                    bias: bias.cast(),
                    params: *params,
                },
                Layer::Linear { weight, bias } => Layer::Linear {
                    weight: weight.cast(),
                    bias: bias.cast(),
                },
                Layer::BatchNorm2d {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => Layer::BatchNorm2d {
                    gamma: gamma.cast(),
                    beta: beta.cast(),
                    running_mean: running_mean.cast(),
                    running_var: running_var.cast(),
                },
                Layer::MaxPool2d { size, stride } => Layer::MaxPool2d { size: *size, stride: *stride },
                Layer::Relu => Layer::Relu,
                Layer::LeakyRelu(s) => Layer::LeakyRelu(*s),
                Layer::Flatten => Layer::Flatten,
            })
            .collect();
        Network {
            spec: self.spec.clone(),
            layers,
            tap_index: self.tap_index.clone(),
            embedding_index: self.embedding_index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    SourceEncoder,
    TargetEncoder,
    ClassifierHead,
    Discriminator,
}

/// Registry of named parameters partitioned into optimizer groups.
pub struct ParamStore<T: Element = f32> {
    entries: Vec<(String, ParamGroup, Tensor<T>)>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { entries: Vec::new() }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds tensors under `prefix.name`. Names must be unique and a tensor
    /// may belong to one group only.
    pub fn register(&mut self, group: ParamGroup, prefix: &str, tensors: Vec<(String, Tensor<T>)>) -> Result<()> {
        for (name, t) in tensors {
            let full = format!("{prefix}.{name}");
            if self.entries.iter().any(|(n, _, _)| *n == full) {
                return Err(Error::Param(format!("duplicate parameter name `{full}`")));
            }
            if let Some((n, g, _)) = self.entries.iter().find(|(_, _, e)| e.id() == t.id()) {
                return Err(Error::Param(format!("`{full}` is already registered as `{n}` in {g:?}")));
            }
            self.entries.push((full, group, t));
        }
        Ok(())
    }

    pub fn group(&self, group: ParamGroup) -> Vec<Tensor<T>> {
        self.entries.iter().filter(|(_, g, _)| *g == group).map(|(_, _, t)| t.clone()).collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _, _)| n == name).map(|(_, _, t)| t)
    }

    pub fn zero_grads(&self, group: ParamGroup) {
        for (_, g, t) in &self.entries {
            if *g == group {
                t.zero_grad();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax;

    #[test]
    fn digits_spec_shapes() {
        let spec = NetworkSpec::digits_embedding(5);
        let shapes = spec.shapes().unwrap();
        assert_eq!(shapes.last().unwrap(), &vec![5]);
        assert_eq!(spec.clone().with_taps(&["flat", "fc1_relu", "fc2"]).tap_widths().unwrap(), vec![64, 64, 5]);
        assert_eq!(spec.tap_widths().unwrap(), vec![64, 64]);
    }

    #[test]
    fn lenet_flatten_width_is_800() {
        let spec = NetworkSpec::lenet(10);
        let shapes = spec.shapes().unwrap();
        let flat = spec.layers.iter().position(|l| l.name == "flat").unwrap();
        assert_eq!(shapes[flat], vec![800]);
        assert_eq!(spec.tap_widths().unwrap(), vec![800, 500, 10]);
    }

    #[test]
    fn parameter_counts_are_stable() {
        // conv1 1·9·64+64, conv2..4 64·9·64+64, bn 4·128, fc1 64·64+64, fc2 64·5+5
        let want = (9 * 64 + 64) + 3 * (64 * 9 * 64 + 64) + 4 * 128 + (64 * 64 + 64) + (64 * 5 + 5);
        assert_eq!(NetworkSpec::digits_embedding(5).parameter_count().unwrap(), want);
        assert_eq!(want, 116_421);
        assert_eq!(NetworkSpec::lenet(10).parameter_count().unwrap(), 431_080);
        let net = Network::<f32>::build(&NetworkSpec::digits_embedding(5), 0).unwrap();
        assert_eq!(net.parameters().iter().map(|p| p.numel()).sum::<usize>(), want);
    }

    #[test]
    fn inconsistent_spec_names_layer() {
        let mut spec = NetworkSpec::digits_embedding(5);
        spec.layers.remove(spec.layers.iter().position(|l| l.name == "flat").unwrap());
        match spec.shapes() {
            Err(Error::Build { layer, .. }) => assert_eq!(layer, "fc1"),
            other => panic!("unexpected {other:?}"),
        }
        let mut spec = NetworkSpec::digits_embedding(5);
        spec.input = vec![1, 30, 30];
        assert!(matches!(spec.shapes(), Err(Error::Build { .. })));
    }

    #[test]
    fn build_is_deterministic() {
        let spec = NetworkSpec::compact(8, 4, 6, 3);
        let a = Network::<f32>::build(&spec, 9).unwrap();
        let b = Network::<f32>::build(&spec, 9).unwrap();
        for (x, y) in a.parameters().iter().zip(b.parameters()) {
            assert_eq!(x.to_vec(), y.to_vec());
        }
        let c = Network::<f32>::build(&spec, 10).unwrap();
        assert_ne!(a.parameters()[0].to_vec(), c.parameters()[0].to_vec());
    }

    #[test]
    fn zero_input_gives_uniform_probabilities() {
        let net = Network::<f32>::build(&NetworkSpec::digits_embedding(5), 1).unwrap();
        let out = net.forward(&Tensor::zeros(&[2, 1, 32, 32]), Mode::Train).unwrap();
        let p = softmax(&out.logits, 1.0).unwrap().to_vec();
        assert!(p.iter().all(|v| v.is_finite() && (v - 0.2).abs() <= 0.05));
        assert!(out.taps.iter().all(|t| t.shape()[0] == 2));
        assert_eq!(out.embedding.shape(), &[2, 64]);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let net = Network::<f32>::build(&NetworkSpec::lenet(10), 1).unwrap();
        assert!(matches!(net.forward(&Tensor::zeros(&[2, 1, 32, 32]), Mode::Eval), Err(Error::Shape { .. })));
    }

    #[test]
    fn clone_is_independent() {
        let spec = NetworkSpec::compact(8, 4, 6, 3);
        let src = Network::<f32>::build(&spec, 3).unwrap();
        let tgt = src.clone_into_target(HeadInit::Copy).unwrap();
        let before = src.parameters()[0].to_vec();
        tgt.parameters()[0].data_mut()[0] += 1.0;
        assert_eq!(src.parameters()[0].to_vec(), before);
        for (a, b) in src.head_parameters().iter().zip(tgt.head_parameters()) {
            assert_eq!(a.to_vec(), b.to_vec());
        }
    }

    #[test]
    fn reinit_head_keeps_body() {
        let spec = NetworkSpec::compact(8, 4, 6, 3);
        let src = Network::<f32>::build(&spec, 3).unwrap();
        let tgt = src.clone_into_target(HeadInit::Reinit { classes: 3, seed: 77 }).unwrap();
        for (a, b) in src.body_parameters().iter().zip(tgt.body_parameters()) {
            assert_eq!(a.to_vec(), b.to_vec());
        }
        assert_ne!(src.head_parameters()[0].to_vec(), tgt.head_parameters()[0].to_vec());
        let wider = src.clone_into_target(HeadInit::Reinit { classes: 7, seed: 77 }).unwrap();
        assert_eq!(wider.spec().num_classes(), Some(7));
    }

    #[test]
    fn eval_forward_is_pure() {
        let net = Network::<f32>::build(&NetworkSpec::compact(8, 4, 6, 3), 5).unwrap();
        let x = Tensor::new(&[3, 1, 8, 8], (0..192).map(|v| (v as f32 * 0.37).sin()).collect()).unwrap();
        let a = net.logits(&x, Mode::Eval).unwrap().to_vec();
        let b = net.logits(&x, Mode::Eval).unwrap().to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn param_store_groups() {
        let net = Network::<f32>::build(&NetworkSpec::compact(8, 4, 6, 3), 5).unwrap();
        let mut store = ParamStore::new();
        store.register(ParamGroup::TargetEncoder, "tgt", net.named_parameters()).unwrap();
        assert!(store.register(ParamGroup::Discriminator, "other", net.named_parameters()).is_err());
        assert_eq!(store.group(ParamGroup::TargetEncoder).len(), net.parameters().len());
        assert!(store.group(ParamGroup::Discriminator).is_empty());
        assert!(store.get("tgt.conv1.weight").is_some());
    }
}
