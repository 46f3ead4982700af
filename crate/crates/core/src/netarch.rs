//! U-Net generator and patch-level discriminator.
//!
//! A [`Model`] owns a flat, deterministically ordered list of named
//! [`Parameter`]s. Forward passes record onto a caller-supplied [`Graph`]
//! after binding the parameters, so the same code serves inference,
//! training, and gradient checks.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{BatchStats, Gradients, Graph, NormMode, Parameter, Shape, Tensor4, Var};
use crate::error::{Error, Result};

pub const INIT_STD: f32 = 0.02;
pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Number of stride-2 encoder stages.
    pub depth: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub kernel: usize,
    pub leaky_slope: f32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            image_size: 256,
            in_channels: 3,
            depth: 5,
            base_channels: 16,
            max_channels: 256,
            kernel: 4,
            leaky_slope: 0.2,
        }
    }
}

impl GeneratorConfig {
    pub fn desk() -> Self {
        GeneratorConfig {
            image_size: 64,
            depth: 3,
            base_channels: 16,
            ..Self::default()
        }
    }

    /// Output channels of encoder stage `i` (0-based).
    pub fn stage_channels(&self, i: usize) -> usize {
        (self.base_channels << i.min(40)).min(self.max_channels)
    }

    pub fn bottleneck(&self) -> Shape {
        let side = self.image_size >> self.depth;
        Shape::new(1, self.stage_channels(self.depth - 1), side, side)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !self.image_size.is_power_of_two() {
            problems.push(format!(
                "image_size {} is not a power of two",
                self.image_size
            ));
        }
        if self.depth == 0 {
            problems.push("depth must be at least 1".to_string());
        } else if self.depth >= usize::BITS as usize || (self.image_size >> self.depth) == 0 {
            problems.push(format!(
                "image_size {} cannot be halved {} times",
                self.image_size, self.depth
            ));
        }
        if self.in_channels == 0 {
            problems.push("in_channels must be positive".to_string());
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            problems.push(format!(
                "need 0 < base_channels ({}) <= max_channels ({})",
                self.base_channels, self.max_channels
            ));
        }
        if self.kernel < 2 || !self.kernel.is_multiple_of(2) {
            problems.push(format!(
                "kernel {} must be even and at least 2",
                self.kernel
            ));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            problems.push(format!("leaky_slope {} outside (0, 1)", self.leaky_slope));
        }
        join_problems("generator", problems)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// 6 for (condition, candidate) pairs, 3 for single images.
    pub in_channels: usize,
    pub image_size: usize,
    pub num_layers: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub leaky_slope: f32,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            in_channels: 6,
            image_size: 256,
            num_layers: 2,
            base_channels: 64,
            max_channels: 512,
            kernel: 3,
            stride: 2,
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        DiscriminatorConfig {
            image_size: 64,
            num_layers: 2,
            base_channels: 32,
            ..Self::default()
        }
    }

    pub fn paired(&self) -> bool {
        self.in_channels == 6
    }

    pub fn layer_channels(&self, i: usize) -> usize {
        (self.base_channels << i.min(40)).min(self.max_channels)
    }

    /// Side length of the score map.
    pub fn patch_side(&self) -> usize {
        self.image_size / self.stride.pow(self.num_layers as u32)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !matches!(self.in_channels, 3 | 6) {
            problems.push(format!("in_channels {} must be 3 or 6", self.in_channels));
        }
        if self.num_layers == 0 {
            problems.push("num_layers must be at least 1".to_string());
        }
        if self.stride < 1 {
            problems.push("stride must be positive".to_string());
        } else if self.num_layers < 40 {
            let div = self.stride.checked_pow(self.num_layers as u32);
            match div {
                Some(d) if self.image_size >= d && self.image_size.is_multiple_of(d) => {}
                _ => problems.push(format!(
                    "image_size {} is not divisible into a patch map by stride {}^{}",
                    self.image_size, self.stride, self.num_layers
                )),
            }
        } else {
            problems.push(format!(
                "num_layers {} collapses the patch map",
                self.num_layers
            ));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            problems.push(format!(
                "need 0 < base_channels ({}) <= max_channels ({})",
                self.base_channels, self.max_channels
            ));
        }
        if self.kernel.is_multiple_of(2) {
            problems.push(format!("kernel {} must be odd", self.kernel));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            problems.push(format!("leaky_slope {} outside (0, 1)", self.leaky_slope));
        }
        join_problems("discriminator", problems)
    }
}

fn join_problems(what: &str, problems: Vec<String>) -> Result<()> {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what}: {}", problems.join("; "))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Architecture {
    Generator(GeneratorConfig),
    Discriminator(DiscriminatorConfig),
}

/// How batch norm layers behave during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch statistics; running averages are returned for committing.
    Train,
    /// Batch statistics without touching the running averages.
    TrainFrozenStats,
    /// Stored running averages.
    Eval,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    weight: usize,
    bias: Option<usize>,
    norm: Option<Norm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: String,
    pub arch: Architecture,
    params: Vec<Parameter>,
}

/// Graph handles of a model's trainable parameters.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

/// Output of a recorded forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub output: Var,
    stats: Vec<(Norm, BatchStats)>,
}

struct Builder {
    prefix: String,
    params: Vec<Parameter>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn add(&mut self, id: String, tensor: Tensor4, trainable: bool) -> usize {
        self.params.push(Parameter::new(
            format!("{}/{id}", self.prefix),
            tensor,
            trainable,
        ));
        self.params.len() - 1
    }

    fn weight(&mut self, id: String, shape: Shape) -> usize {
        let t = Tensor4::randn(shape, 0.0, INIT_STD, &mut self.rng);
        self.add(id, t, true)
    }

    fn bias(&mut self, id: String, channels: usize) -> usize {
        self.add(id, Tensor4::zeros(Shape::new(1, channels, 1, 1)), true)
    }

    fn norm(&mut self, stage: &str, channels: usize) -> Norm {
        let s = Shape::new(1, channels, 1, 1);
        Norm {
            gamma: self.add(format!("{stage}/bn/gamma"), Tensor4::full(s, 1.0), true),
            beta: self.add(format!("{stage}/bn/beta"), Tensor4::zeros(s), true),
            running_mean: self.add(format!("{stage}/bn/running_mean"), Tensor4::zeros(s), false),
            running_var: self.add(
                format!("{stage}/bn/running_var"),
                Tensor4::full(s, 1.0),
                false,
            ),
        }
    }
}

/// Builds the U-Net generator. Encoder stage `i` halves the resolution with
/// a strided convolution, batch norm, and leaky ReLU; decoder stages mirror
/// it with transposed convolutions, each but the first consuming the
/// channel concatenation of the previous decoder output and the mirrored
/// encoder output. The last stage maps back to `in_channels` through tanh.
pub fn build_generator(name: &str, config: &GeneratorConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut b = Builder {
        prefix: name.to_string(),
        params: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let k = config.kernel;
    let mut prev = config.in_channels;
    for i in 0..config.depth {
        let out = config.stage_channels(i);
        let stage = format!("e{}", i + 1);
        b.weight(format!("{stage}/conv/weight"), Shape::new(out, prev, k, k));
        b.norm(&stage, out);
        prev = out;
    }
    let l = config.depth;
    for j in 0..l {
        let input = if j == 0 {
            config.stage_channels(l - 1)
        } else {
            config.stage_channels(l - 1 - j) * 2
        };
        let stage = format!("d{}", j + 1);
        if j + 1 < l {
            let out = config.stage_channels(l - 2 - j);
            b.weight(
                format!("{stage}/deconv/weight"),
                Shape::new(input, out, k, k),
            );
            b.norm(&stage, out);
        } else {
            b.weight(
                format!("{stage}/deconv/weight"),
                Shape::new(input, config.in_channels, k, k),
            );
            b.bias(format!("{stage}/deconv/bias"), config.in_channels);
        }
    }
    Ok(Model {
        name: name.to_string(),
        arch: Architecture::Generator(config.clone()),
        params: b.params,
    })
}

/// Builds the patch discriminator: `num_layers` strided convolutions with
/// leaky ReLU (batch norm on all but the first), then a stride-1 projection
/// to one raw score channel.
pub fn build_discriminator(name: &str, config: &DiscriminatorConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut b = Builder {
        prefix: name.to_string(),
        params: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let k = config.kernel;
    let mut prev = config.in_channels;
    for i in 0..config.num_layers {
        let out = config.layer_channels(i);
        let stage = format!("l{}", i + 1);
        b.weight(format!("{stage}/conv/weight"), Shape::new(out, prev, k, k));
        if i == 0 {
            b.bias(format!("{stage}/conv/bias"), out);
        } else {
            b.norm(&stage, out);
        }
        prev = out;
    }
    b.weight("head/conv/weight".to_string(), Shape::new(1, prev, k, k));
    b.bias("head/conv/bias".to_string(), 1);
    Ok(Model {
        name: name.to_string(),
        arch: Architecture::Discriminator(config.clone()),
        params: b.params,
    })
}

/// Total number of trainable scalars.
pub fn parameter_count(model: &Model) -> usize {
    model
        .params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.tensor.numel())
        .sum()
}

impl Model {
    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn parameter(&self, id: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.id == id)
    }

    pub fn parameter_mut(&mut self, id: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.id == id)
    }

    /// Parameter tensors keyed by id.
    pub fn state(&self) -> BTreeMap<&str, &Tensor4> {
        self.params
            .iter()
            .map(|p| (p.id.as_str(), &p.tensor))
            .collect()
    }

    /// Records trainable parameters as leaves; gradients are tracked when
    /// `track` is set.
    pub fn bind(&self, graph: &mut Graph, track: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| p.trainable.then(|| p.bind(graph, track)))
                .collect(),
        }
    }

    /// Adds the gradients of the bound parameters into their accumulators.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(v) = v {
                p.accumulate(grads, *v)?;
            }
        }
        Ok(())
    }

    /// Folds the batch statistics of a [`ForwardMode::Train`] pass into the
    /// running averages.
    pub fn commit_stats(&mut self, forward: &Forward) {
        for (norm, stats) in &forward.stats {
            let m = BN_MOMENTUM;
            for (r, &s) in self.params[norm.running_mean]
                .tensor
                .data_mut()
                .iter_mut()
                .zip(&stats.mean)
            {
                *r = (1.0 - m) * *r + m * s;
            }
            for (r, &s) in self.params[norm.running_var]
                .tensor
                .data_mut()
                .iter_mut()
                .zip(&stats.var)
            {
                *r = (1.0 - m) * *r + m * s;
            }
        }
    }

    fn var(&self, bound: &Bound, index: usize) -> Var {
        bound.vars[index].expect("trainable parameters are bound")
    }

    fn input_shape(&self) -> (usize, usize) {
        match &self.arch {
            Architecture::Generator(c) => (c.in_channels, c.image_size),
            Architecture::Discriminator(c) => (c.in_channels, c.image_size),
        }
    }

    fn check_input(&self, s: Shape) -> Result<()> {
        let (c, size) = self.input_shape();
        if (s.channels, s.height, s.width) != (c, size, size) || s.batch == 0 {
            return Err(Error::ShapeMismatch {
                op: "model_input",
                left: s,
                right: Shape::new(s.batch.max(1), c, size, size),
            });
        }
        Ok(())
    }

    fn normalize(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        x: Var,
        norm: Norm,
        mode: ForwardMode,
        stats: &mut Vec<(Norm, BatchStats)>,
    ) -> Result<Var> {
        let (gamma, beta) = (self.var(bound, norm.gamma), self.var(bound, norm.beta));
        let nm = match mode {
            ForwardMode::Train | ForwardMode::TrainFrozenStats => NormMode::Train,
            ForwardMode::Eval => NormMode::Eval {
                running_mean: self.params[norm.running_mean].tensor.data(),
                running_var: self.params[norm.running_var].tensor.data(),
            },
        };
        let (y, batch) = graph.batch_norm(x, gamma, beta, nm, BN_EPS)?;
        if let (ForwardMode::Train, Some(batch)) = (mode, batch) {
            stats.push((norm, batch));
        }
        Ok(y)
    }

    fn layers(&self) -> Vec<Layer> {
        let mut layers: Vec<Layer> = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            let tail = p.id.rsplit('/').next().unwrap_or("");
            match tail {
                "weight" => layers.push(Layer {
                    weight: i,
                    bias: None,
                    norm: None,
                }),
                "bias" => layers.last_mut().expect("bias follows weight").bias = Some(i),
                "gamma" => {
                    layers.last_mut().expect("norm follows weight").norm = Some(Norm {
                        gamma: i,
                        beta: i + 1,
                        running_mean: i + 2,
                        running_var: i + 3,
                    })
                }
                _ => {}
            }
        }
        layers
    }

    /// Records a forward pass of `x` on `graph`.
    pub fn forward(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        x: Var,
        mode: ForwardMode,
    ) -> Result<Forward> {
        self.forward_ablated(graph, bound, x, mode, None)
    }

    /// Like [`Model::forward`], but for a generator replaces the skip input
    /// drawn from encoder stage `ablate_skip` (1-based) with zeros.
    pub fn forward_ablated(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        x: Var,
        mode: ForwardMode,
        ablate_skip: Option<usize>,
    ) -> Result<Forward> {
        self.check_input(graph.shape(x))?;
        let layers = self.layers();
        let mut stats = Vec::new();
        let output = match &self.arch {
            Architecture::Generator(c) => {
                let pad = (c.kernel - 2) / 2;
                let l = c.depth;
                let mut enc = Vec::with_capacity(l);
                let mut h = x;
                for layer in &layers[..l] {
                    let w = self.var(bound, layer.weight);
                    h = graph.conv2d(h, w, None, 2, pad)?;
                    h = self.normalize(
                        graph,
                        bound,
                        h,
                        layer.norm.expect("encoder norm"),
                        mode,
                        &mut stats,
                    )?;
                    h = graph.leaky_relu(h, c.leaky_slope)?;
                    enc.push(h);
                }
                let mut d = enc[l - 1];
                for (j, layer) in layers[l..].iter().enumerate() {
                    if j > 0 {
                        let stage = l - j;
                        let mut skip = enc[stage - 1];
                        if ablate_skip == Some(stage) {
                            skip = graph.constant(Tensor4::zeros(graph.shape(skip)));
                        }
                        d = graph.concat_channels(d, skip)?;
                    }
                    let w = self.var(bound, layer.weight);
                    let b = layer.bias.map(|i| self.var(bound, i));
                    d = graph.conv_transpose2d(d, w, b, 2, pad)?;
                    match layer.norm {
                        Some(norm) => {
                            d = self.normalize(graph, bound, d, norm, mode, &mut stats)?;
                            d = graph.leaky_relu(d, c.leaky_slope)?;
                        }
                        None => d = graph.tanh(d),
                    }
                }
                d
            }
            Architecture::Discriminator(c) => {
                let pad = (c.kernel - 1) / 2;
                let (head, body) = layers.split_last().expect("discriminator has a head");
                let mut h = x;
                for layer in body {
                    let w = self.var(bound, layer.weight);
                    let b = layer.bias.map(|i| self.var(bound, i));
                    h = graph.conv2d(h, w, b, c.stride, pad)?;
                    if let Some(norm) = layer.norm {
                        h = self.normalize(graph, bound, h, norm, mode, &mut stats)?;
                    }
                    h = graph.leaky_relu(h, c.leaky_slope)?;
                }
                let w = self.var(bound, head.weight);
                let b = head.bias.map(|i| self.var(bound, i));
                graph.conv2d(h, w, b, 1, pad)?
            }
        };
        Ok(Forward { output, stats })
    }

    /// Inference pass with running batch-norm statistics.
    pub fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let f = self.forward(&mut g, &bound, xv, ForwardMode::Eval)?;
        Ok(g.value(f.output).clone())
    }
}

fn expect_arch(model: &Model, generator: bool) -> Result<()> {
    let ok = matches!(
        (&model.arch, generator),
        (Architecture::Generator(_), true) | (Architecture::Discriminator(_), false)
    );
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(
            "forward",
            format!("model `{}` has the wrong architecture", model.name),
        ))
    }
}

/// Enhances `x` with a generator in eval mode.
pub fn generator_forward(model: &Model, x: &Tensor4) -> Result<Tensor4> {
    expect_arch(model, true)?;
    model.infer(x)
}

/// Raw patch scores of a discriminator in eval mode.
pub fn discriminator_forward(model: &Model, x: &Tensor4) -> Result<Tensor4> {
    expect_arch(model, false)?;
    model.infer(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::{grad_check, DEFAULT_EPSILON, DEFAULT_TOLERANCE};
    use proptest::prelude::*;

    fn input(shape: Shape, seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::rand_uniform(shape, -1.0, 1.0, &mut rng)
    }

    #[test]
    fn full_scale_bottleneck() {
        let c = GeneratorConfig::default();
        assert_eq!(c.bottleneck(), Shape::new(1, 256, 8, 8));
        assert_eq!(GeneratorConfig::desk().bottleneck().height, 8);
    }

    #[test]
    fn desk_generator_shape_and_bound() {
        let g = build_generator("g", &GeneratorConfig::desk(), 1).unwrap();
        let x = input(Shape::new(1, 3, 64, 64), 2);
        let y = generator_forward(&g, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.max_abs() <= 1.0);
        assert_eq!(y, generator_forward(&g, &x).unwrap());
    }

    #[test]
    fn seeded_init_is_bitwise_stable() {
        let c = GeneratorConfig::desk();
        let a = build_generator("g", &c, 9).unwrap();
        let b = build_generator("g", &c, 9).unwrap();
        let other = build_generator("g", &c, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, other);
    }

    #[test]
    fn parameter_ids_are_ordered_and_unique() {
        let g = build_generator("gen", &GeneratorConfig::desk(), 0).unwrap();
        let ids: Vec<&str> = g.parameters().iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids[0], "gen/e1/conv/weight");
        assert_eq!(*ids.last().unwrap(), "gen/d3/deconv/bias");
        assert_eq!(g.state().len(), ids.len());
    }

    #[test]
    fn skip_wiring_is_live() {
        let c = GeneratorConfig {
            image_size: 16,
            depth: 3,
            base_channels: 4,
            max_channels: 16,
            ..GeneratorConfig::default()
        };
        let g = build_generator("g", &c, 3).unwrap();
        let x = input(Shape::new(2, 3, 16, 16), 4);
        let run = |ablate| {
            let mut graph = Graph::new();
            let bound = g.bind(&mut graph, false);
            let xv = graph.constant(x.clone());
            let f = g
                .forward_ablated(&mut graph, &bound, xv, ForwardMode::Eval, ablate)
                .unwrap();
            graph.value(f.output).clone()
        };
        let full = run(None);
        for stage in 1..c.depth {
            assert_ne!(run(Some(stage)), full, "skip from e{stage}");
        }
    }

    #[test]
    fn invalid_configs_list_constraints() {
        let c = GeneratorConfig {
            image_size: 48,
            depth: 0,
            ..GeneratorConfig::default()
        };
        let msg = c.validate().unwrap_err().to_string();
        assert!(
            msg.contains("power of two") && msg.contains("depth"),
            "{msg}"
        );
        let d = DiscriminatorConfig {
            image_size: 8,
            num_layers: 4,
            ..DiscriminatorConfig::default()
        };
        assert!(build_discriminator("d", &d, 0).is_err());
    }

    #[test]
    fn patch_map_sizes() {
        assert_eq!(DiscriminatorConfig::default().patch_side(), 64);
        assert_eq!(DiscriminatorConfig::desk().patch_side(), 16);
        let three = DiscriminatorConfig {
            num_layers: 3,
            base_channels: 8,
            ..DiscriminatorConfig::desk()
        };
        let d = build_discriminator("d", &three, 0).unwrap();
        let s = discriminator_forward(&d, &input(Shape::new(2, 6, 64, 64), 1)).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 1, 8, 8));
    }

    #[test]
    fn constant_input_gives_uniform_interior_scores() {
        let c = DiscriminatorConfig {
            image_size: 32,
            num_layers: 2,
            base_channels: 4,
            ..DiscriminatorConfig::default()
        };
        let d = build_discriminator("d", &c, 5).unwrap();
        let s = discriminator_forward(&d, &Tensor4::zeros(Shape::new(1, 6, 32, 32))).unwrap();
        let interior: Vec<f32> = (2..6)
            .flat_map(|y| (2..6).map(move |x| (y, x)))
            .map(|(y, x)| s.at(0, 0, y, x))
            .collect();
        assert!(interior.iter().all(|&v| v == interior[0]));
    }

    #[test]
    fn discriminator_input_gradient() {
        let c = DiscriminatorConfig {
            in_channels: 3,
            image_size: 16,
            num_layers: 2,
            base_channels: 4,
            max_channels: 8,
            ..DiscriminatorConfig::default()
        };
        let d = build_discriminator("d", &c, 6).unwrap();
        // A point with no leaky-ReLU kink within epsilon of any unit.
        let probe = input(Shape::new(1, 3, 16, 16), 0);
        let report = grad_check(
            "discriminator",
            |g, v| {
                let bound = d.bind(g, false);
                Ok(d.forward(g, &bound, v[0], ForwardMode::Eval)?.output)
            },
            &[probe],
            DEFAULT_EPSILON,
            DEFAULT_TOLERANCE,
            8,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn parameter_counts_follow_closed_form() {
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k;
        let c = DiscriminatorConfig {
            in_channels: 6,
            image_size: 64,
            num_layers: 3,
            base_channels: 8,
            max_channels: 512,
            ..DiscriminatorConfig::default()
        };
        let expected = conv(6, 8, 3)
            + 8
            + conv(8, 16, 3)
            + 2 * 16
            + conv(16, 32, 3)
            + 2 * 32
            + conv(32, 1, 3)
            + 1;
        let d = build_discriminator("d", &c, 0).unwrap();
        assert_eq!(parameter_count(&d), expected);

        let small = build_generator(
            "g",
            &GeneratorConfig {
                base_channels: 8,
                max_channels: 64,
                ..GeneratorConfig::desk()
            },
            0,
        )
        .unwrap();
        let big = build_generator(
            "g",
            &GeneratorConfig {
                base_channels: 16,
                max_channels: 128,
                ..GeneratorConfig::desk()
            },
            0,
        )
        .unwrap();
        let ratio = parameter_count(&big) as f64 / parameter_count(&small) as f64;
        assert!((3.5..4.1).contains(&ratio), "{ratio}");
    }

    #[test]
    fn train_mode_updates_running_stats_only_when_committed() {
        let c = GeneratorConfig {
            image_size: 8,
            depth: 2,
            base_channels: 2,
            max_channels: 4,
            ..GeneratorConfig::default()
        };
        let mut g = build_generator("g", &c, 1).unwrap();
        let before = g.clone();
        let mut graph = Graph::new();
        let bound = g.bind(&mut graph, true);
        let xv = graph.constant(input(Shape::new(2, 3, 8, 8), 3));
        let frozen = g
            .forward(&mut graph, &bound, xv, ForwardMode::TrainFrozenStats)
            .unwrap();
        g.commit_stats(&frozen);
        assert_eq!(g, before);
        let live = g
            .forward(&mut graph, &bound, xv, ForwardMode::Train)
            .unwrap();
        g.commit_stats(&live);
        assert_ne!(
            g.parameter("g/e1/bn/running_mean"),
            before.parameter("g/e1/bn/running_mean")
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn generator_preserves_shape(log_size in 2usize..6, depth in 1usize..4, base in 1usize..5, batch in 1usize..3, seed in 0u64..100) {
            prop_assume!(depth < log_size);
            let c = GeneratorConfig {
                image_size: 1 << log_size,
                depth,
                base_channels: base,
                max_channels: base * 4,
                ..GeneratorConfig::default()
            };
            let g = build_generator("g", &c, seed).unwrap();
            let x = input(Shape::new(batch, 3, c.image_size, c.image_size), seed);
            let y = generator_forward(&g, &x).unwrap();
            prop_assert_eq!(y.shape(), x.shape());
            prop_assert!(y.max_abs() <= 1.0);
        }

        #[test]
        fn patch_dims_divide_exactly(log_size in 3usize..7, layers in 1usize..4) {
            prop_assume!(layers <= log_size);
            let c = DiscriminatorConfig {
                in_channels: 3,
                image_size: 1 << log_size,
                num_layers: layers,
                base_channels: 2,
                max_channels: 8,
                ..DiscriminatorConfig::default()
            };
            let d = build_discriminator("d", &c, 0).unwrap();
            let s = discriminator_forward(&d, &input(Shape::new(1, 3, c.image_size, c.image_size), 1)).unwrap();
            prop_assert_eq!(s.shape(), Shape::new(1, 1, c.image_size >> layers, c.image_size >> layers));
        }
    }
}
