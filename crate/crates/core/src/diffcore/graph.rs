//! Tape-based reverse-mode differentiation over [`Tensor4`] values.
//!
//! Every forward op appends one node to the tape. Nodes are immutable once
//! recorded, so the same graph can be differentiated from several roots.
//! Single-element results additionally carry an `f64` shadow value, which
//! keeps scalar losses (and finite-difference probes of them) free of `f32`
//! rounding in the final reductions.

use crate::diffcore::conv::{self, ConvGeom};
use crate::diffcore::tensor::{Shape, Tensor4};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics of a training-mode batch norm, for running-average updates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased (n - 1) variance.
    pub var: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with stored running statistics.
    Eval {
        running_mean: &'a [f32],
        running_var: &'a [f32],
    },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    LeakyRelu {
        input: Var,
        slope: f32,
    },
    Tanh {
        input: Var,
    },
    Softplus {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        /// Batch statistics (train) or fixed running statistics (eval).
        batch_stats: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f32,
    },
    AddScalar {
        input: Var,
    },
    MulConst {
        input: Var,
        mask: Tensor4,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Mean {
        input: Var,
    },
    MeanAbs {
        input: Var,
    },
    MeanSq {
        input: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor4,
    exact: Option<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor4>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor4> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor4> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4, op: Op, requires_grad: bool) -> Var {
        self.push_exact(value, None, op, requires_grad)
    }

    fn push_exact(
        &mut self,
        value: Tensor4,
        exact: Option<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Var {
        let exact = exact.or_else(|| (value.numel() == 1).then(|| value.data()[0] as f64));
        self.nodes.push(Node {
            value,
            exact,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor4, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor4) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a single-element node at `f64` precision.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let node = &self.nodes[v.0];
        node.exact.ok_or_else(|| {
            Error::invalid("scalar", format!("node has shape {}", node.value.shape()))
        })
    }

    fn exact_of(&self, v: Var) -> Option<f64> {
        self.nodes[v.0].exact
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    fn check_bias(&self, op: &'static str, bias: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = bias {
            let s = self.shape(b);
            if s.numel() != channels {
                return Err(Error::ShapeMismatch {
                    op,
                    left: Shape::new(1, channels, 1, 1),
                    right: s,
                });
            }
        }
        Ok(())
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if xs.channels != ws.channels {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: xs,
                right: ws,
            });
        }
        self.check_bias("conv2d", bias, ws.batch)?;
        let (out_h, out_w) = match (
            conv::conv_out_dim(xs.height, ws.height, stride, padding),
            conv::conv_out_dim(xs.width, ws.width, stride, padding),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    left: xs,
                    right: ws,
                })
            }
        };
        let geom = ConvGeom {
            in_c: xs.channels,
            in_h: xs.height,
            in_w: xs.width,
            out_c: ws.batch,
            kh: ws.height,
            kw: ws.width,
            stride,
            pad: padding,
            out_h,
            out_w,
        };
        let data = conv::conv2d_forward(
            self.value(input).data(),
            xs.batch,
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor4::new(Shape::new(xs.batch, geom.out_c, out_h, out_w), data)?;
        let rg = self.any_grad(&[input, weight]) || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Weight layout is `(in_channels, out_channels, kh, kw)`, the same tensor
    /// a direct convolution in the opposite direction would use.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if xs.channels != ws.batch {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                left: xs,
                right: ws,
            });
        }
        self.check_bias("conv_transpose2d", bias, ws.channels)?;
        let (out_h, out_w) = match (
            conv::conv_transpose_out_dim(xs.height, ws.height, stride, padding),
            conv::conv_transpose_out_dim(xs.width, ws.width, stride, padding),
        ) {
            (Some(h), Some(w)) if stride > 0 => (h, w),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv_transpose2d",
                    left: xs,
                    right: ws,
                })
            }
        };
        let geom = ConvGeom {
            in_c: ws.channels,
            in_h: out_h,
            in_w: out_w,
            out_c: ws.batch,
            kh: ws.height,
            kw: ws.width,
            stride,
            pad: padding,
            out_h: xs.height,
            out_w: xs.width,
        };
        let data = conv::conv_transpose2d_forward(
            self.value(input).data(),
            xs.batch,
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor4::new(Shape::new(xs.batch, ws.channels, out_h, out_w), data)?;
        let rg = self.any_grad(&[input, weight]) || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    fn unary(
        &mut self,
        input: Var,
        f32_op: impl Fn(f32) -> f32,
        f64_op: impl Fn(f64) -> f64,
        op: Op,
    ) -> Var {
        let value = self.value(input).map(f32_op);
        let exact = self
            .exact_of(input)
            .filter(|_| value.numel() == 1)
            .map(f64_op);
        let rg = self.requires_grad(input);
        self.push_exact(value, exact, op, rg)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f32) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::invalid(
                "leaky_relu",
                format!("slope {slope} outside (0, 1)"),
            ));
        }
        let s64 = slope as f64;
        Ok(self.unary(
            input,
            move |v| if v >= 0.0 { v } else { slope * v },
            move |v| if v >= 0.0 { v } else { s64 * v },
            Op::LeakyRelu { input, slope },
        ))
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.unary(input, f32::tanh, f64::tanh, Op::Tanh { input })
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, input: Var) -> Var {
        self.unary(
            input,
            |v| stable_softplus(v as f64) as f32,
            stable_softplus,
            Op::Softplus { input },
        )
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let f = factor as f64;
        self.unary(
            input,
            move |v| v * factor,
            move |v| v * f,
            Op::Scale { input, factor },
        )
    }

    pub fn add_scalar(&mut self, input: Var, offset: f32) -> Var {
        let o = offset as f64;
        self.unary(
            input,
            move |v| v + offset,
            move |v| v + o,
            Op::AddScalar { input },
        )
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f32_op: impl Fn(f32, f32) -> f32,
        f64_op: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.expect_same_shape(name, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f32_op(x, y))
            .collect();
        let value = Tensor4::new(ta.shape(), data)?;
        let exact = match (self.exact_of(a), self.exact_of(b)) {
            (Some(x), Some(y)) if value.numel() == 1 => Some(f64_op(x, y)),
            _ => None,
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push_exact(value, exact, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |x, y| x * y, Op::Mul { a, b })
    }

    /// Multiplies by a constant. `mask` is either the same shape as `input`
    /// or `N x 1 x H x W`, broadcast over channels. No gradient flows into
    /// the mask.
    pub fn mul_const(&mut self, input: Var, mask: &Tensor4) -> Result<Var> {
        let xs = self.shape(input);
        let ms = mask.shape();
        let broadcast =
            ms.channels == 1 && (ms.batch, ms.height, ms.width) == (xs.batch, xs.height, xs.width);
        if ms != xs && !broadcast {
            return Err(Error::ShapeMismatch {
                op: "mul_const",
                left: xs,
                right: ms,
            });
        }
        let mask = if ms == xs {
            mask.clone()
        } else {
            Tensor4::from_fn(xs, |[n, _, h, w]| mask.at(n, 0, h, w))
        };
        let data = self
            .value(input)
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&x, &m)| x * m)
            .collect();
        let value = Tensor4::new(xs, data)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::MulConst { input, mask }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.batch, sa.height, sa.width) != (sb.batch, sb.height, sb.width) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                left: sa,
                right: sb,
            });
        }
        let out = Shape::new(sa.batch, sa.channels + sb.channels, sa.height, sa.width);
        let mut data = Vec::with_capacity(out.numel());
        for n in 0..sa.batch {
            data.extend_from_slice(self.value(a).item(n));
            data.extend_from_slice(self.value(b).item(n));
        }
        let value = Tensor4::new(out, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    fn reduce(&mut self, input: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(input);
        let mean = match self.exact_of(input) {
            Some(e) => f(e),
            None => t.data().iter().map(|&v| f(v as f64)).sum::<f64>() / t.numel() as f64,
        };
        let rg = self.requires_grad(input);
        self.push_exact(Tensor4::scalar(mean as f32), Some(mean), op, rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        self.reduce(input, |v| v, Op::Mean { input })
    }

    pub fn mean_abs(&mut self, input: Var) -> Var {
        self.reduce(input, f64::abs, Op::MeanAbs { input })
    }

    pub fn mean_sq(&mut self, input: Var) -> Var {
        self.reduce(input, |v| v * v, Op::MeanSq { input })
    }

    /// Per-channel batch normalization. In [`NormMode::Train`] the batch
    /// statistics are returned so the caller can update running averages.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
        eps: f32,
    ) -> Result<(Var, Option<BatchStats>)> {
        let s = self.shape(input);
        for p in [gamma, beta] {
            if self.shape(p).numel() != s.channels {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    left: s,
                    right: self.shape(p),
                });
            }
        }
        let count = s.batch * s.plane();
        let x = self.value(input).data();
        let mut means = vec![0.0f64; s.channels];
        let mut vars = vec![0.0f64; s.channels];
        let mut stats = None;
        match mode {
            NormMode::Train => {
                if count <= 1 {
                    return Err(Error::invalid(
                        "batch_norm",
                        format!("train mode needs more than one value per channel, input is {s}"),
                    ));
                }
                for c in 0..s.channels {
                    let chan = (0..s.batch).flat_map(|n| {
                        let start = (n * s.channels + c) * s.plane();
                        x[start..start + s.plane()].iter()
                    });
                    let sum: f64 = chan.clone().map(|&v| v as f64).sum();
                    let mean = sum / count as f64;
                    let ss: f64 = chan.map(|&v| (v as f64 - mean).powi(2)).sum();
                    means[c] = mean;
                    vars[c] = ss / count as f64;
                }
                stats = Some(BatchStats {
                    mean: means.iter().map(|&m| m as f32).collect(),
                    var: vars
                        .iter()
                        .map(|&v| (v * count as f64 / (count - 1) as f64) as f32)
                        .collect(),
                });
            }
            NormMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != s.channels || running_var.len() != s.channels {
                    return Err(Error::invalid(
                        "batch_norm",
                        format!(
                            "running statistics have {} / {} entries for {} channels",
                            running_mean.len(),
                            running_var.len(),
                            s.channels
                        ),
                    ));
                }
                for c in 0..s.channels {
                    means[c] = running_mean[c] as f64;
                    vars[c] = running_var[c] as f64;
                }
            }
        }
        let inv_std64: Vec<f64> = vars
            .iter()
            .map(|&v| 1.0 / (v + eps as f64).sqrt())
            .collect();
        let inv_std: Vec<f32> = inv_std64.iter().map(|&v| v as f32).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0f32; s.numel()];
        let mut out = vec![0.0f32; s.numel()];
        for n in 0..s.batch {
            for c in 0..s.channels {
                let start = (n * s.channels + c) * s.plane();
                for i in start..start + s.plane() {
                    let xh = (x[i] as f64 - means[c]) * inv_std64[c];
                    xhat[i] = xh as f32;
                    out[i] = (g[c] as f64 * xh + b[c] as f64) as f32;
                }
            }
        }
        let value = Tensor4::new(s, out)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        let var = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: stats.is_some(),
            },
            rg,
        );
        Ok((var, stats))
    }

    /// Reverse pass from a scalar loss (seed gradient 1).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let s = self.shape(loss);
        if s.numel() != 1 {
            return Err(Error::NonScalarBackward(s));
        }
        self.backward_with(loss, &Tensor4::full(s, 1.0))
    }

    /// Vector-Jacobian product: reverse pass seeded with `cotangent`.
    pub fn backward_with(&self, output: Var, cotangent: &Tensor4) -> Result<Gradients> {
        self.value(output)
            .expect_same_shape("backward", cotangent)?;
        let mut grads: Vec<Option<Vec<f32>>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(cotangent.data().to_vec());

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor4::new(self.nodes[i].value.shape(), data).expect("gradient shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, delta: Vec<f32>) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            }
            | Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = [
                    self.requires_grad(*input),
                    self.requires_grad(*weight),
                    bias.is_some_and(|b| self.requires_grad(b)),
                ];
                let x = self.value(*input);
                let w = self.value(*weight).data();
                let out = if matches!(node.op, Op::Conv2d { .. }) {
                    conv::conv2d_backward(x.data(), x.shape().batch, w, g, geom, need)
                } else {
                    conv::conv_transpose2d_backward(x.data(), x.shape().batch, w, g, geom, need)
                };
                if let Some(dx) = out.input {
                    self.accumulate(grads, *input, dx);
                }
                if let Some(dw) = out.weight {
                    self.accumulate(grads, *weight, dw);
                }
                if let (Some(b), Some(db)) = (bias, out.bias) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(*input).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x >= 0.0 { g } else { slope * g })
                    .collect();
                self.accumulate(grads, *input, d);
            }
            Op::Tanh { input } => {
                let y = node.value.data();
                let d = g.iter().zip(y).map(|(&g, &y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *input, d);
            }
            Op::Softplus { input } => {
                let x = self.value(*input).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| g * sigmoid(x as f64) as f32)
                    .collect();
                self.accumulate(grads, *input, d);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = node.value.shape();
                let count = (s.batch * s.plane()) as f64;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0f64; s.channels];
                let mut sum_gx = vec![0.0f64; s.channels];
                for n in 0..s.batch {
                    for c in 0..s.channels {
                        let start = (n * s.channels + c) * s.plane();
                        for i in start..start + s.plane() {
                            sum_g[c] += g[i] as f64;
                            sum_gx[c] += g[i] as f64 * xhat[i] as f64;
                        }
                    }
                }
                if self.requires_grad(*input) {
                    let mut dx = vec![0.0f32; s.numel()];
                    for n in 0..s.batch {
                        for c in 0..s.channels {
                            let start = (n * s.channels + c) * s.plane();
                            let k = gam[c] as f64 * inv_std[c] as f64;
                            for i in start..start + s.plane() {
                                dx[i] = if *batch_stats {
                                    (k * (g[i] as f64
                                        - sum_g[c] / count
                                        - xhat[i] as f64 * sum_gx[c] / count))
                                        as f32
                                } else {
                                    (k * g[i] as f64) as f32
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *gamma, sum_gx.iter().map(|&v| v as f32).collect());
                self.accumulate(grads, *beta, sum_g.iter().map(|&v| v as f32).collect());
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                self.accumulate(grads, *b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Scale { input, factor } => {
                self.accumulate(grads, *input, g.iter().map(|v| v * factor).collect());
            }
            Op::AddScalar { input } => self.accumulate(grads, *input, g.to_vec()),
            Op::MulConst { input, mask } => {
                let d = g.iter().zip(mask.data()).map(|(g, m)| g * m).collect();
                self.accumulate(grads, *input, d);
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let mut da = Vec::with_capacity(sa.numel());
                let mut db = Vec::with_capacity(sb.numel());
                let item = sa.item() + sb.item();
                for chunk in g.chunks(item) {
                    da.extend_from_slice(&chunk[..sa.item()]);
                    db.extend_from_slice(&chunk[sa.item()..]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Mean { input } | Op::MeanAbs { input } | Op::MeanSq { input } => {
                let x = self.value(*input).data();
                let n = x.len() as f64;
                let g0 = g[0] as f64;
                let d = x
                    .iter()
                    .map(|&v| {
                        let local = match node.op {
                            Op::Mean { .. } => 1.0,
                            Op::MeanAbs { .. } => (v as f64).signum() * (v != 0.0) as u8 as f64,
                            _ => 2.0 * v as f64,
                        };
                        (g0 * local / n) as f32
                    })
                    .collect();
                self.accumulate(grads, *input, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: &[f32]) -> Tensor4 {
        Tensor4::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_unit_kernel_scales() {
        let mut g = Graph::new();
        let x = g.constant(t(Shape::new(1, 1, 2, 2), &[1., 2., 3., 4.]));
        let w = g.constant(t(Shape::new(1, 1, 1, 1), &[2.]));
        let b = g.constant(t(Shape::new(1, 1, 1, 1), &[0.]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[2., 4., 6., 8.]);
    }

    #[test]
    fn conv2d_sums_ones() {
        let mut g = Graph::new();
        let x = g.constant(Tensor4::full(Shape::new(1, 1, 3, 3), 1.0));
        let w = g.constant(Tensor4::full(Shape::new(1, 1, 3, 3), 1.0));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 1, 1, 1));
        assert_eq!(g.value(y).data(), &[9.]);
    }

    #[test]
    fn conv2d_strided_diagonal_kernel() {
        // Nested-loop reference: out[i][j] = x[2i][2j] + x[2i+1][2j+1] for rows 1..16.
        let data: Vec<f32> = (1..=16).map(|v| v as f32).collect();
        let mut g = Graph::new();
        let x = g.constant(t(Shape::new(1, 1, 4, 4), &data));
        let w = g.constant(t(Shape::new(1, 1, 2, 2), &[1., 0., 0., 1.]));
        let y = g.conv2d(x, w, None, 2, 0).unwrap();
        assert_eq!(g.value(y).data(), &[7., 11., 23., 27.]);
    }

    #[test]
    fn conv2d_channel_mismatch_names_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor4::zeros(Shape::new(1, 2, 4, 4)));
        let w = g.constant(Tensor4::zeros(Shape::new(1, 3, 3, 3)));
        let err = g.conv2d(x, w, None, 1, 0).unwrap_err().to_string();
        assert!(err.contains("1x2x4x4") && err.contains("1x3x3x3"), "{err}");
    }

    #[test]
    fn conv_transpose_broadcasts_single_value() {
        let mut g = Graph::new();
        let x = g.constant(t(Shape::new(1, 1, 1, 1), &[3.]));
        let w = g.constant(Tensor4::full(Shape::new(1, 1, 2, 2), 1.0));
        let y = g.conv_transpose2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[3.; 4]);
    }

    #[test]
    fn conv_transpose_zero_input() {
        let mut g = Graph::new();
        let x = g.constant(Tensor4::zeros(Shape::new(1, 2, 3, 3)));
        let w = g.constant(Tensor4::full(Shape::new(2, 3, 4, 4), 0.5));
        let y = g.conv_transpose2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 3, 6, 6));
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn leaky_relu_values() {
        let mut g = Graph::new();
        let x = g.constant(t(Shape::new(1, 1, 1, 3), &[-1., 0., 2.]));
        let y = g.leaky_relu(x, 0.2).unwrap();
        assert_eq!(g.value(y).data(), &[-0.2, 0., 2.]);
        assert!(g.leaky_relu(x, 1.5).is_err());
    }

    #[test]
    fn batch_norm_two_values() {
        let mut g = Graph::new();
        let x = g.constant(t(Shape::new(1, 1, 1, 2), &[1., 3.]));
        let gamma = g.constant(Tensor4::full(Shape::new(1, 1, 1, 1), 1.0));
        let beta = g.constant(Tensor4::zeros(Shape::new(1, 1, 1, 1)));
        let (y, stats) = g.batch_norm(x, gamma, beta, NormMode::Train, 1e-5).unwrap();
        let v = g.value(y).data();
        assert!(
            (v[0] + 1.0).abs() < 1e-4 && (v[1] - 1.0).abs() < 1e-4,
            "{v:?}"
        );
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![2.0]);
    }

    #[test]
    fn batch_norm_zero_gamma_gives_beta() {
        let mut g = Graph::new();
        let x = g.constant(t(Shape::new(2, 1, 1, 2), &[1., 5., -2., 7.]));
        let gamma = g.constant(Tensor4::zeros(Shape::new(1, 1, 1, 1)));
        let beta = g.constant(Tensor4::full(Shape::new(1, 1, 1, 1), 0.3));
        let (y, _) = g.batch_norm(x, gamma, beta, NormMode::Train, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn batch_norm_single_value_in_train_mode_errors() {
        let mut g = Graph::new();
        let x = g.constant(t(Shape::new(1, 1, 1, 1), &[1.]));
        let gamma = g.constant(Tensor4::full(Shape::SCALAR, 1.0));
        let beta = g.constant(Tensor4::zeros(Shape::SCALAR));
        assert!(g.batch_norm(x, gamma, beta, NormMode::Train, 1e-5).is_err());
        let (y, stats) = g
            .batch_norm(
                x,
                gamma,
                beta,
                NormMode::Eval {
                    running_mean: &[0.0],
                    running_var: &[1.0],
                },
                0.0,
            )
            .unwrap();
        assert!(stats.is_none());
        assert_eq!(g.value(y).data(), &[1.0]);
    }

    #[test]
    fn reductions_and_concat() {
        let mut g = Graph::new();
        let a = g.constant(t(Shape::new(1, 1, 1, 3), &[1., -2., 3.]));
        let m = g.mean_abs(a);
        assert_eq!(g.scalar(m).unwrap(), 2.0);
        let z = g.constant(Tensor4::zeros(Shape::new(1, 1, 2, 2)));
        let s = g.mean_sq(z);
        assert_eq!(g.scalar(s).unwrap(), 0.0);
        let p = g.constant(Tensor4::zeros(Shape::new(1, 3, 8, 8)));
        let q = g.constant(Tensor4::zeros(Shape::new(1, 3, 8, 8)));
        let c = g.concat_channels(p, q).unwrap();
        assert_eq!(g.shape(c), Shape::new(1, 6, 8, 8));
    }

    #[test]
    fn mean_sq_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor4::scalar(3.0), true);
        let l = g.mean_sq(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor4::zeros(Shape::new(1, 1, 1, 2)), true);
        let y = g.tanh(x);
        assert!(matches!(g.backward(y), Err(Error::NonScalarBackward(_))));
    }

    #[test]
    fn gradients_accumulate_over_shared_inputs() {
        let mut g = Graph::new();
        let x = g.leaf(t(Shape::new(1, 1, 1, 2), &[1.5, -0.5]), true);
        let l1 = g.mean_sq(x);
        let l2 = g.mean(x);
        let total = g.add(l1, l2).unwrap();
        let all = g.backward(total).unwrap();
        let g1 = g.backward(l1).unwrap();
        let g2 = g.backward(l2).unwrap();
        for i in 0..2 {
            let sum = g1.get(x).unwrap().data()[i] + g2.get(x).unwrap().data()[i];
            assert!((all.get(x).unwrap().data()[i] - sum).abs() < 1e-6);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor4::scalar(2.0), true);
        let c = g.constant(Tensor4::scalar(5.0));
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0]);
        assert!(grads.get(c).is_none());
    }
}
