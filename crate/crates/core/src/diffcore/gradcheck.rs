//! Central finite-difference verification of reverse-mode gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::graph::{Graph, NormMode, Var};
use crate::diffcore::tensor::{Shape, Tensor4};
use crate::error::{Error, Result};

/// Denominator floor of the relative error. Entries with gradients below 1 in
/// magnitude are judged on absolute error, which is what single precision
/// central differences can resolve.
pub const GRAD_FLOOR: f64 = 1.0;

pub const DEFAULT_EPSILON: f32 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

fn projected(graph: &Graph, out: Var, cotangent: &Tensor4) -> Result<f64> {
    let value = if graph.shape(out).numel() == 1 {
        graph.scalar(out)? * cotangent.data()[0] as f64
    } else {
        graph.value(out).dot(cotangent)?
    };
    if !value.is_finite() {
        return Err(Error::NonFinite("grad_check forward value".into()));
    }
    Ok(value)
}

fn evaluate<F>(f: &F, inputs: &[Tensor4], cotangent: &Tensor4) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    projected(&g, out, cotangent)
}

/// Compares the reverse-mode vector-Jacobian product of `f` at `inputs`
/// against central differences `(f(x+e) - f(x-e)) / 2e`, element by element
/// over every input. Non-scalar outputs are projected onto a seeded random
/// cotangent.
pub fn grad_check<F>(
    name: &str,
    f: F,
    inputs: &[Tensor4],
    epsilon: f32,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::invalid("grad_check", "epsilon must be positive"));
    }
    if inputs.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite(format!("{name}: input point")));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let out_shape = g.shape(out);
    let cotangent = if out_shape.numel() == 1 {
        Tensor4::full(out_shape, 1.0)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        Tensor4::randn(out_shape, 0.0, 1.0, &mut rng)
    };
    let grads = g.backward_with(out, &cotangent)?;

    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        tolerance,
    };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor4::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            let (hi, lo) = (x + epsilon, x - epsilon);
            probe[i].data_mut()[j] = hi;
            let f_hi = evaluate(&f, &probe, &cotangent)?;
            probe[i].data_mut()[j] = lo;
            let f_lo = evaluate(&f, &probe, &cotangent)?;
            probe[i].data_mut()[j] = x;

            let numeric = (f_hi - f_lo) / (hi as f64 - lo as f64);
            let a = analytic.data()[j] as f64;
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{name}: gradient of input {i}[{j}]"
                )));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}

type BuildFn = fn(&mut ChaCha8Rng, usize) -> Vec<Tensor4>;
type OpFn = fn(&mut Graph, &[Var], usize) -> Result<Var>;

/// A named differentiable op with a generator of random evaluation points.
pub struct OpCheck {
    pub name: &'static str,
    build: BuildFn,
    op: OpFn,
}

impl OpCheck {
    /// Runs `instances` seeded random points and merges them into one report.
    pub fn run(
        &self,
        seed: u64,
        instances: usize,
        epsilon: f32,
        tolerance: f64,
    ) -> Result<GradCheckReport> {
        let mut merged: Option<GradCheckReport> = None;
        for k in 0..instances {
            let s = seed.wrapping_mul(0x100_0000_01b3).wrapping_add(k as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let inputs = (self.build)(&mut rng, k);
            let op = self.op;
            let r = grad_check(
                self.name,
                move |g, v| op(g, v, k),
                &inputs,
                epsilon,
                tolerance,
                s,
            )?;
            match merged.as_mut() {
                Some(m) => m.merge(r),
                None => merged = Some(r),
            }
        }
        merged.ok_or_else(|| Error::invalid("grad_check", "zero instances requested"))
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor4 {
    Tensor4::randn(shape, 0.0, 1.0, rng)
}

/// Random values kept at least 0.05 away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor4 {
    randn(rng, shape).map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 })
}

fn conv_geometry(k: usize) -> (usize, usize) {
    [(1, 1), (2, 0), (1, 0), (2, 1), (3, 1)][k % 5]
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor4 {
    Tensor4::rand_uniform(shape, -1.0, 1.0, rng)
}

fn build_conv2d(rng: &mut ChaCha8Rng, _k: usize) -> Vec<Tensor4> {
    vec![
        uniform(rng, Shape::new(1, 2, 5, 5)),
        uniform(rng, Shape::new(3, 2, 3, 3)),
        uniform(rng, Shape::new(1, 3, 1, 1)),
    ]
}

fn op_conv2d(g: &mut Graph, v: &[Var], k: usize) -> Result<Var> {
    let (s, p) = conv_geometry(k);
    g.conv2d(v[0], v[1], Some(v[2]), s, p)
}

fn build_conv_transpose(rng: &mut ChaCha8Rng, _k: usize) -> Vec<Tensor4> {
    vec![
        uniform(rng, Shape::new(2, 2, 3, 3)),
        uniform(rng, Shape::new(2, 3, 4, 4)),
        uniform(rng, Shape::new(1, 3, 1, 1)),
    ]
}

fn op_conv_transpose(g: &mut Graph, v: &[Var], k: usize) -> Result<Var> {
    let (s, p) = [(2, 1), (1, 0), (2, 0), (1, 1), (3, 1)][k % 5];
    g.conv_transpose2d(v[0], v[1], Some(v[2]), s, p)
}

fn build_unary_kinked(rng: &mut ChaCha8Rng, _k: usize) -> Vec<Tensor4> {
    vec![away_from_zero(rng, Shape::new(2, 2, 3, 3))]
}

fn build_unary(rng: &mut ChaCha8Rng, _k: usize) -> Vec<Tensor4> {
    vec![randn(rng, Shape::new(2, 2, 3, 3))]
}

fn build_binary(rng: &mut ChaCha8Rng, _k: usize) -> Vec<Tensor4> {
    vec![
        randn(rng, Shape::new(2, 2, 3, 3)),
        randn(rng, Shape::new(2, 2, 3, 3)),
    ]
}

fn build_batch_norm(rng: &mut ChaCha8Rng, _k: usize) -> Vec<Tensor4> {
    vec![
        randn(rng, Shape::new(2, 3, 3, 3)),
        Tensor4::rand_uniform(Shape::new(1, 3, 1, 1), 0.5, 1.5, rng),
        uniform(rng, Shape::new(1, 3, 1, 1)),
    ]
}

fn op_batch_norm_train(g: &mut Graph, v: &[Var], _k: usize) -> Result<Var> {
    Ok(g.batch_norm(v[0], v[1], v[2], NormMode::Train, 1e-5)?.0)
}

fn op_batch_norm_eval(g: &mut Graph, v: &[Var], _k: usize) -> Result<Var> {
    let mode = NormMode::Eval {
        running_mean: &[0.1, -0.2, 0.3],
        running_var: &[0.8, 1.2, 1.5],
    };
    Ok(g.batch_norm(v[0], v[1], v[2], mode, 1e-5)?.0)
}

fn build_mask(rng: &mut ChaCha8Rng, _k: usize) -> Vec<Tensor4> {
    vec![randn(rng, Shape::new(2, 3, 4, 4))]
}

fn op_mask(g: &mut Graph, v: &[Var], k: usize) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
    let depth = Tensor4::rand_uniform(Shape::new(2, 1, 4, 4), 0.0, 1.0, &mut rng);
    g.mul_const(v[0], &depth)
}

fn build_concat(rng: &mut ChaCha8Rng, _k: usize) -> Vec<Tensor4> {
    vec![
        randn(rng, Shape::new(2, 3, 3, 3)),
        randn(rng, Shape::new(2, 1, 3, 3)),
    ]
}

fn build_scalar(rng: &mut ChaCha8Rng, _k: usize) -> Vec<Tensor4> {
    vec![Tensor4::scalar(3.0 + rand::Rng::random::<f32>(rng))]
}

/// Every differentiable op of the diff core.
pub fn standard_checks() -> Vec<OpCheck> {
    vec![
        OpCheck {
            name: "conv2d",
            build: build_conv2d,
            op: op_conv2d,
        },
        OpCheck {
            name: "conv_transpose2d",
            build: build_conv_transpose,
            op: op_conv_transpose,
        },
        OpCheck {
            name: "leaky_relu",
            build: build_unary_kinked,
            op: |g, v, _| g.leaky_relu(v[0], 0.2),
        },
        OpCheck {
            name: "batch_norm_train",
            build: build_batch_norm,
            op: op_batch_norm_train,
        },
        OpCheck {
            name: "batch_norm_eval",
            build: build_batch_norm,
            op: op_batch_norm_eval,
        },
        OpCheck {
            name: "tanh",
            build: build_unary,
            op: |g, v, _| Ok(g.tanh(v[0])),
        },
        OpCheck {
            name: "softplus",
            build: build_unary,
            op: |g, v, _| Ok(g.softplus(v[0])),
        },
        OpCheck {
            name: "add",
            build: build_binary,
            op: |g, v, _| g.add(v[0], v[1]),
        },
        OpCheck {
            name: "sub",
            build: build_binary,
            op: |g, v, _| g.sub(v[0], v[1]),
        },
        OpCheck {
            name: "mul",
            build: build_binary,
            op: |g, v, _| g.mul(v[0], v[1]),
        },
        OpCheck {
            name: "scale",
            build: build_unary,
            op: |g, v, _| Ok(g.scale(v[0], -1.7)),
        },
        OpCheck {
            name: "add_scalar",
            build: build_unary,
            op: |g, v, _| Ok(g.add_scalar(v[0], -1.0)),
        },
        OpCheck {
            name: "mul_const",
            build: build_mask,
            op: op_mask,
        },
        OpCheck {
            name: "concat_channels",
            build: build_concat,
            op: |g, v, _| g.concat_channels(v[0], v[1]),
        },
        OpCheck {
            name: "mean",
            build: build_unary,
            op: |g, v, _| Ok(g.mean(v[0])),
        },
        OpCheck {
            name: "mean_abs",
            build: build_unary_kinked,
            op: |g, v, _| Ok(g.mean_abs(v[0])),
        },
        OpCheck {
            name: "mean_sq",
            build: build_unary,
            op: |g, v, _| Ok(g.mean_sq(v[0])),
        },
        OpCheck {
            name: "square",
            build: build_scalar,
            op: |g, v, _| g.mul(v[0], v[0]),
        },
    ]
}

/// Deliberately wrong op: the quadratic term is computed outside the tape, so
/// its gradient is silently dropped. Exists to prove the checker catches it.
pub fn broken_fixture() -> OpCheck {
    OpCheck {
        name: "broken_fixture",
        build: build_unary,
        op: |g, v, _| {
            let sq = g.value(v[0]).map(|x| x * x);
            let c = g.constant(sq);
            g.add(v[0], c)
        },
    }
}

/// Resolves op names; `"all"` selects [`standard_checks`]. The broken
/// fixture is only available by explicit name.
pub fn select_checks(names: &[&str]) -> Result<Vec<OpCheck>> {
    if names.contains(&"all") {
        return Ok(standard_checks());
    }
    let mut out = Vec::new();
    for &name in names {
        let found = if name == "broken_fixture" {
            Some(broken_fixture())
        } else {
            standard_checks().into_iter().find(|c| c.name == name)
        };
        out.push(
            found.ok_or_else(|| Error::invalid("grad_check", format!("unknown op `{name}`")))?,
        );
    }
    Ok(out)
}
