//! Adversarial, cycle-consistency, and region-weighted objectives.
//!
//! Each region (foreground, background) gets the whole cycle-consistent
//! objective `L_r = gan_xy + gan_yx + lambda * cycle` on depth-masked
//! images; the generators minimize `mu * L_fg + alpha * L_bg`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attnmask::{AttentionMask, Region};
use crate::datapipe::{to_model_space, PairedSample};
use crate::diffcore::{Graph, Tensor4, Var};
use crate::error::{Error, Result};
use crate::netarch::{
    build_discriminator, build_generator, Bound, DiscriminatorConfig, Forward, ForwardMode,
    GeneratorConfig, Model,
};

/// What to do when `mu` or `alpha` leave `[1, 10]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightPolicy {
    #[default]
    Reject,
    Warn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
    pub mu: f64,
    pub alpha: f64,
    #[serde(default)]
    pub policy: WeightPolicy,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 10.0,
            mu: 7.0,
            alpha: 3.0,
            policy: WeightPolicy::Reject,
        }
    }
}

impl LossWeights {
    pub const ATTENTION_RANGE: (f64, f64) = (1.0, 10.0);

    pub fn new(lambda: f64, mu: f64, alpha: f64) -> Self {
        LossWeights {
            lambda,
            mu,
            alpha,
            policy: WeightPolicy::Reject,
        }
    }

    /// Checks the weights; under [`WeightPolicy::Warn`] range violations
    /// of `mu`/`alpha` come back as warnings instead of an error.
    pub fn check(&self) -> Result<Vec<String>> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda {} must be finite and non-negative",
                self.lambda
            )));
        }
        let (lo, hi) = Self::ATTENTION_RANGE;
        let mut out = Vec::new();
        for (name, v) in [("mu", self.mu), ("alpha", self.alpha)] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} {v} is not finite")));
            }
            if !(lo..=hi).contains(&v) {
                out.push(format!("{name} = {v} is outside [{lo}, {hi}]"));
            }
        }
        match self.policy {
            WeightPolicy::Warn => Ok(out),
            WeightPolicy::Reject if out.is_empty() => Ok(out),
            WeightPolicy::Reject => Err(Error::Config(out.join("; "))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanLossKind {
    #[default]
    LeastSquares,
    NegLogLikelihood,
}

/// Scalars of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    /// Generator-side adversarial terms, summed over both regions.
    pub gan_g_xy: f64,
    pub gan_g_yx: f64,
    /// Masked cycle L1 summed over both regions.
    pub cycle: f64,
    pub combined_fg: f64,
    pub combined_bg: f64,
    pub attention_total: f64,
    pub disc_x_fg: f64,
    pub disc_x_bg: f64,
    pub disc_y_fg: f64,
    pub disc_y_bg: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 10] = [
        "gan_g_xy",
        "gan_g_yx",
        "cycle",
        "combined_fg",
        "combined_bg",
        "attention_total",
        "disc_x_fg",
        "disc_x_bg",
        "disc_y_fg",
        "disc_y_bg",
    ];

    pub fn values(&self) -> [f64; 10] {
        [
            self.gan_g_xy,
            self.gan_g_yx,
            self.cycle,
            self.combined_fg,
            self.combined_bg,
            self.attention_total,
            self.disc_x_fg,
            self.disc_x_bg,
            self.disc_y_fg,
            self.disc_y_bg,
        ]
    }

    pub fn from_values(v: [f64; 10]) -> LossReport {
        LossReport {
            gan_g_xy: v[0],
            gan_g_yx: v[1],
            cycle: v[2],
            combined_fg: v[3],
            combined_bg: v[4],
            attention_total: v[5],
            disc_x_fg: v[6],
            disc_x_bg: v[7],
            disc_y_fg: v[8],
            disc_y_bg: v[9],
        }
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::FIELDS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }
}

fn non_empty(graph: &Graph, v: Var, op: &'static str) -> Result<()> {
    let t = graph.value(v);
    if t.numel() == 0 {
        return Err(Error::invalid(op, "empty score map"));
    }
    if !t.is_finite() {
        return Err(Error::NonFinite(format!("{op} scores")));
    }
    Ok(())
}

/// Generator-side adversarial term on recorded scores.
pub fn adversarial_generator_loss_var(
    graph: &mut Graph,
    scores: Var,
    kind: GanLossKind,
) -> Result<Var> {
    non_empty(graph, scores, "adversarial_generator_loss")?;
    Ok(match kind {
        GanLossKind::LeastSquares => {
            let d = graph.add_scalar(scores, -1.0);
            graph.mean_sq(d)
        }
        GanLossKind::NegLogLikelihood => {
            let neg = graph.scale(scores, -1.0);
            let sp = graph.softplus(neg);
            graph.mean(sp)
        }
    })
}

/// Discriminator-side adversarial term on recorded scores.
pub fn adversarial_discriminator_loss_var(
    graph: &mut Graph,
    real: Var,
    fake: Var,
    kind: GanLossKind,
) -> Result<Var> {
    non_empty(graph, real, "adversarial_discriminator_loss")?;
    non_empty(graph, fake, "adversarial_discriminator_loss")?;
    if graph.shape(real) != graph.shape(fake) {
        return Err(Error::ShapeMismatch {
            op: "adversarial_discriminator_loss",
            left: graph.shape(real),
            right: graph.shape(fake),
        });
    }
    let (r, f) = match kind {
        GanLossKind::LeastSquares => {
            let d = graph.add_scalar(real, -1.0);
            (graph.mean_sq(d), graph.mean_sq(fake))
        }
        GanLossKind::NegLogLikelihood => {
            let neg = graph.scale(real, -1.0);
            let r = graph.softplus(neg);
            let f = graph.softplus(fake);
            (graph.mean(r), graph.mean(f))
        }
    };
    graph.add(r, f)
}

/// `mean|rx - x| + mean|ry - y|`.
pub fn cycle_loss_var(graph: &mut Graph, x: Var, rx: Var, y: Var, ry: Var) -> Result<Var> {
    let dx = graph.sub(rx, x)?;
    let dy = graph.sub(ry, y)?;
    let a = graph.mean_abs(dx);
    let b = graph.mean_abs(dy);
    graph.add(a, b)
}

pub fn adversarial_generator_loss(scores: &Tensor4, kind: GanLossKind) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(scores.clone());
    let l = adversarial_generator_loss_var(&mut g, s, kind)?;
    g.scalar(l)
}

pub fn adversarial_discriminator_loss(
    real: &Tensor4,
    fake: &Tensor4,
    kind: GanLossKind,
) -> Result<f64> {
    let mut g = Graph::new();
    let r = g.constant(real.clone());
    let f = g.constant(fake.clone());
    let l = adversarial_discriminator_loss_var(&mut g, r, f, kind)?;
    g.scalar(l)
}

pub fn cycle_loss(x: &Tensor4, rx: &Tensor4, y: &Tensor4, ry: &Tensor4) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = [x, rx, y, ry]
        .iter()
        .map(|t| g.constant((*t).clone()))
        .collect();
    let l = cycle_loss_var(&mut g, vars[0], vars[1], vars[2], vars[3])?;
    g.scalar(l)
}

/// `gan_xy + gan_yx + lambda * cycle`.
pub fn combined_objective(gan_xy: f64, gan_yx: f64, cycle: f64, weights: &LossWeights) -> f64 {
    weights.lambda.mul_add(cycle, gan_xy + gan_yx)
}

/// `mu * l_fg + alpha * l_bg`, with the first product fused so decimal
/// inputs such as `7 * 1.8 + 3 * 0.6` land on the nearest double.
pub fn attention_objective(l_fg: f64, l_bg: f64, weights: &LossWeights) -> Result<f64> {
    weights.check()?;
    Ok(weights.mu.mul_add(l_fg, weights.alpha * l_bg))
}

/// One or two networks judging a domain; with one, both regions share it.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionDiscriminators {
    pub models: Vec<Model>,
}

impl RegionDiscriminators {
    pub fn index(&self, region: Region) -> usize {
        match (self.models.len(), region) {
            (1, _) | (_, Region::Foreground) => 0,
            (_, Region::Background) => 1,
        }
    }

    pub fn get(&self, region: Region) -> &Model {
        &self.models[self.index(region)]
    }
}

/// The four networks of the cycle: `g: X -> Y`, `f: Y -> X`, and the
/// domain discriminators.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleNets {
    pub g: Model,
    pub f: Model,
    pub d_x: RegionDiscriminators,
    pub d_y: RegionDiscriminators,
}

impl CycleNets {
    pub fn build(
        generator: &GeneratorConfig,
        discriminator: &DiscriminatorConfig,
        shared_region_discriminators: bool,
        seed: u64,
    ) -> Result<CycleNets> {
        if generator.image_size != discriminator.image_size {
            return Err(Error::Config(format!(
                "generator image_size {} differs from discriminator image_size {}",
                generator.image_size, discriminator.image_size
            )));
        }
        if discriminator.in_channels
            != generator.in_channels * if discriminator.paired() { 2 } else { 1 }
        {
            return Err(Error::Config(format!(
                "discriminator in_channels {} does not fit {}-channel images",
                discriminator.in_channels, generator.in_channels
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = build_generator("gen_xy", generator, rng.random())?;
        let f = build_generator("gen_yx", generator, rng.random())?;
        let mut discs = |domain: &str| -> Result<RegionDiscriminators> {
            let names: Vec<String> = if shared_region_discriminators {
                vec![format!("disc_{domain}")]
            } else {
                vec![format!("disc_{domain}_fg"), format!("disc_{domain}_bg")]
            };
            let models = names
                .iter()
                .map(|n| build_discriminator(n, discriminator, rng.random()))
                .collect::<Result<_>>()?;
            Ok(RegionDiscriminators { models })
        };
        let d_x = discs("x")?;
        let d_y = discs("y")?;
        Ok(CycleNets { g, f, d_x, d_y })
    }

    pub fn generators(&self) -> [&Model; 2] {
        [&self.g, &self.f]
    }

    pub fn discriminators(&self) -> impl Iterator<Item = &Model> {
        self.d_x.models.iter().chain(&self.d_y.models)
    }

    pub fn all(&self) -> impl Iterator<Item = &Model> {
        self.generators().into_iter().chain(self.discriminators())
    }

    pub fn all_mut(&mut self) -> impl Iterator<Item = &mut Model> {
        [&mut self.g, &mut self.f]
            .into_iter()
            .chain(self.d_x.models.iter_mut())
            .chain(self.d_y.models.iter_mut())
    }

    fn paired(&self) -> bool {
        match &self.d_x.models[0].arch {
            crate::netarch::Architecture::Discriminator(c) => c.paired(),
            _ => false,
        }
    }

    pub fn bind(
        &self,
        graph: &mut Graph,
        track_generators: bool,
        track_discriminators: bool,
    ) -> NetBindings {
        NetBindings {
            g: self.g.bind(graph, track_generators),
            f: self.f.bind(graph, track_generators),
            d_x: self
                .d_x
                .models
                .iter()
                .map(|m| m.bind(graph, track_discriminators))
                .collect(),
            d_y: self
                .d_y
                .models
                .iter()
                .map(|m| m.bind(graph, track_discriminators))
                .collect(),
        }
    }
}

pub struct NetBindings {
    pub g: Bound,
    pub f: Bound,
    pub d_x: Vec<Bound>,
    pub d_y: Vec<Bound>,
}

/// A batch in model space with per-domain attention masks.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleBatch {
    /// Degraded images, domain X.
    pub x: Tensor4,
    /// Clean images, domain Y.
    pub y: Tensor4,
    pub mask_x: AttentionMask,
    pub mask_y: AttentionMask,
}

impl CycleBatch {
    /// Both domains of a paired sample share its depth map.
    pub fn from_samples(samples: &[PairedSample]) -> Result<CycleBatch> {
        if samples.is_empty() {
            return Err(Error::invalid("batch", "no samples"));
        }
        let x: Vec<Tensor4> = samples
            .iter()
            .map(|s| to_model_space(&s.distorted))
            .collect();
        let y: Vec<Tensor4> = samples.iter().map(|s| to_model_space(&s.clean)).collect();
        let depths: Vec<_> = samples.iter().map(|s| s.depth.clone()).collect();
        let mask = AttentionMask::from_depths(&depths)?;
        Ok(CycleBatch {
            x: Tensor4::stack(&x)?,
            y: Tensor4::stack(&y)?,
            mask_x: mask.clone(),
            mask_y: mask,
        })
    }

    pub fn len(&self) -> usize {
        self.x.shape().batch
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Batch-norm behavior for the two network families in a loss pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossModes {
    pub generators: ForwardMode,
    pub discriminators: ForwardMode,
}

impl LossModes {
    /// Generator update: generators accumulate running statistics,
    /// discriminators normalize per batch without being modified.
    pub const GENERATOR_STEP: LossModes = LossModes {
        generators: ForwardMode::Train,
        discriminators: ForwardMode::TrainFrozenStats,
    };
    pub const DISCRIMINATOR_STEP: LossModes = LossModes {
        generators: ForwardMode::TrainFrozenStats,
        discriminators: ForwardMode::Train,
    };
    pub const EVAL: LossModes = LossModes {
        generators: ForwardMode::Eval,
        discriminators: ForwardMode::Eval,
    };
}

/// Recorded generator objective.
pub struct GeneratorObjective {
    pub total: Var,
    pub l_fg: Var,
    pub l_bg: Var,
    pub fake_y: Var,
    pub fake_x: Var,
    /// Generator fields filled, discriminator fields zero.
    pub report: LossReport,
    pub g_passes: Vec<Forward>,
    pub f_passes: Vec<Forward>,
}

/// Discriminator input for a candidate: the (condition, candidate) pair in
/// paired mode, the candidate alone otherwise.
fn disc_input(graph: &mut Graph, paired: bool, condition: Var, candidate: Var) -> Result<Var> {
    if paired {
        graph.concat_channels(condition, candidate)
    } else {
        Ok(candidate)
    }
}

/// Records the region-separated generator objective for `batch`.
pub fn full_generator_loss(
    graph: &mut Graph,
    nets: &CycleNets,
    bound: &NetBindings,
    batch: &CycleBatch,
    weights: &LossWeights,
    kind: GanLossKind,
    modes: LossModes,
) -> Result<GeneratorObjective> {
    weights.check()?;
    let paired = nets.paired();
    let x = graph.constant(batch.x.clone());
    let y = graph.constant(batch.y.clone());

    let gx = nets.g.forward(graph, &bound.g, x, modes.generators)?;
    let fgx = nets
        .f
        .forward(graph, &bound.f, gx.output, modes.generators)?;
    let fy = nets.f.forward(graph, &bound.f, y, modes.generators)?;
    let gfy = nets
        .g
        .forward(graph, &bound.g, fy.output, modes.generators)?;

    let mut report = LossReport::default();
    let mut regional = Vec::with_capacity(2);
    for region in Region::BOTH {
        let mx = |g: &mut Graph, v| batch.mask_x.mask_var(g, v, region);
        let my = |g: &mut Graph, v| batch.mask_y.mask_var(g, v, region);
        let x_r = mx(graph, x)?;
        let gx_r = mx(graph, gx.output)?;
        let fgx_r = mx(graph, fgx.output)?;
        let y_r = my(graph, y)?;
        let fy_r = my(graph, fy.output)?;
        let gfy_r = my(graph, gfy.output)?;

        let dy = nets.d_y.get(region);
        let dy_in = disc_input(graph, paired, y_r, gx_r)?;
        let dy_bound = &bound.d_y[nets.d_y.index(region)];
        let s_y = dy.forward(graph, dy_bound, dy_in, modes.discriminators)?;
        let gan_xy = adversarial_generator_loss_var(graph, s_y.output, kind)?;

        let dx = nets.d_x.get(region);
        let dx_in = disc_input(graph, paired, x_r, fy_r)?;
        let dx_bound = &bound.d_x[nets.d_x.index(region)];
        let s_x = dx.forward(graph, dx_bound, dx_in, modes.discriminators)?;
        let gan_yx = adversarial_generator_loss_var(graph, s_x.output, kind)?;

        let cyc = cycle_loss_var(graph, x_r, fgx_r, y_r, gfy_r)?;
        let adv = graph.add(gan_xy, gan_yx)?;
        let weighted = graph.scale(cyc, weights.lambda as f32);
        let l_r = graph.add(adv, weighted)?;

        report.gan_g_xy += graph.scalar(gan_xy)?;
        report.gan_g_yx += graph.scalar(gan_yx)?;
        report.cycle += graph.scalar(cyc)?;
        regional.push(l_r);
    }
    let (l_fg, l_bg) = (regional[0], regional[1]);
    let a = graph.scale(l_fg, weights.mu as f32);
    let b = graph.scale(l_bg, weights.alpha as f32);
    let total = graph.add(a, b)?;
    report.combined_fg = graph.scalar(l_fg)?;
    report.combined_bg = graph.scalar(l_bg)?;
    report.attention_total = graph.scalar(total)?;
    Ok(GeneratorObjective {
        total,
        l_fg,
        l_bg,
        fake_y: gx.output,
        fake_x: fy.output,
        report,
        g_passes: vec![gx, gfy],
        f_passes: vec![fgx, fy],
    })
}

/// Recorded discriminator objectives.
pub struct DiscriminatorObjective {
    /// Unweighted sum of the four regional terms.
    pub total: Var,
    pub disc_y_fg: Var,
    pub disc_y_bg: Var,
    pub disc_x_fg: Var,
    pub disc_x_bg: Var,
    /// `(domain is y, model index, pass)` for committing batch statistics.
    pub passes: Vec<(bool, usize, Forward)>,
}

impl DiscriminatorObjective {
    pub fn fill(&self, graph: &Graph, report: &mut LossReport) -> Result<()> {
        report.disc_y_fg = graph.scalar(self.disc_y_fg)?;
        report.disc_y_bg = graph.scalar(self.disc_y_bg)?;
        report.disc_x_fg = graph.scalar(self.disc_x_fg)?;
        report.disc_x_bg = graph.scalar(self.disc_x_bg)?;
        Ok(())
    }
}

/// Records the four region-separated discriminator losses against the
/// given (detached) fakes: `fake_y = G(x)`, `fake_x = F(y)`.
#[allow(clippy::too_many_arguments)]
pub fn separated_discriminator_losses(
    graph: &mut Graph,
    nets: &CycleNets,
    bound: &NetBindings,
    batch: &CycleBatch,
    fake_y: &Tensor4,
    fake_x: &Tensor4,
    kind: GanLossKind,
    mode: ForwardMode,
) -> Result<DiscriminatorObjective> {
    let paired = nets.paired();
    let x = graph.constant(batch.x.clone());
    let y = graph.constant(batch.y.clone());
    let fy = graph.constant(fake_y.clone());
    let fx = graph.constant(fake_x.clone());
    let mut passes = Vec::new();
    let mut terms = Vec::with_capacity(4);
    for domain_y in [true, false] {
        let (real, fake, mask, discs, binds) = if domain_y {
            (y, fy, &batch.mask_y, &nets.d_y, &bound.d_y)
        } else {
            (x, fx, &batch.mask_x, &nets.d_x, &bound.d_x)
        };
        for region in Region::BOTH {
            let real_r = mask.mask_var(graph, real, region)?;
            // Fakes take the mask of their source domain.
            let fake_r = if domain_y {
                batch.mask_x.mask_var(graph, fake, region)?
            } else {
                batch.mask_y.mask_var(graph, fake, region)?
            };
            let real_in = disc_input(graph, paired, real_r, real_r)?;
            let fake_in = disc_input(graph, paired, real_r, fake_r)?;
            let idx = discs.index(region);
            let model = &discs.models[idx];
            let sr = model.forward(graph, &binds[idx], real_in, mode)?;
            let sf = model.forward(graph, &binds[idx], fake_in, mode)?;
            terms.push(adversarial_discriminator_loss_var(
                graph, sr.output, sf.output, kind,
            )?);
            passes.push((domain_y, idx, sr));
            passes.push((domain_y, idx, sf));
        }
    }
    let a = graph.add(terms[0], terms[1])?;
    let b = graph.add(terms[2], terms[3])?;
    let total = graph.add(a, b)?;
    Ok(DiscriminatorObjective {
        total,
        disc_y_fg: terms[0],
        disc_y_bg: terms[1],
        disc_x_fg: terms[2],
        disc_x_bg: terms[3],
        passes,
    })
}
