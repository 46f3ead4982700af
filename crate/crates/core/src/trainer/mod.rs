//! Alternating generator/discriminator training, checkpoints, logs, and
//! evaluation.

mod checkpoint;
mod eval;
mod log;
mod run;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datapipe::DepthFallback;
use crate::diffcore::{AdamState, Graph};
use crate::error::{Error, Result};
use crate::losses::{
    full_generator_loss, separated_discriminator_losses, CycleBatch, CycleNets, GanLossKind,
    LossModes, LossReport, LossWeights, WeightPolicy,
};
use crate::netarch::{DiscriminatorConfig, ForwardMode, GeneratorConfig};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use eval::{enhance, evaluate, EvalModel, EvalReport};
pub use log::{epoch_means, read_log, TrainLogRow, LOG_HEADER};
pub use run::{train, EpochSummary, TrainOptions, TrainOutcome, FINAL_CHECKPOINT, LOG_FILE};

pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub mu: f64,
    pub alpha: f64,
    pub weight_policy: WeightPolicy,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    /// Overrides `image_size` in both network configs.
    pub image_size: usize,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub gan_kind: GanLossKind,
    pub seed: u64,
    /// Epoch interval between numbered checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub shared_region_discriminators: bool,
    /// Depth for samples without a depth file.
    pub depth_fallback: Option<DepthFallback>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 10.0,
            mu: 7.0,
            alpha: 3.0,
            weight_policy: WeightPolicy::Reject,
            batch_size: 5,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epochs: 100,
            image_size: 256,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            gan_kind: GanLossKind::LeastSquares,
            seed: 0,
            checkpoint_every: 10,
            shared_region_discriminators: true,
            depth_fallback: None,
        }
    }
}

impl TrainConfig {
    /// 64x64 images, three-stage generator, 30 epochs.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 30,
            image_size: 64,
            generator: GeneratorConfig::desk(),
            discriminator: DiscriminatorConfig::desk(),
            ..Self::default()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            mu: self.mu,
            alpha: self.alpha,
            policy: self.weight_policy,
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            image_size: self.image_size,
            ..self.generator.clone()
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            image_size: self.image_size,
            ..self.discriminator.clone()
        }
    }

    /// Checks every setting; returns weight warnings allowed by the policy.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} must be in [0, 1)")));
            }
        }
        self.generator_config().validate()?;
        self.discriminator_config().validate()?;
        if let Some(DepthFallback::Constant(v)) = self.depth_fallback {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "depth_fallback constant {v} is outside [0, 1]"
                )));
            }
        }
        self.weights().check()
    }

    /// SHA-256 of the effective configuration without `epochs` and
    /// `checkpoint_every`, which may change across a resume.
    pub fn resume_hash(&self) -> String {
        let effective = TrainConfig {
            generator: self.generator_config(),
            discriminator: self.discriminator_config(),
            ..self.clone()
        };
        let mut v = serde_json::to_value(&effective).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("epochs");
            obj.remove("checkpoint_every");
        }
        Sha256::digest(v.to_string().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub nets: CycleNets,
    /// Shared by both generators.
    pub gen_opt: AdamState,
    /// Shared by every discriminator.
    pub disc_opt: AdamState,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed steps.
    pub step: u64,
    /// Drives the per-epoch shuffle.
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<TrainState> {
        config.validate()?;
        let nets = CycleNets::build(
            &config.generator_config(),
            &config.discriminator_config(),
            config.shared_region_discriminators,
            config.seed,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let adam = || AdamState::new(config.lr, config.beta1, config.beta2, ADAM_EPSILON);
        Ok(TrainState {
            gen_opt: adam(),
            disc_opt: adam(),
            nets,
            epoch: 0,
            step: 0,
            rng,
            config,
        })
    }
}

fn check_finite(report: &LossReport, step: u64) -> Result<()> {
    match report.first_non_finite() {
        Some(term) => Err(Error::NonFinite(format!(
            "loss term `{term}` at step {}",
            step + 1
        ))),
        None => Ok(()),
    }
}

/// Updates both generators on the region-separated objective. Returns the
/// report with its generator fields filled.
pub fn generator_update(state: &mut TrainState, batch: &CycleBatch) -> Result<LossReport> {
    let cfg = &state.config;
    let mut graph = Graph::new();
    let bound = state.nets.bind(&mut graph, true, false);
    let obj = full_generator_loss(
        &mut graph,
        &state.nets,
        &bound,
        batch,
        &cfg.weights(),
        cfg.gan_kind,
        LossModes::GENERATOR_STEP,
    )?;
    check_finite(&obj.report, state.step)?;
    let grads = graph.backward(obj.total)?;
    let nets = &mut state.nets;
    nets.g.accumulate(&bound.g, &grads)?;
    nets.f.accumulate(&bound.f, &grads)?;
    state.gen_opt.step(
        nets.g
            .parameters_mut()
            .iter_mut()
            .chain(nets.f.parameters_mut()),
    )?;
    for pass in &obj.g_passes {
        nets.g.commit_stats(pass);
    }
    for pass in &obj.f_passes {
        nets.f.commit_stats(pass);
    }
    Ok(obj.report)
}

/// Updates the discriminators against fakes regenerated by the current
/// generators, which are only read. Fills the discriminator fields of
/// `report`.
pub fn discriminator_update(
    state: &mut TrainState,
    batch: &CycleBatch,
    report: &mut LossReport,
) -> Result<()> {
    let (fake_y, fake_x) = {
        let mut graph = Graph::new();
        let g = state.nets.g.bind(&mut graph, false);
        let f = state.nets.f.bind(&mut graph, false);
        let x = graph.constant(batch.x.clone());
        let y = graph.constant(batch.y.clone());
        let gx = state
            .nets
            .g
            .forward(&mut graph, &g, x, ForwardMode::TrainFrozenStats)?;
        let fy = state
            .nets
            .f
            .forward(&mut graph, &f, y, ForwardMode::TrainFrozenStats)?;
        (
            graph.value(gx.output).clone(),
            graph.value(fy.output).clone(),
        )
    };

    let mut graph = Graph::new();
    let bound = state.nets.bind(&mut graph, false, true);
    let obj = separated_discriminator_losses(
        &mut graph,
        &state.nets,
        &bound,
        batch,
        &fake_y,
        &fake_x,
        state.config.gan_kind,
        ForwardMode::Train,
    )?;
    obj.fill(&graph, report)?;
    check_finite(report, state.step)?;
    let grads = graph.backward(obj.total)?;
    let nets = &mut state.nets;
    for (m, b) in nets.d_x.models.iter_mut().zip(&bound.d_x) {
        m.accumulate(b, &grads)?;
    }
    for (m, b) in nets.d_y.models.iter_mut().zip(&bound.d_y) {
        m.accumulate(b, &grads)?;
    }
    let params = nets
        .d_x
        .models
        .iter_mut()
        .chain(nets.d_y.models.iter_mut())
        .flat_map(|m| m.parameters_mut().iter_mut());
    state.disc_opt.step(params)?;
    for (domain_y, idx, pass) in &obj.passes {
        let discs = if *domain_y {
            &mut nets.d_y
        } else {
            &mut nets.d_x
        };
        discs.models[*idx].commit_stats(pass);
    }
    Ok(())
}

/// One generator update followed by one discriminator update.
pub fn train_step(state: &mut TrainState, batch: &CycleBatch) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::invalid("train_step", "empty batch"));
    }
    let s = batch.x.shape();
    let n = state.config.image_size;
    if (s.channels, s.height, s.width) != (state.config.generator.in_channels, n, n) {
        return Err(Error::invalid(
            "train_step",
            format!("batch {s} does not match the configured {n}x{n} images"),
        ));
    }
    let mut report = generator_update(state, batch)?;
    discriminator_update(state, batch, &mut report)?;
    state.step += 1;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_protocol() {
        let c = TrainConfig::default();
        assert_eq!((c.lambda, c.mu, c.alpha), (10.0, 7.0, 3.0));
        assert_eq!((c.batch_size, c.lr, c.epochs), (5, 2e-4, 100));
        assert!(c.shared_region_discriminators);
        assert_eq!(c.gan_kind, GanLossKind::LeastSquares);
        let d = TrainConfig::desk();
        assert_eq!(
            (
                d.image_size,
                d.generator.depth,
                d.generator.base_channels,
                d.epochs
            ),
            (64, 3, 16, 30)
        );
        assert!(d.validate().unwrap().is_empty());
    }

    #[test]
    fn invalid_settings() {
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::desk();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.batch_size = 0));
        assert!(bad(|c| c.lr = 0.0));
        assert!(bad(|c| c.mu = 0.0));
        assert!(bad(|c| c.image_size = 60));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(
            serde_json::from_str::<TrainConfig>(r#"{"epochs": 3, "lerning_rate": 1}"#).is_err()
        );
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(c.lr, 2e-4);
    }

    #[test]
    fn resume_hash_ignores_schedule_length() {
        let a = TrainConfig::desk();
        let mut b = a.clone();
        b.epochs = 99;
        b.checkpoint_every = 1;
        assert_eq!(a.resume_hash(), b.resume_hash());
        b.generator.image_size = 256;
        assert_eq!(a.resume_hash(), b.resume_hash());
        b.lr = 1e-4;
        assert_ne!(a.resume_hash(), b.resume_hash());
    }
}
