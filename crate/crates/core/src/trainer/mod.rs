//! SGD with hardness weighted sampling (DRO) and the uniform-sampling ERM
//! baseline.
//!
//! Each step draws a batch from the current sampling distribution, evaluates
//! fresh per-example losses and gradients, optionally reweights them by the
//! clipped importance weights, writes the fresh losses back into the stale
//! store and applies an SGD / momentum update.

mod checkpoint;
mod metrics;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DroError, Result};
use crate::phi_divergence::{log_mean_exp, HardnessDistribution, RobustnessParam};
use crate::sampler::{self, SamplerConfig, StaleLossStore};
use crate::tinynet::{combine_weighted, Dataset, LossKind, MlpModel};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use metrics::{csv_header, write_metrics_csv, MetricsRecord, CSV_BASE_COLUMNS};

/// Stream id of the sampler RNG; model initialisation uses stream 0.
const SAMPLER_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    Erm,
    Dro,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    /// `lr · (1 − t / t_max)^power`
    PolyDecay {
        power: f64,
    },
}

/// Initial contents of the stale loss store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StoreInit {
    /// All zeros: the first draw is uniform.
    Zeros,
    /// Per-example losses of the freshly initialised model.
    InitialLosses,
}

impl LrSchedule {
    pub const POLY_DEFAULT: LrSchedule = LrSchedule::PolyDecay { power: 0.9 };
}

/// Learning rate at `step` out of `total` steps.
pub fn lr_at(schedule: LrSchedule, lr: f64, step: u64, total: u64) -> f64 {
    match schedule {
        LrSchedule::Constant => lr,
        LrSchedule::PolyDecay { power } => {
            if total == 0 {
                return lr;
            }
            let frac = (step.min(total) as f64) / total as f64;
            lr * (1.0 - frac).powf(power)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub beta: RobustnessParam,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub importance_sampling: bool,
    pub w_min: f64,
    pub w_max: f64,
    pub with_replacement: bool,
    pub lr_schedule: LrSchedule,
    pub loss_kind: LossKind,
    pub hidden_layers: Vec<usize>,
    pub store_init: StoreInit,
    /// Steps between metric records; one epoch (`⌈n/b⌉` steps) when unset.
    pub log_interval: Option<u64>,
    /// Fill `wall_time_ms`; off by default so metric streams are reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Dro,
            beta: RobustnessParam::new(1.0).unwrap(),
            lr: 0.01,
            momentum: 0.0,
            nesterov: false,
            batch_size: 32,
            epochs: 10,
            max_steps: None,
            seed: 0,
            importance_sampling: true,
            w_min: 0.1,
            w_max: 10.0,
            with_replacement: true,
            lr_schedule: LrSchedule::Constant,
            loss_kind: LossKind::CrossEntropySoftmax,
            hidden_layers: vec![64, 64],
            store_init: StoreInit::Zeros,
            log_interval: None,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(DroError::arg(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(DroError::arg(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.hidden_layers.contains(&0) {
            return Err(DroError::arg("hidden layer widths must be positive"));
        }
        if self.log_interval == Some(0) {
            return Err(DroError::arg("log interval must be positive"));
        }
        if let LrSchedule::PolyDecay { power } = self.lr_schedule {
            if !(power.is_finite() && power >= 0.0) {
                return Err(DroError::arg(format!("invalid decay power {power}")));
            }
        }
        self.sampler_config().validate()
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            beta: self.beta,
            batch_size: self.batch_size,
            with_replacement: self.with_replacement,
            importance_sampling: self.importance_sampling && self.objective == Objective::Dro,
            w_min: self.w_min,
            w_max: self.w_max,
        }
    }

    pub fn update_rule(&self) -> UpdateRule {
        UpdateRule {
            momentum: self.momentum,
            nesterov: self.nesterov,
        }
    }

    pub fn layer_dims(&self, data: &Dataset) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_layers.len() + 2);
        dims.push(data.input_dim());
        dims.extend_from_slice(&self.hidden_layers);
        dims.push(match self.loss_kind {
            LossKind::CrossEntropySoftmax => data.num_classes,
            LossKind::SquaredError => match data.targets.first() {
                Some(crate::tinynet::Target::Vector(v)) => v.len(),
                _ => data.num_classes,
            },
        });
        dims
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateRule {
    pub momentum: f64,
    pub nesterov: bool,
}

impl UpdateRule {
    pub const PLAIN: UpdateRule = UpdateRule {
        momentum: 0.0,
        nesterov: false,
    };
}

/// Everything the training loop carries between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: MlpModel,
    pub store: StaleLossStore,
    /// Momentum buffer, all zeros when momentum is 0.
    pub velocity: Vec<f64>,
    pub step: u64,
}

impl TrainState {
    pub fn new(model: MlpModel, store: StaleLossStore) -> Self {
        let velocity = vec![0.0; model.param_count()];
        Self {
            model,
            store,
            velocity,
            step: 0,
        }
    }
}

/// One parameter update.
///
/// Plain SGD when `momentum == 0`. Otherwise `v ← μv − ηg`, then
/// `θ ← θ + μv − ηg` (Nesterov) or `θ ← θ + v` (heavy ball).
pub fn sgd_step(state: &mut TrainState, gradient: &[f64], lr: f64, rule: UpdateRule) -> Result<()> {
    let n = state.model.param_count();
    if gradient.len() != n || state.velocity.len() != n {
        return Err(DroError::arg(format!(
            "gradient has {} entries, model has {n} parameters",
            gradient.len()
        )));
    }
    if let Some((i, g)) = gradient.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(DroError::Numeric(format!(
            "gradient coordinate {i} is {g} at step {}",
            state.step
        )));
    }
    let mut theta = state.model.parameters();
    let mu = rule.momentum;
    if mu == 0.0 {
        for (t, g) in theta.iter_mut().zip(gradient) {
            *t -= lr * g;
        }
    } else {
        for ((t, v), g) in theta.iter_mut().zip(&mut state.velocity).zip(gradient) {
            *v = mu * *v - lr * g;
            if rule.nesterov {
                *t += mu * *v - lr * g;
            } else {
                *t += *v;
            }
        }
    }
    state.model.set_parameters(&theta)?;
    state.step += 1;
    Ok(())
}

/// What happened during one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub batch: Vec<usize>,
    pub fresh_losses: Vec<f64>,
    pub weights: Vec<f64>,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Step-by-step driver over one dataset.
pub struct Trainer<'a> {
    config: TrainConfig,
    data: &'a Dataset,
    monitor: &'a Dataset,
    state: TrainState,
    rng: ChaCha8Rng,
    total_steps: u64,
    steps_per_epoch: u64,
    last_grad_norm: f64,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, data: &'a Dataset) -> Result<Self> {
        Self::with_monitor(config, data, data)
    }

    /// Like [`Trainer::new`], with per-class accuracy measured on `monitor`.
    pub fn with_monitor(
        config: TrainConfig,
        data: &'a Dataset,
        monitor: &'a Dataset,
    ) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(DroError::arg("training set is empty"));
        }
        if !config.with_replacement && config.batch_size > data.len() {
            return Err(DroError::arg(format!(
                "batch size {} exceeds {} examples without replacement",
                config.batch_size,
                data.len()
            )));
        }
        let model = MlpModel::init(&config.layer_dims(data), config.seed)?;
        let store = match config.store_init {
            StoreInit::Zeros => sampler::init_store(data.len(), None)?,
            StoreInit::InitialLosses => {
                let losses = data
                    .inputs
                    .iter()
                    .zip(&data.targets)
                    .map(|(x, y)| model.per_example_loss(x, y, config.loss_kind))
                    .collect::<Result<Vec<f64>>>()?;
                sampler::init_store(data.len(), Some(&losses))?
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SAMPLER_STREAM);
        let steps_per_epoch = data.len().div_ceil(config.batch_size) as u64;
        let total_steps = config
            .max_steps
            .unwrap_or(config.epochs as u64 * steps_per_epoch);
        Ok(Self {
            config,
            data,
            monitor,
            state: TrainState::new(model, store),
            rng,
            total_steps,
            steps_per_epoch,
            last_grad_norm: 0.0,
            started: Instant::now(),
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    /// Sampling distribution for the next batch.
    pub fn sampling_distribution(&self) -> HardnessDistribution {
        match self.config.objective {
            Objective::Dro => self.state.store.hardness_probs(self.config.beta),
            Objective::Erm => HardnessDistribution::uniform(self.data.len()).expect("non-empty"),
        }
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let t = self.state.step;
        let cfg = self.config.sampler_config();
        let probs = self.sampling_distribution();
        let batch = sampler::sample_indices(
            probs.probs(),
            cfg.batch_size,
            cfg.with_replacement,
            &mut self.rng,
        )?;

        let mut fresh = Vec::with_capacity(batch.len());
        let mut grads = Vec::with_capacity(batch.len());
        for &i in &batch {
            let (loss, g) = self.state.model.loss_and_gradient(
                &self.data.inputs[i],
                &self.data.targets[i],
                self.config.loss_kind,
            )?;
            if !loss.is_finite() {
                return Err(DroError::Divergence {
                    step: t,
                    reason: format!("loss of example {i} is {loss}"),
                });
            }
            fresh.push(loss);
            grads.push(g);
        }

        let weights = sampler::importance_weights(&self.state.store, &batch, &fresh, &cfg)?;
        sampler::update_store(&mut self.state.store, &batch, &fresh)?;

        let gradient = combine_weighted(self.state.model.param_count(), &grads, &weights);
        let grad_norm = gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
        let lr = lr_at(self.config.lr_schedule, self.config.lr, t, self.total_steps);
        sgd_step(&mut self.state, &gradient, lr, self.config.update_rule()).map_err(
            |e| match e {
                DroError::Numeric(reason) => DroError::Divergence { step: t, reason },
                other => other,
            },
        )?;
        self.last_grad_norm = grad_norm;
        Ok(StepReport {
            batch,
            fresh_losses: fresh,
            weights,
            lr,
            grad_norm,
        })
    }

    /// Metrics for the current state.
    pub fn record(&self) -> Result<MetricsRecord> {
        let stale = self.state.store.losses();
        let mean = stale.iter().sum::<f64>() / stale.len() as f64;
        let robust = log_mean_exp(stale, self.config.beta)?;
        let entropy = self.sampling_distribution().entropy();
        let per_class = per_class_accuracy(&self.state.model, self.monitor)?;
        let worst = worst_of(&per_class);
        let wall_time_ms = if self.config.record_wall_time {
            self.started.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        Ok(MetricsRecord {
            step: self.state.step,
            epoch: self.state.step as f64 / self.steps_per_epoch as f64,
            mean_train_loss: mean,
            robust_train_loss: robust,
            sampler_entropy: entropy,
            per_class_accuracy: per_class,
            worst_class_accuracy: worst,
            grad_norm: self.last_grad_norm,
            wall_time_ms,
        })
    }

    /// Runs the remaining budget, recording metrics every log interval and
    /// after the final step.
    pub fn run(&mut self) -> Result<Vec<MetricsRecord>> {
        let interval = self.config.log_interval.unwrap_or(self.steps_per_epoch);
        let mut records = Vec::new();
        while self.state.step < self.total_steps {
            self.step()?;
            let s = self.state.step;
            if s.is_multiple_of(interval) || s == self.total_steps {
                records.push(self.record()?);
            }
        }
        Ok(records)
    }
}

/// Trains from scratch; returns the final state and the metric series.
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<(TrainState, Vec<MetricsRecord>)> {
    let mut trainer = Trainer::new(config.clone(), data)?;
    let records = trainer.run()?;
    Ok((trainer.into_state(), records))
}

/// Per-class accuracy under the argmax rule; classes without examples
/// count as fully correct.
pub fn per_class_accuracy(model: &MlpModel, data: &Dataset) -> Result<Vec<f64>> {
    let mut correct = vec![0usize; data.num_classes];
    let mut total = vec![0usize; data.num_classes];
    for (x, y) in data.inputs.iter().zip(&data.targets) {
        let c = y.class();
        total[c] += 1;
        if model.predict(x)? == c {
            correct[c] += 1;
        }
    }
    Ok(correct
        .iter()
        .zip(&total)
        .map(|(&k, &t)| if t == 0 { 1.0 } else { k as f64 / t as f64 })
        .collect())
}

fn worst_of(per_class: &[f64]) -> f64 {
    per_class.iter().copied().fold(1.0, f64::min)
}

/// Uniform-weight evaluation: `robust_train_loss` equals the mean loss and
/// `sampler_entropy` is `ln n`.
pub fn evaluate(model: &MlpModel, data: &Dataset, kind: LossKind) -> Result<MetricsRecord> {
    evaluate_robust(model, data, kind, None)
}

/// Evaluation with the KL robust loss of the full loss vector when `beta` is
/// given.
pub fn evaluate_robust(
    model: &MlpModel,
    data: &Dataset,
    kind: LossKind,
    beta: Option<RobustnessParam>,
) -> Result<MetricsRecord> {
    if data.is_empty() {
        return Err(DroError::arg("evaluation set is empty"));
    }
    let losses = data
        .inputs
        .iter()
        .zip(&data.targets)
        .map(|(x, y)| model.per_example_loss(x, y, kind))
        .collect::<Result<Vec<_>>>()?;
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    let (robust, entropy) = match beta {
        Some(b) => (
            log_mean_exp(&losses, b)?,
            crate::phi_divergence::hardness_weights_kl(&losses, b)?.entropy(),
        ),
        None => (mean, (losses.len() as f64).ln()),
    };
    let per_class = per_class_accuracy(model, data)?;
    Ok(MetricsRecord {
        step: 0,
        epoch: 0.0,
        mean_train_loss: mean,
        robust_train_loss: robust,
        sampler_entropy: entropy,
        worst_class_accuracy: worst_of(&per_class),
        per_class_accuracy: per_class,
        grad_norm: 0.0,
        wall_time_ms: 0.0,
    })
}
