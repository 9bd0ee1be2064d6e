//! Stale per-example loss store and hardness weighted minibatch sampling.
//!
//! The store keeps one loss value per training example, refreshed whenever
//! the example is drawn. Batches are drawn from `softmax(β · L)` of the
//! stale vector `L`; the fresh losses computed on the batch give the
//! importance weights `clip(exp(β (fresh − stale)), [w_min, w_max])` before
//! being written back.

use std::collections::BTreeMap;
use std::mem::size_of;

use rand::Rng;

use crate::error::{DroError, Result};
use crate::phi_divergence::{softmax_scaled, HardnessDistribution, RobustnessParam};

/// Stale loss vector with per-example refresh bookkeeping.
///
/// `last_update[i]` is the value of `step` right after example `i` was last
/// written, or `-1` if it never was. `step` counts calls to [`update_store`].
#[derive(Debug, Clone, PartialEq)]
pub struct StaleLossStore {
    losses: Vec<f64>,
    last_update: Vec<i64>,
    step: i64,
}

impl StaleLossStore {
    /// Rebuilds a store from raw parts, checking its invariants.
    pub fn from_parts(losses: Vec<f64>, last_update: Vec<i64>, step: i64) -> Result<Self> {
        if losses.is_empty() {
            return Err(DroError::arg("store must hold at least one example"));
        }
        if losses.len() != last_update.len() {
            return Err(DroError::arg(format!(
                "{} losses but {} update stamps",
                losses.len(),
                last_update.len()
            )));
        }
        if step < 0 {
            return Err(DroError::arg(format!("negative step counter {step}")));
        }
        if let Some(v) = losses.iter().find(|v| !v.is_finite()) {
            return Err(DroError::arg(format!("non-finite stale loss {v}")));
        }
        if let Some(t) = last_update.iter().find(|&&t| t < -1 || t > step) {
            return Err(DroError::arg(format!(
                "update stamp {t} outside [-1, {step}]"
            )));
        }
        Ok(Self {
            losses,
            last_update,
            step,
        })
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn last_update(&self) -> &[i64] {
        &self.last_update
    }

    pub fn step(&self) -> i64 {
        self.step
    }

    /// `softmax(β · L)` of the stale losses.
    pub fn hardness_probs(&self, beta: RobustnessParam) -> HardnessDistribution {
        // losses are validated finite and non-empty on every write
        HardnessDistribution::new(softmax_scaled(&self.losses, beta.get()))
            .expect("softmax of a valid store is a distribution")
    }

    /// Bytes held by the stale loss array alone.
    pub fn loss_memory_bytes(&self) -> usize {
        self.losses.len() * size_of::<f64>()
    }

    /// Bytes held by the store: both per-example arrays plus the header.
    pub fn memory_bytes(&self) -> usize {
        self.losses.len() * (size_of::<f64>() + size_of::<i64>()) + size_of::<Self>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub beta: RobustnessParam,
    pub batch_size: usize,
    pub with_replacement: bool,
    pub importance_sampling: bool,
    pub w_min: f64,
    pub w_max: f64,
}

impl SamplerConfig {
    pub fn new(
        beta: RobustnessParam,
        batch_size: usize,
        with_replacement: bool,
        importance_sampling: bool,
        w_min: f64,
        w_max: f64,
    ) -> Result<Self> {
        let cfg = Self {
            beta,
            batch_size,
            with_replacement,
            importance_sampling,
            w_min,
            w_max,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(DroError::arg("batch size must be at least 1"));
        }
        if !(self.w_min > 0.0 && self.w_min <= 1.0 && self.w_max >= 1.0 && self.w_max.is_finite()) {
            return Err(DroError::arg(format!(
                "clipping bounds must satisfy 0 < w_min <= 1 <= w_max < inf, got [{}, {}]",
                self.w_min, self.w_max
            )));
        }
        Ok(())
    }
}

/// Creates a store for `n` examples; zeros when no initial losses are given.
pub fn init_store(n: usize, init_losses: Option<&[f64]>) -> Result<StaleLossStore> {
    if n == 0 {
        return Err(DroError::arg("store must hold at least one example"));
    }
    let losses = match init_losses {
        Some(init) if init.len() != n => {
            return Err(DroError::arg(format!(
                "expected {n} initial losses, got {}",
                init.len()
            )))
        }
        Some(init) => init.to_vec(),
        None => vec![0.0; n],
    };
    StaleLossStore::from_parts(losses, vec![-1; n], 0)
}

/// Draws `batch_size` indices from `probs`.
///
/// With replacement, each index is an independent inverse-CDF draw over the
/// cumulative sums. Without replacement, draws are sequential with removal;
/// once the remaining mass is zero the rest are drawn uniformly from the
/// unused indices.
pub fn sample_indices<R: Rng + ?Sized>(
    probs: &[f64],
    batch_size: usize,
    with_replacement: bool,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let n = probs.len();
    if n == 0 {
        return Err(DroError::arg("cannot sample from an empty distribution"));
    }
    if with_replacement {
        let mut cumulative = Vec::with_capacity(n);
        let mut acc = 0.0;
        for &p in probs {
            acc += p;
            cumulative.push(acc);
        }
        let total = acc;
        Ok((0..batch_size)
            .map(|_| {
                let u = rng.random::<f64>() * total;
                cumulative.partition_point(|&c| c <= u).min(n - 1)
            })
            .collect())
    } else {
        if batch_size > n {
            return Err(DroError::arg(format!(
                "batch size {batch_size} exceeds {n} examples without replacement"
            )));
        }
        let mut remaining = probs.to_vec();
        let mut taken = vec![false; n];
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let total: f64 = remaining.iter().sum();
            let idx = if total > 0.0 {
                let u = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut chosen = None;
                for (i, &w) in remaining.iter().enumerate() {
                    acc += w;
                    if w > 0.0 && u < acc {
                        chosen = Some(i);
                        break;
                    }
                }
                // u rounded past the last cumulative value
                chosen.unwrap_or_else(|| remaining.iter().rposition(|&w| w > 0.0).unwrap())
            } else {
                let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
                free[rng.random_range(0..free.len())]
            };
            taken[idx] = true;
            remaining[idx] = 0.0;
            batch.push(idx);
        }
        Ok(batch)
    }
}

/// Draws a minibatch from `softmax(β · stale losses)`.
pub fn sample_batch<R: Rng + ?Sized>(
    store: &StaleLossStore,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    let probs = store.hardness_probs(cfg.beta);
    sample_indices(probs.probs(), cfg.batch_size, cfg.with_replacement, rng)
}

fn check_batch(store: &StaleLossStore, batch: &[usize], fresh: &[f64]) -> Result<()> {
    if batch.len() != fresh.len() {
        return Err(DroError::arg(format!(
            "{} batch indices but {} fresh losses",
            batch.len(),
            fresh.len()
        )));
    }
    if let Some(&i) = batch.iter().find(|&&i| i >= store.len()) {
        return Err(DroError::arg(format!(
            "index {i} out of range for {} examples",
            store.len()
        )));
    }
    if let Some(v) = fresh.iter().find(|v| !v.is_finite()) {
        return Err(DroError::arg(format!("non-finite fresh loss {v}")));
    }
    Ok(())
}

/// Per-example importance weights for a freshly evaluated batch.
///
/// Returns all ones when importance sampling is disabled.
pub fn importance_weights(
    store: &StaleLossStore,
    batch: &[usize],
    fresh_losses: &[f64],
    cfg: &SamplerConfig,
) -> Result<Vec<f64>> {
    check_batch(store, batch, fresh_losses)?;
    if !cfg.importance_sampling {
        return Ok(vec![1.0; batch.len()]);
    }
    let beta = cfg.beta.get();
    Ok(batch
        .iter()
        .zip(fresh_losses)
        .map(|(&i, &fresh)| {
            (beta * (fresh - store.losses[i]))
                .exp()
                .clamp(cfg.w_min, cfg.w_max)
        })
        .collect())
}

/// Writes fresh losses back into the store and advances its step.
///
/// Duplicate indices resolve to the last occurrence in the batch.
pub fn update_store(
    store: &mut StaleLossStore,
    batch: &[usize],
    fresh_losses: &[f64],
) -> Result<()> {
    check_batch(store, batch, fresh_losses)?;
    store.step += 1;
    for (&i, &fresh) in batch.iter().zip(fresh_losses) {
        store.losses[i] = fresh;
        store.last_update[i] = store.step;
    }
    Ok(())
}

/// Staleness bucket: `step − last_update` or never refreshed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Staleness {
    Lag(u64),
    Never,
}

pub fn staleness_histogram(store: &StaleLossStore) -> BTreeMap<Staleness, usize> {
    let mut hist = BTreeMap::new();
    for &t in &store.last_update {
        let key = if t < 0 {
            Staleness::Never
        } else {
            Staleness::Lag((store.step - t) as u64)
        };
        *hist.entry(key).or_insert(0) += 1;
    }
    hist
}
