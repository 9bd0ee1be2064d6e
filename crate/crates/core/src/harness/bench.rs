//! Per-iteration cost of the hardness weighted sampler.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DroError, Result};
use crate::phi_divergence::RobustnessParam;
use crate::sampler::{init_store, sample_indices, update_store};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub iterations: usize,
    /// Mean wall time of softmax + sampling + store update.
    pub mean_us_per_iter: f64,
    /// Stale loss array only (`8 n`).
    pub loss_bytes: usize,
    /// Loss and stamp arrays plus the store header.
    pub store_bytes: usize,
}

/// Batch size used by the benchmark loop.
pub const BENCH_BATCH: usize = 2;

/// Times `repetitions` sampler iterations for each store size.
pub fn bench_sampler_overhead(
    ns: &[usize],
    repetitions: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if repetitions == 0 {
        return Err(DroError::arg("need at least one repetition"));
    }
    let beta = RobustnessParam::new(1.0)?;
    ns.iter()
        .map(|&n| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let init: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
            let mut store = init_store(n, Some(&init))?;
            let fresh: Vec<f64> = (0..BENCH_BATCH)
                .map(|_| rng.random_range(0.0..2.0))
                .collect();
            let start = Instant::now();
            for _ in 0..repetitions {
                let probs = store.hardness_probs(beta);
                let batch = sample_indices(probs.probs(), BENCH_BATCH, true, &mut rng)?;
                update_store(&mut store, &batch, &fresh)?;
            }
            let elapsed = start.elapsed().as_secs_f64();
            Ok(BenchRow {
                n,
                iterations: repetitions,
                mean_us_per_iter: elapsed * 1e6 / repetitions as f64,
                loss_bytes: store.loss_memory_bytes(),
                store_bytes: store.memory_bytes(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_for_268_examples() {
        let rows = bench_sampler_overhead(&[268], 10, 0).unwrap();
        assert_eq!(rows[0].loss_bytes, 2144);
        assert!(rows[0].store_bytes >= 268 * 16);
    }

    #[test]
    fn rejects_zero_repetitions() {
        assert!(bench_sampler_overhead(&[10], 0, 0).is_err());
        assert!(bench_sampler_overhead(&[0], 1, 0).is_err());
    }
}
