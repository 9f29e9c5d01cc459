use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Mini-batch training settings shared by the autoencoder and the RBM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after this many epochs without improvement of the training
    /// loss. Zero disables early stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            learning_rate: 0.01,
            batch_size: 32,
            seed: 0,
            patience: 0,
        }
    }
}

impl TrainConfig {
    /// `allow_zero_epochs` is used by the RBM, where zero epochs returns the
    /// seeded initialization.
    pub(crate) fn validate(&self, allow_zero_epochs: bool) -> Result<()> {
        if self.epochs == 0 && !allow_zero_epochs {
            return Err(Error::Parameter("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

pub(crate) fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn shuffled_indices(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order
}

/// Mean and sample standard deviation (divisor `n - 1`), summed in sorted
/// order so the result does not depend on the order of `values`.
pub(crate) fn order_free_mean_std(values: &[f64]) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    if sorted.first() == sorted.last() {
        return (sorted.first().copied().unwrap_or(f64::NAN), 0.0);
    }
    let mean = sorted.iter().sum::<f64>() / n;
    if sorted.len() < 2 {
        return (mean, 0.0);
    }
    let mut sq: Vec<f64> = sorted.iter().map(|v| (v - mean) * (v - mean)).collect();
    sq.sort_by(f64::total_cmp);
    let var = sq.iter().sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
