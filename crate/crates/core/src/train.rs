//! Shared minibatch machinery.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::loss::cross_entropy;
use crate::matrix::Matrix;
use crate::nn::{MlpModel, Mode, ModelConfig};
use crate::optim::{AdamConfig, Optimizer, OptimizerKind};
use crate::rng::Prng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples per minibatch; values `>= N` give full-batch training.
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            optimizer: OptimizerKind::Adam(AdamConfig::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        let lr = self.optimizer.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Shuffled partition of `0..n` into batches of at most `batch_size`.
/// Full-batch configurations skip the shuffle and draw nothing from `rng`.
pub fn minibatches(n: usize, batch_size: usize, rng: &mut Prng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    if batch_size >= n {
        return alloc::vec![idx];
    }
    rng.shuffle(&mut idx);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Fits a multinomial linear classifier (a model without hidden layers) by
/// cross-entropy. Used for propensity and logging-policy models.
pub fn fit_linear_classifier(
    features: &Matrix,
    targets: &[usize],
    num_classes: usize,
    config: &TrainConfig,
    rng: &mut Prng,
) -> Result<MlpModel> {
    config.validate()?;
    if features.rows() == 0 {
        return Err(Error::Empty("linear classifier training set"));
    }
    let model_config = ModelConfig {
        dropout_p: 0.0,
        ..ModelConfig::default()
    };
    let mut model = MlpModel::zeros(&[features.cols(), num_classes], model_config)?;
    let mut opt = Optimizer::new(config.optimizer);
    for epoch in 0..config.epochs {
        for batch in minibatches(features.rows(), config.batch_size, rng) {
            let x = features.select_rows(&batch);
            let mut t = Matrix::zeros(batch.len(), num_classes);
            for (r, &i) in batch.iter().enumerate() {
                t.set(r, targets[i], 1.0);
            }
            let (p, trace) = model.forward(&x, Mode::Train, rng)?;
            let ce = cross_entropy(&p, &t, None)?;
            if !ce.value.is_finite() {
                return Err(Error::Divergence {
                    stage: "linear classifier",
                    step: epoch,
                });
            }
            let (g, _) = model.backward_with(&trace, &ce.grad, &[], false)?;
            opt.apply(&mut model, &g)?;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minibatches_cover_every_index_once() {
        let mut rng = Prng::new(1);
        let mut all: Vec<usize> = minibatches(10, 3, &mut rng).into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn full_batch_is_ordered() {
        let mut rng = Prng::new(1);
        assert_eq!(minibatches(4, 10, &mut rng), alloc::vec![alloc::vec![0, 1, 2, 3]]);
    }
}
