//! Warm-start models trained on factual data only.
//!
//! * Direct method (DM): factual cross-entropy.
//! * HSIC: factual cross-entropy plus `lambda * HSIC(z, a)` between an
//!   intermediate embedding and the one-hot action, computed per minibatch.
//! * Uniform DM (UDM): factual cross-entropy weighted by `1 / pi_hat(a|x)`
//!   from a multinomial logistic propensity model.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::BanditDataset;
use crate::error::{check_dim, Error, Result};
use crate::loss::cross_entropy;
use crate::matrix::Matrix;
use crate::nn::{MlpModel, Mode, ModelConfig};
use crate::optim::{AdamConfig, Optimizer, OptimizerKind};
use crate::rng::Prng;
use crate::train::{fit_linear_classifier, minibatches, TrainConfig};

/// HSIC needs enough rows per minibatch for the kernel estimate to mean
/// anything.
pub const MIN_HSIC_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BackboneKind {
    Dm,
    Hsic,
    Udm,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 3] = [BackboneKind::Dm, BackboneKind::Hsic, BackboneKind::Udm];

    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::Dm => "DM",
            BackboneKind::Hsic => "HSIC",
            BackboneKind::Udm => "UDM",
        }
    }

    pub fn parse(s: &str) -> Option<BackboneKind> {
        BackboneKind::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(s))
    }
}

/// Network shape shared by backbones and CST.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub model: ModelConfig,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            hidden: vec![128, 128],
            model: ModelConfig::default(),
        }
    }
}

impl Architecture {
    pub fn dims(&self, input_dim: usize, num_classes: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(input_dim);
        dims.extend(&self.hidden);
        dims.push(num_classes);
        dims
    }

    pub fn build(&self, data: &BanditDataset, rng: &mut Prng) -> Result<MlpModel> {
        MlpModel::new(&self.dims(data.input_dim(), data.num_classes), self.model, rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub arch: Architecture,
    pub train: TrainConfig,
    pub hsic_lambda: f64,
    pub rbf_sigma: f64,
    /// Layer whose pre-activation is the HSIC embedding (1 = second linear
    /// layer).
    pub embedding_layer: usize,
    pub propensity_floor: f64,
    pub propensity_train: TrainConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::Dm,
            arch: Architecture::default(),
            train: TrainConfig::default(),
            hsic_lambda: 0.01,
            rbf_sigma: 0.5,
            embedding_layer: 1,
            propensity_floor: 0.01,
            propensity_train: TrainConfig {
                epochs: 100,
                batch_size: 128,
                optimizer: OptimizerKind::Adam(AdamConfig {
                    learning_rate: 1e-2,
                    ..AdamConfig::default()
                }),
            },
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.hsic_lambda.is_nan() || self.hsic_lambda < 0.0 {
            return Err(Error::InvalidConfig("hsic_lambda must be nonnegative".into()));
        }
        if self.rbf_sigma.is_nan() || self.rbf_sigma <= 0.0 {
            return Err(Error::InvalidConfig("rbf_sigma must be positive".into()));
        }
        if !(self.propensity_floor > 0.0 && self.propensity_floor <= 1.0) {
            return Err(Error::InvalidConfig("propensity_floor must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// A trained model and its per-epoch mean training loss.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: MlpModel,
    pub epoch_losses: Vec<f64>,
}

/// `exp(-|u - v|^2 / (2 sigma^2))`.
pub fn rbf_kernel(u: &[f64], v: &[f64], sigma: f64) -> f64 {
    let sq: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
    libm::exp(-sq / (2.0 * sigma * sigma))
}

fn gram(rows: &Matrix, sigma: f64) -> Matrix {
    let n = rows.rows();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        k.set(i, i, 1.0);
        for j in 0..i {
            let v = rbf_kernel(rows.row(i), rows.row(j), sigma);
            k.set(i, j, v);
            k.set(j, i, v);
        }
    }
    k
}

/// Biased HSIC estimate between actions (one-hot rows) and embeddings, with
/// RBF kernels of bandwidth `sigma` on both sides:
///
/// `(1/N^2) sum_ij K_ij L_ij + (1/N^4) (sum K)(sum L) - (2/N^3) sum_i (sum_j K_ij)(sum_k L_ik)`.
pub fn hsic_n(action_onehots: &Matrix, embeddings: &Matrix, sigma: f64) -> Result<f64> {
    Ok(hsic_with_grad(action_onehots, embeddings, sigma)?.0)
}

/// [`hsic_n`] together with its gradient with respect to the embeddings.
pub fn hsic_with_grad(action_onehots: &Matrix, embeddings: &Matrix, sigma: f64) -> Result<(f64, Matrix)> {
    let n = embeddings.rows();
    check_dim("hsic rows", n, action_onehots.rows())?;
    if n < 2 {
        return Err(Error::Empty("hsic needs at least two rows"));
    }
    let k = gram(action_onehots, sigma);
    let l = gram(embeddings, sigma);
    let nf = n as f64;
    let k_rows: Vec<f64> = k.iter_rows().map(|r| r.iter().sum()).collect();
    let l_rows: Vec<f64> = l.iter_rows().map(|r| r.iter().sum()).collect();
    let k_total: f64 = k_rows.iter().sum();
    let l_total: f64 = l_rows.iter().sum();
    let cross: f64 = k.as_slice().iter().zip(l.as_slice()).map(|(a, b)| a * b).sum();
    let third: f64 = k_rows.iter().zip(&l_rows).map(|(a, b)| a * b).sum();
    let value = cross / (nf * nf) + k_total * l_total / (nf * nf * nf * nf) - 2.0 * third / (nf * nf * nf);

    // d value / d L_ij = K_ij / N^2 + sum(K) / N^4 - 2 k_i / N^3
    let coef =
        |i: usize, j: usize| k.get(i, j) / (nf * nf) + k_total / (nf * nf * nf * nf) - 2.0 * k_rows[i] / (nf * nf * nf);
    let inv_s2 = 1.0 / (sigma * sigma);
    let h = embeddings.cols();
    let mut grad = Matrix::zeros(n, h);
    for p in 0..n {
        let zp = embeddings.row(p);
        let mut acc = vec![0.0; h];
        for j in 0..n {
            if j == p {
                continue;
            }
            let w = (coef(p, j) + coef(j, p)) * l.get(p, j) * inv_s2;
            for ((a, zpk), zjk) in acc.iter_mut().zip(zp).zip(embeddings.row(j)) {
                *a -= w * (zpk - zjk);
            }
        }
        grad.row_mut(p).copy_from_slice(&acc);
    }
    Ok((value, grad))
}

fn one_hot_rows(actions: &[usize], num_actions: usize) -> Matrix {
    let mut m = Matrix::zeros(actions.len(), num_actions);
    for (r, &a) in actions.iter().enumerate() {
        m.set(r, a, 1.0);
    }
    m
}

/// Shared factual training loop. `weights` are per-sample loss weights;
/// `hsic` is `(lambda, sigma, embedding_layer)`.
fn fit_factual(
    data: &BanditDataset,
    config: &BackboneConfig,
    weights: Option<&[f64]>,
    hsic: Option<(f64, f64, usize)>,
    rng: &mut Prng,
) -> Result<TrainedModel> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("backbone training data"));
    }
    let mut model = config.arch.build(data, rng)?;
    if let Some((_, _, layer)) = hsic {
        if layer >= model.num_layers() {
            return Err(Error::InvalidConfig(
                "embedding_layer exceeds the number of layers".into(),
            ));
        }
    }
    let mut opt = Optimizer::new(config.train.optimizer);
    let mut epoch_losses = Vec::with_capacity(config.train.epochs);
    for epoch in 0..config.train.epochs {
        let batches = minibatches(data.len(), config.train.batch_size, rng);
        let mut total = 0.0;
        for batch in &batches {
            let x = data.factual_inputs(batch);
            let t = data.factual_targets(batch);
            let w: Option<Vec<f64>> = weights.map(|w| batch.iter().map(|&i| w[i]).collect());
            let (p, trace) = model.forward(&x, Mode::Train, rng)?;
            let ce = cross_entropy(&p, &t, w.as_deref())?;
            let mut loss = ce.value;
            let grads = match hsic {
                Some((lambda, sigma, layer)) if lambda > 0.0 && batch.len() >= 2 => {
                    let actions: Vec<usize> = batch.iter().map(|&i| data.actions[i]).collect();
                    let a = one_hot_rows(&actions, data.num_actions);
                    let (h, mut dh) = hsic_with_grad(&a, trace.pre_activation(layer), sigma)?;
                    loss += lambda * h;
                    dh.scale(lambda);
                    model.backward_with(&trace, &ce.grad, &[(layer, &dh)], false)?.0
                }
                _ => model.backward_with(&trace, &ce.grad, &[], false)?.0,
            };
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence {
                    stage: "backbone",
                    step: epoch,
                });
            }
            opt.apply(&mut model, &grads)?;
            total += loss;
        }
        epoch_losses.push(total / batches.len() as f64);
    }
    Ok(TrainedModel { model, epoch_losses })
}

/// Direct method: minimizes the factual cross-entropy.
pub fn train_dm(data: &BanditDataset, config: &BackboneConfig, rng: &mut Prng) -> Result<TrainedModel> {
    fit_factual(data, config, None, None, rng)
}

pub fn train_hsic(data: &BanditDataset, config: &BackboneConfig, rng: &mut Prng) -> Result<TrainedModel> {
    if config.hsic_lambda > 0.0 && config.train.batch_size < MIN_HSIC_BATCH {
        return Err(Error::InvalidConfig(
            "HSIC regularization needs batch_size >= 32".into(),
        ));
    }
    fit_factual(
        data,
        config,
        None,
        Some((config.hsic_lambda, config.rbf_sigma, config.embedding_layer)),
        rng,
    )
}

/// Multinomial logistic model of the logging policy over the raw features.
#[derive(Clone, Debug, PartialEq)]
pub struct PropensityModel {
    pub model: MlpModel,
    pub floor: f64,
}

impl PropensityModel {
    /// `pi_hat(.|x)` for every row.
    pub fn predict(&self, features: &Matrix) -> Result<Matrix> {
        self.model.predict(features)
    }

    /// Inverse-propensity weights `1 / max(pi_hat(a_i|x_i), floor)` and the
    /// number of clamped samples.
    pub fn inverse_weights(&self, data: &BanditDataset) -> Result<(Vec<f64>, usize)> {
        let probs = self.predict(&data.features)?;
        let mut clamped = 0;
        let weights = data
            .actions
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let p = probs.get(i, a);
                if p < self.floor {
                    clamped += 1;
                    1.0 / self.floor
                } else {
                    1.0 / p
                }
            })
            .collect();
        Ok((weights, clamped))
    }
}

pub fn fit_propensity(data: &BanditDataset, config: &BackboneConfig, rng: &mut Prng) -> Result<PropensityModel> {
    let mut seen = vec![false; data.num_actions];
    data.actions.iter().for_each(|&a| seen[a] = true);
    if seen.iter().any(|s| !s) {
        log::warn!("propensity model: some actions never logged; their weights rely on the floor");
    }
    let model = fit_linear_classifier(
        &data.features,
        &data.actions,
        data.num_actions,
        &config.propensity_train,
        rng,
    )?;
    Ok(PropensityModel {
        model,
        floor: config.propensity_floor,
    })
}

/// Uniform DM: factual cross-entropy reweighted by inverse propensities.
pub fn train_udm(
    data: &BanditDataset,
    propensity: &PropensityModel,
    config: &BackboneConfig,
    rng: &mut Prng,
) -> Result<TrainedModel> {
    let (weights, clamped) = propensity.inverse_weights(data)?;
    if clamped > 0 {
        log::info!("UDM: {clamped} propensities clamped at floor {}", propensity.floor);
    }
    train_udm_with_weights(data, &weights, config, rng)
}

/// UDM with explicit per-sample weights.
pub fn train_udm_with_weights(
    data: &BanditDataset,
    weights: &[f64],
    config: &BackboneConfig,
    rng: &mut Prng,
) -> Result<TrainedModel> {
    check_dim("UDM weights", data.len(), weights.len())?;
    fit_factual(data, config, Some(weights), None, rng)
}

/// Trains whichever backbone `config.kind` names. UDM fits its propensity
/// model from the same stream first.
pub fn train_backbone(data: &BanditDataset, config: &BackboneConfig, rng: &mut Prng) -> Result<TrainedModel> {
    match config.kind {
        BackboneKind::Dm => train_dm(data, config, rng),
        BackboneKind::Hsic => train_hsic(data, config, rng),
        BackboneKind::Udm => {
            let propensity = fit_propensity(data, config, rng)?;
            train_udm(data, &propensity, config, rng)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rbf_kernel_values() {
        assert_eq!(rbf_kernel(&[0.3, -1.0], &[0.3, -1.0], 0.5), 1.0);
        // |u - v|^2 = 0.5 = 2 sigma^2
        let v = rbf_kernel(&[0.5, 0.0], &[0.0, 0.5], 0.5);
        assert!((v - libm::exp(-1.0)).abs() < 1e-15);
        assert_eq!(
            rbf_kernel(&[1.0, 2.0], &[0.0, 0.5], 0.7),
            rbf_kernel(&[0.0, 0.5], &[1.0, 2.0], 0.7)
        );
    }

    #[test]
    fn hsic_vanishes_for_constant_sides() {
        let a = one_hot_rows(&[0, 1, 1, 0, 2], 3);
        let z_const = Matrix::filled(5, 4, 0.3);
        assert!(hsic_n(&a, &z_const, 0.5).unwrap().abs() < 1e-15);
        let a_const = one_hot_rows(&[1, 1, 1, 1, 1], 3);
        let z = Matrix::from_rows(&[[0.1], [0.9], [-0.4], [2.0], [0.0]]).unwrap();
        assert!(hsic_n(&a_const, &z, 0.5).unwrap().abs() < 1e-15);
    }

    #[test]
    fn hsic_requires_two_rows() {
        let a = one_hot_rows(&[0], 2);
        assert!(hsic_n(&a, &Matrix::zeros(1, 3), 0.5).is_err());
    }

    #[test]
    fn inverse_weight_of_half_is_two() {
        let data =
            BanditDataset::new(Matrix::from_rows(&[[0.0]]).unwrap(), vec![0], vec![1], 2, 2, None, None).unwrap();
        // zero linear model: pi_hat = (0.5, 0.5)
        let prop = PropensityModel {
            model: MlpModel::zeros(&[1, 2], ModelConfig::default()).unwrap(),
            floor: 0.01,
        };
        let (w, clamped) = prop.inverse_weights(&data).unwrap();
        assert_eq!(w, vec![2.0]);
        assert_eq!(clamped, 0);
        let strict = PropensityModel { floor: 0.6, ..prop };
        let (w, clamped) = strict.inverse_weights(&data).unwrap();
        assert!((w[0] - 1.0 / 0.6).abs() < 1e-15);
        assert_eq!(clamped, 1);
    }
}
