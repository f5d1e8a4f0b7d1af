//! Counterfactual self-training.
//!
//! Training alternates two steps on the objective
//!
//! ```text
//! L_CST = (1/N) sum_i [ CE(r_i, f(x_i, a_i)) + sum_{a != a_i} CE(r_hat_ia, f(x_i, a)) ]
//! ```
//!
//! 1. *Imputation*: with the model fixed, every counterfactual cell gets the
//!    one-hot label of the model's most likely class, which minimizes the
//!    counterfactual term over the simplex.
//! 2. *Retraining*: with the labels fixed, optimizer steps on `L_CST`,
//!    optionally plus `lambda * L_CVAT`.
//!
//! `L_CVAT` penalizes the KL divergence between a detached snapshot of the
//! model at `(x_i, a)` and the live model at `(x_i + z_i, a)`, summed over
//! counterfactual actions. `z_i` approximates the most sensitive direction
//! of radius `epsilon`, found by power iteration on input gradients.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::{all_action_inputs, joint_inputs, BanditDataset};
use crate::error::{Error, Result};
use crate::loss::{cross_entropy, cross_entropy_rows, kl_divergence};
use crate::matrix::Matrix;
use crate::nn::{Gradients, MlpModel, Mode};
use crate::optim::{AdamConfig, Optimizer, OptimizerKind};
use crate::rng::Prng;
use crate::train::minibatches;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// Imputed outcome class for every (sample, action) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudolabelTable {
    num_actions: usize,
    num_classes: usize,
    /// Class index per cell, row-major `N x |A|`; each cell stands for the
    /// one-hot vector at that class.
    labels: Vec<usize>,
    factual_mask: Vec<bool>,
}

impl PseudolabelTable {
    pub fn num_samples(&self) -> usize {
        self.labels.len() / self.num_actions
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn label(&self, sample: usize, action: usize) -> usize {
        self.labels[sample * self.num_actions + action]
    }

    #[inline]
    pub fn is_factual(&self, sample: usize, action: usize) -> bool {
        self.factual_mask[sample * self.num_actions + action]
    }

    /// One-hot vector of a cell.
    pub fn one_hot(&self, sample: usize, action: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.num_classes];
        v[self.label(sample, action)] = 1.0;
        v
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// One-hot targets for every cell of the given samples, sample-major.
    fn targets(&self, samples: &[usize]) -> Matrix {
        let a = self.num_actions;
        let mut t = Matrix::zeros(samples.len() * a, self.num_classes);
        for (r, &i) in samples.iter().enumerate() {
            for act in 0..a {
                t.set(r * a + act, self.label(i, act), 1.0);
            }
        }
        t
    }

    /// Imputes every counterfactual cell from `model` (eval mode). Returns the
    /// number of cells whose label changed. Factual cells are never touched.
    pub fn reimpute(&mut self, model: &MlpModel, data: &BanditDataset) -> Result<usize> {
        let probs = model.predict(&all_action_inputs(&data.features, data.num_actions))?;
        let mut changed = 0;
        for (cell, row) in probs.iter_rows().enumerate() {
            if self.factual_mask[cell] {
                continue;
            }
            let k = argmax(row);
            if self.labels[cell] != k {
                changed += 1;
                self.labels[cell] = k;
            }
        }
        Ok(changed)
    }
}

/// Pseudolabels for all unobserved cells from `model`; factual cells carry
/// the observed outcome.
pub fn impute_pseudolabels(model: &MlpModel, data: &BanditDataset) -> Result<PseudolabelTable> {
    let a = data.num_actions;
    let mut labels = vec![0; data.len() * a];
    let mut factual_mask = vec![false; data.len() * a];
    for i in 0..data.len() {
        labels[i * a + data.actions[i]] = data.outcomes[i];
        factual_mask[i * a + data.actions[i]] = true;
    }
    let mut table = PseudolabelTable {
        num_actions: a,
        num_classes: data.num_classes,
        labels,
        factual_mask,
    };
    table.reimpute(model, data)?;
    Ok(table)
}

/// Which model re-imputes inside an outer iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Imputer {
    /// The model being trained (alternating minimization).
    Current,
    /// Labels are fixed at the start of each outer iteration.
    Frozen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CstConfig {
    pub outer_iterations: usize,
    /// Weight of the CVAT term; 0 gives plain pseudolabeling.
    pub lambda_cvat: f64,
    /// Finite-difference step of the power iteration.
    pub cvat_xi: f64,
    pub cvat_power_iters: usize,
    /// Perturbation radius.
    pub cvat_epsilon: f64,
    /// Epochs per outer iteration.
    pub inner_epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Epochs between re-imputations.
    pub reimpute_every: usize,
    pub imputer: Imputer,
    /// Record the minibatch loss of every optimizer step.
    pub record_steps: bool,
}

impl Default for CstConfig {
    fn default() -> Self {
        CstConfig {
            outer_iterations: 2,
            lambda_cvat: 0.0,
            cvat_xi: 10.0,
            cvat_power_iters: 3,
            cvat_epsilon: 1.0,
            inner_epochs: 10,
            batch_size: 64,
            optimizer: OptimizerKind::Adam(AdamConfig::default()),
            reimpute_every: 1,
            imputer: Imputer::Current,
            record_steps: false,
        }
    }
}

impl CstConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.reimpute_every == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and reimpute_every must be positive".into(),
            ));
        }
        if self.lambda_cvat.is_nan() || self.lambda_cvat < 0.0 {
            return Err(Error::InvalidConfig("lambda_cvat must be nonnegative".into()));
        }
        if self.lambda_cvat > 0.0 && !(self.cvat_xi > 0.0 && self.cvat_epsilon > 0.0 && self.cvat_power_iters > 0) {
            return Err(Error::InvalidConfig(
                "CVAT needs positive xi, epsilon and power iterations".into(),
            ));
        }
        let lr = self.optimizer.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// A loss value with its parameter gradient.
#[derive(Clone, Debug)]
pub struct LossAndGrad {
    pub value: f64,
    pub grads: Gradients,
    /// Gradient with respect to each row of the joint model input.
    pub input_grads: Matrix,
}

/// `L_CST` on a set of samples (all of their action cells), averaged over
/// samples and summed over actions.
pub fn cst_loss(
    model: &MlpModel,
    data: &BanditDataset,
    table: &PseudolabelTable,
    samples: &[usize],
    mode: Mode,
    rng: &mut Prng,
) -> Result<LossAndGrad> {
    let a = data.num_actions;
    let cells: Vec<usize> = samples.iter().flat_map(|&i| core::iter::repeat_n(i, a)).collect();
    let actions: Vec<usize> = samples.iter().flat_map(|_| 0..a).collect();
    let x = joint_inputs(&data.features, &cells, &actions, a);
    let t = table.targets(samples);
    let (p, trace) = model.forward(&x, mode, rng)?;
    let mut ce = cross_entropy(&p, &t, None)?;
    // mean over cells -> mean over samples of the per-sample sum
    ce.grad.scale(a as f64);
    let (grads, dx) = model.backward_with(&trace, &ce.grad, &[], true)?;
    Ok(LossAndGrad {
        value: ce.value * a as f64,
        grads,
        input_grads: dx.expect("input gradient requested"),
    })
}

/// Full-data `L_CST` in eval mode, accumulated cell by cell in a fixed
/// order so that comparisons between tables at the same parameters are
/// exact.
pub fn cst_objective(model: &MlpModel, data: &BanditDataset, table: &PseudolabelTable) -> Result<f64> {
    let probs = model.predict(&all_action_inputs(&data.features, data.num_actions))?;
    let all: Vec<usize> = (0..data.len()).collect();
    let per_cell = cross_entropy_rows(&probs, &table.targets(&all))?;
    Ok(per_cell.iter().sum::<f64>() / data.len() as f64)
}

/// Counterfactual cells of a set of samples: `(sample, action)` pairs with
/// `action != a_i`, grouped by sample.
fn counterfactual_cells(data: &BanditDataset, samples: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut cells = Vec::with_capacity(samples.len() * (data.num_actions - 1));
    let mut actions = Vec::with_capacity(cells.capacity());
    for &i in samples {
        for a in (0..data.num_actions).filter(|&a| a != data.actions[i]) {
            cells.push(i);
            actions.push(a);
        }
    }
    (cells, actions)
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if norm > 0.0 && norm.is_finite() {
        v.iter_mut().for_each(|x| *x /= norm);
        true
    } else {
        false
    }
}

/// Power iteration on per-sample directions.
///
/// Starting from unit vectors `directions`, each round replaces every
/// direction by its normalized gradient `grad_at(directions)` (evaluated at
/// `xi * d`). A zero gradient keeps the current direction. Returns the
/// number of such degenerate updates.
pub fn power_iterate<F>(directions: &mut Matrix, rounds: usize, mut grad_at: F) -> Result<usize>
where
    F: FnMut(&Matrix) -> Result<Matrix>,
{
    let mut flat = 0;
    for _ in 0..rounds {
        let g = grad_at(directions)?;
        for r in 0..directions.rows() {
            let mut row = g.row(r).to_vec();
            if normalize(&mut row) {
                directions.row_mut(r).copy_from_slice(&row);
            } else {
                flat += 1;
            }
        }
    }
    Ok(flat)
}

/// Inputs with the feature block of each row shifted by its sample's
/// perturbation. `owner[r]` names the row of `shift` for input row `r`.
fn shifted(inputs: &Matrix, feature_dim: usize, shift: &Matrix, owner: &[usize], scale: f64) -> Matrix {
    let mut out = inputs.clone();
    for (r, &o) in owner.iter().enumerate() {
        for (v, s) in out.row_mut(r)[..feature_dim].iter_mut().zip(shift.row(o)) {
            *v += scale * s;
        }
    }
    out
}

/// Adversarial perturbations for a batch of samples; row `k` belongs to
/// `samples[k]` and has norm `epsilon`.
///
/// The snapshot distributions and the power iteration use eval mode.
pub fn cvat_perturbation(
    model: &MlpModel,
    data: &BanditDataset,
    samples: &[usize],
    config: &CstConfig,
    rng: &mut Prng,
) -> Result<Matrix> {
    let (cells, actions) = counterfactual_cells(data, samples);
    let clean = joint_inputs(&data.features, &cells, &actions, data.num_actions);
    let snapshot = model.predict(&clean)?;
    perturbation_from_snapshot(model, data.feature_dim(), samples.len(), &clean, &snapshot, config, rng)
}

fn owners(num_samples: usize, rows: usize) -> Vec<usize> {
    if num_samples == 0 {
        return Vec::new();
    }
    let per = rows / num_samples;
    (0..rows).map(|r| r / per.max(1)).collect()
}

fn perturbation_from_snapshot(
    model: &MlpModel,
    feature_dim: usize,
    num_samples: usize,
    clean: &Matrix,
    snapshot: &Matrix,
    config: &CstConfig,
    rng: &mut Prng,
) -> Result<Matrix> {
    let owner = owners(num_samples, clean.rows());
    let mut d = Matrix::zeros(num_samples, feature_dim);
    for r in 0..num_samples {
        let row = d.row_mut(r);
        row.iter_mut().for_each(|v| *v = rng.normal());
        if !normalize(row) {
            row[0] = 1.0;
        }
    }
    let mut eval_rng = Prng::new(0);
    let flat = power_iterate(&mut d, config.cvat_power_iters, |dirs| {
        let x = shifted(clean, feature_dim, dirs, &owner, config.cvat_xi);
        let (q, trace) = model.forward(&x, Mode::Eval, &mut eval_rng)?;
        let kl = kl_divergence(snapshot, &q)?;
        let (_, dx) = model.backward_with(&trace, &kl.grad, &[], true)?;
        let dx = dx.expect("input gradient requested");
        let mut g = Matrix::zeros(num_samples, feature_dim);
        for (r, &o) in owner.iter().enumerate() {
            for (acc, v) in g.row_mut(o).iter_mut().zip(&dx.row(r)[..feature_dim]) {
                *acc += v;
            }
        }
        Ok(g)
    })?;
    if flat > 0 {
        log::debug!("cvat: {flat} flat power-iteration updates kept their direction");
    }
    d.scale(config.cvat_epsilon);
    Ok(d)
}

/// CVAT loss at fixed perturbations: `(1/B) sum_i sum_{a != a_i}
/// KL(snapshot_ia || f(x_i + z_i, a))`, with gradient only through the live
/// model.
///
/// `clean` holds the counterfactual joint inputs grouped by sample (each of
/// the `B = z.rows()` samples owning the same number of consecutive rows)
/// and `snapshot` the detached distributions at those inputs.
pub fn cvat_loss_at(
    model: &MlpModel,
    clean: &Matrix,
    snapshot: &Matrix,
    z: &Matrix,
    mode: Mode,
    rng: &mut Prng,
) -> Result<LossAndGrad> {
    let b = z.rows();
    if b == 0 || clean.rows() == 0 {
        return Ok(LossAndGrad {
            value: 0.0,
            grads: Gradients::zeros_like(model),
            input_grads: Matrix::zeros(0, model.input_dim()),
        });
    }
    let per = clean.rows() / b;
    let owner = owners(b, clean.rows());
    let x = shifted(clean, z.cols(), z, &owner, 1.0);
    let (q, trace) = model.forward(&x, mode, rng)?;
    let mut kl = kl_divergence(snapshot, &q)?;
    kl.grad.scale(per as f64);
    let (grads, dx) = model.backward_with(&trace, &kl.grad, &[], true)?;
    Ok(LossAndGrad {
        value: kl.value * per as f64,
        grads,
        input_grads: dx.expect("input gradient requested"),
    })
}

/// CVAT loss on a batch of samples: snapshot, perturbation search, then the
/// divergence at the perturbed inputs.
pub fn cvat_loss(
    model: &MlpModel,
    data: &BanditDataset,
    samples: &[usize],
    config: &CstConfig,
    mode: Mode,
    rng: &mut Prng,
) -> Result<LossAndGrad> {
    if data.num_actions < 2 {
        return Ok(LossAndGrad {
            value: 0.0,
            grads: Gradients::zeros_like(model),
            input_grads: Matrix::zeros(0, model.input_dim()),
        });
    }
    let (cells, actions) = counterfactual_cells(data, samples);
    let clean = joint_inputs(&data.features, &cells, &actions, data.num_actions);
    let snapshot = model.predict(&clean)?;
    let z = perturbation_from_snapshot(model, data.feature_dim(), samples.len(), &clean, &snapshot, config, rng)?;
    cvat_loss_at(model, &clean, &snapshot, &z, mode, rng)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub outer: usize,
    pub epoch: usize,
    /// Mean minibatch `L_CST` over the epoch.
    pub cst_loss: f64,
    /// Mean minibatch `L_CVAT` (0 when disabled).
    pub cvat_loss: f64,
    pub total: f64,
}

/// `L_CST` at fixed parameters right before and after a re-imputation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImputationRecord {
    pub outer: usize,
    /// Epoch after which the imputation happened; `None` for the imputation
    /// opening an outer iteration.
    pub after_epoch: Option<usize>,
    pub objective_before: f64,
    pub objective_after: f64,
    pub changed: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub outer: usize,
    pub epoch: usize,
    pub step: usize,
    /// Minibatch `L_CST` at the parameters before the step.
    pub cst_loss: f64,
    pub cvat_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CstHistory {
    pub epochs: Vec<EpochRecord>,
    pub imputations: Vec<ImputationRecord>,
    pub steps: Vec<StepRecord>,
}

/// Per-outer-iteration hook: receives the iteration index (1-based), the
/// model after that iteration and the table it was last trained against.
pub trait CstObserver {
    fn after_iteration(&mut self, iteration: usize, model: &MlpModel, table: &PseudolabelTable) -> Result<()>;
}

impl CstObserver for () {
    fn after_iteration(&mut self, _: usize, _: &MlpModel, _: &PseudolabelTable) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CstOutcome {
    pub model: MlpModel,
    pub table: Option<PseudolabelTable>,
    pub history: CstHistory,
}

/// Runs CST from a warm-start model.
pub fn cst_train(backbone: &MlpModel, data: &BanditDataset, config: &CstConfig, rng: &mut Prng) -> Result<CstOutcome> {
    cst_train_observed(backbone, data, config, rng, &mut ())
}

pub fn cst_train_observed<O: CstObserver>(
    backbone: &MlpModel,
    data: &BanditDataset,
    config: &CstConfig,
    rng: &mut Prng,
    observer: &mut O,
) -> Result<CstOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("CST training data"));
    }
    let mut model = backbone.clone();
    let mut history = CstHistory::default();
    let mut table: Option<PseudolabelTable> = None;
    let mut opt = Optimizer::new(config.optimizer);
    let use_cvat = config.lambda_cvat > 0.0 && data.num_actions > 1;
    let mut step = 0;

    for outer in 0..config.outer_iterations {
        let current = match table.take() {
            None => impute_pseudolabels(&model, data)?,
            Some(mut t) => {
                let before = cst_objective(&model, data, &t)?;
                let changed = t.reimpute(&model, data)?;
                let after = cst_objective(&model, data, &t)?;
                history.imputations.push(ImputationRecord {
                    outer,
                    after_epoch: None,
                    objective_before: before,
                    objective_after: after,
                    changed,
                });
                t
            }
        };
        let mut current = current;

        for epoch in 0..config.inner_epochs {
            let batches = minibatches(data.len(), config.batch_size, rng);
            let (mut sum_cst, mut sum_cvat) = (0.0, 0.0);
            for batch in &batches {
                let mut lg = cst_loss(&model, data, &current, batch, Mode::Train, rng)?;
                let cst_value = lg.value;
                let mut cvat_value = 0.0;
                if use_cvat {
                    let cv = cvat_loss(&model, data, batch, config, Mode::Train, rng)?;
                    cvat_value = cv.value;
                    lg.grads.add_scaled(&cv.grads, config.lambda_cvat);
                }
                if !cst_value.is_finite() || !cvat_value.is_finite() || !lg.grads.is_finite() {
                    return Err(Error::Divergence { stage: "cst", step });
                }
                if config.record_steps {
                    history.steps.push(StepRecord {
                        outer,
                        epoch,
                        step,
                        cst_loss: cst_value,
                        cvat_loss: cvat_value,
                    });
                }
                opt.apply(&mut model, &lg.grads)?;
                step += 1;
                sum_cst += cst_value;
                sum_cvat += cvat_value;
            }
            let nb = batches.len() as f64;
            history.epochs.push(EpochRecord {
                outer,
                epoch,
                cst_loss: sum_cst / nb,
                cvat_loss: sum_cvat / nb,
                total: (sum_cst + config.lambda_cvat * sum_cvat) / nb,
            });

            let last_epoch = epoch + 1 == config.inner_epochs;
            if config.imputer == Imputer::Current && (epoch + 1) % config.reimpute_every == 0 && !last_epoch {
                let before = cst_objective(&model, data, &current)?;
                let changed = current.reimpute(&model, data)?;
                let after = cst_objective(&model, data, &current)?;
                history.imputations.push(ImputationRecord {
                    outer,
                    after_epoch: Some(epoch),
                    objective_before: before,
                    objective_after: after,
                    changed,
                });
            }
        }
        observer.after_iteration(outer + 1, &model, &current)?;
        table = Some(current);
    }
    Ok(CstOutcome { model, table, history })
}

/// Mean factual cross-entropy in eval mode.
pub fn factual_nll(model: &MlpModel, data: &BanditDataset) -> Result<f64> {
    let all: Vec<usize> = (0..data.len()).collect();
    let p = model.predict(&data.factual_inputs(&all))?;
    Ok(cross_entropy(&p, &data.factual_targets(&all), None)?.value)
}

/// Result of a lambda grid search.
#[derive(Clone, Debug)]
pub struct LambdaSelection {
    pub lambda: f64,
    /// `(lambda, validation factual NLL)` per grid point, in grid order.
    pub scores: Vec<(f64, f64)>,
    pub outcome: CstOutcome,
}

/// Trains one CST model per grid value from the same warm start and random
/// stream, scores each by factual NLL on `validation`, and keeps the best.
/// Ties go to the smaller lambda.
pub fn select_lambda(
    backbone: &MlpModel,
    train: &BanditDataset,
    validation: &BanditDataset,
    grid: &[f64],
    config: &CstConfig,
    rng: &mut Prng,
) -> Result<LambdaSelection> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("lambda grid is empty".into()));
    }
    let base = rng.fork();
    let mut best: Option<(f64, f64, CstOutcome)> = None;
    let mut scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let cfg = CstConfig {
            lambda_cvat: lambda,
            ..config.clone()
        };
        let outcome = cst_train(backbone, train, &cfg, &mut base.clone())?;
        let score = factual_nll(&outcome.model, validation)?;
        scores.push((lambda, score));
        let better = match &best {
            None => true,
            Some((bl, bs, _)) => score < *bs || (score == *bs && lambda < *bl),
        };
        if better {
            best = Some((lambda, score, outcome));
        }
    }
    let (lambda, _, outcome) = best.expect("grid is nonempty");
    Ok(LambdaSelection {
        lambda,
        scores,
        outcome,
    })
}
