//! Evaluation against full counterfactual tables.

use alloc::string::String;
use alloc::vec::Vec;

use crate::cst::argmax;
use crate::data::{all_action_inputs, GroundTruthTable};
use crate::error::{check_dim, Error, Result};
use crate::loss::PROB_FLOOR;
use crate::matrix::Matrix;
use crate::nn::MlpModel;

fn predict_cells(model: &MlpModel, features: &Matrix, truth: &GroundTruthTable) -> Result<Matrix> {
    check_dim("evaluation ground-truth rows", features.rows(), truth.num_samples())?;
    if features.rows() == 0 {
        return Err(Error::Empty("evaluation set"));
    }
    model.predict(&all_action_inputs(features, truth.num_actions()))
}

/// Mean negative log-likelihood of the realized label over all `N x |A|`
/// cells, eval mode.
pub fn full_nll(model: &MlpModel, features: &Matrix, truth: &GroundTruthTable) -> Result<f64> {
    let probs = predict_cells(model, features, truth)?;
    let total: f64 = probs
        .iter_rows()
        .zip(&truth.labels)
        .map(|(p, &k)| -libm::log(p[k].max(PROB_FLOOR)))
        .sum();
    Ok(total / probs.rows() as f64)
}

/// Fraction of cells where the predicted class differs from the truth.
pub fn hamming_loss(model: &MlpModel, features: &Matrix, truth: &GroundTruthTable) -> Result<f64> {
    let probs = predict_cells(model, features, truth)?;
    let wrong = probs
        .iter_rows()
        .zip(&truth.labels)
        .filter(|(p, &k)| argmax(p) != k)
        .count();
    Ok(wrong as f64 / probs.rows() as f64)
}

/// Fraction of samples whose predicted best action (highest `P(r = 1)`)
/// is among the truly best actions. Ties in the truth count as correct for
/// every tied action.
pub fn best_action_accuracy(model: &MlpModel, features: &Matrix, truth: &GroundTruthTable) -> Result<f64> {
    let probs = predict_cells(model, features, truth)?;
    if probs.cols() < 2 {
        return Err(Error::InvalidConfig(
            "best-action accuracy needs a positive class".into(),
        ));
    }
    let a = truth.num_actions();
    let mut hits = 0;
    for i in 0..features.rows() {
        let predicted: Vec<f64> = (0..a).map(|act| probs.get(i * a + act, 1)).collect();
        let choice = argmax(&predicted);
        let row = truth.probs.row(i);
        let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if row[choice] == best {
            hits += 1;
        }
    }
    Ok(hits as f64 / features.rows() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunMetrics {
    pub nll: f64,
    pub hamming: f64,
    pub best_action_accuracy: f64,
}

pub fn evaluate(model: &MlpModel, features: &Matrix, truth: &GroundTruthTable) -> Result<RunMetrics> {
    Ok(RunMetrics {
        nll: full_nll(model, features, truth)?,
        hamming: hamming_loss(model, features, truth)?,
        best_action_accuracy: best_action_accuracy(model, features, truth)?,
    })
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`; zero
/// for a single value).
pub fn mean_stderr(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("aggregation input"));
    }
    let n = values.len() as f64;
    // shifting by the first value keeps identical runs exact
    let shift = values[0];
    let offset = values.iter().map(|v| v - shift).sum::<f64>() / n;
    let mean = shift + offset;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values
        .iter()
        .map(|v| (v - shift - offset) * (v - shift - offset))
        .sum::<f64>()
        / (n - 1.0);
    Ok((mean, libm::sqrt(var / n)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub dataset: String,
    pub backbone: String,
    pub method: String,
    pub config_hash: String,
    pub per_seed: Vec<(u64, RunMetrics)>,
    pub nll: Summary,
    pub hamming: Summary,
    pub best_action_accuracy: Summary,
}

impl MetricsReport {
    /// `(metric name, summary)` in output order.
    pub fn metrics(&self) -> [(&'static str, Summary); 3] {
        [
            ("nll", self.nll),
            ("hamming", self.hamming),
            ("best_action_accuracy", self.best_action_accuracy),
        ]
    }
}

pub fn aggregate(
    dataset: &str,
    backbone: &str,
    method: &str,
    config_hash: &str,
    per_seed: Vec<(u64, RunMetrics)>,
) -> Result<MetricsReport> {
    let summary = |f: fn(&RunMetrics) -> f64| -> Result<Summary> {
        let v: Vec<f64> = per_seed.iter().map(|(_, m)| f(m)).collect();
        let (mean, stderr) = mean_stderr(&v)?;
        Ok(Summary { mean, stderr })
    };
    Ok(MetricsReport {
        dataset: dataset.into(),
        backbone: backbone.into(),
        method: method.into(),
        config_hash: config_hash.into(),
        nll: summary(|m| m.nll)?,
        hamming: summary(|m| m.hamming)?,
        best_action_accuracy: summary(|m| m.best_action_accuracy)?,
        per_seed,
    })
}
