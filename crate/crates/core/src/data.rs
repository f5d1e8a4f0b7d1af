//! Logged bandit feedback and its ground-truth counterfactual table.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{check_dim, Error, Result};
use crate::matrix::Matrix;
use crate::rng::Prng;

/// Full counterfactual outcome table for every (sample, action) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthTable {
    /// `P(r = 1 | x_i, a)`, `N x |A|`. For deterministic tables this equals
    /// the labels.
    pub probs: Matrix,
    /// Realized outcome class per cell, row-major `N x |A|`.
    pub labels: Vec<usize>,
}

impl GroundTruthTable {
    pub fn new(probs: Matrix, labels: Vec<usize>) -> Result<Self> {
        check_dim("GroundTruthTable labels", probs.rows() * probs.cols(), labels.len())?;
        if probs.as_slice().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidConfig(
                "ground-truth probabilities must lie in [0, 1]".into(),
            ));
        }
        Ok(GroundTruthTable { probs, labels })
    }

    pub fn num_samples(&self) -> usize {
        self.probs.rows()
    }

    pub fn num_actions(&self) -> usize {
        self.probs.cols()
    }

    #[inline]
    pub fn label(&self, sample: usize, action: usize) -> usize {
        self.labels[sample * self.probs.cols() + action]
    }

    pub fn select_rows(&self, indices: &[usize]) -> GroundTruthTable {
        let a = self.num_actions();
        let labels = indices
            .iter()
            .flat_map(|&i| self.labels[i * a..(i + 1) * a].iter().copied())
            .collect();
        GroundTruthTable {
            probs: self.probs.select_rows(indices),
            labels,
        }
    }
}

/// Logged tuples `(x_i, a_i, r_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BanditDataset {
    pub features: Matrix,
    pub actions: Vec<usize>,
    pub outcomes: Vec<usize>,
    pub num_actions: usize,
    pub num_classes: usize,
    pub ground_truth: Option<GroundTruthTable>,
    /// Logging probability of the chosen action, when known.
    pub propensities: Option<Vec<f64>>,
}

impl BanditDataset {
    /// Validating constructor.
    pub fn new(
        features: Matrix,
        actions: Vec<usize>,
        outcomes: Vec<usize>,
        num_actions: usize,
        num_classes: usize,
        ground_truth: Option<GroundTruthTable>,
        propensities: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = features.rows();
        check_dim("BanditDataset actions", n, actions.len())?;
        check_dim("BanditDataset outcomes", n, outcomes.len())?;
        if num_actions == 0 || num_classes < 2 {
            return Err(Error::InvalidConfig(
                "need at least one action and two outcome classes".into(),
            ));
        }
        if let Some(i) = actions.iter().position(|&a| a >= num_actions) {
            return Err(Error::InvalidConfig(format!("sample {i}: action index out of range")));
        }
        if let Some(i) = outcomes.iter().position(|&r| r >= num_classes) {
            return Err(Error::InvalidConfig(format!("sample {i}: outcome class out of range")));
        }
        if let Some(gt) = &ground_truth {
            check_dim("BanditDataset ground truth rows", n, gt.num_samples())?;
            check_dim("BanditDataset ground truth actions", num_actions, gt.num_actions())?;
            if let Some(i) = (0..n).find(|&i| gt.label(i, actions[i]) != outcomes[i]) {
                return Err(Error::InvalidConfig(format!(
                    "sample {i}: factual outcome disagrees with the ground-truth table"
                )));
            }
            if gt.labels.iter().any(|&l| l >= num_classes) {
                return Err(Error::InvalidConfig("ground-truth label out of range".into()));
            }
        }
        if let Some(p) = &propensities {
            check_dim("BanditDataset propensities", n, p.len())?;
        }
        Ok(BanditDataset {
            features,
            actions,
            outcomes,
            num_actions,
            num_classes,
            ground_truth,
            propensities,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Width of the joint `[x, onehot(a)]` model input.
    pub fn input_dim(&self) -> usize {
        self.feature_dim() + self.num_actions
    }

    /// Joint inputs for the logged actions of the given samples.
    pub fn factual_inputs(&self, samples: &[usize]) -> Matrix {
        let actions: Vec<usize> = samples.iter().map(|&i| self.actions[i]).collect();
        joint_inputs(&self.features, samples, &actions, self.num_actions)
    }

    /// One-hot factual targets for the given samples.
    pub fn factual_targets(&self, samples: &[usize]) -> Matrix {
        let mut t = Matrix::zeros(samples.len(), self.num_classes);
        for (r, &i) in samples.iter().enumerate() {
            t.set(r, self.outcomes[i], 1.0);
        }
        t
    }

    pub fn subset(&self, indices: &[usize]) -> BanditDataset {
        BanditDataset {
            features: self.features.select_rows(indices),
            actions: indices.iter().map(|&i| self.actions[i]).collect(),
            outcomes: indices.iter().map(|&i| self.outcomes[i]).collect(),
            num_actions: self.num_actions,
            num_classes: self.num_classes,
            ground_truth: self.ground_truth.as_ref().map(|g| g.select_rows(indices)),
            propensities: self
                .propensities
                .as_ref()
                .map(|p| indices.iter().map(|&i| p[i]).collect()),
        }
    }

    /// Random split into `(rest, held_out)` with `round(fraction * N)`
    /// samples held out.
    pub fn split(&self, fraction: f64, rng: &mut Prng) -> (BanditDataset, BanditDataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut idx);
        let k = libm::round(fraction * self.len() as f64) as usize;
        let (held, rest) = idx.split_at(k.min(self.len()));
        let mut held = held.to_vec();
        let mut rest = rest.to_vec();
        held.sort_unstable();
        rest.sort_unstable();
        (self.subset(&rest), self.subset(&held))
    }
}

/// Rows `[x_i, onehot(a)]` for paired sample indices and actions.
pub fn joint_inputs(features: &Matrix, samples: &[usize], actions: &[usize], num_actions: usize) -> Matrix {
    let d = features.cols();
    let mut out = Matrix::zeros(samples.len(), d + num_actions);
    for (r, (&i, &a)) in samples.iter().zip(actions).enumerate() {
        let row = out.row_mut(r);
        row[..d].copy_from_slice(features.row(i));
        row[d + a] = 1.0;
    }
    out
}

/// Joint inputs for every (sample, action) cell, sample-major: row
/// `i * |A| + a`.
pub fn all_action_inputs(features: &Matrix, num_actions: usize) -> Matrix {
    let n = features.rows();
    let samples: Vec<usize> = (0..n).flat_map(|i| core::iter::repeat_n(i, num_actions)).collect();
    let actions: Vec<usize> = (0..n).flat_map(|_| 0..num_actions).collect();
    joint_inputs(features, &samples, &actions, num_actions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn tiny() -> BanditDataset {
        let features = Matrix::from_rows(&[[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]]).unwrap();
        let gt = GroundTruthTable::new(
            Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap(),
            vec![1, 0, 0, 1, 1, 1],
        )
        .unwrap();
        BanditDataset::new(features, vec![0, 1, 0], vec![1, 1, 1], 2, 2, Some(gt), None).unwrap()
    }

    #[test]
    fn joint_inputs_append_one_hot_action() {
        let d = tiny();
        let x = d.factual_inputs(&[1, 2]);
        assert_eq!(x.row(0), &[0.3, 0.4, 0.0, 1.0]);
        assert_eq!(x.row(1), &[0.5, 0.6, 1.0, 0.0]);
        let all = all_action_inputs(&d.features, 2);
        assert_eq!(all.rows(), 6);
        assert_eq!(all.row(3), &[0.3, 0.4, 0.0, 1.0]);
    }

    #[test]
    fn inconsistent_factual_outcome_is_rejected() {
        let mut d = tiny();
        d.outcomes[0] = 0;
        let r = BanditDataset::new(d.features, d.actions, d.outcomes, 2, 2, d.ground_truth, None);
        assert!(r.is_err());
    }

    #[test]
    fn split_partitions_samples() {
        let d = tiny();
        let mut rng = Prng::new(4);
        let (rest, held) = d.split(0.34, &mut rng);
        assert_eq!(rest.len() + held.len(), 3);
        assert_eq!(held.len(), 1);
    }
}
