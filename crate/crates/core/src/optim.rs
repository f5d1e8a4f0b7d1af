//! First-order optimizers over flat parameter groups.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_dim, Result};
use crate::nn::{Gradients, MlpModel};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments and step counter. Moments are shaped lazily on the first
/// step to match the parameter groups they are used with.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every group in `params`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        check_dim("adam groups", params.len(), grads.len())?;
        for (p, g) in params.iter().zip(grads) {
            check_dim("adam group size", p.len(), g.len())?;
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        } else {
            check_dim("adam state groups", self.m.len(), grads.len())?;
            for (m, g) in self.m.iter().zip(grads) {
                check_dim("adam state group size", m.len(), g.len())?;
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - libm::pow(beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.step as f64);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= learning_rate * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam(AdamConfig),
    /// Plain gradient descent; used where monotone descent must be observable.
    Sgd {
        learning_rate: f64,
    },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam(AdamConfig::default())
    }
}

impl OptimizerKind {
    pub fn learning_rate(&self) -> f64 {
        match self {
            OptimizerKind::Adam(c) => c.learning_rate,
            OptimizerKind::Sgd { learning_rate } => *learning_rate,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam(AdamState),
    Sgd { learning_rate: f64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Adam(c) => Optimizer::Adam(AdamState::new(c)),
            OptimizerKind::Sgd { learning_rate } => Optimizer::Sgd { learning_rate },
        }
    }

    pub fn apply(&mut self, model: &mut MlpModel, grads: &Gradients) -> Result<()> {
        let g = grads.slices();
        let mut p = model.param_slices_mut();
        match self {
            Optimizer::Adam(state) => state.step(&mut p, &g),
            Optimizer::Sgd { learning_rate } => {
                check_dim("sgd groups", p.len(), g.len())?;
                for (pi, gi) in p.iter_mut().zip(&g) {
                    check_dim("sgd group size", pi.len(), gi.len())?;
                    for (x, d) in pi.iter_mut().zip(gi.iter()) {
                        *x -= *learning_rate * d;
                    }
                }
                Ok(())
            }
        }
    }
}
