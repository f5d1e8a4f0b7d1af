//! Synthetic pricing simulators, logging policies and the two-moons toy.
//!
//! The pricing data has 50 features `x ~ U(0,1)^50` and five prices
//! `p = 1..5` (action `a` is price `a + 1`). A purchase happens with
//! probability `sigmoid(logit(x, p))`, where the logit depends on the demand
//! family:
//!
//! | kind | logit |
//! |------|-------|
//! | D1   | `h(x) - 2 x0 p` |
//! | D2   | `5 (x0 - 0.5) - 0.4 p` |
//! | D3   | `h(x) - stepwise1(x0) p` |
//! | D4   | `h(x) - stepwise2(x0, x1) p` |
//! | D5   | `h(x) - (x0 + x1) p` |
//!
//! with `h(x) = (sum_i a_i) exp(-sum_j b_j |x_j - c_j|)`, clipped to
//! `[-LOGIT_CAP, LOGIT_CAP]`.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::data::{BanditDataset, GroundTruthTable};
use crate::error::{check_dim, Result};
use crate::matrix::Matrix;
use crate::rng::Prng;

pub const FEATURE_DIM: usize = 50;
pub const NUM_PRICES: usize = 5;
pub const LOGIT_CAP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DemandKind {
    D1,
    D2,
    D3,
    D4,
    D5,
}

impl DemandKind {
    pub const ALL: [DemandKind; 5] = [
        DemandKind::D1,
        DemandKind::D2,
        DemandKind::D3,
        DemandKind::D4,
        DemandKind::D5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DemandKind::D1 => "D1",
            DemandKind::D2 => "D2",
            DemandKind::D3 => "D3",
            DemandKind::D4 => "D4",
            DemandKind::D5 => "D5",
        }
    }

    pub fn parse(s: &str) -> Option<DemandKind> {
        DemandKind::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(s))
    }
}

/// One simulator instance: the demand family plus its frozen coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct DemandSpec {
    pub kind: DemandKind,
    pub coeff_a: Vec<f64>,
    pub coeff_b: Vec<f64>,
    pub coeff_c: Vec<f64>,
}

impl DemandSpec {
    pub fn feature_dim(&self) -> usize {
        self.coeff_a.len()
    }

    pub fn num_prices(&self) -> usize {
        NUM_PRICES
    }
}

pub fn make_demand_spec(kind: DemandKind, rng: &mut Prng) -> DemandSpec {
    let mut draw = || (0..FEATURE_DIM).map(|_| rng.uniform()).collect::<Vec<f64>>();
    let coeff_a = draw();
    let coeff_b = draw();
    let coeff_c = draw();
    DemandSpec {
        kind,
        coeff_a,
        coeff_b,
        coeff_c,
    }
}

/// Feature-dependent baseline demand, before clipping.
pub fn h_value(x: &[f64], spec: &DemandSpec) -> f64 {
    let scale: f64 = spec.coeff_a.iter().sum();
    let dist: f64 = x
        .iter()
        .zip(&spec.coeff_b)
        .zip(&spec.coeff_c)
        .map(|((xj, bj), cj)| bj * (xj - cj).abs())
        .sum();
    scale * libm::exp(-dist)
}

pub fn stepwise1(x: f64) -> f64 {
    if x <= 0.1 {
        0.7
    } else if x <= 0.3 {
        0.5
    } else if x <= 0.6 {
        0.3
    } else {
        0.1
    }
}

pub fn stepwise2(x: f64, y: f64) -> f64 {
    let high = y > 0.5;
    if x <= 0.1 {
        if high {
            0.65
        } else {
            0.45
        }
    } else if x <= 0.3 {
        if high {
            0.55
        } else {
            0.35
        }
    } else if x <= 0.6 {
        if high {
            0.45
        } else {
            0.25
        }
    } else if high {
        0.35
    } else {
        0.15
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// Purchase probability at price `price` (normally one of `1..=5`).
pub fn demand_prob(spec: &DemandSpec, x: &[f64], price: f64) -> f64 {
    let h = || h_value(x, spec).clamp(-LOGIT_CAP, LOGIT_CAP);
    let logit = match spec.kind {
        DemandKind::D1 => h() - 2.0 * x[0] * price,
        DemandKind::D2 => 5.0 * (x[0] - 0.5) - 0.4 * price,
        DemandKind::D3 => h() - stepwise1(x[0]) * price,
        DemandKind::D4 => h() - stepwise2(x[0], x[1]) * price,
        DemandKind::D5 => h() - (x[0] + x[1]) * price,
    };
    sigmoid(logit)
}

/// How the logged actions were chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LoggingPolicy {
    /// `pi(i|x) = x_i / sum_j x_j` over the first `num_actions` coordinates.
    /// With `wide_denominator` the recorded propensities divide by the sum
    /// of the first 10 coordinates instead (sampling still uses the
    /// normalized distribution).
    Proportional {
        wide_denominator: bool,
    },
    /// `pi(i|x) proportional to exp(o * x_i)` over the first `num_actions`
    /// coordinates.
    Softmax {
        overlap: f64,
    },
    Uniform,
}

/// `pi(.|x)` for the proportional policy. Falls back to uniform when the
/// coordinates sum to zero.
pub fn logging_policy_proportional(x: &[f64], num_actions: usize) -> Vec<f64> {
    let coords = &x[..num_actions];
    let total: f64 = coords.iter().sum();
    if total <= 0.0 {
        log::warn!("proportional logging policy: zero denominator, using uniform");
        return vec![1.0 / num_actions as f64; num_actions];
    }
    coords.iter().map(|v| v / total).collect()
}

pub fn logging_policy_softmax(x: &[f64], num_actions: usize, overlap: f64) -> Vec<f64> {
    let coords = &x[..num_actions];
    let max = coords.iter().map(|v| overlap * v).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = coords.iter().map(|v| libm::exp(overlap * v - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl LoggingPolicy {
    /// Sampling distribution over actions.
    pub fn probs(&self, x: &[f64], num_actions: usize) -> Vec<f64> {
        match *self {
            LoggingPolicy::Proportional { .. } => logging_policy_proportional(x, num_actions),
            LoggingPolicy::Softmax { overlap } => logging_policy_softmax(x, num_actions, overlap),
            LoggingPolicy::Uniform => vec![1.0 / num_actions as f64; num_actions],
        }
    }

    /// Propensity recorded for a chosen action.
    fn recorded_propensity(&self, x: &[f64], probs: &[f64], action: usize) -> f64 {
        match *self {
            LoggingPolicy::Proportional { wide_denominator: true } if x.len() >= 10 => {
                let wide: f64 = x[..10].iter().sum();
                if wide > 0.0 {
                    x[action] / wide
                } else {
                    probs[action]
                }
            }
            _ => probs[action],
        }
    }
}

/// Draws `n` logged samples with a frozen ground-truth table.
pub fn sample_bandit_dataset(
    spec: &DemandSpec,
    n: usize,
    policy: LoggingPolicy,
    rng: &mut Prng,
) -> Result<BanditDataset> {
    let d = spec.feature_dim();
    let a = spec.num_prices();
    let mut features = Matrix::zeros(n, d);
    for v in features.as_mut_slice() {
        *v = rng.uniform();
    }
    let mut probs = Matrix::zeros(n, a);
    let mut labels = Vec::with_capacity(n * a);
    for i in 0..n {
        for act in 0..a {
            let p = demand_prob(spec, features.row(i), (act + 1) as f64);
            probs.set(i, act, p);
            labels.push(usize::from(rng.bernoulli(p)));
        }
    }
    let mut actions = Vec::with_capacity(n);
    let mut propensities = Vec::with_capacity(n);
    let mut outcomes = Vec::with_capacity(n);
    for i in 0..n {
        let x = features.row(i);
        let pi = policy.probs(x, a);
        let act = rng.categorical(&pi);
        actions.push(act);
        propensities.push(policy.recorded_propensity(x, &pi, act));
        outcomes.push(labels[i * a + act]);
    }
    let gt = GroundTruthTable::new(probs, labels)?;
    BanditDataset::new(features, actions, outcomes, a, 2, Some(gt), Some(propensities))
}

/// Full-information evaluation sample: features plus ground truth, with
/// actions drawn uniformly (they play no role in evaluation).
pub fn sample_evaluation_set(spec: &DemandSpec, n: usize, rng: &mut Prng) -> Result<BanditDataset> {
    sample_bandit_dataset(spec, n, LoggingPolicy::Uniform, rng)
}

/// Customer type in the toy scenario.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MoonType {
    /// Buys under action A0 only.
    P0,
    /// Buys under action A1 only.
    P1,
}

/// Two interleaved half circles of radius 1: `P0` on the upper arc centred
/// at the origin, `P1` on the lower arc centred at `(1, 0.5)`, plus isotropic
/// Gaussian noise of standard deviation `noise`.
pub fn two_moons(n: usize, noise: f64, rng: &mut Prng) -> (Matrix, Vec<MoonType>) {
    let mut x = Matrix::zeros(n, 2);
    let mut types = Vec::with_capacity(n);
    let n0 = n.div_ceil(2);
    for i in 0..n {
        let t = rng.uniform() * PI;
        let (px, py, ty) = if i < n0 {
            (libm::cos(t), libm::sin(t), MoonType::P0)
        } else {
            (1.0 - libm::cos(t), 0.5 - libm::sin(t), MoonType::P1)
        };
        let (nx, ny) = if noise > 0.0 {
            (noise * rng.normal(), noise * rng.normal())
        } else {
            (0.0, 0.0)
        };
        x.set(i, 0, px + nx);
        x.set(i, 1, py + ny);
        types.push(ty);
    }
    (x, types)
}

/// Deterministic outcome table of the toy: P0 buys only under A0, P1 only
/// under A1.
pub fn toy_ground_truth(types: &[MoonType]) -> Result<GroundTruthTable> {
    let n = types.len();
    let mut labels = Vec::with_capacity(2 * n);
    for t in types {
        match t {
            MoonType::P0 => labels.extend([1, 0]),
            MoonType::P1 => labels.extend([0, 1]),
        }
    }
    let probs = Matrix::from_vec(n, 2, labels.iter().map(|&l| l as f64).collect())?;
    GroundTruthTable::new(probs, labels)
}

/// Logs the toy with a policy that assigns A1 with probability
/// `exp(-(x0 - min x0))`, favouring small `x0`.
pub fn toy_bandit(features: &Matrix, types: &[MoonType], rng: &mut Prng) -> Result<BanditDataset> {
    check_dim("toy_bandit types", features.rows(), types.len())?;
    let n = features.rows();
    let min_x0 = (0..n).map(|i| features.get(i, 0)).fold(f64::INFINITY, f64::min);
    let gt = toy_ground_truth(types)?;
    let mut actions = Vec::with_capacity(n);
    let mut outcomes = Vec::with_capacity(n);
    let mut propensities = Vec::with_capacity(n);
    for i in 0..n {
        let p1 = libm::exp(-(features.get(i, 0) - min_x0));
        let act = usize::from(rng.bernoulli(p1));
        actions.push(act);
        propensities.push(if act == 1 { p1 } else { 1.0 - p1 });
        outcomes.push(gt.label(i, act));
    }
    BanditDataset::new(features.clone(), actions, outcomes, 2, 2, Some(gt), Some(propensities))
}
