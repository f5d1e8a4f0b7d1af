//! Two-moons demonstration: a DM backbone trained on biased logs, then CST
//! with CVAT, with decision-boundary grids and pseudolabels recorded per
//! iteration.

use std::path::Path;

use cst_core::backbone::{train_dm, Architecture, BackboneConfig};
use cst_core::cst::{cst_train_observed, CstConfig, CstObserver, PseudolabelTable};
use cst_core::data::{all_action_inputs, BanditDataset, GroundTruthTable};
use cst_core::optim::{AdamConfig, OptimizerKind};
use cst_core::synth::{toy_bandit, toy_ground_truth, two_moons};
use cst_core::train::TrainConfig;
use cst_core::{Matrix, MlpModel, Prng};

use crate::config::toy_architecture;
use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
    pub arch: Architecture,
    pub backbone_train: TrainConfig,
    pub cst: CstConfig,
    /// Grid points per axis.
    pub grid_size: usize,
    /// Padding around the data's bounding box.
    pub grid_margin: f64,
    /// Iterations whose decision boundary is recorded (0 is the backbone).
    pub snapshots: Vec<usize>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            n_train: 50,
            n_test: 500,
            noise: 0.1,
            arch: toy_architecture(),
            backbone_train: TrainConfig {
                epochs: 200,
                batch_size: 16,
                optimizer: OptimizerKind::Adam(AdamConfig {
                    learning_rate: 1e-2,
                    ..AdamConfig::default()
                }),
            },
            cst: CstConfig {
                outer_iterations: 10,
                lambda_cvat: 1.0,
                cvat_epsilon: 0.3,
                inner_epochs: 20,
                batch_size: 16,
                optimizer: OptimizerKind::Adam(AdamConfig {
                    learning_rate: 1e-2,
                    ..AdamConfig::default()
                }),
                ..CstConfig::default()
            },
            grid_size: 100,
            grid_margin: 0.5,
            snapshots: vec![0, 1, 10],
        }
    }
}

/// Per-action accuracy over every test cell.
pub fn per_action_accuracy(model: &MlpModel, features: &Matrix, truth: &GroundTruthTable) -> Result<Vec<f64>> {
    let a = truth.num_actions();
    let probs = model.predict(&all_action_inputs(features, a))?;
    let mut hits = vec![0usize; a];
    for i in 0..features.rows() {
        for (act, h) in hits.iter_mut().enumerate() {
            let row = probs.row(i * a + act);
            if cst_core::cst::argmax(row) == truth.label(i, act) {
                *h += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / features.rows() as f64).collect())
}

/// `P(buy)` at one grid point for one action after a given iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint {
    pub iteration: usize,
    pub x0: f64,
    pub x1: f64,
    pub action: usize,
    pub prob_buy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PseudolabelRow {
    pub iteration: usize,
    pub sample: usize,
    pub action: usize,
    pub label: usize,
    pub factual: bool,
}

#[derive(Clone, Debug)]
pub struct ToyResult {
    pub seed: u64,
    pub train: BanditDataset,
    pub backbone_accuracy: Vec<f64>,
    pub cst_accuracy: Vec<f64>,
    pub grid: Vec<GridPoint>,
    pub pseudolabels: Vec<PseudolabelRow>,
}

fn grid_axes(x: &Matrix, size: usize, margin: f64) -> (Vec<f64>, Vec<f64>) {
    let axis = |c: usize| {
        let lo = (0..x.rows()).map(|i| x.get(i, c)).fold(f64::INFINITY, f64::min) - margin;
        let hi = (0..x.rows()).map(|i| x.get(i, c)).fold(f64::NEG_INFINITY, f64::max) + margin;
        let step = if size > 1 { (hi - lo) / (size - 1) as f64 } else { 0.0 };
        (0..size).map(|k| lo + step * k as f64).collect::<Vec<f64>>()
    };
    (axis(0), axis(1))
}

fn grid_points(model: &MlpModel, iteration: usize, axes: &(Vec<f64>, Vec<f64>)) -> Result<Vec<GridPoint>> {
    let mut coords = Vec::with_capacity(axes.0.len() * axes.1.len() * 2);
    for &y in &axes.1 {
        for &x in &axes.0 {
            coords.extend([x, y]);
        }
    }
    let pts = Matrix::from_vec(coords.len() / 2, 2, coords)?;
    let probs = model.predict(&all_action_inputs(&pts, 2))?;
    let mut out = Vec::with_capacity(pts.rows() * 2);
    for i in 0..pts.rows() {
        for action in 0..2 {
            out.push(GridPoint {
                iteration,
                x0: pts.get(i, 0),
                x1: pts.get(i, 1),
                action,
                prob_buy: probs.get(i * 2 + action, 1),
            });
        }
    }
    Ok(out)
}

struct Recorder<'a> {
    snapshots: &'a [usize],
    axes: (Vec<f64>, Vec<f64>),
    grid: Vec<GridPoint>,
    pseudolabels: Vec<PseudolabelRow>,
}

impl CstObserver for Recorder<'_> {
    fn after_iteration(
        &mut self,
        iteration: usize,
        model: &MlpModel,
        table: &PseudolabelTable,
    ) -> cst_core::Result<()> {
        if self.snapshots.contains(&iteration) {
            let pts = grid_points(model, iteration, &self.axes).map_err(|e| match e {
                HarnessError::Core(c) => c,
                other => cst_core::Error::InvalidConfig(other.to_string()),
            })?;
            self.grid.extend(pts);
        }
        for sample in 0..table.num_samples() {
            for action in 0..table.num_actions() {
                self.pseudolabels.push(PseudolabelRow {
                    iteration,
                    sample,
                    action,
                    label: table.label(sample, action),
                    factual: table.is_factual(sample, action),
                });
            }
        }
        Ok(())
    }
}

/// Runs the demo for one seed. Stream 0 draws the data, stream 1 trains.
pub fn run_toy(config: &ToyConfig, seed: u64) -> Result<ToyResult> {
    let mut rng = Prng::substream(seed, 0);
    let (x, types) = two_moons(config.n_train, config.noise, &mut rng);
    let train = toy_bandit(&x, &types, &mut rng)?;
    let (tx, ttypes) = two_moons(config.n_test, config.noise, &mut rng);
    let truth = toy_ground_truth(&ttypes)?;

    let mut rng = Prng::substream(seed, 1);
    let bb_cfg = BackboneConfig {
        arch: config.arch.clone(),
        train: config.backbone_train,
        ..BackboneConfig::default()
    };
    let backbone = train_dm(&train, &bb_cfg, &mut rng)?.model;
    let backbone_accuracy = per_action_accuracy(&backbone, &tx, &truth)?;

    let mut recorder = Recorder {
        snapshots: &config.snapshots,
        axes: grid_axes(&x, config.grid_size, config.grid_margin),
        grid: Vec::new(),
        pseudolabels: Vec::new(),
    };
    if config.snapshots.contains(&0) {
        recorder.grid = grid_points(&backbone, 0, &recorder.axes)?;
    }
    let outcome = cst_train_observed(&backbone, &train, &config.cst, &mut rng, &mut recorder)?;
    let cst_accuracy = per_action_accuracy(&outcome.model, &tx, &truth)?;
    Ok(ToyResult {
        seed,
        train,
        backbone_accuracy,
        cst_accuracy,
        grid: recorder.grid,
        pseudolabels: recorder.pseudolabels,
    })
}

/// Writes `toy_grid.csv`, `toy_pseudolabels.csv`, `toy_train.csv` and
/// `toy_accuracy.csv` for the given runs.
pub fn write_toy_outputs(dir: &Path, results: &[ToyResult]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    let open = |name: &str| {
        let path = dir.join(name);
        csv::Writer::from_path(&path)
            .map(|w| (w, path.clone()))
            .map_err(HarnessError::csv(&path))
    };

    let (mut w, path) = open("toy_grid.csv")?;
    w.write_record(["seed", "iteration", "x0", "x1", "action", "prob_buy"])
        .map_err(HarnessError::csv(&path))?;
    for r in results {
        for g in &r.grid {
            w.write_record([
                r.seed.to_string(),
                g.iteration.to_string(),
                g.x0.to_string(),
                g.x1.to_string(),
                g.action.to_string(),
                g.prob_buy.to_string(),
            ])
            .map_err(HarnessError::csv(&path))?;
        }
    }
    w.flush().map_err(HarnessError::io(&path))?;

    let (mut w, path) = open("toy_pseudolabels.csv")?;
    w.write_record(["seed", "iteration", "sample", "x0", "x1", "action", "label", "factual"])
        .map_err(HarnessError::csv(&path))?;
    for r in results {
        for p in &r.pseudolabels {
            w.write_record([
                r.seed.to_string(),
                p.iteration.to_string(),
                p.sample.to_string(),
                r.train.features.get(p.sample, 0).to_string(),
                r.train.features.get(p.sample, 1).to_string(),
                p.action.to_string(),
                p.label.to_string(),
                p.factual.to_string(),
            ])
            .map_err(HarnessError::csv(&path))?;
        }
    }
    w.flush().map_err(HarnessError::io(&path))?;

    let (mut w, path) = open("toy_train.csv")?;
    w.write_record(["seed", "sample", "x0", "x1", "action", "outcome"])
        .map_err(HarnessError::csv(&path))?;
    for r in results {
        for i in 0..r.train.len() {
            w.write_record([
                r.seed.to_string(),
                i.to_string(),
                r.train.features.get(i, 0).to_string(),
                r.train.features.get(i, 1).to_string(),
                r.train.actions[i].to_string(),
                r.train.outcomes[i].to_string(),
            ])
            .map_err(HarnessError::csv(&path))?;
        }
    }
    w.flush().map_err(HarnessError::io(&path))?;

    let (mut w, path) = open("toy_accuracy.csv")?;
    w.write_record(["seed", "model", "action", "accuracy"])
        .map_err(HarnessError::csv(&path))?;
    for r in results {
        for (name, acc) in [("DM", &r.backbone_accuracy), ("PL+CVAT", &r.cst_accuracy)] {
            for (a, v) in acc.iter().enumerate() {
                w.write_record([r.seed.to_string(), name.to_string(), a.to_string(), v.to_string()])
                    .map_err(HarnessError::csv(&path))?;
            }
        }
    }
    w.flush().map_err(HarnessError::io(&path))
}
