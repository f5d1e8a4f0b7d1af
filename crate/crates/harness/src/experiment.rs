//! Sweep runner: datasets x seeds x backbones x methods, with CSV output.
//!
//! Random streams per seed: stream 0 generates (or converts) the data,
//! stream 1 draws the validation split and stream `2 + k` trains backbone
//! kind `k`. PL and PL+CVAT continue from forks of the backbone stream, so
//! enabling or disabling a method never changes the others' results.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cst_core::backbone::{train_backbone, BackboneKind};
use cst_core::cst::{cst_train, select_lambda, CstConfig, CstHistory};
use cst_core::data::{BanditDataset, GroundTruthTable};
use cst_core::eval::{aggregate, evaluate, MetricsReport, RunMetrics};
use cst_core::ingest::{
    convert_to_bandit, fit_logging_policy, parse_libsvm_multilabel_with, LoggingPolicyConfig, MultiLabelDataset,
    ParseOptions,
};
use cst_core::synth::{
    make_demand_spec, sample_bandit_dataset, sample_evaluation_set, toy_bandit, toy_ground_truth, two_moons,
};
use cst_core::{Matrix, MlpModel, Prng};

use crate::config::{DataSource, ExperimentConfig, LambdaChoice, Method};
use crate::error::{HarnessError, Result};

/// Environment variable naming the directory relative outputs go under.
pub const OUTPUT_ROOT_ENV: &str = "CST_OUTPUT_ROOT";

/// Training and evaluation data for one (dataset, seed).
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub name: String,
    pub train: BanditDataset,
    pub validation: Option<BanditDataset>,
    pub test_features: Matrix,
    pub test_truth: GroundTruthTable,
}

fn read_multilabel(path: &Path, opts: ParseOptions) -> Result<MultiLabelDataset> {
    let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
    parse_libsvm_multilabel_with(&text, opts).map_err(|e| match e {
        cst_core::Error::Parse { line, message } => HarnessError::Format {
            path: path.into(),
            line,
            message,
        },
        other => other.into(),
    })
}

/// Loads a train/test pair of multi-label files, padding both to the
/// larger feature and label counts.
pub fn read_multilabel_pair(train: &Path, test: &Path) -> Result<(MultiLabelDataset, MultiLabelDataset)> {
    let a = read_multilabel(train, ParseOptions::default())?;
    let b = read_multilabel(test, ParseOptions::default())?;
    let d = a.features.cols().max(b.features.cols());
    let l = a.num_labels.max(b.num_labels);
    let forced = ParseOptions {
        num_features: Some(d),
        num_labels: Some(l),
        zero_based: None,
    };
    let a = if a.features.cols() == d && a.num_labels == l {
        a
    } else {
        read_multilabel(train, forced)?
    };
    let b = if b.features.cols() == d && b.num_labels == l {
        b
    } else {
        read_multilabel(test, forced)?
    };
    Ok((a, b))
}

/// Builds the logged training data (plus the full-information test set)
/// for one seed.
pub fn prepare_full(source: &DataSource, seed: u64) -> Result<(BanditDataset, Matrix, GroundTruthTable)> {
    let mut rng = Prng::substream(seed, 0);
    match source {
        DataSource::Synthetic {
            demand,
            policy,
            n_train,
            n_test,
        } => {
            let spec = make_demand_spec(*demand, &mut rng);
            let train = sample_bandit_dataset(&spec, *n_train, *policy, &mut rng)?;
            let test = sample_evaluation_set(&spec, *n_test, &mut rng)?;
            let truth = test.ground_truth.expect("evaluation sets carry ground truth");
            Ok((train, test.features, truth))
        }
        DataSource::LibSvm {
            train_file,
            test_file,
            logging_fraction,
            temperature,
            exclude_logging_rows,
            ..
        } => {
            let (train, test) = read_multilabel_pair(train_file, test_file)?;
            let cfg = LoggingPolicyConfig {
                fraction: *logging_fraction,
                temperature: *temperature,
                ..LoggingPolicyConfig::default()
            };
            let policy = fit_logging_policy(&train, &cfg, &mut rng)?;
            let mut logged = convert_to_bandit(&train, &policy, &mut rng)?;
            if *exclude_logging_rows {
                let keep: Vec<usize> = (0..logged.len())
                    .filter(|i| policy.training_rows.binary_search(i).is_err())
                    .collect();
                logged = logged.subset(&keep);
            }
            let truth = test.membership();
            Ok((logged, test.features, truth))
        }
        DataSource::Toy { n_train, n_test, noise } => {
            let (x, types) = two_moons(*n_train, *noise, &mut rng);
            let train = toy_bandit(&x, &types, &mut rng)?;
            let (tx, ttypes) = two_moons(*n_test, *noise, &mut rng);
            Ok((train, tx, toy_ground_truth(&ttypes)?))
        }
    }
}

pub fn prepare(source: &DataSource, seed: u64, validation_fraction: f64) -> Result<PreparedData> {
    let (logged, test_features, test_truth) = prepare_full(source, seed)?;
    let (train, validation) = if validation_fraction > 0.0 {
        let (rest, held) = logged.split(validation_fraction, &mut Prng::substream(seed, 1));
        if held.is_empty() || rest.is_empty() {
            return Err(HarnessError::Config(format!(
                "validation split of {} rows leaves an empty side",
                logged.len()
            )));
        }
        (rest, Some(held))
    } else {
        (logged, None)
    };
    Ok(PreparedData {
        name: source.name(),
        train,
        validation,
        test_features,
        test_truth,
    })
}

/// One trained and evaluated model.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub dataset: String,
    pub backbone: BackboneKind,
    pub method: Method,
    pub seed: u64,
    pub metrics: RunMetrics,
    /// CVAT weight used (0 for methods without CVAT).
    pub lambda: f64,
    pub backbone_losses: Vec<f64>,
    pub history: CstHistory,
    /// `(lambda, validation NLL)` when lambda was selected on a grid.
    pub lambda_scores: Vec<(f64, f64)>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentResults {
    pub out_dir: PathBuf,
    pub config_hash: String,
    pub runs: Vec<RunRecord>,
    pub reports: Vec<MetricsReport>,
}

impl ExperimentResults {
    pub fn report(&self, dataset: &str, backbone: BackboneKind, method: Method) -> Option<&MetricsReport> {
        self.reports
            .iter()
            .find(|r| r.dataset == dataset && r.backbone == backbone.name() && r.method == method.name())
    }
}

/// Resolves the output directory: absolute paths as given, relative ones
/// under `$CST_OUTPUT_ROOT` (default `results`).
pub fn output_dir(config: &ExperimentConfig) -> PathBuf {
    if config.output.is_absolute() {
        return config.output.clone();
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("results"));
    root.join(&config.output)
}

fn kind_index(kind: BackboneKind) -> u64 {
    BackboneKind::ALL
        .iter()
        .position(|&k| k == kind)
        .expect("kind is listed") as u64
}

/// Trains and evaluates every requested method for one backbone on one
/// prepared dataset, appending records as they finish.
pub fn run_cell(
    config: &ExperimentConfig,
    data: &PreparedData,
    kind: BackboneKind,
    seed: u64,
    out: &mut Vec<RunRecord>,
) -> Result<()> {
    let bb_cfg = config.backbone_for(kind);
    let mut rng = Prng::substream(seed, 2 + kind_index(kind));
    let started = Instant::now();
    let trained = train_backbone(&data.train, &bb_cfg, &mut rng)?;
    let bb_seconds = started.elapsed().as_secs_f64();
    let mut pl_rng = rng.fork();
    let mut cvat_rng = rng.fork();
    let eval = |m: &MlpModel| evaluate(m, &data.test_features, &data.test_truth);
    let record = |method, metrics, lambda, history, lambda_scores, seconds| RunRecord {
        dataset: data.name.clone(),
        backbone: kind,
        method,
        seed,
        metrics,
        lambda,
        backbone_losses: trained.epoch_losses.clone(),
        history,
        lambda_scores,
        seconds,
    };

    for &method in &config.methods {
        let started = Instant::now();
        match method {
            Method::Backbone => {
                let m = eval(&trained.model)?;
                out.push(record(method, m, 0.0, CstHistory::default(), Vec::new(), bb_seconds));
            }
            Method::Pl => {
                let cfg = CstConfig {
                    lambda_cvat: 0.0,
                    ..config.cst.clone()
                };
                let outcome = cst_train(&trained.model, &data.train, &cfg, &mut pl_rng)?;
                let m = eval(&outcome.model)?;
                let secs = started.elapsed().as_secs_f64();
                out.push(record(method, m, 0.0, outcome.history, Vec::new(), secs));
            }
            Method::PlCvat => {
                let (lambda, outcome, scores) = match &config.lambda {
                    LambdaChoice::Fixed(l) => {
                        let cfg = CstConfig {
                            lambda_cvat: *l,
                            ..config.cst.clone()
                        };
                        (
                            *l,
                            cst_train(&trained.model, &data.train, &cfg, &mut cvat_rng)?,
                            Vec::new(),
                        )
                    }
                    LambdaChoice::Grid(grid) => {
                        let validation = data
                            .validation
                            .as_ref()
                            .ok_or_else(|| HarnessError::Config("lambda grid needs a validation split".into()))?;
                        let sel = select_lambda(
                            &trained.model,
                            &data.train,
                            validation,
                            grid,
                            &config.cst,
                            &mut cvat_rng,
                        )?;
                        log::debug!(
                            "{} seed {seed} {}: lambda {} from {:?}",
                            data.name,
                            kind.name(),
                            sel.lambda,
                            sel.scores
                        );
                        (sel.lambda, sel.outcome, sel.scores)
                    }
                };
                let m = eval(&outcome.model)?;
                let secs = started.elapsed().as_secs_f64();
                out.push(record(method, m, lambda, outcome.history, scores, secs));
            }
        }
    }
    Ok(())
}

/// Runs the whole sweep and writes CSVs to [`output_dir`]. If a run fails
/// the rows finished so far are still written before the error returns.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResults> {
    run_experiment_in(config, &output_dir(config))
}

pub fn run_experiment_in(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentResults> {
    config.validate()?;
    let hash = config.hash();
    std::fs::create_dir_all(out_dir).map_err(HarnessError::io(out_dir))?;
    let resolved = out_dir.join("config.resolved");
    std::fs::write(&resolved, config.canonical_text()).map_err(HarnessError::io(&resolved))?;

    let mut runs = Vec::new();
    let outcome = (|| -> Result<()> {
        for source in &config.datasets {
            for &seed in &config.seeds {
                let data = prepare(source, seed, config.validation_fraction)?;
                for &kind in &config.backbones {
                    let before = runs.len();
                    run_cell(config, &data, kind, seed, &mut runs)?;
                    for r in &runs[before..] {
                        log::info!(
                            "{} seed {} {} {}: nll {:.4} hamming {:.4} ({:.1}s)",
                            r.dataset,
                            r.seed,
                            r.backbone.name(),
                            r.method.name(),
                            r.metrics.nll,
                            r.metrics.hamming,
                            r.seconds
                        );
                    }
                }
            }
        }
        Ok(())
    })();

    let reports = build_reports(&runs, &hash)?;
    write_outputs(out_dir, &runs, &reports)?;
    outcome?;
    Ok(ExperimentResults {
        out_dir: out_dir.to_path_buf(),
        config_hash: hash,
        runs,
        reports,
    })
}

type CellKey = (String, usize, Method);

fn cell_key(r: &RunRecord) -> CellKey {
    (r.dataset.clone(), kind_index(r.backbone) as usize, r.method)
}

fn build_reports(runs: &[RunRecord], hash: &str) -> Result<Vec<MetricsReport>> {
    let mut cells: BTreeMap<CellKey, (BackboneKind, Vec<(u64, RunMetrics)>)> = BTreeMap::new();
    for r in runs {
        cells
            .entry(cell_key(r))
            .or_insert_with(|| (r.backbone, Vec::new()))
            .1
            .push((r.seed, r.metrics));
    }
    cells
        .into_iter()
        .map(|((dataset, _, method), (kind, mut per_seed))| {
            per_seed.sort_by_key(|(s, _)| *s);
            Ok(aggregate(&dataset, kind.name(), method.name(), hash, per_seed)?)
        })
        .collect()
}

fn csv_file(dir: &Path, name: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let path = dir.join(name);
    let mut w = csv::Writer::from_path(&path).map_err(HarnessError::csv(&path))?;
    w.write_record(header).map_err(HarnessError::csv(&path))?;
    for row in rows {
        w.write_record(&row).map_err(HarnessError::csv(&path))?;
    }
    w.flush().map_err(HarnessError::io(&path))
}

/// Writes `per_seed.csv`, `aggregated.csv`, `loss_history.csv`,
/// `imputations.csv` and `lambda_selection.csv`, rows sorted by
/// (dataset, backbone, method, seed). Wall-clock times are left out so
/// repeated runs are byte-identical.
pub fn write_outputs(dir: &Path, runs: &[RunRecord], reports: &[MetricsReport]) -> Result<()> {
    let mut sorted: Vec<&RunRecord> = runs.iter().collect();
    sorted.sort_by(|a, b| cell_key(a).cmp(&cell_key(b)).then(a.seed.cmp(&b.seed)));
    let id = |r: &RunRecord| {
        vec![
            r.dataset.clone(),
            r.backbone.name().into(),
            r.method.name().into(),
            r.seed.to_string(),
        ]
    };

    let per_seed = sorted
        .iter()
        .map(|r| {
            let mut row = id(r);
            row.extend([
                r.metrics.nll.to_string(),
                r.metrics.hamming.to_string(),
                r.metrics.best_action_accuracy.to_string(),
                r.lambda.to_string(),
            ]);
            row
        })
        .collect();
    csv_file(
        dir,
        "per_seed.csv",
        &[
            "dataset",
            "backbone",
            "method",
            "seed",
            "nll",
            "hamming",
            "best_action_accuracy",
            "lambda",
        ],
        per_seed,
    )?;

    let mut agg = Vec::new();
    for rep in reports {
        for (metric, s) in rep.metrics() {
            agg.push(vec![
                rep.dataset.clone(),
                rep.backbone.clone(),
                rep.method.clone(),
                metric.to_string(),
                s.mean.to_string(),
                s.stderr.to_string(),
                rep.per_seed.len().to_string(),
                rep.config_hash.clone(),
            ]);
        }
    }
    csv_file(
        dir,
        "aggregated.csv",
        &[
            "dataset",
            "backbone",
            "method",
            "metric",
            "mean",
            "stderr",
            "seeds",
            "config_hash",
        ],
        agg,
    )?;

    let mut losses = Vec::new();
    for r in &sorted {
        if r.method == Method::Backbone {
            for (e, l) in r.backbone_losses.iter().enumerate() {
                let mut row = id(r);
                row.extend([
                    "backbone".into(),
                    "0".into(),
                    e.to_string(),
                    l.to_string(),
                    String::new(),
                    l.to_string(),
                ]);
                losses.push(row);
            }
        }
        for e in &r.history.epochs {
            let mut row = id(r);
            row.extend([
                "cst".into(),
                e.outer.to_string(),
                e.epoch.to_string(),
                e.cst_loss.to_string(),
                e.cvat_loss.to_string(),
                e.total.to_string(),
            ]);
            losses.push(row);
        }
    }
    csv_file(
        dir,
        "loss_history.csv",
        &[
            "dataset",
            "backbone",
            "method",
            "seed",
            "stage",
            "outer",
            "epoch",
            "loss",
            "cvat_loss",
            "total",
        ],
        losses,
    )?;

    let mut imps = Vec::new();
    for r in &sorted {
        for i in &r.history.imputations {
            let mut row = id(r);
            row.extend([
                i.outer.to_string(),
                i.after_epoch.map(|e| e.to_string()).unwrap_or_default(),
                i.objective_before.to_string(),
                i.objective_after.to_string(),
                i.changed.to_string(),
            ]);
            imps.push(row);
        }
    }
    csv_file(
        dir,
        "imputations.csv",
        &[
            "dataset",
            "backbone",
            "method",
            "seed",
            "outer",
            "after_epoch",
            "objective_before",
            "objective_after",
            "changed",
        ],
        imps,
    )?;

    let mut lambdas = Vec::new();
    for r in &sorted {
        for &(l, score) in &r.lambda_scores {
            let mut row = id(r);
            row.extend([l.to_string(), score.to_string(), (l == r.lambda).to_string()]);
            lambdas.push(row);
        }
    }
    csv_file(
        dir,
        "lambda_selection.csv",
        &[
            "dataset",
            "backbone",
            "method",
            "seed",
            "lambda",
            "validation_nll",
            "chosen",
        ],
        lambdas,
    )
}
