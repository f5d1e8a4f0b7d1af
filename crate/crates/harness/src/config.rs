//! Flat `key = value` configuration with `[section]` headers.
//!
//! ```text
//! # comment
//! [experiment]
//! name = d1
//! seeds = 0,1,2
//!
//! [backbone]
//! kinds = DM,HSIC
//! ```
//!
//! Every key is validated against the known set; unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cst_core::backbone::{Architecture, BackboneConfig, BackboneKind};
use cst_core::cst::{CstConfig, Imputer};
use cst_core::optim::{AdamConfig, OptimizerKind};
use cst_core::synth::{DemandKind, LoggingPolicy};
use cst_core::train::TrainConfig;
use cst_core::{DropoutPlacement, ModelConfig};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

/// Raw parsed file: section -> key -> (value, line).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    sections: BTreeMap<String, BTreeMap<String, (String, usize)>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<ConfigFile> {
        let mut file = ConfigFile::default();
        let mut section = String::from("experiment");
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| HarnessError::ConfigSyntax {
                    line: line_no,
                    message: "unterminated section header".into(),
                })?;
                section = name.trim().to_ascii_lowercase();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| HarnessError::ConfigSyntax {
                line: line_no,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim().to_ascii_lowercase();
            if key.is_empty() {
                return Err(HarnessError::ConfigSyntax {
                    line: line_no,
                    message: "empty key".into(),
                });
            }
            let entries = file.sections.entry(section.clone()).or_default();
            if entries
                .insert(key.clone(), (value.trim().to_string(), line_no))
                .is_some()
            {
                return Err(HarnessError::ConfigSyntax {
                    line: line_no,
                    message: format!("duplicate key `{section}.{key}`"),
                });
            }
        }
        Ok(file)
    }

    pub fn read(path: &Path) -> Result<ConfigFile> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        ConfigFile::parse(&text)
    }

    /// Applies a `section.key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("override `{assignment}` is not `section.key=value`")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| HarnessError::Config(format!("override `{assignment}` needs a section prefix")))?;
        self.sections
            .entry(section.to_ascii_lowercase())
            .or_default()
            .insert(key.to_ascii_lowercase(), (value.trim().to_string(), 0));
        Ok(())
    }

    fn take(&mut self, section: &str, key: &str) -> Option<(String, usize)> {
        self.sections.get_mut(section).and_then(|s| s.remove(key))
    }

    fn leftovers(&self) -> Vec<String> {
        self.sections
            .iter()
            .flat_map(|(s, keys)| keys.keys().map(move |k| format!("{s}.{k}")))
            .collect()
    }
}

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic {
        demand: DemandKind,
        policy: LoggingPolicy,
        n_train: usize,
        n_test: usize,
    },
    LibSvm {
        name: String,
        train_file: PathBuf,
        test_file: PathBuf,
        logging_fraction: f64,
        temperature: f64,
        exclude_logging_rows: bool,
    },
    Toy {
        n_train: usize,
        n_test: usize,
        noise: f64,
    },
}

impl DataSource {
    pub fn name(&self) -> String {
        match self {
            DataSource::Synthetic { demand, policy, .. } => match policy {
                LoggingPolicy::Softmax { overlap } => format!("{}_o{}", demand.name(), overlap),
                _ => demand.name().to_string(),
            },
            DataSource::LibSvm { name, .. } => name.clone(),
            DataSource::Toy { .. } => "toy".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Backbone,
    Pl,
    PlCvat,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Backbone, Method::Pl, Method::PlCvat];

    pub fn name(self) -> &'static str {
        match self {
            Method::Backbone => "Backbone",
            Method::Pl => "PL",
            Method::PlCvat => "PL+CVAT",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LambdaChoice {
    Fixed(f64),
    /// Chosen per (dataset, seed, backbone) on the validation split.
    Grid(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Output directory, relative to the output root unless absolute.
    pub output: PathBuf,
    pub datasets: Vec<DataSource>,
    /// Fraction of the logged training data held out for lambda selection.
    pub validation_fraction: f64,
    pub backbones: Vec<BackboneKind>,
    /// Backbone hyperparameters; `kind` is overwritten per run.
    pub backbone: BackboneConfig,
    pub methods: Vec<Method>,
    pub cst: CstConfig,
    pub lambda: LambdaChoice,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            seeds: vec![0, 1, 2, 3, 4],
            output: PathBuf::from("experiment"),
            datasets: DemandKind::ALL
                .into_iter()
                .map(|demand| DataSource::Synthetic {
                    demand,
                    policy: LoggingPolicy::Proportional {
                        wide_denominator: false,
                    },
                    n_train: 1000,
                    n_test: 1000,
                })
                .collect(),
            validation_fraction: 0.2,
            backbones: BackboneKind::ALL.to_vec(),
            backbone: default_backbone(),
            methods: Method::ALL.to_vec(),
            cst: default_cst(),
            lambda: LambdaChoice::Grid(vec![0.01, 0.1, 1.0, 10.0]),
        }
    }
}

/// Backbone training defaults used by the harness.
pub fn default_backbone() -> BackboneConfig {
    BackboneConfig {
        train: TrainConfig {
            epochs: 400,
            batch_size: 64,
            optimizer: OptimizerKind::Adam(AdamConfig::default()),
        },
        ..BackboneConfig::default()
    }
}

/// CST defaults used by the harness.
pub fn default_cst() -> CstConfig {
    CstConfig {
        inner_epochs: 2,
        optimizer: OptimizerKind::Adam(AdamConfig {
            learning_rate: 0.03,
            ..AdamConfig::default()
        }),
        ..CstConfig::default()
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.trim().parse().map_err(|_| HarnessError::ConfigSyntax {
        line,
        message: format!("invalid value `{value}` for `{key}`"),
    })
}

fn parse_list<T>(key: &str, value: &str, line: usize, f: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    let items: Vec<&str> = value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(HarnessError::ConfigSyntax {
            line,
            message: format!("`{key}` needs at least one value"),
        });
    }
    items
        .into_iter()
        .map(|item| {
            f(item).ok_or_else(|| HarnessError::ConfigSyntax {
                line,
                message: format!("invalid entry `{item}` in `{key}`"),
            })
        })
        .collect()
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(HarnessError::ConfigSyntax {
            line,
            message: format!("`{key}` expects true or false"),
        }),
    }
}

fn optimizer(kind: &str, lr: f64, line: usize) -> Result<OptimizerKind> {
    match kind.to_ascii_lowercase().as_str() {
        "adam" => Ok(OptimizerKind::Adam(AdamConfig {
            learning_rate: lr,
            ..AdamConfig::default()
        })),
        "sgd" => Ok(OptimizerKind::Sgd { learning_rate: lr }),
        other => Err(HarnessError::ConfigSyntax {
            line,
            message: format!("unknown optimizer `{other}`"),
        }),
    }
}

fn optimizer_name(kind: &OptimizerKind) -> &'static str {
    match kind {
        OptimizerKind::Adam(_) => "adam",
        OptimizerKind::Sgd { .. } => "sgd",
    }
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Builds a config from a parsed file; missing keys keep their defaults.
    /// Relative data paths resolve against `base_dir`.
    pub fn from_file(mut file: ConfigFile, base_dir: &Path) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        macro_rules! get {
            ($section:literal, $key:literal) => {
                file.take($section, $key)
            };
        }

        if let Some((v, _)) = get!("experiment", "name") {
            cfg.output = PathBuf::from(&v);
            cfg.name = v;
        }
        if let Some((v, l)) = get!("experiment", "seeds") {
            cfg.seeds = parse_list("seeds", &v, l, |s| s.parse().ok())?;
        }
        if let Some((v, _)) = get!("experiment", "output") {
            cfg.output = PathBuf::from(v);
        }

        let source = get!("data", "source").map(|(v, l)| (v.to_ascii_lowercase(), l));
        let n_train = get!("data", "n_train")
            .map(|(v, l)| parse_value::<usize>("n_train", &v, l))
            .transpose()?;
        let n_test = get!("data", "n_test")
            .map(|(v, l)| parse_value::<usize>("n_test", &v, l))
            .transpose()?;
        if let Some((v, l)) = get!("data", "validation_fraction") {
            cfg.validation_fraction = parse_value("validation_fraction", &v, l)?;
        }
        match source.as_ref().map(|(s, l)| (s.as_str(), *l)) {
            None | Some(("synthetic", _)) => {
                let demands = match get!("data", "demand") {
                    Some((v, l)) => parse_list("demand", &v, l, DemandKind::parse)?,
                    None => DemandKind::ALL.to_vec(),
                };
                let policy_name = get!("data", "policy");
                let overlaps = match get!("data", "overlap") {
                    Some((v, l)) => parse_list("overlap", &v, l, |s| s.parse::<f64>().ok())?,
                    None => vec![1.0],
                };
                let policies: Vec<LoggingPolicy> = match policy_name {
                    None => vec![LoggingPolicy::Proportional {
                        wide_denominator: false,
                    }],
                    Some((p, l)) => match p.to_ascii_lowercase().as_str() {
                        "proportional" => vec![LoggingPolicy::Proportional {
                            wide_denominator: false,
                        }],
                        "proportional10" => vec![LoggingPolicy::Proportional { wide_denominator: true }],
                        "uniform" => vec![LoggingPolicy::Uniform],
                        "softmax" => overlaps
                            .iter()
                            .map(|&overlap| LoggingPolicy::Softmax { overlap })
                            .collect(),
                        other => {
                            return Err(HarnessError::ConfigSyntax {
                                line: l,
                                message: format!("unknown logging policy `{other}`"),
                            })
                        }
                    },
                };
                cfg.datasets = demands
                    .iter()
                    .flat_map(|&demand| {
                        policies.iter().map(move |&policy| DataSource::Synthetic {
                            demand,
                            policy,
                            n_train: n_train.unwrap_or(1000),
                            n_test: n_test.unwrap_or(1000),
                        })
                    })
                    .collect();
            }
            Some(("libsvm", l)) => {
                let name = get!("data", "name")
                    .map(|(v, _)| v)
                    .unwrap_or_else(|| "multilabel".into());
                let mut path = |key: &'static str| -> Result<PathBuf> {
                    let (v, _) = file.take("data", key).ok_or_else(|| HarnessError::ConfigSyntax {
                        line: l,
                        message: format!("libsvm data needs `{key}`"),
                    })?;
                    let p = PathBuf::from(v);
                    Ok(if p.is_absolute() { p } else { base_dir.join(p) })
                };
                let train_file = path("train_file")?;
                let test_file = path("test_file")?;
                let mut logging_fraction = 0.05;
                let mut temperature = 1.0;
                let mut exclude = false;
                if let Some((v, l)) = get!("data", "logging_fraction") {
                    logging_fraction = parse_value("logging_fraction", &v, l)?;
                }
                if let Some((v, l)) = get!("data", "policy_temperature") {
                    temperature = parse_value("policy_temperature", &v, l)?;
                }
                if let Some((v, l)) = get!("data", "exclude_logging_rows") {
                    exclude = parse_bool("exclude_logging_rows", &v, l)?;
                }
                cfg.datasets = vec![DataSource::LibSvm {
                    name,
                    train_file,
                    test_file,
                    logging_fraction,
                    temperature,
                    exclude_logging_rows: exclude,
                }];
            }
            Some(("toy", _)) => {
                let mut noise = 0.1;
                if let Some((v, l)) = get!("data", "noise") {
                    noise = parse_value("noise", &v, l)?;
                }
                cfg.datasets = vec![DataSource::Toy {
                    n_train: n_train.unwrap_or(50),
                    n_test: n_test.unwrap_or(500),
                    noise,
                }];
            }
            Some((other, l)) => {
                return Err(HarnessError::ConfigSyntax {
                    line: l,
                    message: format!("unknown data source `{other}`"),
                })
            }
        }

        let b = &mut cfg.backbone;
        if let Some((v, l)) = get!("backbone", "kinds") {
            cfg.backbones = parse_list("kinds", &v, l, BackboneKind::parse)?;
        }
        if let Some((v, l)) = get!("backbone", "hidden") {
            b.arch.hidden = parse_list("hidden", &v, l, |s| s.parse().ok())?;
        }
        if let Some((v, l)) = get!("backbone", "dropout") {
            b.arch.model.dropout_p = parse_value("dropout", &v, l)?;
        }
        if let Some((v, l)) = get!("backbone", "leaky_slope") {
            b.arch.model.leaky_slope = parse_value("leaky_slope", &v, l)?;
        }
        if let Some((v, l)) = get!("backbone", "epochs") {
            b.train.epochs = parse_value("epochs", &v, l)?;
        }
        if let Some((v, l)) = get!("backbone", "batch_size") {
            b.train.batch_size = parse_value("batch_size", &v, l)?;
        }
        let lr = match get!("backbone", "learning_rate") {
            Some((v, l)) => parse_value("learning_rate", &v, l)?,
            None => b.train.optimizer.learning_rate(),
        };
        let (opt, l) = get!("backbone", "optimizer").unwrap_or_else(|| (optimizer_name(&b.train.optimizer).into(), 0));
        b.train.optimizer = optimizer(&opt, lr, l)?;
        if let Some((v, l)) = get!("backbone", "hsic_lambda") {
            b.hsic_lambda = parse_value("hsic_lambda", &v, l)?;
        }
        if let Some((v, l)) = get!("backbone", "rbf_sigma") {
            b.rbf_sigma = parse_value("rbf_sigma", &v, l)?;
        }
        if let Some((v, l)) = get!("backbone", "embedding_layer") {
            b.embedding_layer = parse_value("embedding_layer", &v, l)?;
        }
        if let Some((v, l)) = get!("backbone", "propensity_floor") {
            b.propensity_floor = parse_value("propensity_floor", &v, l)?;
        }
        if let Some((v, l)) = get!("backbone", "propensity_epochs") {
            b.propensity_train.epochs = parse_value("propensity_epochs", &v, l)?;
        }
        if let Some((v, l)) = get!("backbone", "propensity_batch_size") {
            b.propensity_train.batch_size = parse_value("propensity_batch_size", &v, l)?;
        }
        if let Some((v, l)) = get!("backbone", "propensity_learning_rate") {
            b.propensity_train.optimizer = optimizer("adam", parse_value("propensity_learning_rate", &v, l)?, l)?;
        }

        let c = &mut cfg.cst;
        if let Some((v, l)) = get!("cst", "methods") {
            cfg.methods = parse_list("methods", &v, l, Method::parse)?;
        }
        if let Some((v, l)) = get!("cst", "outer_iterations") {
            c.outer_iterations = parse_value("outer_iterations", &v, l)?;
        }
        if let Some((v, l)) = get!("cst", "inner_epochs") {
            c.inner_epochs = parse_value("inner_epochs", &v, l)?;
        }
        if let Some((v, l)) = get!("cst", "batch_size") {
            c.batch_size = parse_value("batch_size", &v, l)?;
        }
        let lr = match get!("cst", "learning_rate") {
            Some((v, l)) => parse_value("learning_rate", &v, l)?,
            None => c.optimizer.learning_rate(),
        };
        let (opt, l) = get!("cst", "optimizer").unwrap_or_else(|| (optimizer_name(&c.optimizer).into(), 0));
        c.optimizer = optimizer(&opt, lr, l)?;
        if let Some((v, l)) = get!("cst", "xi") {
            c.cvat_xi = parse_value("xi", &v, l)?;
        }
        if let Some((v, l)) = get!("cst", "power_iters") {
            c.cvat_power_iters = parse_value("power_iters", &v, l)?;
        }
        if let Some((v, l)) = get!("cst", "epsilon") {
            c.cvat_epsilon = parse_value("epsilon", &v, l)?;
        }
        if let Some((v, l)) = get!("cst", "reimpute_every") {
            c.reimpute_every = parse_value("reimpute_every", &v, l)?;
        }
        if let Some((v, l)) = get!("cst", "imputer") {
            c.imputer = match v.to_ascii_lowercase().as_str() {
                "current" => Imputer::Current,
                "frozen" => Imputer::Frozen,
                _ => {
                    return Err(HarnessError::ConfigSyntax {
                        line: l,
                        message: format!("unknown imputer `{v}`"),
                    })
                }
            };
        }
        let fixed = get!("cst", "lambda");
        let grid = get!("cst", "lambda_grid");
        cfg.lambda = match (fixed, grid) {
            (Some(_), Some((_, l))) => {
                return Err(HarnessError::ConfigSyntax {
                    line: l,
                    message: "set either `lambda` or `lambda_grid`, not both".into(),
                })
            }
            (Some((v, l)), None) => LambdaChoice::Fixed(parse_value("lambda", &v, l)?),
            (None, Some((v, l))) => LambdaChoice::Grid(parse_list("lambda_grid", &v, l, |s| s.parse().ok())?),
            (None, None) => cfg.lambda,
        };

        let left = file.leftovers();
        if !left.is_empty() {
            return Err(HarnessError::Config(format!("unknown keys: {}", left.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
        let mut file = ConfigFile::read(path)?;
        for o in overrides {
            file.set(o)?;
        }
        ExperimentConfig::from_file(file, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.datasets.is_empty() || self.backbones.is_empty() || self.methods.is_empty() {
            return bad("datasets, backbone kinds and methods must be nonempty");
        }
        if !(self.validation_fraction >= 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        if let LambdaChoice::Grid(g) = &self.lambda {
            if self.methods.contains(&Method::PlCvat) && self.validation_fraction == 0.0 && g.len() > 1 {
                return bad("a lambda grid needs a validation split");
            }
            if g.iter().any(|v| v.is_nan() || *v <= 0.0) {
                return bad("lambda grid values must be positive");
            }
        }
        if let LambdaChoice::Fixed(v) = self.lambda {
            if v.is_nan() || v < 0.0 {
                return bad("lambda must be nonnegative");
            }
        }
        for d in &self.datasets {
            match d {
                DataSource::LibSvm {
                    train_file,
                    test_file,
                    logging_fraction,
                    ..
                } => {
                    for f in [train_file, test_file] {
                        if !f.exists() {
                            return Err(HarnessError::Config(format!(
                                "data file {} does not exist",
                                f.display()
                            )));
                        }
                    }
                    if !(*logging_fraction > 0.0 && *logging_fraction < 1.0) {
                        return bad("logging_fraction must lie in (0, 1)");
                    }
                }
                DataSource::Synthetic { n_train, n_test, .. } | DataSource::Toy { n_train, n_test, .. } => {
                    if *n_train < 2 || *n_test == 0 {
                        return bad("n_train must be at least 2 and n_test positive");
                    }
                }
            }
        }
        self.backbone.validate()?;
        self.cst.validate()?;
        Ok(())
    }

    /// Every setting that influences results, rendered in the config
    /// syntax. The output location is left out.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[experiment]\nname = {}\nseeds = {}", self.name, join(&self.seeds));
        s.push_str("\n[data]\n");
        for (i, d) in self.datasets.iter().enumerate() {
            let _ = match d {
                DataSource::Synthetic {
                    demand,
                    policy,
                    n_train,
                    n_test,
                } => {
                    let policy = match policy {
                        LoggingPolicy::Proportional {
                            wide_denominator: false,
                        } => "proportional".to_string(),
                        LoggingPolicy::Proportional { wide_denominator: true } => "proportional10".to_string(),
                        LoggingPolicy::Uniform => "uniform".to_string(),
                        LoggingPolicy::Softmax { overlap } => format!("softmax({overlap})"),
                    };
                    writeln!(
                        s,
                        "dataset{i} = synthetic {} {policy} {n_train} {n_test}",
                        demand.name()
                    )
                }
                DataSource::LibSvm {
                    name,
                    train_file,
                    test_file,
                    logging_fraction,
                    temperature,
                    exclude_logging_rows,
                } => writeln!(
                    s,
                    "dataset{i} = libsvm {name} {} {} {logging_fraction} {temperature} {exclude_logging_rows}",
                    train_file.display(),
                    test_file.display()
                ),
                DataSource::Toy { n_train, n_test, noise } => {
                    writeln!(s, "dataset{i} = toy {n_train} {n_test} {noise}")
                }
            };
        }
        let _ = writeln!(s, "validation_fraction = {}", self.validation_fraction);
        let b = &self.backbone;
        let _ = writeln!(
            s,
            "\n[backbone]\nkinds = {}\nhidden = {}\ndropout = {}\nleaky_slope = {}\nepochs = {}\nbatch_size = {}\noptimizer = {}\nlearning_rate = {}\nhsic_lambda = {}\nrbf_sigma = {}\nembedding_layer = {}\npropensity_floor = {}\npropensity_epochs = {}\npropensity_batch_size = {}\npropensity_learning_rate = {}",
            self.backbones.iter().map(|k| k.name()).collect::<Vec<_>>().join(","),
            join(&b.arch.hidden),
            b.arch.model.dropout_p,
            b.arch.model.leaky_slope,
            b.train.epochs,
            b.train.batch_size,
            optimizer_name(&b.train.optimizer),
            b.train.optimizer.learning_rate(),
            b.hsic_lambda,
            b.rbf_sigma,
            b.embedding_layer,
            b.propensity_floor,
            b.propensity_train.epochs,
            b.propensity_train.batch_size,
            b.propensity_train.optimizer.learning_rate(),
        );
        let c = &self.cst;
        let lambda = match &self.lambda {
            LambdaChoice::Fixed(v) => format!("lambda = {v}"),
            LambdaChoice::Grid(g) => format!("lambda_grid = {}", join(g)),
        };
        let _ = writeln!(
            s,
            "\n[cst]\nmethods = {}\nouter_iterations = {}\ninner_epochs = {}\nbatch_size = {}\noptimizer = {}\nlearning_rate = {}\n{lambda}\nxi = {}\npower_iters = {}\nepsilon = {}\nreimpute_every = {}\nimputer = {}",
            self.methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(","),
            c.outer_iterations,
            c.inner_epochs,
            c.batch_size,
            optimizer_name(&c.optimizer),
            c.optimizer.learning_rate(),
            c.cvat_xi,
            c.cvat_power_iters,
            c.cvat_epsilon,
            c.reimpute_every,
            match c.imputer {
                Imputer::Current => "current",
                Imputer::Frozen => "frozen",
            },
        );
        s
    }

    /// First 16 hex digits of the SHA-256 of [`Self::canonical_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Backbone config for one kind.
    pub fn backbone_for(&self, kind: BackboneKind) -> BackboneConfig {
        BackboneConfig {
            kind,
            ..self.backbone.clone()
        }
    }
}

/// Architecture from the toy demo: two hidden layers of 16 units, dropout
/// 0.5.
pub fn toy_architecture() -> Architecture {
    Architecture {
        hidden: vec![16, 16],
        model: ModelConfig {
            leaky_slope: 0.01,
            dropout_p: 0.5,
            dropout_placement: DropoutPlacement::LastHidden,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_comments() {
        let f = ConfigFile::parse("# top\nname = a\n[Backbone]\nepochs = 3 # trailing\n").unwrap();
        let cfg = ExperimentConfig::from_file(f, Path::new(".")).unwrap();
        assert_eq!(cfg.name, "a");
        assert_eq!(cfg.backbone.train.epochs, 3);
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = ConfigFile::parse("[data]\n\nno equals sign\n").unwrap_err();
        assert!(matches!(err, HarnessError::ConfigSyntax { line: 3, .. }), "{err}");
        let err = ConfigFile::parse("a = 1\na = 2\n").unwrap_err();
        assert!(matches!(err, HarnessError::ConfigSyntax { line: 2, .. }));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let f = ConfigFile::parse("[cst]\nlamda = 1\n").unwrap();
        let err = ExperimentConfig::from_file(f, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("cst.lamda"));
    }

    #[test]
    fn softmax_overlaps_expand_datasets() {
        let f = ConfigFile::parse("[data]\ndemand = D1\npolicy = softmax\noverlap = 1,2,3\n").unwrap();
        let cfg = ExperimentConfig::from_file(f, Path::new(".")).unwrap();
        let names: Vec<String> = cfg.datasets.iter().map(|d| d.name()).collect();
        assert_eq!(names, ["D1_o1", "D1_o2", "D1_o3"]);
    }

    #[test]
    fn canonical_text_round_trips_through_hash() {
        let text = "[experiment]\nname = x\nseeds = 3\n[data]\ndemand = D2,D4\n[cst]\nlambda = 1\ninner_epochs = 4\n";
        let a = ExperimentConfig::from_file(ConfigFile::parse(text).unwrap(), Path::new(".")).unwrap();
        let b = ExperimentConfig::from_file(ConfigFile::parse(text).unwrap(), Path::new(".")).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        let mut c = a.clone();
        c.cst.inner_epochs = 5;
        assert_ne!(a.hash(), c.hash());
        let mut d = a.clone();
        d.output = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), d.hash());
    }

    #[test]
    fn overrides_replace_values() {
        let mut f = ConfigFile::parse("[cst]\ninner_epochs = 4\n").unwrap();
        f.set("cst.inner_epochs=7").unwrap();
        f.set("backbone.kinds = DM").unwrap();
        let cfg = ExperimentConfig::from_file(f, Path::new(".")).unwrap();
        assert_eq!(cfg.cst.inner_epochs, 7);
        assert_eq!(cfg.backbones, vec![BackboneKind::Dm]);
        assert!(ConfigFile::default().set("nodot=1").is_err());
    }

    #[test]
    fn missing_files_and_conflicting_lambda_are_config_errors() {
        let f = ConfigFile::parse("[data]\nsource = libsvm\ntrain_file = /nonexistent/a\ntest_file = /nonexistent/b\n")
            .unwrap();
        assert!(ExperimentConfig::from_file(f, Path::new(".")).is_err());
        let f = ConfigFile::parse("[cst]\nlambda = 1\nlambda_grid = 1,2\n").unwrap();
        assert!(ExperimentConfig::from_file(f, Path::new(".")).is_err());
    }
}
