//! Multi-label classification data and its conversion to bandit feedback.
//!
//! Each label is an action; choosing a label that belongs to the sample's
//! label set yields outcome 1, anything else 0.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use crate::data::{BanditDataset, GroundTruthTable};
use crate::error::{check_dim, Error, Result};
use crate::loss::softmax_rows;
use crate::matrix::Matrix;
use crate::nn::{MlpModel, Mode};
use crate::optim::{AdamConfig, OptimizerKind};
use crate::rng::Prng;
use crate::train::{fit_linear_classifier, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct MultiLabelDataset {
    pub features: Matrix,
    /// Sorted label indices per sample.
    pub label_sets: Vec<Vec<usize>>,
    pub num_labels: usize,
}

impl MultiLabelDataset {
    pub fn new(features: Matrix, label_sets: Vec<Vec<usize>>, num_labels: usize) -> Result<Self> {
        check_dim("MultiLabelDataset label sets", features.rows(), label_sets.len())?;
        if label_sets.iter().flatten().any(|&l| l >= num_labels) {
            return Err(Error::InvalidConfig("label index out of range".into()));
        }
        Ok(MultiLabelDataset {
            features,
            label_sets,
            num_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Membership table: `labels[i, a] = 1` iff `a` is in sample `i`'s set.
    pub fn membership(&self) -> GroundTruthTable {
        let l = self.num_labels;
        let mut labels = vec![0; self.len() * l];
        for (i, set) in self.label_sets.iter().enumerate() {
            for &a in set {
                labels[i * l + a] = 1;
            }
        }
        let probs = Matrix::from_vec(self.len(), l, labels.iter().map(|&v| v as f64).collect())
            .expect("shape follows from construction");
        GroundTruthTable { probs, labels }
    }

    /// LIBSVM text with 1-based feature indices; zero features are omitted.
    pub fn to_libsvm(&self) -> String {
        let mut out = String::new();
        for (i, set) in self.label_sets.iter().enumerate() {
            let labels: Vec<String> = set.iter().map(|l| format!("{l}")).collect();
            out.push_str(&labels.join(","));
            let row = self.features.row(i);
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    let _ = write!(out, " {}:{}", j + 1, v);
                }
            }
            // an all-zero row would otherwise read back as a blank line
            if !row.is_empty() && row.iter().all(|&v| v == 0.0) {
                out.push_str(" 1:0");
            }
            out.push('\n');
        }
        out
    }
}

/// Overrides for values otherwise inferred from the text.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParseOptions {
    /// Feature count; needed to align a test file with its training file.
    pub num_features: Option<usize>,
    pub num_labels: Option<usize>,
    /// Force the index base instead of detecting index 0.
    pub zero_based: Option<bool>,
}

pub fn parse_libsvm_multilabel(text: &str) -> Result<MultiLabelDataset> {
    parse_libsvm_multilabel_with(text, ParseOptions::default())
}

type ParsedRow = (usize, Vec<usize>, Vec<(usize, f64)>);

pub fn parse_libsvm_multilabel_with(text: &str, options: ParseOptions) -> Result<MultiLabelDataset> {
    // (line, labels, sparse features)
    let mut rows: Vec<ParsedRow> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line: line_no, message };
        let mut tokens = line.split_whitespace().peekable();
        let mut labels = BTreeSet::new();
        if let Some(first) = tokens.peek() {
            if !first.contains(':') {
                for l in first.split(',').filter(|s| !s.is_empty()) {
                    let v = l.parse::<usize>().map_err(|_| err(format!("bad label `{l}`")))?;
                    labels.insert(v);
                }
                tokens.next();
            }
        }
        let mut feats = Vec::new();
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| err(format!("expected index:value, got `{tok}`")))?;
            let idx = idx
                .parse::<usize>()
                .map_err(|_| err(format!("bad feature index `{idx}`")))?;
            let val = val
                .parse::<f64>()
                .map_err(|_| err(format!("bad feature value `{val}`")))?;
            if !val.is_finite() {
                return Err(err(format!("non-finite feature value `{tok}`")));
            }
            feats.push((idx, val));
        }
        rows.push((line_no, labels.into_iter().collect(), feats));
    }

    let zero_based = options
        .zero_based
        .unwrap_or_else(|| rows.iter().flat_map(|r| &r.2).any(|&(i, _)| i == 0));
    let offset = usize::from(!zero_based);
    let seen_features = rows
        .iter()
        .flat_map(|r| &r.2)
        .map(|&(i, _)| i + 1 - offset)
        .max()
        .unwrap_or(0);
    let num_features = options.num_features.unwrap_or(seen_features);
    let seen_labels = rows.iter().flat_map(|r| &r.1).map(|&l| l + 1).max().unwrap_or(0);
    let num_labels = options.num_labels.unwrap_or(seen_labels);

    let mut features = Matrix::zeros(rows.len(), num_features);
    let mut label_sets = Vec::with_capacity(rows.len());
    for (r, (line, labels, feats)) in rows.into_iter().enumerate() {
        for (idx, val) in feats {
            if idx < offset || idx - offset >= num_features {
                return Err(Error::Parse {
                    line,
                    message: format!("feature index {idx} outside 1..={num_features}"),
                });
            }
            features.set(r, idx - offset, val);
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_labels) {
            return Err(Error::Parse {
                line,
                message: format!("label {l} outside 0..{num_labels}"),
            });
        }
        label_sets.push(labels);
    }
    log::debug!(
        "parsed {} samples, {} features, {} labels",
        features.rows(),
        num_features,
        num_labels
    );
    MultiLabelDataset::new(features, label_sets, num_labels)
}

/// Softmax policy over labels from a linear model.
#[derive(Clone, Debug, PartialEq)]
pub struct LoggingPolicyModel {
    pub model: MlpModel,
    pub temperature: f64,
    /// Rows of the source data the policy was fit on.
    pub training_rows: Vec<usize>,
}

impl LoggingPolicyModel {
    /// Action probabilities, one row per sample.
    pub fn probs(&self, features: &Matrix) -> Result<Matrix> {
        let (_, trace) = self.model.forward(features, Mode::Eval, &mut Prng::new(0))?;
        let mut logits = trace.logits().clone();
        logits.scale(1.0 / self.temperature);
        Ok(softmax_rows(&logits))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoggingPolicyConfig {
    pub fraction: f64,
    pub temperature: f64,
    pub train: TrainConfig,
}

impl Default for LoggingPolicyConfig {
    fn default() -> Self {
        LoggingPolicyConfig {
            fraction: 0.05,
            temperature: 1.0,
            train: TrainConfig {
                epochs: 200,
                batch_size: 64,
                optimizer: OptimizerKind::Adam(AdamConfig {
                    learning_rate: 1e-2,
                    ..AdamConfig::default()
                }),
            },
        }
    }
}

/// Fits the logging policy on a random `fraction` of the rows, each
/// labeled with one of its positive labels drawn uniformly. Rows without
/// labels are skipped.
pub fn fit_logging_policy(
    data: &MultiLabelDataset,
    config: &LoggingPolicyConfig,
    rng: &mut Prng,
) -> Result<LoggingPolicyModel> {
    if !(config.fraction > 0.0 && config.fraction < 1.0) {
        return Err(Error::InvalidConfig(
            "logging-policy fraction must lie in (0, 1)".into(),
        ));
    }
    if config.temperature.is_nan() || config.temperature <= 0.0 {
        return Err(Error::InvalidConfig("policy temperature must be positive".into()));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut idx);
    let k = (libm::round(config.fraction * data.len() as f64) as usize)
        .max(1)
        .min(data.len());
    let mut rows: Vec<usize> = idx[..k]
        .iter()
        .copied()
        .filter(|&i| !data.label_sets[i].is_empty())
        .collect();
    rows.sort_unstable();
    if rows.is_empty() {
        return Err(Error::Empty("logging-policy subsample has no labeled rows"));
    }
    if rows.len() < data.num_labels {
        log::warn!(
            "logging-policy subsample has {} rows for {} labels",
            rows.len(),
            data.num_labels
        );
    }
    let targets: Vec<usize> = rows
        .iter()
        .map(|&i| {
            let set = &data.label_sets[i];
            set[rng.index(set.len())]
        })
        .collect();
    let x = data.features.select_rows(&rows);
    let model = fit_linear_classifier(&x, &targets, data.num_labels, &config.train, rng)?;
    Ok(LoggingPolicyModel {
        model,
        temperature: config.temperature,
        training_rows: rows,
    })
}

/// Samples one action per row from the policy and records the binary
/// outcome, the propensity and the full membership table.
pub fn convert_to_bandit(
    data: &MultiLabelDataset,
    policy: &LoggingPolicyModel,
    rng: &mut Prng,
) -> Result<BanditDataset> {
    let probs = policy.probs(&data.features)?;
    check_dim("logging policy actions", data.num_labels, probs.cols())?;
    let truth = data.membership();
    let mut actions = Vec::with_capacity(data.len());
    let mut outcomes = Vec::with_capacity(data.len());
    let mut propensities = Vec::with_capacity(data.len());
    for (i, p) in probs.iter_rows().enumerate() {
        let a = rng.categorical(p);
        actions.push(a);
        outcomes.push(truth.label(i, a));
        propensities.push(p[a]);
    }
    BanditDataset::new(
        data.features.clone(),
        actions,
        outcomes,
        data.num_labels,
        2,
        Some(truth),
        Some(propensities),
    )
}
