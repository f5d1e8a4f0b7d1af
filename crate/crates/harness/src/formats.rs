//! On-disk formats: a plain-text model checkpoint and a CSV dataset dump.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! save/load cycle is bit-exact.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use cst_core::data::{BanditDataset, GroundTruthTable};
use cst_core::nn::Dense;
use cst_core::{DropoutPlacement, Matrix, MlpModel, ModelConfig};

use crate::error::{HarnessError, Result};

const MODEL_MAGIC: &str = "cst-model v1";
const DATA_MAGIC: &str = "# cst-dataset v1";

/// A model plus free-form metadata (`key value` lines).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: MlpModel,
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn join_floats(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v}");
    }
    s
}

pub fn model_to_string(model: &MlpModel, meta: &[(String, String)]) -> String {
    let cfg = model.config();
    let mut s = String::new();
    let _ = writeln!(s, "{MODEL_MAGIC}");
    for (k, v) in meta {
        let _ = writeln!(s, "meta {k} {v}");
    }
    let dims: Vec<String> = model.layer_dims().iter().map(|d| d.to_string()).collect();
    let _ = writeln!(s, "dims {}", dims.join(","));
    let _ = writeln!(s, "leaky_slope {}", cfg.leaky_slope);
    let _ = writeln!(s, "dropout {}", cfg.dropout_p);
    let placement = match cfg.dropout_placement {
        DropoutPlacement::EveryHidden => "every",
        DropoutPlacement::LastHidden => "last",
    };
    let _ = writeln!(s, "dropout_placement {placement}");
    for (l, layer) in model.layers().iter().enumerate() {
        let _ = writeln!(s, "layer {l}");
        for row in layer.weights.iter_rows() {
            let _ = writeln!(s, "{}", join_floats(row));
        }
        let _ = writeln!(s, "{}", join_floats(&layer.bias));
    }
    s
}

struct Lines<'a> {
    path: &'a Path,
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn err(&self, message: impl Into<String>) -> HarnessError {
        HarnessError::Format {
            path: self.path.to_path_buf(),
            line: self.line,
            message: message.into(),
        }
    }

    fn next(&mut self) -> Result<&'a str> {
        match self.iter.next() {
            Some((n, l)) => {
                self.line = n + 1;
                Ok(l)
            }
            None => {
                self.line += 1;
                Err(self.err("unexpected end of file"))
            }
        }
    }

    fn peek_is(&self, prefix: &str) -> bool {
        self.iter.clone().next().is_some_and(|(_, l)| l.starts_with(prefix))
    }

    fn field(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| self.err(format!("expected `{key}`")))
    }

    fn floats(&mut self, expected: usize) -> Result<Vec<f64>> {
        let line = self.next()?;
        let values: Vec<f64> = line
            .split_ascii_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| self.err(format!("bad number `{t}`"))))
            .collect::<Result<_>>()?;
        if values.len() != expected {
            return Err(self.err(format!("expected {expected} values, found {}", values.len())));
        }
        Ok(values)
    }
}

/// Parses a checkpoint; `path` is only used in error messages.
pub fn model_from_str(text: &str, path: &Path) -> Result<Checkpoint> {
    let mut lines = Lines {
        path,
        iter: text.lines().enumerate(),
        line: 0,
    };
    if lines.next()? != MODEL_MAGIC {
        return Err(lines.err("not a model checkpoint"));
    }
    let mut meta = Vec::new();
    while lines.peek_is("meta ") {
        let rest = lines.field("meta")?;
        let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
        meta.push((k.to_string(), v.to_string()));
    }
    let dims: Vec<usize> = lines
        .field("dims")?
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| lines.err("bad dims"))?;
    if dims.len() < 2 {
        return Err(lines.err("need at least two dims"));
    }
    let leaky_slope = lines
        .field("leaky_slope")?
        .parse()
        .map_err(|_| lines.err("bad leaky_slope"))?;
    let dropout_p = lines.field("dropout")?.parse().map_err(|_| lines.err("bad dropout"))?;
    let dropout_placement = match lines.field("dropout_placement")? {
        "every" => DropoutPlacement::EveryHidden,
        "last" => DropoutPlacement::LastHidden,
        other => return Err(lines.err(format!("unknown dropout placement `{other}`"))),
    };
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for (l, w) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        if lines.field("layer")? != l.to_string() {
            return Err(lines.err(format!("expected layer {l}")));
        }
        let mut weights = Vec::with_capacity(fan_in * fan_out);
        for _ in 0..fan_out {
            weights.extend(lines.floats(fan_in)?);
        }
        let bias = lines.floats(fan_out)?;
        layers.push(Dense {
            weights: Matrix::from_vec(fan_out, fan_in, weights)?,
            bias,
        });
    }
    let model = MlpModel::from_layers(
        layers,
        ModelConfig {
            leaky_slope,
            dropout_p,
            dropout_placement,
        },
    )?;
    Ok(Checkpoint { model, meta })
}

pub fn save_model(path: &Path, model: &MlpModel, meta: &[(String, String)]) -> Result<()> {
    std::fs::write(path, model_to_string(model, meta)).map_err(HarnessError::io(path))
}

pub fn load_model(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
    model_from_str(&text, path)
}

/// Writes a dataset as a metadata comment line followed by CSV.
///
/// Columns: `x0..x{d-1}, action, outcome`, then `propensity` if present,
/// then `p0..p{A-1}` and `y0..y{A-1}` if the ground truth is present.
pub fn write_dataset<W: Write>(out: W, data: &BanditDataset) -> Result<()> {
    let path = Path::new("<dataset>");
    let mut out = out;
    writeln!(
        out,
        "{DATA_MAGIC} actions={} classes={} features={} propensities={} ground_truth={}",
        data.num_actions,
        data.num_classes,
        data.feature_dim(),
        data.propensities.is_some(),
        data.ground_truth.is_some()
    )
    .map_err(HarnessError::io(path))?;
    let mut w = csv::Writer::from_writer(out);
    let a = data.num_actions;
    let mut header: Vec<String> = (0..data.feature_dim()).map(|j| format!("x{j}")).collect();
    header.push("action".into());
    header.push("outcome".into());
    if data.propensities.is_some() {
        header.push("propensity".into());
    }
    if data.ground_truth.is_some() {
        header.extend((0..a).map(|k| format!("p{k}")));
        header.extend((0..a).map(|k| format!("y{k}")));
    }
    w.write_record(&header).map_err(HarnessError::csv(path))?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.features.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(data.actions[i].to_string());
        rec.push(data.outcomes[i].to_string());
        if let Some(p) = &data.propensities {
            rec.push(p[i].to_string());
        }
        if let Some(gt) = &data.ground_truth {
            rec.extend(gt.probs.row(i).iter().map(|v| v.to_string()));
            rec.extend((0..a).map(|k| gt.label(i, k).to_string()));
        }
        w.write_record(&rec).map_err(HarnessError::csv(path))?;
    }
    w.flush().map_err(HarnessError::io(path))?;
    Ok(())
}

pub fn save_dataset(path: &Path, data: &BanditDataset) -> Result<()> {
    let file = std::fs::File::create(path).map_err(HarnessError::io(path))?;
    write_dataset(std::io::BufWriter::new(file), data).map_err(|e| match e {
        HarnessError::Io { source, .. } => HarnessError::Io {
            path: path.into(),
            source,
        },
        HarnessError::Csv { source, .. } => HarnessError::Csv {
            path: path.into(),
            source,
        },
        other => other,
    })
}

pub fn load_dataset(path: &Path) -> Result<BanditDataset> {
    let file = std::fs::File::open(path).map_err(HarnessError::io(path))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(HarnessError::io(path))?;
    let err = |line: usize, message: String| HarnessError::Format {
        path: path.into(),
        line,
        message,
    };
    let meta = first
        .trim_end()
        .strip_prefix(DATA_MAGIC)
        .ok_or_else(|| err(1, "not a dataset dump".into()))?;
    let mut fields = std::collections::HashMap::new();
    for tok in meta.split_ascii_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| err(1, format!("bad metadata `{tok}`")))?;
        fields.insert(k, v);
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| err(1, format!("missing `{k}`")));
    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| err(1, format!("bad `{k}`"))) };
    let flag = |k: &str| -> Result<bool> { get(k)?.parse().map_err(|_| err(1, format!("bad `{k}`"))) };
    let (a, m, d) = (num("actions")?, num("classes")?, num("features")?);
    let (has_props, has_gt) = (flag("propensities")?, flag("ground_truth")?);
    let width = d + 2 + usize::from(has_props) + if has_gt { 2 * a } else { 0 };

    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(HarnessError::csv(path))?;
    if headers.len() != width {
        return Err(err(2, format!("expected {width} columns, found {}", headers.len())));
    }
    let (mut x, mut actions, mut outcomes, mut props, mut gt_p, mut gt_y) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (r, rec) in rdr.records().enumerate() {
        let line = r + 3;
        let rec = rec.map_err(HarnessError::csv(path))?;
        let f = |j: usize| -> Result<f64> {
            rec[j]
                .parse()
                .map_err(|_| err(line, format!("bad number `{}`", &rec[j])))
        };
        let u = |j: usize| -> Result<usize> {
            rec[j]
                .parse()
                .map_err(|_| err(line, format!("bad integer `{}`", &rec[j])))
        };
        for j in 0..d {
            x.push(f(j)?);
        }
        actions.push(u(d)?);
        outcomes.push(u(d + 1)?);
        let mut j = d + 2;
        if has_props {
            props.push(f(j)?);
            j += 1;
        }
        if has_gt {
            for k in 0..a {
                gt_p.push(f(j + k)?);
                gt_y.push(u(j + a + k)?);
            }
        }
    }
    let n = actions.len();
    let ground_truth = if has_gt {
        Some(GroundTruthTable::new(Matrix::from_vec(n, a, gt_p)?, gt_y)?)
    } else {
        None
    };
    Ok(BanditDataset::new(
        Matrix::from_vec(n, d, x)?,
        actions,
        outcomes,
        a,
        m,
        ground_truth,
        has_props.then_some(props),
    )?)
}
