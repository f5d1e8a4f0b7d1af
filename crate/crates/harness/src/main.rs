use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cst_core::backbone::{train_backbone, BackboneKind};
use cst_core::cst::{cst_train, select_lambda, CstConfig};
use cst_core::data::BanditDataset;
use cst_core::eval::evaluate;
use cst_core::Prng;
use cst_harness::config::{ConfigFile, ExperimentConfig, LambdaChoice, Method};
use cst_harness::experiment::{output_dir, prepare, prepare_full, run_experiment_in};
use cst_harness::formats::{load_dataset, load_model, save_dataset, save_model};
use cst_harness::toy::{run_toy, write_toy_outputs, ToyConfig};
use cst_harness::{HarnessError, Result};

#[derive(Parser, Debug)]
#[command(name = "cst", version, about = "Counterfactual self-training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Experiment config file; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set cst.inner_epochs=4`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(path) => ExperimentConfig::load(path, &self.overrides),
            None => {
                let mut file = ConfigFile::default();
                for o in &self.overrides {
                    file.set(o)?;
                }
                ExperimentConfig::from_file(file, Path::new("."))
            }
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write logged training data and full-information test data as CSV.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one backbone (and optionally a CST method) and save the model.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset dump to train on; without it the first configured
        /// dataset is generated.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "DM")]
        backbone: String,
        #[arg(long, default_value = "Backbone")]
        method: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a saved model on a dataset dump with ground truth.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the full configured sweep.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; overrides the config and the output root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two-moons demo: decision boundaries and pseudolabels per iteration.
    ToyDemo {
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn test_dump(features: cst_core::Matrix, truth: cst_core::data::GroundTruthTable) -> Result<BanditDataset> {
    let n = features.rows();
    let a = truth.num_actions();
    let outcomes = (0..n).map(|i| truth.label(i, 0)).collect();
    Ok(BanditDataset::new(
        features,
        vec![0; n],
        outcomes,
        a,
        2,
        Some(truth),
        None,
    )?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, seed, out } => {
            let cfg = config.load()?;
            std::fs::create_dir_all(&out).map_err(|source| HarnessError::Io {
                path: out.clone(),
                source,
            })?;
            for source in &cfg.datasets {
                let (train, tx, truth) = prepare_full(source, seed)?;
                let name = source.name();
                save_dataset(&out.join(format!("{name}_seed{seed}_train.csv")), &train)?;
                save_dataset(&out.join(format!("{name}_seed{seed}_test.csv")), &test_dump(tx, truth)?)?;
                log::info!("{name}: {} training rows", train.len());
            }
        }
        Command::Train {
            config,
            data,
            backbone,
            method,
            seed,
            out,
        } => {
            let cfg = config.load()?;
            let kind = BackboneKind::parse(&backbone)
                .ok_or_else(|| HarnessError::Config(format!("unknown backbone `{backbone}`")))?;
            let method =
                Method::parse(&method).ok_or_else(|| HarnessError::Config(format!("unknown method `{method}`")))?;
            let (train, validation) = match data {
                Some(path) => {
                    let d = load_dataset(&path)?;
                    if cfg.validation_fraction > 0.0 && matches!(cfg.lambda, LambdaChoice::Grid(_)) {
                        let (rest, held) = d.split(cfg.validation_fraction, &mut Prng::substream(seed, 1));
                        (rest, Some(held))
                    } else {
                        (d, None)
                    }
                }
                None => {
                    let p = prepare(&cfg.datasets[0], seed, cfg.validation_fraction)?;
                    (p.train, p.validation)
                }
            };
            let mut rng = Prng::substream(seed, 2);
            let trained = train_backbone(&train, &cfg.backbone_for(kind), &mut rng)?;
            let (model, lambda) = match method {
                Method::Backbone => (trained.model, 0.0),
                Method::Pl => {
                    let c = CstConfig {
                        lambda_cvat: 0.0,
                        ..cfg.cst.clone()
                    };
                    (cst_train(&trained.model, &train, &c, &mut rng)?.model, 0.0)
                }
                Method::PlCvat => match (&cfg.lambda, &validation) {
                    (LambdaChoice::Fixed(l), _) => {
                        let c = CstConfig {
                            lambda_cvat: *l,
                            ..cfg.cst.clone()
                        };
                        (cst_train(&trained.model, &train, &c, &mut rng)?.model, *l)
                    }
                    (LambdaChoice::Grid(g), Some(v)) => {
                        let sel = select_lambda(&trained.model, &train, v, g, &cfg.cst, &mut rng)?;
                        (sel.outcome.model, sel.lambda)
                    }
                    (LambdaChoice::Grid(_), None) => {
                        return Err(HarnessError::Config("lambda grid needs a validation split".into()))
                    }
                },
            };
            let meta = vec![
                ("backbone".to_string(), kind.name().to_string()),
                ("method".to_string(), method.name().to_string()),
                ("lambda".to_string(), lambda.to_string()),
                ("config_hash".to_string(), cfg.hash()),
            ];
            save_model(&out, &model, &meta)?;
            println!("saved {} {} model to {}", kind.name(), method.name(), out.display());
        }
        Command::Evaluate { model, data } => {
            let ckpt = load_model(&model)?;
            let d = load_dataset(&data)?;
            let truth = d
                .ground_truth
                .as_ref()
                .ok_or_else(|| HarnessError::Config(format!("{} has no ground-truth columns", data.display())))?;
            let m = evaluate(&ckpt.model, &d.features, truth)?;
            println!("nll,hamming,best_action_accuracy");
            println!("{},{},{}", m.nll, m.hamming, m.best_action_accuracy);
        }
        Command::Sweep { config, out } => {
            let cfg = config.load()?;
            let dir = out.unwrap_or_else(|| output_dir(&cfg));
            let results = run_experiment_in(&cfg, &dir)?;
            println!("dataset,backbone,method,nll,hamming");
            for r in &results.reports {
                println!(
                    "{},{},{},{:.4} ± {:.4},{:.4} ± {:.4}",
                    r.dataset, r.backbone, r.method, r.nll.mean, r.nll.stderr, r.hamming.mean, r.hamming.stderr
                );
            }
            println!("wrote {}", dir.display());
        }
        Command::ToyDemo {
            seeds,
            iterations,
            lambda,
            out,
        } => {
            let mut cfg = ToyConfig::default();
            if let Some(k) = iterations {
                cfg.cst.outer_iterations = k;
                cfg.snapshots = vec![0, 1, k];
            }
            if let Some(l) = lambda {
                cfg.cst.lambda_cvat = l;
            }
            let mut results = Vec::new();
            for &seed in &seeds {
                let r = run_toy(&cfg, seed)?;
                println!(
                    "seed {seed}: DM accuracy {:?} -> PL+CVAT {:?}",
                    r.backbone_accuracy, r.cst_accuracy
                );
                results.push(r);
            }
            write_toy_outputs(&out, &results)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
