//! Command-line harness: run experiments, generate datasets, train and
//! evaluate the gain-estimation network, and summarize result files.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on
//! runtime failures.

use clap::{Args, Parser, Subcommand, ValueEnum};
use mimosim::experiment::{
    append_failure_marker, percentile_table, read_csv, run_experiment, ExperimentError,
    ExperimentSpecFile, Metric,
};
use mimosim::mlp::{
    baseline_mae, generate_dataset, load_dataset, load_model, model_mae, save_dataset, save_model,
    train, TrainOptions, DEFAULT_HIDDEN,
};
use mimosim::precoding::Scheme;
use mimosim::scenario::FadingMode;
use std::path::PathBuf;
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(
    name = "mimosim",
    about = "Link-level multi-cell massive MIMO downlink simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Mr,
    MrInst,
    Zf,
}

impl From<SchemeArg> for Scheme {
    fn from(v: SchemeArg) -> Scheme {
        match v {
            SchemeArg::Mr => Scheme::Mr,
            SchemeArg::MrInst => Scheme::MrInstant,
            SchemeArg::Zf => Scheme::Zf,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FadingArg {
    Correlated,
    Uncorrelated,
}

#[derive(Args)]
struct CommonOverrides {
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread count (defaults to the number of cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config and write result CSVs.
    Run {
        /// Experiment config file ([network] and [experiment] tables).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for results.csv.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Precoding scheme override.
        #[arg(long)]
        scheme: Option<SchemeArg>,
        /// Fading model override.
        #[arg(long)]
        fading: Option<FadingArg>,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Generate a labeled dataset for the data-driven estimator.
    GenData {
        /// Dataset config file ([network] and [dataset] tables).
        #[arg(long)]
        config: PathBuf,
        /// Output dataset file (columnar text).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Train the estimator network on a dataset file.
    Train {
        /// Dataset produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
        /// Adam learning rate.
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        /// Mini-batch size.
        #[arg(long, default_value_t = 128)]
        batch: usize,
        /// Training epochs.
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Report test MAE of a trained model against the hardening baseline.
    EvalModel {
        /// Model file produced by train.
        #[arg(long)]
        model: PathBuf,
        /// Dataset file with the held-out test split.
        #[arg(long)]
        data: PathBuf,
    },
    /// Print percentile tables from a result CSV.
    Report {
        /// results.csv produced by run.
        #[arg(long)]
        results: PathBuf,
    },
}

/// Dataset generation config: reuses the [network] table.
#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    #[serde(default)]
    network: mimosim::scenario::NetworkConfigSpec,
    dataset: DatasetTable,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetTable {
    n_large_scale: usize,
    n_small_scale: usize,
    #[serde(default = "default_scheme")]
    scheme: Scheme,
    #[serde(default)]
    seed: u64,
}

fn default_scheme() -> Scheme {
    Scheme::Mr
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version to stdout with success status
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(EXIT_CONFIG);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

enum CliError {
    Config(String),
    Runtime(String),
}

fn config_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn with_threads<T>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError>
where
    T: Send,
{
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(runtime_err)?;
            Ok(pool.install(f))
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            out,
            scheme,
            fading,
            common,
        } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| CliError::Config(format!("{}: {e}", config.display())))?;
            let mut file = ExperimentSpecFile::parse(&text).map_err(config_err)?;
            if let Some(f) = fading {
                file.network.fading_mode = match f {
                    FadingArg::Correlated => FadingMode::Correlated,
                    FadingArg::Uncorrelated => FadingMode::Uncorrelated,
                };
            }
            let mut spec = file.resolve().map_err(config_err)?;
            if let Some(s) = scheme {
                spec.scheme = s.into();
            }
            if let Some(seed) = common.seed {
                spec.seed = seed;
            }
            spec.validate().map_err(config_err)?;
            std::fs::create_dir_all(&out).map_err(runtime_err)?;
            let csv_path = out.join("results.csv");
            let outcome = with_threads(common.threads, || run_experiment(&spec))?;
            match outcome {
                Ok(result) => {
                    mimosim::experiment::write_csv(&result.records, &csv_path)
                        .map_err(runtime_err)?;
                    println!(
                        "wrote {} records to {} (seed {}, {:.1} s)",
                        result.records.len(),
                        csv_path.display(),
                        result.seed,
                        result.runtime_secs
                    );
                    Ok(())
                }
                Err(ExperimentError::Partial {
                    failed,
                    total,
                    message,
                    records,
                }) => {
                    mimosim::experiment::write_csv(&records, &csv_path).map_err(runtime_err)?;
                    append_failure_marker(&csv_path, &message).map_err(runtime_err)?;
                    Err(CliError::Runtime(format!(
                        "{failed} of {total} scenarios failed ({message}); partial results in {}",
                        csv_path.display()
                    )))
                }
                Err(e @ (ExperimentError::SpecInvalid(_) | ExperimentError::ModelNotLoaded(_))) => {
                    Err(config_err(e))
                }
                Err(e) => Err(runtime_err(e)),
            }
        }
        Command::GenData {
            config,
            out,
            common,
        } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| CliError::Config(format!("{}: {e}", config.display())))?;
            let file: DatasetFile = toml::from_str(&text).map_err(config_err)?;
            let cfg = file.network.resolve().map_err(config_err)?;
            let seed = common.seed.unwrap_or(file.dataset.seed);
            let ds = with_threads(common.threads, || {
                generate_dataset(
                    &cfg,
                    file.dataset.n_large_scale,
                    file.dataset.n_small_scale,
                    file.dataset.scheme,
                    seed,
                )
            })?
            .map_err(runtime_err)?;
            save_dataset(&ds, &out).map_err(runtime_err)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
            Ok(())
        }
        Command::Train {
            data,
            out,
            lr,
            batch,
            epochs,
            common,
        } => {
            let ds = load_dataset(&data).map_err(config_err)?;
            let opts = TrainOptions {
                learning_rate: lr,
                batch_size: batch,
                epochs,
                seed: common.seed.unwrap_or(0),
                ..Default::default()
            };
            let (model, history) = with_threads(common.threads, || {
                train(&ds, &DEFAULT_HIDDEN, &opts)
            })?
            .map_err(runtime_err)?;
            save_model(&model, &out).map_err(runtime_err)?;
            println!(
                "trained {} epochs ({} parameters); best validation MAE {:.6e} at epoch {}; model in {}",
                opts.epochs,
                model.num_parameters(),
                model.meta.best_val_mae,
                history.best_epoch,
                out.display()
            );
            Ok(())
        }
        Command::EvalModel { model, data } => {
            let model = load_model(&model).map_err(config_err)?;
            let ds = load_dataset(&data).map_err(config_err)?;
            let split = ds.split();
            let mae = model_mae(&model, &ds, split.test.clone());
            let base = baseline_mae(&ds, split.test.clone());
            println!("test samples: {}", split.test.len());
            println!("model test MAE:     {mae:.6e}");
            println!("hardening-mean MAE: {base:.6e}");
            println!(
                "improvement: {:.1}%",
                100.0 * (1.0 - mae / base)
            );
            Ok(())
        }
        Command::Report { results } => {
            let records = read_csv(&results).map_err(config_err)?;
            for (metric, label) in [(Metric::Nmse, "NMSE"), (Metric::SeBits, "SE [bit/s/Hz]")] {
                println!("{label} percentiles (5/25/50/75/95):");
                for (name, row) in percentile_table(&records, metric) {
                    println!(
                        "  {name:<20} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e}",
                        row[0], row[1], row[2], row[3], row[4]
                    );
                }
            }
            Ok(())
        }
    }
}
