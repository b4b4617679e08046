use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use svead_core::data::load_csv;
use svead_core::experiment::{
    emit_report, explain_ice, explain_pip, explain_shap, ExperimentConfig, Pipeline, RunOptions,
};
use svead_core::explain::{ice_file_name, write_ice_csv, write_pip_csv, write_shap_csv};
use svead_core::Error;

#[derive(Parser)]
#[command(name = "svead", version, about = "Explainable anomaly detection on imbalanced tabular data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every grid entry of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `output_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed (overrides `seed` in the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Explain a saved pipeline on a CSV file.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        /// Feature for ICE curves.
        #[arg(long)]
        feature: Option<String>,
        /// Number of leading rows to explain (SHAP and ICE).
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the metrics table of a finished run.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Shap,
    Pip,
    Ice,
}

enum Failure {
    Error(Error),
    RunsFailed(Vec<String>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn run(config: &Path, out: Option<PathBuf>, seed: Option<u64>, jobs: Option<usize>) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::from_file(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = out
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config { path: "output_dir".into(), message: "pass --out or set output_dir".into() })?;
    let bundle = svead_core::experiment::run_experiment(&cfg, RunOptions { jobs })?;
    emit_report(&bundle, &out)?;
    println!("wrote {}", out.join("metrics.csv").display());
    let failed = bundle.failed_runs();
    if failed.is_empty() {
        Ok(())
    } else {
        for name in &failed {
            if let Some(Err(msg)) = bundle.runs.get(*name) {
                eprintln!("run failed: {msg}");
            }
        }
        Err(Failure::RunsFailed(failed.iter().map(|s| s.to_string()).collect()))
    }
}

fn explain(
    model: &Path,
    data: &Path,
    out: &Path,
    method: Method,
    feature: Option<String>,
    rows: Option<usize>,
    seed: u64,
) -> Result<(), Failure> {
    let pipeline = Pipeline::load(model)?;
    let mut ds = load_csv(data, &pipeline.label_column)?;
    if ds.feature_names() != pipeline.feature_names.as_slice() {
        return Err(Error::InvalidDataset(format!(
            "columns {:?} do not match the model's features {:?}",
            ds.feature_names(),
            pipeline.feature_names
        ))
        .into());
    }
    std::fs::create_dir_all(out).map_err(Error::from)?;
    let path = match method {
        Method::Shap => {
            let n = rows.unwrap_or(pipeline.explain_options.rows).min(ds.n_rows());
            let idx: Vec<usize> = (0..n).collect();
            let atts = explain_shap(&pipeline, &ds, &idx, &pipeline.default_background()?, seed)?;
            let path = out.join("shap.csv");
            write_shap_csv(&path, &atts, &pipeline.feature_names)?;
            path
        }
        Method::Pip => {
            let ranking = explain_pip(&pipeline, &ds, seed)?;
            let path = out.join("pip.csv");
            write_pip_csv(&path, &ranking)?;
            path
        }
        Method::Ice => {
            let feature = feature.ok_or_else(|| Error::Config {
                path: "--feature".into(),
                message: "ICE needs --feature <name>".into(),
            })?;
            if let Some(n) = rows {
                let idx: Vec<usize> = (0..n.min(ds.n_rows())).collect();
                ds = ds.subset(&idx);
            }
            let ice = explain_ice(&pipeline, &ds, &feature)?;
            let path = out.join(ice_file_name(&feature));
            write_ice_csv(&path, &ice)?;
            path
        }
    };
    println!("wrote {}", path.display());
    Ok(())
}

fn report(input: &Path) -> Result<(), Failure> {
    let path = input.join("metrics.csv");
    if !path.exists() {
        return Err(Error::MissingFile(path).into());
    }
    print!("{}", std::fs::read_to_string(&path).map_err(Error::from)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run { config, out, seed, jobs } => run(&config, out, seed, jobs),
        Command::Explain { model, data, out, method, feature, rows, seed } => {
            explain(&model, &data, &out, method, feature, rows, seed)
        }
        Command::Report { input } => report(&input),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::RunsFailed(names)) => {
            eprintln!("{} run(s) failed: {}", names.len(), names.join(", "));
            ExitCode::from(3)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 1 })
        }
    }
}
