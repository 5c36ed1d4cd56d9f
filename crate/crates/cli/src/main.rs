use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mfkrig::{Fidelity, PredictMode};
use mfkrig_cli::benchmark::{run_benchmark, summarize, REPORTED_LEVELS};
use mfkrig_cli::commands::{fit_cmd, predict_cmd, threads_from_env};
use mfkrig_cli::config::{read_json, BenchmarkConfig};
use mfkrig_cli::CliError;

#[derive(Parser)]
#[command(
    name = "mfkrig",
    version,
    about = "Multi-fidelity kriging with noisy, non-nested data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Level {
    Lf,
    Hf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Latent,
    Noisy,
}

#[derive(Subcommand)]
enum Command {
    /// Run a replicated benchmark campaign and write a results table.
    Bench {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fit a multi-fidelity model to LF and HF training data.
    Fit {
        #[arg(long)]
        lf: PathBuf,
        #[arg(long)]
        hf: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict with a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long, value_enum)]
        level: Level,
        #[arg(long, value_enum, default_value = "latent")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = threads_from_env()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Bench { config } => {
            let config: BenchmarkConfig = read_json(&config)?;
            let rows = run_benchmark(&config, std::io::stdout().lock())?;
            if config.output_path.is_some() {
                for &model in &config.models {
                    let s = summarize(&rows, model);
                    println!(
                        "{:8} ok={} failed={} median(1-Q2)={:.4e} mean CICP{:?}={:.3?} mean PICP={:.3?}",
                        s.model_name,
                        s.n_ok,
                        s.n_failed,
                        s.median_one_minus_q2,
                        REPORTED_LEVELS,
                        s.mean_cicp,
                        s.mean_picp
                    );
                }
            }
        }
        Command::Fit { lf, hf, config, out } => {
            fit_cmd(&lf, &hf, &config, &out)?;
        }
        Command::Predict {
            model,
            inputs,
            level,
            mode,
            out,
        } => {
            let level = match level {
                Level::Lf => Fidelity::Low,
                Level::Hf => Fidelity::High,
            };
            let mode = match mode {
                Mode::Latent => PredictMode::Latent,
                Mode::Noisy => PredictMode::Noisy,
            };
            predict_cmd(&model, &inputs, level, mode, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
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
