use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use miseg::infomax::mutual_information;
use miseg_cli::{
    cmd_eval, cmd_gen_data, cmd_toy, cmd_train, cmd_verify, verify_outcome, CliError, CliResult, ExperimentConfig,
    SplitName, TrainArgs,
};

/// Mutual-information regularized segmentation on synthetic pseudo-volumes.
///
/// Set MISEG_LOG (error, warn, info, debug, trace) to change verbosity.
#[derive(Parser, Debug)]
#[command(name = "miseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset and write the split cache.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured method.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Split cache written by gen-data.
        #[arg(long, conflicts_with = "generate")]
        data: Option<PathBuf>,
        /// Render the dataset in memory instead of reading a cache.
        #[arg(long)]
        generate: bool,
        /// Continue from the last checkpoint in --out.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs in total.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Per-volume Dice of a checkpoint on a cached split.
    Eval {
        /// Checkpoint base path, e.g. run/best.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "validation")]
        split: String,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cluster random 3-D points by maximizing mutual information.
    Toy {
        /// Reads the [toy] table; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the gradient and mutual-information property suite.
    Verify {
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default configuration.
    Defaults,
}

fn write_or_print(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|source| CliError::Io {
                    path: parent.to_path_buf(),
                    source,
                })?;
            }
            fs::write(path, text).map_err(|source| CliError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let m = cmd_gen_data(&cfg, &out)?;
            log::info!(
                "wrote {} labeled, {} unlabeled and {} validation slices to {}",
                m.labeled,
                m.unlabeled,
                m.validation,
                out.display()
            );
        }
        Command::Train {
            config,
            out,
            data,
            generate,
            resume,
            stop_after,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let args = TrainArgs {
                data,
                generate,
                resume,
                stop_after,
            };
            let report = cmd_train(&cfg, &out, &args)?;
            log::info!(
                "{}: best mean Dice {:.4} at epoch {:?}, {:.1}s",
                report.config.method,
                report.best_mean_dice,
                report.best_epoch,
                report.wall_clock_secs
            );
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => {
            let which: SplitName = split.parse()?;
            write_or_print(out.as_deref(), &cmd_eval(&checkpoint, &data, which)?)?;
        }
        Command::Toy { config, out } => {
            let cfg = match config {
                Some(path) => ExperimentConfig::load(&path)?.toy,
                None => ExperimentConfig::default().toy,
            };
            let report = cmd_toy(&cfg)?;
            log::info!(
                "final MI {:.4}, diagonal mass {:.4}, cluster sizes {:?}",
                report.final_mi,
                report.diagonal_mass,
                report.cluster_sizes
            );
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            write_or_print(out.as_deref(), &(json + "\n"))?;
        }
        Command::Verify { out } => {
            let report = cmd_verify(mutual_information)?;
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if let Some(path) = out {
                let json = serde_json::to_string_pretty(&report).expect("report serializes");
                write_or_print(Some(&path), &(json + "\n"))?;
            }
            verify_outcome(&report)?;
        }
        Command::Defaults => print!("{}", ExperimentConfig::default().to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MISEG_LOG", "info")).init();
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
