use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rcrl_harness::config::{load_environment, ExperimentConfig};
use rcrl_harness::validation::{run_validation, CheckKind, ValidationSuite};
use rcrl_harness::{describe, output, run_experiment, HarnessError, Result};

#[derive(Parser)]
#[command(name = "rcrl", version, about = "Cautious tabular RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train agents as a config describes and write CSV/JSON outputs.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// `key=value`, applied to the config before validation.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle checks; the default suite when no file is given.
    Validate {
        #[arg(long)]
        suite: Option<PathBuf>,
        /// Restrict to these checks.
        #[arg(long, value_enum)]
        only: Vec<Check>,
        /// Also write the report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Rewrite the CSV files from a summary.json.
    Export {
        #[arg(long)]
        summary: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print facts about a shipped or custom layout.
    DescribeEnv {
        /// `bridgecross`, `bridgecross_diagonal`, `pacman` or a layout file.
        #[arg(long)]
        layout: String,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Check {
    Gradient,
    Matrix,
    Exact,
    Moments,
    Coverage,
    Theorem1,
}

impl From<Check> for CheckKind {
    fn from(c: Check) -> Self {
        match c {
            Check::Gradient => CheckKind::Gradient,
            Check::Matrix => CheckKind::Matrix,
            Check::Exact => CheckKind::Exact,
            Check::Moments => CheckKind::Moments,
            Check::Coverage => CheckKind::Coverage,
            Check::Theorem1 => CheckKind::Theorem1,
        }
    }
}

fn read(path: &PathBuf) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.clone(),
        source,
    })
}

fn execute(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run { config, overrides, out } => {
            let config = ExperimentConfig::load(&config, &overrides)?;
            let summary = run_experiment(&config)?;
            for path in output::export(&summary, &out)? {
                eprintln!("wrote {}", path.display());
            }
            let agg = &summary.aggregate;
            println!(
                "{}: {} repeats, mean successes {:.1}, mean failures {:.1}, mean timeouts {:.1}",
                config.name, agg.repeats, agg.mean_successes, agg.mean_failures, agg.mean_timeouts
            );
        }
        Command::Validate { suite, only, report } => {
            let mut suite = match suite {
                Some(path) => ValidationSuite::parse(&read(&path)?)?,
                None => ValidationSuite::default(),
            };
            if !only.is_empty() {
                let kinds: Vec<CheckKind> = only.into_iter().map(Into::into).collect();
                suite = suite.only(&kinds);
            }
            let result = run_validation(&suite)?;
            for check in &result.checks {
                println!("{}", check.line());
            }
            if let Some(path) = report {
                std::fs::write(&path, serde_json::to_string_pretty(&result)?)
                    .map_err(|source| HarnessError::Io { path, source })?;
            }
            if !result.passed {
                let names: Vec<String> = result.failures().map(|c| format!("{:?}", c.check)).collect();
                eprintln!("failed checks: {}", names.join(", "));
                return Ok(ExitCode::from(1));
            }
        }
        Command::Export { summary, out } => {
            let summary = output::read_summary(&summary)?;
            for path in output::export(&summary, &out)? {
                eprintln!("wrote {}", path.display());
            }
        }
        Command::DescribeEnv { layout } => {
            let env = load_environment(&layout)?;
            println!("{}", serde_json::to_string_pretty(&describe::describe(&env))?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
