use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mbmpc::cli::{
    benchmark_cases, cmd_benchmark, cmd_oracle_compare, cmd_simulate, cmd_validate_terminal,
};
use mbmpc::config::ExperimentConfig;
use mbmpc::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mbmpc",
    version,
    about = "Suboptimal move-blocking MPC experiments on the Van der Pol oscillator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Experiment preset t0..t6 (applied before the config file's overrides).
    #[arg(long)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Number of closed-loop steps (overrides `sim.steps`).
    #[arg(long)]
    steps: Option<usize>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Assert that the run uses no randomness. Every computation is
    /// deterministic, so this only documents the guarantee.
    #[arg(long)]
    seedless: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed loop and write its trajectory, open-loop prediction and audit.
    Simulate(Common),
    /// Certify the terminal set (exit 0 iff every check passes).
    ValidateTerminal(Common),
    /// Time cold-started open-loop solves for M in {2, 16, N} with and without offset.
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        repetitions: usize,
    },
    /// Compare the solver with an exhaustive grid on a small problem (exit 0 iff within the cell bound).
    OracleCompare {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 21)]
        grid: usize,
    },
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            match &common.preset {
                Some(p) => ExperimentConfig::parse(&format!("preset = {p}\n{text}"))?,
                None => ExperimentConfig::parse(&text)?,
            }
        }
        None => match &common.preset {
            Some(p) => ExperimentConfig::preset(p)?,
            None => ExperimentConfig::default(),
        },
    };
    if let Some(steps) = common.steps {
        config.steps = steps;
    }
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not KEY=VALUE")))?;
        config.set(k, v)?;
    }
    config.validate()?;
    Ok(config)
}

fn write_out(common: &Common, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(&common.out)?;
    std::fs::write(common.out.join(name), text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate(common) => {
            let config = resolve(&common)?;
            let report = cmd_simulate(&config, &common.out)?;
            print!("{report}");
            for f in &report.files {
                println!("wrote {}", f.display());
            }
            Ok(report.log.is_complete())
        }
        Command::ValidateTerminal(common) => {
            let config = resolve(&common)?;
            let report = cmd_validate_terminal(&config)?;
            let text = report.to_string();
            print!("{text}");
            write_out(&common, "config.txt", &config.to_string())?;
            write_out(&common, "certificate.txt", &text)?;
            Ok(report.pass())
        }
        Command::Benchmark {
            common,
            repetitions,
        } => {
            let config = resolve(&common)?;
            write_out(&common, "config.txt", &config.to_string())?;
            let table = cmd_benchmark(&config, &benchmark_cases(config.horizon), repetitions)?;
            print!("{table}");
            table.write_csv(std::fs::File::create(common.out.join("benchmark.csv"))?)?;
            Ok(true)
        }
        Command::OracleCompare { common, grid } => {
            let config = resolve(&common)?;
            write_out(&common, "config.txt", &config.to_string())?;
            let report = cmd_oracle_compare(&config, grid)?;
            let text = report.to_string();
            print!("{text}");
            write_out(&common, "oracle.txt", &text)?;
            Ok(report.pass)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
