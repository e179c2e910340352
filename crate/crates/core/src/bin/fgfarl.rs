//! `fgfarl` command-line entry point.
//!
//! Exit codes: 0 success, 1 configuration error, 2 stage failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fgfarl::cli::commands;
use fgfarl::cli::config::{parse_override, read_config_file, RawConfig, RunConfig};
use fgfarl::Error;

#[derive(Debug, Parser)]
#[command(name = "fgfarl", version, about = "Group-calibrated safe offline policy learning and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Overrides {
    /// Key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    min_group_n: Option<usize>,
    /// One of coverage, harm, global.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    attribute: Option<String>,
    /// Rescale rewards to [-1, 0] before policy learning and evaluation.
    #[arg(long)]
    reward_norm: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    run_label: Option<String>,
    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn into_config(self) -> fgfarl::Result<RunConfig> {
        let mut raw: RawConfig = match &self.config {
            Some(p) => read_config_file(p)?,
            None => RawConfig::new(),
        };
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                raw.insert(k.to_string(), v);
            }
        };
        put("calibrate.alpha", self.alpha.map(|v| v.to_string()));
        put("calibrate.epsilon", self.epsilon.map(|v| v.to_string()));
        put("calibrate.min_group_n", self.min_group_n.map(|v| v.to_string()));
        put("calibrate.mode", self.mode);
        put("calibrate.attribute", self.attribute);
        put("reward_norm", self.reward_norm.then(|| "true".to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("out_dir", self.out_dir.map(|p| p.display().to_string()));
        put("run_label", self.run_label);
        for s in &self.set {
            let (k, v) = parse_override(s)?;
            raw.insert(k, v);
        }
        RunConfig::from_raw(&raw)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its ground-truth sidecar.
    Synth {
        #[command(flatten)]
        overrides: Overrides,
        /// Output JSONL path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline once.
    Run {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the pipeline over an alpha by epsilon grid.
    Sweep {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.02")]
        epsilons: Vec<f64>,
    },
    /// Rebuild summary and plot data from a finished run directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn execute(command: Command) -> fgfarl::Result<()> {
    match command {
        Command::Synth { overrides, out } => {
            let cfg = overrides.into_config()?;
            let sidecar = commands::cmd_synth(&cfg, &out)?;
            println!("wrote {} and {}", out.display(), sidecar.display());
        }
        Command::Run { overrides } => {
            let cfg = overrides.into_config()?;
            let outcome = commands::cmd_run(&cfg)?;
            println!("{}", outcome.dir.display());
        }
        Command::Sweep {
            overrides,
            alphas,
            epsilons,
        } => {
            let cfg = overrides.into_config()?;
            let outcome = commands::cmd_sweep(&cfg, &alphas, &epsilons)?;
            println!("{}", outcome.dir.display());
            if !outcome.failures.is_empty() {
                return Err(Error::Stage {
                    stage: "sweep",
                    source: Box::new(Error::Config(format!(
                        "{} of {} grid points failed",
                        outcome.failures.len(),
                        alphas.len() * epsilons.len()
                    ))),
                });
            }
        }
        Command::Report { dir } => {
            commands::cmd_report(&dir)?;
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
