//! Command-line front end: facelift training, backward-scheme pricing,
//! reference prices, oracle dumps, and config validation. Results go to
//! `--out-dir` as CSV/JSON; progress goes to stderr.

mod config;
mod runner;

use clap::{Args, Parser, Subcommand};
use config::ExperimentConfig;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "facelift-bsde", version, about = "Constrained-BSDE pricing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config (defaults are used for missing fields).
    #[arg(long)]
    config: Option<String>,
    /// Base RNG seed; run i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of independent runs.
    #[arg(long)]
    runs: Option<usize>,
    /// Output directory for CSV/JSON artifacts.
    #[arg(long)]
    out_dir: Option<String>,
    /// Cap network sizes, iteration counts and sample counts at desk scale.
    #[arg(long, overrides_with = "full_scale")]
    desk_scale: bool,
    /// Remove the desk-scale caps.
    #[arg(long, overrides_with = "desk_scale")]
    full_scale: bool,
    /// Experiment id (see `validate` for the list).
    #[arg(long)]
    experiment: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a constrained network approximation of a facelifted payoff.
    Facelift(Common),
    /// Run the backward scheme and report the time-zero value.
    BsdePrice(Common),
    /// Closed-form and Monte-Carlo reference prices of the facelifted payoff.
    ReferencePrice(Common),
    /// Dump grid-oracle facelift values over the query box.
    OracleDump(Common),
    /// Resolve and validate a config without running anything.
    Validate(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Facelift(c)
            | Command::BsdePrice(c)
            | Command::ReferencePrice(c)
            | Command::OracleDump(c)
            | Command::Validate(c) => c,
        }
    }

    /// Experiment family implied by the subcommand, used when the config
    /// does not already name a member of that family.
    fn default_experiment(&self) -> Option<&'static str> {
        match self {
            Command::Facelift(_) => Some("facelift-case2"),
            Command::BsdePrice(_) => Some("bsde-price"),
            Command::ReferencePrice(_) => Some("reference-price"),
            Command::OracleDump(_) => Some("oracle-dump"),
            Command::Validate(_) => None,
        }
    }

    fn matches_family(&self, experiment: &str) -> bool {
        match self {
            Command::Facelift(_) => experiment.starts_with("facelift-"),
            Command::BsdePrice(_) => experiment == "bsde-price",
            Command::ReferencePrice(_) => experiment == "reference-price",
            Command::OracleDump(_) => experiment == "oracle-dump",
            Command::Validate(_) => true,
        }
    }
}

fn build_config(cmd: &Command) -> Result<ExperimentConfig, String> {
    let common = cmd.common();
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| e.to_string())?,
        None => ExperimentConfig::default(),
    };
    if let Some(e) = &common.experiment {
        cfg.experiment = e.clone();
    } else if let Some(def) = cmd.default_experiment() {
        if !cmd.matches_family(&cfg.experiment) {
            cfg.experiment = def.into();
        }
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(r) = common.runs {
        cfg.n_runs = r;
    }
    if let Some(d) = &common.out_dir {
        cfg.out_dir = d.clone();
    }
    if common.desk_scale {
        cfg.desk_scale = true;
    }
    if common.full_scale {
        cfg.desk_scale = false;
    }
    cfg.resolve();
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match build_config(&cli.command) {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("config error: {msg}");
            return ExitCode::from(2);
        }
    };

    let diagnostics = cfg.diagnostics();
    if let Command::Validate(_) = cli.command {
        match serde_json::to_string_pretty(&cfg) {
            Ok(json) => println!("{json}"),
            Err(e) => {
                eprintln!("failed to serialize config: {e}");
                return ExitCode::from(1);
            }
        }
        return if diagnostics.is_empty() {
            eprintln!("config ok");
            ExitCode::SUCCESS
        } else {
            for d in &diagnostics {
                eprintln!("invalid: {d}");
            }
            ExitCode::from(2)
        };
    }
    if !diagnostics.is_empty() {
        for d in &diagnostics {
            eprintln!("invalid: {d}");
        }
        return ExitCode::from(2);
    }

    match runner::run(&cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
