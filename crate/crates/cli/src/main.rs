mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use masnn::config::RunConfig;
use masnn::Error;

/// Spiking-network attention toolkit: data generation, training, ablation,
/// energy profiling, isometry checks and spiking-response maps.
#[derive(Parser, Debug)]
#[command(name = "masnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Configuration file (sectioned key = value).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `run.out_dir`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// `section.key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic moving-bar event streams.
    SynthData(Common),
    /// Train with BPTT and save a checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on the validation set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out-dir>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every attention combination and placement; compare.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        grid: commands::Grid,
    },
    /// FLOP, energy and spiking-activity report.
    ProfileEnergy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Measured vs. closed-form Jacobian statistics.
    CheckIsometry(Common),
    /// Average spiking response heatmaps.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        layer: Option<String>,
        #[arg(long)]
        step: Option<usize>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::SynthData(c) | Command::Train(c) | Command::CheckIsometry(c) => c,
            Command::Eval { common, .. }
            | Command::Ablate { common, .. }
            | Command::ProfileEnergy { common, .. }
            | Command::Visualize { common, .. } => common,
        }
    }
}

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;

fn load_config(c: &Common) -> Result<RunConfig, String> {
    let mut overrides = c.set.clone();
    if let Some(seed) = c.seed {
        overrides.push(format!("run.seed={}", seed));
    }
    if let Some(dir) = &c.out_dir {
        overrides.push(format!("run.out_dir={}", dir.display()));
    }
    let origin = c
        .config
        .as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "<defaults>".into());
    let res = match &c.config {
        Some(path) => RunConfig::load(path, &overrides),
        None => RunConfig::from_text("", &overrides),
    };
    res.map_err(|e| match e {
        Error::ConfigLine { line: 0, message } => format!("override: {}", message),
        Error::ConfigLine { line, message } => format!("{}:{}: {}", origin, line, message),
        other => format!("{}: {}", origin, other),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let common = cli.command.common().clone();
    let cfg = match load_config(&common) {
        Ok(cfg) => cfg,
        Err(msg) => {
            eprintln!("invalid config: {}", msg);
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let ctx = commands::Ctx::new(cfg, common.quiet);
    let res = match cli.command {
        Command::SynthData(_) => commands::synth_data(&ctx),
        Command::Train(_) => commands::train(&ctx),
        Command::Eval { checkpoint, .. } => commands::eval(&ctx, checkpoint),
        Command::Ablate { grid, .. } => commands::ablate(&ctx, grid),
        Command::ProfileEnergy { checkpoint, .. } => commands::profile_energy(&ctx, checkpoint),
        Command::CheckIsometry(_) => commands::check_isometry(&ctx),
        Command::Visualize {
            checkpoint, layer, step, ..
        } => commands::visualize(&ctx, checkpoint, layer, step),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
