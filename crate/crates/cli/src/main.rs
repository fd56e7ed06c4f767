use std::path::PathBuf;
use std::process::ExitCode;

use cgnet::perf::ArrayConfig;
use cgnet_cli::{
    cmd_analyze, cmd_eval, cmd_perf, cmd_train, configure_threads, ExperimentConfig, GateOptions, Precision,
    Result, RunOptions,
};
use clap::{Args, Parser, Subcommand};

/// Channel gating experiments.
#[derive(Parser)]
#[command(name = "cg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Single worker thread; outputs are bitwise reproducible.
    #[arg(long)]
    deterministic: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Gates {
    /// Checkpoint written by `cg train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sets every gate threshold to this value (e.g. -1e6 opens every gate).
    #[arg(long, allow_hyphen_values = true)]
    delta_override: Option<f64>,
    /// Shifts all thresholds to reach this FLOP reduction on the evaluated samples.
    #[arg(long)]
    target_flop_reduction: Option<f64>,
    /// Evaluates the dense network with every gated convolution reassembled.
    #[arg(long)]
    dense: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write checkpoint.cgn, metrics.csv and train.json.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy and cost report on the validation set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        gates: Gates,
    },
    /// Intensity maps, partial/final-sum correlation and weight-access sweep.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        gates: Gates,
    },
    /// Modeled systolic-array speedup.
    Perf {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        gates: Gates,
        /// Array rows; defaults to the config.
        #[arg(long)]
        rows: Option<usize>,
        /// Array columns; defaults to the config.
        #[arg(long)]
        cols: Option<usize>,
    },
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, RunOptions)> {
        configure_threads(self.deterministic)?;
        let cfg = ExperimentConfig::load(&self.config)?;
        let opts = RunOptions {
            seed: self.seed,
            deterministic: self.deterministic,
            out: self.out.clone(),
        };
        Ok((cfg, opts))
    }
}

impl Gates {
    fn options(&self) -> GateOptions {
        GateOptions {
            delta_override: self.delta_override,
            target_flop_reduction: self.target_flop_reduction,
            dense: self.dense,
        }
    }
}

macro_rules! dispatch {
    ($cfg:expr, $f:ident($($arg:expr),*)) => {
        match $cfg.dtype {
            Precision::F32 => serde_json::to_string_pretty(&$f::<f32>($($arg),*)?),
            Precision::F64 => serde_json::to_string_pretty(&$f::<f64>($($arg),*)?),
        }
    };
}

fn run(cli: Cli) -> Result<String> {
    let json = match &cli.command {
        Command::Train { common } => {
            let (cfg, opts) = common.load()?;
            dispatch!(cfg, cmd_train(&cfg, &opts))
        }
        Command::Eval { common, gates } => {
            let (cfg, opts) = common.load()?;
            dispatch!(cfg, cmd_eval(&cfg, &gates.checkpoint, &gates.options(), &opts))
        }
        Command::Analyze { common, gates } => {
            let (cfg, opts) = common.load()?;
            dispatch!(cfg, cmd_analyze(&cfg, &gates.checkpoint, &gates.options(), &opts))
        }
        Command::Perf {
            common,
            gates,
            rows,
            cols,
        } => {
            let (cfg, opts) = common.load()?;
            let array = ArrayConfig {
                rows: rows.unwrap_or(cfg.array.rows),
                cols: cols.unwrap_or(cfg.array.cols),
                ..cfg.array
            };
            dispatch!(cfg, cmd_perf(&cfg, &gates.checkpoint, &gates.options(), &array, &opts))
        }
    };
    Ok(json.expect("outcomes serialize"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
