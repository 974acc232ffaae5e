use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sparsecast::sparsity::{default_local_window, PatternKind, PatternSpec};
use sparsecast::trainer::EvalMode;
use sparsecast_cli::{
    eval_command, export_attention_command, forecast_command, mask_report, parse_pair, run_experiment, synth,
    train_command, CliError, CliResult, ExperimentConfig, MaskOptions, Overrides,
};

#[derive(Parser)]
#[command(name = "sparsecast", version, about = "Sparse-attention probabilistic forecasting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark as CSV.
    Synth(ExperimentArgs),
    /// Train a model and write its checkpoint and training curve.
    Train(ExperimentArgs),
    /// Sample forecasts from a trained model.
    Forecast(ExperimentArgs),
    /// Quantile-loss evaluation of a trained model and the seasonal-naive reference.
    Eval(ExperimentArgs),
    /// Train, evaluate and forecast.
    Run(ExperimentArgs),
    /// Write per-layer, per-head attention matrices for one test window.
    ExportAttention(ExperimentArgs),
    /// Memory, coverage and path-count analysis of an attention pattern.
    Mask(MaskArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    pattern: Option<PatternKind>,
    #[arg(long)]
    kernel_size: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    mode: Option<EvalMode>,
    #[arg(long)]
    samples: Option<usize>,
}

impl ExperimentArgs {
    fn load(&self) -> CliResult<ExperimentConfig> {
        let mut config = ExperimentConfig::load(&self.config)?;
        config.apply(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            pattern: self.pattern,
            kernel_size: self.kernel_size,
            layers: self.layers,
            mode: self.mode,
            samples: self.samples,
        });
        Ok(config)
    }
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long, default_value = "logsparse")]
    pattern: PatternKind,
    #[arg(long, short = 'L')]
    length: usize,
    /// Subsequence length for restart patterns.
    #[arg(long)]
    sub: Option<usize>,
    /// Local window; defaults to ⌈log₂ sub⌉ for restart-local and 3 otherwise.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    no_densify: bool,
    /// Hide earlier subsequences from restart patterns.
    #[arg(long)]
    isolated: bool,
    /// Check full coverage after ⌊log₂ L⌋ + 1 layers.
    #[arg(long)]
    verify_coverage: bool,
    /// Count paths for `j:l` pairs (repeatable).
    #[arg(long = "paths", value_parser = parse_pair)]
    paths: Vec<(usize, usize)>,
    /// Layers for path counts (default ⌊log₂ L⌋ + 1).
    #[arg(long)]
    layers: Option<usize>,
    /// Write the dense 0/1 mask here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write `l,j` pairs of allowed cells here.
    #[arg(long)]
    coordinates: Option<PathBuf>,
}

impl MaskArgs {
    fn spec(&self) -> CliResult<PatternSpec> {
        let need_sub = || {
            self.sub
                .ok_or_else(|| CliError::Config(format!("pattern {} needs --sub", self.pattern)))
        };
        let mut spec = match self.pattern {
            PatternKind::FullCausal => PatternSpec::full(),
            PatternKind::LogSparse => PatternSpec::log_sparse(),
            PatternKind::LogSparseLocal => PatternSpec::local(self.window.unwrap_or(3)),
            PatternKind::LogSparseRestart => PatternSpec::restart(need_sub()?),
            PatternKind::LogSparseRestartLocal => {
                let sub = need_sub()?;
                PatternSpec::restart_local(sub, self.window.unwrap_or_else(|| default_local_window(sub)))
            }
        };
        if self.no_densify {
            spec = spec.without_densify();
        }
        if self.isolated {
            spec = spec.isolated_subsequences();
        }
        Ok(spec)
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => {
            let out = synth(&a.load()?)?;
            println!("wrote {}", out.join("synthetic.csv").display());
        }
        Command::Train(a) => {
            let r = train_command(&a.load()?)?;
            println!(
                "trained {} steps over {} epochs; best val nll {:.6} (epoch {})",
                r.steps,
                r.epochs,
                r.best_val_nll,
                r.best_epoch + 1
            );
        }
        Command::Forecast(a) => {
            println!("wrote {}", forecast_command(&a.load()?)?.display());
        }
        Command::Eval(a) => {
            let (model, naive) = eval_command(&a.load()?)?;
            println!("model    R0.5 {:.6}  R0.9 {:.6}", model.r50, model.r90);
            println!("baseline R0.5 {:.6}  R0.9 {:.6}", naive.r50, naive.r90);
        }
        Command::Run(a) => {
            let config = a.load()?;
            let out = run_experiment(&config)?;
            println!("artifacts in {}", out.display());
        }
        Command::ExportAttention(a) => {
            let files = export_attention_command(&a.load()?)?;
            println!("wrote {} attention matrices", files.len());
        }
        Command::Mask(a) => {
            let options = MaskOptions {
                length: a.length,
                verify_coverage: a.verify_coverage,
                paths: a.paths.clone(),
                layers: a.layers,
                dense_csv: a.csv.clone(),
                coordinate_csv: a.coordinates.clone(),
            };
            let report = mask_report(&a.spec()?, &options)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?);
            if let Some(c) = &report.coverage {
                println!("{}", c.message);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
