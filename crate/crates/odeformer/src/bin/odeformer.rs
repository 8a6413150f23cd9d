use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use odeformer::commands::{self, Split};
use odeformer::{Error, Pool, Result, RunConfig};

#[derive(Parser)]
#[command(name = "odeformer", version, about = "Continuous-time MIMO-OFDM channel prediction with ODE-Former")]
struct Cli {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set scene.speed=20`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0, global = true)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate dataset files for the configured splits.
    GenData {
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Train a model and write its checkpoint and loss history.
    Train,
    /// Score predictors on the test split.
    Eval {
        /// Predictor to score (hold, linear, ode_former). Repeatable;
        /// defaults to `eval.predictors`.
        #[arg(long = "predictor")]
        predictors: Vec<String>,
    },
    /// Predict one channel matrix and print it as JSON.
    Predict {
        /// Dataset file holding the input sequence.
        #[arg(long)]
        input: PathBuf,
        /// Sequence index within the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Target time in seconds; defaults to the stored target time.
        #[arg(long)]
        target_time: Option<f64>,
        #[arg(long, default_value = "ode_former")]
        predictor: String,
    },
    /// Evaluate predictors over the speed × interval grid.
    Sweep {
        #[arg(long = "predictor")]
        predictors: Vec<String>,
    },
    /// Compare analytic gradients of a fresh model with central differences.
    GradCheck {
        /// Sequences in the checked loss.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        /// Exit with status 1 when the maximum relative error reaches this.
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.set(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli)?;
    let pool = Pool::new(cli.threads)?;
    let stdout = io::stdout();
    let out = &mut stdout.lock();
    match cli.command {
        Command::GenData { split } => {
            let splits = match split {
                SplitArg::Train => vec![Split::Train],
                SplitArg::Val => vec![Split::Val],
                SplitArg::Test => vec![Split::Test],
                SplitArg::All => Split::ALL.to_vec(),
            };
            commands::gen_data(&cfg, &splits, out)?;
        }
        Command::Train => {
            commands::train(&cfg, &pool, out)?;
        }
        Command::Eval { predictors } => {
            commands::eval(&cfg, &predictors, &pool, out)?;
        }
        Command::Predict {
            input,
            index,
            target_time,
            predictor,
        } => {
            commands::predict(&cfg, &input, index, target_time, &predictor, out)?;
        }
        Command::Sweep { predictors } => {
            commands::sweep(&cfg, &predictors, &pool, out)?;
        }
        Command::GradCheck { count, step, tolerance } => {
            let err = commands::grad_check(&cfg, count, step, out)?;
            if !(err < tolerance) {
                eprintln!("error: gradient check failed: {err:e} >= {tolerance:e}");
                return Ok(ExitCode::from(1));
            }
        }
    }
    out.flush().map_err(|e| Error::Config(e.to_string()))?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(3);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
