use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chanstroke::market_data::{load_csv, SynthKind, SynthSpec, TimeScale};
use chanstroke_cli::config::{parse_scales, Overrides, RunConfig};
use chanstroke_cli::{cmd_backtest, cmd_extract, cmd_synth, cmd_train, CliError};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "chanstroke", version, about = "Multi-scale stroke features and RL trading backtests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed to run; repeat for several. Replaces the configured list.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Proportional transaction fee.
    #[arg(long)]
    fee: Option<f64>,
    /// Comma-separated stroke scales, e.g. `day,week,month`.
    #[arg(long)]
    scales: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Shape {
    Sine,
    Trend,
    RandomWalk,
}

#[derive(Subcommand)]
enum Command {
    /// Dump shapes and strokes per scale as CSV.
    Extract {
        #[command(flatten)]
        common: Common,
        /// Bar CSV to annotate. Defaults to the configured data source.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Scale of the input CSV.
        #[arg(long, default_value = "day")]
        data_scale: String,
    },
    /// Train learned agents and write checkpoints, logs and a manifest.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate baselines and checkpoints on the test span.
    Backtest {
        #[command(flatten)]
        common: Common,
        /// Checkpoint root. Defaults to `<out>/checkpoints`.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Write a synthetic bar CSV.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "sine")]
        shape: Shape,
        #[arg(long, default_value_t = 4000)]
        length: usize,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let scales = common.scales.as_deref().map(parse_scales).transpose()?;
    cfg.apply(&Overrides {
        seeds: common.seeds.clone(),
        out: common.out.clone(),
        fee: common.fee,
        scales,
    });
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Extract {
            common,
            data,
            data_scale,
        } => {
            let cfg = load_config(&common)?;
            let series = match data {
                Some(path) => {
                    let scale: TimeScale = data_scale.parse().map_err(|e: chanstroke::error::DataError| CliError::Config(e.to_string()))?;
                    load_csv(path, scale)?
                }
                None => cfg.load_series()?,
            };
            let scales = if common.scales.is_some() || common.config.is_some() {
                cfg.pipeline.scales.clone()
            } else {
                vec![series.scale()]
            };
            let written = cmd_extract(&series, &scales, &cfg.run.out)?;
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Train { common } => {
            let cfg = load_config(&common)?;
            let m = cmd_train(&cfg)?;
            for o in &m.outputs {
                println!("{} seed {}: {}", o.kind, o.seed, o.paths.join(", "));
            }
            println!("config hash {} ({:.1}s)", m.config_hash, m.wall_clock_seconds);
        }
        Command::Backtest { common, checkpoints } => {
            let cfg = load_config(&common)?;
            let root = checkpoints.unwrap_or_else(|| cfg.run.out.join("checkpoints"));
            let outcome = cmd_backtest(&cfg, &root)?;
            for r in &outcome.rows {
                let seed = r.seed.map_or_else(|| "-".to_string(), |s| s.to_string());
                println!(
                    "{:<8} seed {:<4} cum {:>10.4} ann {:>8.4} mdd {:>7.4} alpha {} beta {} sharpe {}",
                    r.strategy,
                    seed,
                    r.cumulative_return,
                    r.annual_return,
                    r.max_drawdown,
                    r.alpha,
                    r.beta,
                    r.sharpe
                );
            }
            println!("{}", outcome.report_path.display());
        }
        Command::Synth { common, shape, length } => {
            let cfg = load_config(&common)?;
            let seed = common.seeds.first().copied().unwrap_or(1);
            let spec = match (&cfg.data.synth, common.config.is_some()) {
                (Some(spec), true) => spec.clone(),
                _ => {
                    let kind = match shape {
                        Shape::Sine => SynthKind::Sine {
                            offset: 100.0,
                            amplitude: 10.0,
                            period: 50.0,
                            phase: 0.0,
                            noise: 0.0,
                        },
                        Shape::Trend => SynthKind::Trend {
                            start: 100.0,
                            slope: 0.05,
                            noise: 0.5,
                        },
                        Shape::RandomWalk => SynthKind::RandomWalk {
                            start: 100.0,
                            drift: 0.0,
                            volatility: 0.01,
                        },
                    };
                    SynthSpec::new(kind, length, seed)
                }
            };
            let target = if cfg.run.out.extension().is_some() {
                cfg.run.out.clone()
            } else {
                cfg.run.out.join("synth.csv")
            };
            let path = cmd_synth(&spec, Path::new(&target))?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
