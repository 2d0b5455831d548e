//! Subcommand implementations. Each returns the paths it wrote so callers
//! and tests can inspect them.

use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chanstroke::agents::{
    evaluate, load_checkpoint, save_checkpoint, train, AgentKind, AgentParams, CheckpointManifest,
};
use chanstroke::chan::{annotate, write_shapes_csv, write_strokes_csv};
use chanstroke::env::{MarketData, PORTFOLIO_FEATURES};
use chanstroke::market_data::{resample, BarSeries, SynthSpec, TimeScale};
use chanstroke::metrics::{
    build_benchmark_report, build_report, write_report_csv, BacktestReport, EquityCurve, ReportMeta,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::plot::{equity_svg, Series};

pub const TRAIN_MANIFEST: &str = "train_manifest.json";
pub const BACKTEST_MANIFEST: &str = "backtest_manifest.json";
pub const REPORT_FILE: &str = "report.csv";
pub const PLOT_FILE: &str = "equity.svg";

/// Files produced for one agent and seed, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutputs {
    pub kind: AgentKind,
    pub seed: u64,
    pub paths: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub wall_clock_seconds: f64,
    /// Effective configuration, defaults included.
    pub config: serde_json::Value,
    pub outputs: Vec<SeedOutputs>,
    /// Files shared by all seeds (report, plot).
    pub shared: Vec<String>,
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_with<F>(path: &Path, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
{
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

/// Writes `bytes` next to `path` and renames over it, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

fn manifest(
    command: &str,
    cfg: &RunConfig,
    started: Instant,
    outputs: Vec<SeedOutputs>,
    shared: Vec<String>,
) -> Result<RunManifest, CliError> {
    Ok(RunManifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash()?,
        seeds: cfg.run.seeds.clone(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        config: serde_json::to_value(cfg).map_err(|e| CliError::Run(e.to_string()))?,
        outputs,
        shared,
    })
}

fn write_manifest(path: &Path, m: &RunManifest) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(m).map_err(|e| CliError::Run(e.to_string()))?;
    write_atomic(path, (json + "\n").as_bytes())
}

/// Writes the series generated from `spec` as a bar CSV.
pub fn cmd_synth(spec: &SynthSpec, out: &Path) -> Result<PathBuf, CliError> {
    let series = chanstroke::market_data::synth_series(spec)?;
    if let Some(parent) = out.parent() {
        create_dir(parent)?;
    }
    series.save_csv(out)?;
    Ok(out.to_path_buf())
}

/// Writes `shapes_<scale>.csv` and `strokes_<scale>.csv` for every scale.
pub fn cmd_extract(series: &BarSeries, scales: &[TimeScale], out: &Path) -> Result<Vec<PathBuf>, CliError> {
    if scales.is_empty() {
        return Err(CliError::Config("extract needs at least one scale".into()));
    }
    create_dir(out)?;
    let mut written = Vec::new();
    for &scale in scales {
        let view = if scale == series.scale() {
            series.clone()
        } else if scale.is_coarser_than(&series.scale()) {
            resample(series, scale)?
        } else {
            return Err(CliError::Config(format!(
                "scale {scale} is finer than the input scale {}",
                series.scale()
            )));
        };
        let ann = annotate(&view)?;
        let shapes = out.join(format!("shapes_{scale}.csv"));
        write_with(&shapes, |w| write_shapes_csv(w, &ann.shapes))?;
        let strokes = out.join(format!("strokes_{scale}.csv"));
        write_with(&strokes, |w| write_strokes_csv(w, &ann.features))?;
        written.push(shapes);
        written.push(strokes);
    }
    Ok(written)
}

/// Loaded data plus the observation bundles each agent needs.
struct Prepared {
    series: BarSeries,
    raw: MarketData,
    multi: Option<MarketData>,
}

impl Prepared {
    fn new(cfg: &RunConfig, kinds: &[AgentKind]) -> Result<Self, CliError> {
        let series = cfg.load_series()?;
        let raw = MarketData::build(&series, &AgentKind::Ddpg.pipeline(&cfg.pipeline, cfg.agent.baseline_window))?;
        let multi = if kinds.contains(&AgentKind::Mssddpg) {
            Some(MarketData::build(
                &series,
                &AgentKind::Mssddpg.pipeline(&cfg.pipeline, cfg.agent.baseline_window),
            )?)
        } else {
            None
        };
        Ok(Self { series, raw, multi })
    }

    fn data(&self, kind: AgentKind) -> &MarketData {
        match (kind, &self.multi) {
            (AgentKind::Mssddpg, Some(m)) => m,
            _ => &self.raw,
        }
    }

    fn span(&self, cfg: &RunConfig, test: bool) -> Result<Range<usize>, CliError> {
        let (spec, label) = if test {
            (&cfg.split.test, "test")
        } else {
            (&cfg.split.train, "train")
        };
        let span = spec.resolve(&self.series)?;
        // The multi-scale bundle has the same warm-up as the raw one only if
        // the windows match, so clip against the larger of the two.
        let clipped = self.raw.tradable(span.clone());
        let clipped = match (&self.multi, clipped) {
            (Some(m), Ok(r)) => m.tradable(r),
            (_, r) => r,
        };
        clipped.map_err(|e| CliError::Data(format!("{label} span {}..{}: {e}", span.start, span.end)))
    }
}

fn checkpoint_dir(root: &Path, kind: AgentKind, seed: u64) -> PathBuf {
    root.join(kind.as_str()).join(format!("seed-{seed}"))
}

fn learned_kinds(cfg: &RunConfig) -> Vec<AgentKind> {
    let mut kinds = Vec::new();
    for &k in &cfg.agent.kinds {
        if k.is_learned() && !kinds.contains(&k) {
            kinds.push(k);
        }
    }
    kinds
}

fn jobs(kinds: &[AgentKind], seeds: &[u64]) -> Vec<(AgentKind, u64)> {
    kinds.iter().flat_map(|&k| seeds.iter().map(move |&s| (k, s))).collect()
}

/// Trains every learned agent for every seed, writing checkpoints under
/// `<out>/checkpoints`, logs under `<out>/logs` and a run manifest.
pub fn cmd_train(cfg: &RunConfig) -> Result<RunManifest, CliError> {
    let started = Instant::now();
    cfg.validate()?;
    let kinds = learned_kinds(cfg);
    let prepared = Prepared::new(cfg, &kinds)?;
    let train_span = prepared.span(cfg, false)?;
    let out = &cfg.run.out;
    let config_hash = cfg.hash()?;

    let results: Vec<Result<SeedOutputs, CliError>> = jobs(&kinds, &cfg.run.seeds)
        .into_par_iter()
        .map(|(kind, seed)| {
            let data = prepared.data(kind);
            let (params, log) = train(kind, data, train_span.clone(), &cfg.env, &cfg.agent.train, seed)?;
            let dir = checkpoint_dir(&out.join("checkpoints"), kind, seed);
            let hyper = match kind {
                AgentKind::Dqn => serde_json::to_value(&cfg.agent.train.dqn),
                _ => serde_json::to_value(&cfg.agent.train.ddpg),
            }
            .map_err(|e| CliError::Run(e.to_string()))?;
            let ckpt = CheckpointManifest {
                kind,
                seed,
                config_hash: config_hash.clone(),
                state_dim: data.observation_len() + PORTFOLIO_FEATURES,
                hyper,
                files: Vec::new(),
            };
            save_checkpoint(&dir, &params, &ckpt)?;
            let log_path = out.join("logs").join(format!("{kind}-seed-{seed}.csv"));
            write_with(&log_path, |w| log.write_csv(w))?;
            Ok(SeedOutputs {
                kind,
                seed,
                paths: vec![rel(out, &dir), rel(out, &log_path)],
            })
        })
        .collect();
    let outputs = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let m = manifest("train", cfg, started, outputs, Vec::new())?;
    write_manifest(&out.join(TRAIN_MANIFEST), &m)?;
    Ok(m)
}

/// Result of a backtest: report rows in output order plus the manifest.
#[derive(Debug, Clone)]
pub struct BacktestOutcome {
    pub rows: Vec<BacktestReport>,
    pub manifest: RunManifest,
    pub report_path: PathBuf,
}

fn load_params(root: &Path, kind: AgentKind, seed: u64, expected_dim: usize) -> Result<AgentParams, CliError> {
    let dir = checkpoint_dir(root, kind, seed);
    let (params, m) = load_checkpoint(&dir)?;
    if m.kind != kind || m.seed != seed {
        return Err(CliError::Checkpoint(format!(
            "{} holds {} seed {}, expected {kind} seed {seed}",
            dir.display(),
            m.kind,
            m.seed
        )));
    }
    if m.state_dim != expected_dim {
        return Err(CliError::Checkpoint(format!(
            "{}: state dimension {} does not match the configured pipeline ({expected_dim})",
            dir.display(),
            m.state_dim
        )));
    }
    Ok(params)
}

/// Evaluates baselines and every trained agent on the test span. Checkpoints
/// are read from `checkpoints`; outputs go to the configured output directory.
pub fn cmd_backtest(cfg: &RunConfig, checkpoints: &Path) -> Result<BacktestOutcome, CliError> {
    let started = Instant::now();
    cfg.validate()?;
    let kinds = learned_kinds(cfg);
    let prepared = Prepared::new(cfg, &kinds)?;
    let span = prepared.span(cfg, true)?;
    let out = &cfg.run.out;

    // Fail on missing checkpoints before evaluating anything.
    let job_list = jobs(&kinds, &cfg.run.seeds);
    let params: Vec<AgentParams> = job_list
        .iter()
        .map(|&(kind, seed)| {
            let dim = prepared.data(kind).observation_len() + PORTFOLIO_FEATURES;
            load_params(checkpoints, kind, seed, dim)
        })
        .collect::<Result<_, _>>()?;

    let data = &prepared.raw;
    let closes = &data.closes()[span.clone()];
    let initial = cfg.env.initial_cash;
    let market = EquityCurve::new(
        data.timestamps()[span.clone()].to_vec(),
        closes.iter().map(|c| initial * c / closes[0]).collect(),
    )?;
    let meta = |kind: AgentKind, seed: Option<u64>| ReportMeta {
        dataset: cfg.data.name.clone(),
        strategy: kind.display_name().into(),
        seed,
    };

    let turtle = evaluate(&AgentParams::Turtle, data, span.clone(), &cfg.env)?;
    let learned: Vec<Result<EquityCurve, CliError>> = job_list
        .par_iter()
        .zip(params.par_iter())
        .map(|(&(kind, _), p)| Ok(evaluate(p, prepared.data(kind), span.clone(), &cfg.env)?))
        .collect();
    let learned = learned.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut rows = vec![
        build_benchmark_report(&market, &cfg.metrics, meta(AgentKind::BuyAndHold, None))?,
        build_report(&turtle, &market, &cfg.metrics, meta(AgentKind::Turtle, None))?,
    ];
    for (&(kind, seed), curve) in job_list.iter().zip(&learned) {
        rows.push(build_report(curve, &market, &cfg.metrics, meta(kind, Some(seed)))?);
    }

    let report_path = out.join(REPORT_FILE);
    write_with(&report_path, |w| write_report_csv(w, &rows))?;

    let equity_dir = out.join("equity");
    let mut shared = vec![rel(out, &report_path)];
    for (name, curve) in [("buy-and-hold", &market), ("turtle", &turtle)] {
        let p = equity_dir.join(format!("{name}.csv"));
        write_with(&p, |w| curve.write_csv(w))?;
        shared.push(rel(out, &p));
    }
    let mut outputs = Vec::new();
    for (&(kind, seed), curve) in job_list.iter().zip(&learned) {
        let p = equity_dir.join(format!("{kind}-seed-{seed}.csv"));
        write_with(&p, |w| curve.write_csv(w))?;
        outputs.push(SeedOutputs {
            kind,
            seed,
            paths: vec![rel(out, &p)],
        });
    }

    let mut series = vec![
        Series {
            label: AgentKind::BuyAndHold.display_name().into(),
            values: market.values(),
        },
        Series {
            label: AgentKind::Turtle.display_name().into(),
            values: turtle.values(),
        },
    ];
    for (&(kind, seed), curve) in job_list.iter().zip(&learned) {
        series.push(Series {
            label: format!("{} (seed {seed})", kind.display_name()),
            values: curve.values(),
        });
    }
    let plot_path = out.join(PLOT_FILE);
    let svg = equity_svg(&format!("{}: normalized equity", cfg.data.name), &series);
    fs::write(&plot_path, svg).map_err(|e| CliError::io(&plot_path, e))?;
    shared.push(rel(out, &plot_path));

    let m = manifest("backtest", cfg, started, outputs, shared)?;
    write_manifest(&out.join(BACKTEST_MANIFEST), &m)?;
    Ok(BacktestOutcome {
        rows,
        manifest: m,
        report_path,
    })
}
