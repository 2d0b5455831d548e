//! Run configuration: one TOML file with a section per module.
//!
//! Every field has a default in code, so an empty file is a valid (if
//! dataless) config. The effective config, after command-line overrides, is
//! what gets hashed and echoed into manifests.

use std::ops::Range;
use std::path::{Path, PathBuf};

use chanstroke::agents::{AgentKind, TrainOptions};
use chanstroke::env::EnvConfig;
use chanstroke::features::PipelineConfig;
use chanstroke::market_data::{load_csv, parse_timestamp, synth_series, BarSeries, SynthSpec, TimeScale};
use chanstroke::metrics::MetricsConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Label used in the report's first column.
    pub name: String,
    /// Bar interval of the input series.
    pub scale: TimeScale,
    /// CSV file with `timestamp,open,high,low,close,volume`. Relative paths
    /// resolve against the config file's directory.
    pub path: Option<PathBuf>,
    /// Generated series, used when no path is given.
    pub synth: Option<SynthSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            name: "data".into(),
            scale: TimeScale::Day,
            path: None,
            synth: None,
        }
    }
}

/// Half-open range of bars, by date or by index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum SpanSpec {
    Bars { start_bar: usize, end_bar: usize },
    Dates { start: String, end: String },
}

impl SpanSpec {
    fn check(&self, label: &str) -> Result<(), CliError> {
        match self {
            SpanSpec::Bars { start_bar, end_bar } if start_bar >= end_bar => Err(CliError::Config(format!(
                "{label} span {start_bar}..{end_bar} is empty"
            ))),
            SpanSpec::Dates { start, end } => {
                let (a, b) = (parse_date(start)?, parse_date(end)?);
                if a >= b {
                    return Err(CliError::Config(format!("{label} span {start}..{end} is empty")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Index range within `series`.
    pub fn resolve(&self, series: &BarSeries) -> Result<Range<usize>, CliError> {
        match self {
            SpanSpec::Bars { start_bar, end_bar } => Ok(*start_bar.min(&series.len())..*end_bar.min(&series.len())),
            SpanSpec::Dates { start, end } => {
                Ok(series.lower_bound(parse_date(start)?)..series.lower_bound(parse_date(end)?))
            }
        }
    }
}

fn parse_date(s: &str) -> Result<chrono::DateTime<chrono::Utc>, CliError> {
    parse_timestamp(s).ok_or_else(|| CliError::Config(format!("cannot parse date '{s}'")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: SpanSpec,
    pub test: SpanSpec,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: SpanSpec::Bars {
                start_bar: 0,
                end_bar: 3000,
            },
            test: SpanSpec::Bars {
                start_bar: 3000,
                end_bar: 4000,
            },
        }
    }
}

impl SplitConfig {
    /// Train must end no later than test starts, with both spans non-empty.
    pub fn validate(&self) -> Result<(), CliError> {
        self.train.check("train")?;
        self.test.check("test")?;
        let ordered = match (&self.train, &self.test) {
            (SpanSpec::Bars { end_bar, .. }, SpanSpec::Bars { start_bar, .. }) => end_bar <= start_bar,
            (SpanSpec::Dates { end, .. }, SpanSpec::Dates { start, .. }) => parse_date(end)? <= parse_date(start)?,
            _ => {
                return Err(CliError::Config(
                    "train and test spans must both use dates or both use bar indices".into(),
                ))
            }
        };
        if !ordered {
            return Err(CliError::Config(
                "train span must precede the test span without overlap".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    /// Learned agents to train and evaluate. Baselines always run.
    pub kinds: Vec<AgentKind>,
    /// Raw-bar window seen by the single-scale agents.
    pub baseline_window: usize,
    pub train: TrainOptions,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            kinds: vec![AgentKind::Dqn, AgentKind::Ddpg, AgentKind::Mssddpg],
            baseline_window: 30,
            train: TrainOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seeds: vec![1],
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub split: SplitConfig,
    pub pipeline: PipelineConfig,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub run: RunSection,
    pub metrics: MetricsConfig,
    /// Directory that relative data paths resolve against. Not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub fee: Option<f64>,
    pub scales: Option<Vec<TimeScale>>,
}

/// Parses `--scales day,week,month`. An empty string or `none` means no stroke layers.
pub fn parse_scales(s: &str) -> Result<Vec<TimeScale>, CliError> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| p.parse::<TimeScale>().map_err(|e| CliError::Config(e.to_string())))
        .collect()
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if !o.seeds.is_empty() {
            self.run.seeds = o.seeds.clone();
        }
        if let Some(out) = &o.out {
            self.run.out = out.clone();
        }
        if let Some(fee) = o.fee {
            self.env.fee_rate = fee;
        }
        if let Some(scales) = &o.scales {
            self.pipeline.scales = scales.clone();
        }
    }

    /// Checks everything that can be checked without reading data.
    pub fn validate(&self) -> Result<(), CliError> {
        match (&self.data.path, &self.data.synth) {
            (Some(_), Some(_)) => return Err(CliError::Config("data: give either path or synth, not both".into())),
            (None, None) => return Err(CliError::Config("data: one of path or synth is required".into())),
            (None, Some(spec)) if spec.scale != self.data.scale => {
                return Err(CliError::Config(format!(
                    "data: synth scale {} differs from data scale {}",
                    spec.scale, self.data.scale
                )))
            }
            _ => {}
        }
        self.split.validate()?;
        self.pipeline.validate(self.data.scale)?;
        if self.agent.baseline_window == 0 {
            return Err(CliError::Config("agent.baseline_window must be at least 1".into()));
        }
        self.env.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.agent.train.ddpg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.agent.train.dqn.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.run.seeds.is_empty() {
            return Err(CliError::Config("run.seeds must not be empty".into()));
        }
        if self.metrics.periods_per_year.is_nan() || self.metrics.periods_per_year <= 0.0 {
            return Err(CliError::Config("metrics.periods_per_year must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical serialized config.
    pub fn hash(&self) -> Result<String, CliError> {
        let text = self.to_toml_string()?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    pub fn data_path(&self) -> Option<PathBuf> {
        self.data.path.as_ref().map(|p| {
            if p.is_absolute() {
                p.clone()
            } else {
                self.base_dir.join(p)
            }
        })
    }

    pub fn load_series(&self) -> Result<BarSeries, CliError> {
        match (self.data_path(), &self.data.synth) {
            (Some(path), _) => Ok(load_csv(path, self.data.scale)?),
            (None, Some(spec)) => Ok(synth_series(spec)?),
            (None, None) => Err(CliError::Config("data: one of path or synth is required".into())),
        }
    }
}
