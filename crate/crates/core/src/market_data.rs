//! OHLCV bar series: loading, validation, resampling and synthetic generators.

use std::cmp::Ordering;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Datelike, Duration, NaiveDate, NaiveDateTime, TimeZone, Timelike, Utc, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::DataError;

/// Header of the bar CSV format, in column order.
pub const CSV_HEADER: [&str; 6] = ["timestamp", "open", "high", "low", "close", "volume"];

/// One candlestick. `timestamp` is the bar's close time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    pub timestamp: DateTime<Utc>,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl Bar {
    /// Checks the OHLCV invariants, returning a description of the first violation.
    pub fn validate(&self) -> Result<(), String> {
        let fields = [self.open, self.high, self.low, self.close, self.volume];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err("non-finite value".into());
        }
        if self.low > self.high {
            return Err(format!("low {} above high {}", self.low, self.high));
        }
        if self.low > self.open.min(self.close) {
            return Err(format!("low {} above min(open, close)", self.low));
        }
        if self.high < self.open.max(self.close) {
            return Err(format!("high {} below max(open, close)", self.high));
        }
        if self.volume < 0.0 {
            return Err(format!("negative volume {}", self.volume));
        }
        Ok(())
    }
}

/// Bar interval. Variants are ordered from finest to coarsest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TimeScale {
    /// Intraday bars of the given length in minutes (`Minutes(10)` is the 10-minute scale).
    Minutes(u32),
    Day,
    Week,
    Month,
}

impl TimeScale {
    pub const MIN10: TimeScale = TimeScale::Minutes(10);

    fn rank(&self) -> (u8, u32) {
        match *self {
            TimeScale::Minutes(m) => (0, m),
            TimeScale::Day => (1, 0),
            TimeScale::Week => (2, 0),
            TimeScale::Month => (3, 0),
        }
    }

    /// True if `self` is strictly coarser than `other`.
    pub fn is_coarser_than(&self, other: &TimeScale) -> bool {
        self.rank() > other.rank()
    }

    /// Bucket identifier of a close-time timestamp at this scale.
    fn bucket(&self, ts: &DateTime<Utc>) -> i64 {
        match *self {
            TimeScale::Minutes(m) => {
                // Close-time stamps: a bar closing exactly on a boundary belongs to the
                // bucket that ends there.
                let width = i64::from(m.max(1)) * 60;
                let secs = ts.timestamp();
                secs.div_euclid(width) + i64::from(secs.rem_euclid(width) != 0)
            }
            TimeScale::Day => i64::from(ts.date_naive().num_days_from_ce()),
            TimeScale::Week => {
                let iso = ts.iso_week();
                i64::from(iso.year()) * 100 + i64::from(iso.week())
            }
            TimeScale::Month => i64::from(ts.year()) * 12 + i64::from(ts.month0()),
        }
    }
}

impl PartialOrd for TimeScale {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TimeScale {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank().cmp(&other.rank())
    }
}

impl fmt::Display for TimeScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeScale::Minutes(m) => write!(f, "min{m}"),
            TimeScale::Day => f.write_str("day"),
            TimeScale::Week => f.write_str("week"),
            TimeScale::Month => f.write_str("month"),
        }
    }
}

impl FromStr for TimeScale {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "day" | "d" | "1d" | "daily" => Ok(TimeScale::Day),
            "week" | "w" | "1w" | "weekly" => Ok(TimeScale::Week),
            "month" | "mo" | "1mo" | "monthly" => Ok(TimeScale::Month),
            other => {
                let digits = other
                    .strip_prefix("min")
                    .or_else(|| other.strip_suffix("min"))
                    .or_else(|| other.strip_suffix('m'));
                match digits.and_then(|d| d.parse::<u32>().ok()) {
                    Some(m) if m > 0 => Ok(TimeScale::Minutes(m)),
                    _ => Err(DataError::Spec(format!("unknown time scale '{s}'"))),
                }
            }
        }
    }
}

impl TryFrom<String> for TimeScale {
    type Error = DataError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<TimeScale> for String {
    fn from(value: TimeScale) -> Self {
        value.to_string()
    }
}

/// An ordered, validated run of bars at one scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarSeries {
    scale: TimeScale,
    bars: Vec<Bar>,
}

impl BarSeries {
    /// Builds a series, checking every bar invariant and strict timestamp ordering.
    pub fn new(scale: TimeScale, bars: Vec<Bar>) -> Result<Self, DataError> {
        for (i, bar) in bars.iter().enumerate() {
            bar.validate()
                .map_err(|reason| DataError::Data { row: i + 1, reason })?;
            if i > 0 && bars[i - 1].timestamp >= bar.timestamp {
                return Err(DataError::Order { row: i + 1 });
            }
        }
        Ok(Self { scale, bars })
    }

    pub fn scale(&self) -> TimeScale {
        self.scale
    }

    pub fn bars(&self) -> &[Bar] {
        &self.bars
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn closes(&self) -> Vec<f64> {
        self.bars.iter().map(|b| b.close).collect()
    }

    /// First `len` bars as a new series.
    pub fn prefix(&self, len: usize) -> BarSeries {
        BarSeries {
            scale: self.scale,
            bars: self.bars[..len.min(self.bars.len())].to_vec(),
        }
    }

    /// Index of the first bar with `timestamp >= ts`, or `len()` if none.
    pub fn lower_bound(&self, ts: DateTime<Utc>) -> usize {
        self.bars.partition_point(|b| b.timestamp < ts)
    }

    /// Writes the series in the bar CSV format.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_HEADER)?;
        for bar in &self.bars {
            w.write_record([
                format_timestamp(&bar.timestamp),
                bar.open.to_string(),
                bar.high.to_string(),
                bar.low.to_string(),
                bar.close.to_string(),
                bar.volume.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Formats a timestamp the way the CSV loader reads it back: a bare date for
/// midnight, `YYYY-MM-DD HH:MM` for whole minutes, RFC 3339 otherwise.
pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    if ts.second() != 0 || ts.nanosecond() != 0 {
        ts.to_rfc3339()
    } else if ts.hour() == 0 && ts.minute() == 0 {
        ts.format("%Y-%m-%d").to_string()
    } else {
        ts.format("%Y-%m-%d %H:%M").to_string()
    }
}

/// Parses RFC 3339, `YYYY-MM-DD HH:MM[:SS]` or `YYYY-MM-DD` (UTC).
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(ts) = DateTime::parse_from_rfc3339(s) {
        return Some(ts.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%d %H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(Utc.from_utc_datetime(&naive));
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .map(|d| Utc.from_utc_datetime(&d.and_hms_opt(0, 0, 0).expect("midnight")))
}

/// Reads a bar CSV from any reader. Row numbers in errors count data rows from 1.
pub fn read_csv<R: Read>(reader: R, scale: TimeScale) -> Result<BarSeries, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| DataError::Format(e.to_string()))?;
    let names: Vec<String> = headers.iter().map(|h| h.trim().to_ascii_lowercase()).collect();
    if names != CSV_HEADER {
        return Err(DataError::Format(format!(
            "expected header '{}', found '{}'",
            CSV_HEADER.join(","),
            names.join(",")
        )));
    }

    let mut bars: Vec<Bar> = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| DataError::Format(format!("row {row}: {e}")))?;
        let timestamp = parse_timestamp(&record[0]).ok_or_else(|| DataError::Data {
            row,
            reason: format!("unparseable timestamp '{}'", &record[0]),
        })?;
        let mut values = [0.0; 5];
        for (k, v) in values.iter_mut().enumerate() {
            let field = record[k + 1].trim();
            *v = field.parse().map_err(|_| DataError::Data {
                row,
                reason: format!("column '{}' is not a number: '{field}'", CSV_HEADER[k + 1]),
            })?;
        }
        let bar = Bar {
            timestamp,
            open: values[0],
            high: values[1],
            low: values[2],
            close: values[3],
            volume: values[4],
        };
        bar.validate().map_err(|reason| DataError::Data { row, reason })?;
        if let Some(prev) = bars.last() {
            if prev.timestamp >= bar.timestamp {
                return Err(DataError::Order { row });
            }
        }
        bars.push(bar);
    }
    Ok(BarSeries { scale, bars })
}

pub fn load_csv(path: impl AsRef<Path>, scale: TimeScale) -> Result<BarSeries, DataError> {
    let file = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(file), scale)
}

/// Running aggregate of one coarse bucket.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BucketAccumulator {
    key: i64,
    bar: Bar,
}

impl BucketAccumulator {
    fn start(key: i64, bar: &Bar) -> Self {
        Self { key, bar: *bar }
    }

    fn absorb(&mut self, bar: &Bar) {
        self.bar.high = self.bar.high.max(bar.high);
        self.bar.low = self.bar.low.min(bar.low);
        self.bar.close = bar.close;
        self.bar.volume += bar.volume;
        self.bar.timestamp = bar.timestamp;
    }
}

/// Incremental resampler: feed fine bars in order, read completed coarse bars
/// and the still-open bucket.
#[derive(Debug, Clone)]
pub(crate) struct Resampler {
    target: TimeScale,
    current: Option<BucketAccumulator>,
}

impl Resampler {
    pub(crate) fn new(target: TimeScale) -> Self {
        Self { target, current: None }
    }

    /// Adds a bar; returns the bucket it closed, if any.
    pub(crate) fn push(&mut self, bar: &Bar) -> Option<Bar> {
        let key = self.target.bucket(&bar.timestamp);
        match &mut self.current {
            Some(acc) if acc.key == key => {
                acc.absorb(bar);
                None
            }
            slot => {
                let finished = slot.map(|acc| acc.bar);
                *slot = Some(BucketAccumulator::start(key, bar));
                finished
            }
        }
    }

    /// The bucket still accumulating, built only from bars pushed so far.
    pub(crate) fn partial(&self) -> Option<Bar> {
        self.current.map(|acc| acc.bar)
    }
}

/// Aggregates `series` into `target` buckets: first open, last close, max high,
/// min low, summed volume, stamped with the bucket's last source timestamp.
pub fn resample(series: &BarSeries, target: TimeScale) -> Result<BarSeries, DataError> {
    if !target.is_coarser_than(&series.scale) {
        return Err(DataError::Scale {
            from: series.scale,
            to: target,
        });
    }
    let mut resampler = Resampler::new(target);
    let mut bars: Vec<Bar> = series.bars.iter().filter_map(|b| resampler.push(b)).collect();
    bars.extend(resampler.partial());
    Ok(BarSeries { scale: target, bars })
}

/// Shape of a synthetic close-price path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SynthKind {
    /// `close_t = offset + amplitude * sin(2*pi*t/period + phase)` plus optional Gaussian noise.
    Sine {
        offset: f64,
        amplitude: f64,
        period: f64,
        #[serde(default)]
        phase: f64,
        #[serde(default)]
        noise: f64,
    },
    /// `close_t = start + slope * t` plus optional Gaussian noise.
    Trend {
        start: f64,
        slope: f64,
        #[serde(default)]
        noise: f64,
    },
    /// Geometric random walk with per-bar log drift and volatility.
    RandomWalk { start: f64, drift: f64, volatility: f64 },
}

/// Full description of a synthetic series. Same spec, same bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(flatten)]
    pub kind: SynthKind,
    pub length: usize,
    pub seed: u64,
    #[serde(default = "default_synth_scale")]
    pub scale: TimeScale,
    #[serde(default = "default_synth_start")]
    pub start: DateTime<Utc>,
    /// Relative wick size added beyond the open/close body.
    #[serde(default = "default_spread")]
    pub spread: f64,
    /// Mean bar volume.
    #[serde(default = "default_volume")]
    pub volume: f64,
}

fn default_synth_scale() -> TimeScale {
    TimeScale::Day
}

fn default_synth_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2000, 1, 3, 0, 0, 0).unwrap()
}

fn default_spread() -> f64 {
    0.002
}

fn default_volume() -> f64 {
    1_000_000.0
}

impl SynthSpec {
    pub fn new(kind: SynthKind, length: usize, seed: u64) -> Self {
        Self {
            kind,
            length,
            seed,
            scale: default_synth_scale(),
            start: default_synth_start(),
            spread: default_spread(),
            volume: default_volume(),
        }
    }

    pub fn sine(offset: f64, amplitude: f64, period: f64, length: usize, seed: u64) -> Self {
        Self::new(
            SynthKind::Sine {
                offset,
                amplitude,
                period,
                phase: 0.0,
                noise: 0.0,
            },
            length,
            seed,
        )
    }

    pub fn random_walk(length: usize, seed: u64) -> Self {
        Self::new(
            SynthKind::RandomWalk {
                start: 100.0,
                drift: 0.0,
                volatility: 0.01,
            },
            length,
            seed,
        )
    }
}

/// Close-time stamps for `length` consecutive bars. Daily bars skip weekends.
fn synth_timestamps(scale: TimeScale, start: DateTime<Utc>, length: usize) -> Vec<DateTime<Utc>> {
    let mut out = Vec::with_capacity(length);
    let mut ts = start;
    while out.len() < length {
        match scale {
            TimeScale::Minutes(m) => {
                out.push(ts);
                ts += Duration::minutes(i64::from(m.max(1)));
            }
            TimeScale::Day => {
                if !matches!(ts.weekday(), Weekday::Sat | Weekday::Sun) {
                    out.push(ts);
                }
                ts += Duration::days(1);
            }
            TimeScale::Week => {
                out.push(ts);
                ts += Duration::weeks(1);
            }
            TimeScale::Month => {
                out.push(ts);
                ts = ts
                    .checked_add_months(chrono::Months::new(1))
                    .expect("timestamp overflow");
            }
        }
    }
    out
}

/// Generates a deterministic synthetic series satisfying every bar invariant.
pub fn synth_series(spec: &SynthSpec) -> Result<BarSeries, DataError> {
    if spec.length == 0 {
        return Err(DataError::Spec("synthetic series length must be at least 1".into()));
    }
    if spec.spread < 0.0 || !spec.spread.is_finite() {
        return Err(DataError::Spec(format!("invalid spread {}", spec.spread)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Index -1 supplies the first bar's open.
    let mut closes = Vec::with_capacity(spec.length + 1);
    match spec.kind {
        SynthKind::Sine {
            offset,
            amplitude,
            period,
            phase,
            noise,
        } => {
            if period <= 0.0 {
                return Err(DataError::Spec("sine period must be positive".into()));
            }
            for t in -1..spec.length as i64 {
                let angle = std::f64::consts::TAU * t as f64 / period + phase;
                let z: f64 = rng.sample(StandardNormal);
                closes.push(offset + amplitude * angle.sin() + noise * z);
            }
        }
        SynthKind::Trend { start, slope, noise } => {
            for t in -1..spec.length as i64 {
                let z: f64 = rng.sample(StandardNormal);
                closes.push(start + slope * t as f64 + noise * z);
            }
        }
        SynthKind::RandomWalk {
            start,
            drift,
            volatility,
        } => {
            let mut price = start;
            closes.push(price);
            for _ in 0..spec.length {
                let z: f64 = rng.sample(StandardNormal);
                price *= (drift + volatility * z).exp();
                closes.push(price);
            }
        }
    }
    if closes.iter().any(|c| !c.is_finite() || *c <= 0.0) {
        return Err(DataError::Spec("generator produced a non-positive price".into()));
    }

    let stamps = synth_timestamps(spec.scale, spec.start, spec.length);
    let bars = stamps
        .into_iter()
        .enumerate()
        .map(|(i, timestamp)| {
            let open = closes[i];
            let close = closes[i + 1];
            let up: f64 = rng.random_range(0.5..1.0);
            let down: f64 = rng.random_range(0.5..1.0);
            let vol: f64 = rng.random_range(0.5..1.5);
            Bar {
                timestamp,
                open,
                high: open.max(close) * (1.0 + spec.spread * up),
                low: open.min(close) * (1.0 - spec.spread * down),
                close,
                volume: spec.volume * vol,
            }
        })
        .collect();
    BarSeries::new(spec.scale, bars)
}
