//! Backtest performance metrics and report rows.

use std::fmt;
use std::io::Write;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::MetricsError;
use crate::market_data::format_timestamp;

/// Portfolio value at every bar close.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquityCurve {
    timestamps: Vec<DateTime<Utc>>,
    values: Vec<f64>,
}

impl EquityCurve {
    pub fn new(timestamps: Vec<DateTime<Utc>>, values: Vec<f64>) -> Result<Self, MetricsError> {
        if timestamps.len() != values.len() {
            return Err(MetricsError::Length(timestamps.len(), values.len()));
        }
        if values.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(MetricsError::NonPositive);
        }
        Ok(Self { timestamps, values })
    }

    /// Curve with synthetic, evenly spaced daily stamps.
    pub fn from_values(values: Vec<f64>) -> Result<Self, MetricsError> {
        let origin = DateTime::<Utc>::UNIX_EPOCH;
        let timestamps = (0..values.len())
            .map(|i| origin + chrono::Duration::days(i as i64))
            .collect();
        Self::new(timestamps, values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn timestamps(&self) -> &[DateTime<Utc>] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Per-bar simple returns (`len - 1` of them).
    pub fn returns(&self) -> Vec<f64> {
        self.values.windows(2).map(|w| w[1] / w[0] - 1.0).collect()
    }

    /// Values divided by the first value.
    pub fn normalized(&self) -> Vec<f64> {
        let first = self.values.first().copied().unwrap_or(1.0);
        self.values.iter().map(|v| v / first).collect()
    }

    /// Writes `timestamp,value` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "timestamp,value")?;
        for (ts, v) in self.timestamps.iter().zip(&self.values) {
            writeln!(w, "{},{}", format_timestamp(ts), v)?;
        }
        Ok(())
    }
}

/// A metric that can be missing for a principled reason.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Metric {
    Value(f64),
    /// Mathematically undefined, e.g. a Sharpe ratio with zero volatility.
    Undefined,
    /// Deliberately not reported (benchmark rows have no alpha, beta or Sharpe).
    NotApplicable,
}

impl Metric {
    pub fn value(&self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(*v),
            _ => None,
        }
    }

    pub fn is_undefined(&self) -> bool {
        matches!(self, Metric::Undefined)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Value(v) => write!(f, "{v:.6}"),
            Metric::Undefined => f.write_str("NaN"),
            Metric::NotApplicable => f.write_str("-"),
        }
    }
}

impl From<Option<f64>> for Metric {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Metric::Undefined, Metric::Value)
    }
}

fn require(values: &[f64], need: usize) -> Result<(), MetricsError> {
    if values.len() < need {
        return Err(MetricsError::TooShort {
            need,
            got: values.len(),
        });
    }
    Ok(())
}

pub fn cumulative_return(e: &EquityCurve) -> Result<f64, MetricsError> {
    require(&e.values, 2)?;
    Ok(e.values[e.values.len() - 1] / e.values[0] - 1.0)
}

/// Geometric annualisation of a cumulative return earned over `years`.
pub fn annualize(cumulative: f64, years: f64) -> f64 {
    (1.0 + cumulative).powf(1.0 / years) - 1.0
}

/// Annualised return, counting `len - 1` bar periods as
/// `(len - 1) / periods_per_year` years.
pub fn annual_return(e: &EquityCurve, periods_per_year: f64) -> Result<f64, MetricsError> {
    let cumulative = cumulative_return(e)?;
    let years = (e.values.len() - 1) as f64 / periods_per_year;
    Ok(annualize(cumulative, years))
}

/// Largest fractional decline from a running peak.
pub fn max_drawdown(e: &EquityCurve) -> Result<f64, MetricsError> {
    require(&e.values, 1)?;
    let mut peak = e.values[0];
    let mut worst = 0.0_f64;
    for &v in &e.values {
        peak = peak.max(v);
        worst = worst.max((peak - v) / peak);
    }
    Ok(worst)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample covariance (n - 1 denominator).
fn covariance(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs), mean(ys));
    xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Annualised Sharpe ratio of per-bar returns. `None` when the returns have
/// zero standard deviation.
pub fn sharpe(returns: &[f64], rf_annual: f64, periods_per_year: f64) -> Result<Option<f64>, MetricsError> {
    require(returns, 2)?;
    let std = covariance(returns, returns).sqrt();
    // Round-off-level dispersion counts as zero.
    if std < 1e-14 {
        return Ok(None);
    }
    let excess = mean(returns) - rf_annual / periods_per_year;
    Ok(Some(excess / std * periods_per_year.sqrt()))
}

/// CAPM regression of strategy on market per-bar returns. Returns annualised
/// alpha and beta, or `None` when the market has zero variance.
pub fn alpha_beta(
    strategy: &[f64],
    market: &[f64],
    rf_annual: f64,
    periods_per_year: f64,
) -> Result<Option<(f64, f64)>, MetricsError> {
    if strategy.len() != market.len() {
        return Err(MetricsError::Length(strategy.len(), market.len()));
    }
    require(strategy, 2)?;
    let var_m = covariance(market, market);
    if var_m.sqrt() < 1e-14 {
        return Ok(None);
    }
    let beta = covariance(strategy, market) / var_m;
    let rf = rf_annual / periods_per_year;
    let alpha_bar = mean(strategy) - rf - beta * (mean(market) - rf);
    Ok(Some((alpha_bar * periods_per_year, beta)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub rf_annual: f64,
    pub periods_per_year: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            rf_annual: 0.0,
            periods_per_year: 252.0,
        }
    }
}

/// One row of the backtest table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub dataset: String,
    pub strategy: String,
    pub cumulative_return: f64,
    pub annual_return: f64,
    pub max_drawdown: f64,
    pub alpha: Metric,
    pub beta: Metric,
    pub sharpe: Metric,
    pub span: String,
    pub seed: Option<u64>,
}

/// Report identification carried alongside the metrics.
#[derive(Debug, Clone, Default)]
pub struct ReportMeta {
    pub dataset: String,
    pub strategy: String,
    pub seed: Option<u64>,
}

fn span_label(e: &EquityCurve) -> String {
    match (e.timestamps.first(), e.timestamps.last()) {
        (Some(a), Some(b)) => format!("{}..{}", format_timestamp(a), format_timestamp(b)),
        _ => String::new(),
    }
}

/// Full report for a strategy measured against `market`.
pub fn build_report(
    e: &EquityCurve,
    market: &EquityCurve,
    cfg: &MetricsConfig,
    meta: ReportMeta,
) -> Result<BacktestReport, MetricsError> {
    if e.len() != market.len() {
        return Err(MetricsError::Length(e.len(), market.len()));
    }
    let returns = e.returns();
    let (alpha, beta) = match alpha_beta(&returns, &market.returns(), cfg.rf_annual, cfg.periods_per_year)? {
        Some((a, b)) => (Metric::Value(a), Metric::Value(b)),
        None => (Metric::Undefined, Metric::Undefined),
    };
    Ok(BacktestReport {
        dataset: meta.dataset,
        strategy: meta.strategy,
        cumulative_return: cumulative_return(e)?,
        annual_return: annual_return(e, cfg.periods_per_year)?,
        max_drawdown: max_drawdown(e)?,
        alpha,
        beta,
        sharpe: sharpe(&returns, cfg.rf_annual, cfg.periods_per_year)?.into(),
        span: span_label(e),
        seed: meta.seed,
    })
}

/// Benchmark row: alpha, beta and Sharpe are left blank.
pub fn build_benchmark_report(
    market: &EquityCurve,
    cfg: &MetricsConfig,
    meta: ReportMeta,
) -> Result<BacktestReport, MetricsError> {
    Ok(BacktestReport {
        dataset: meta.dataset,
        strategy: meta.strategy,
        cumulative_return: cumulative_return(market)?,
        annual_return: annual_return(market, cfg.periods_per_year)?,
        max_drawdown: max_drawdown(market)?,
        alpha: Metric::NotApplicable,
        beta: Metric::NotApplicable,
        sharpe: Metric::NotApplicable,
        span: span_label(market),
        seed: meta.seed,
    })
}

pub const REPORT_HEADER: [&str; 10] = [
    "Stock",
    "Strategy",
    "Cumulative return",
    "Annual return",
    "Max drawdown",
    "Alpha",
    "Beta",
    "Sharpe",
    "Span",
    "Seed",
];

/// Writes report rows as CSV, fractions with six decimals.
pub fn write_report_csv<W: Write>(mut w: W, rows: &[BacktestReport]) -> std::io::Result<()> {
    writeln!(w, "{}", REPORT_HEADER.join(","))?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{},{},{},{},{}",
            r.dataset,
            r.strategy,
            r.cumulative_return,
            r.annual_return,
            r.max_drawdown,
            r.alpha,
            r.beta,
            r.sharpe,
            r.span,
            r.seed.map(|s| s.to_string()).unwrap_or_else(|| "-".into())
        )?;
    }
    Ok(())
}
