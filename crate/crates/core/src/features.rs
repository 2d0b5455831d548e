//! Multi-scale observation matrix: the raw bar window followed by one block of
//! confirmed stroke records per configured scale.
//!
//! Everything visible at time `t` is computed from bars with index `<= t`
//! only. Coarser scales see their still-open bucket as a partial bar, and the
//! most recent stroke at every scale is withheld until a later stroke
//! confirms its endpoint.

use serde::{Deserialize, Serialize};

use crate::chan::{StrokeFeatures, StrokeStream};
use crate::error::FeatureError;
use crate::market_data::{BarSeries, Resampler, TimeScale};

/// Columns per row: open, close, high, low, volume, trend judgment.
pub const COLUMNS: usize = 6;
pub const TREND_COLUMN: usize = 5;

pub type Row = [f64; COLUMNS];

/// Padding for windows with short history.
pub const PAD_ROW: Row = [0.0; COLUMNS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    RawBars,
    Strokes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub scale: TimeScale,
    pub kind: LayerKind,
}

/// One `window_length x 6` block. Pad rows, if any, come first.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub meta: LayerMeta,
    pub rows: Vec<Row>,
    /// Number of trailing rows holding real data.
    pub real_rows: usize,
}

impl Layer {
    fn from_rows(meta: LayerMeta, window: usize, real: impl ExactSizeIterator<Item = Row>) -> Self {
        let total = real.len();
        let n = total.min(window);
        let mut rows = vec![PAD_ROW; window - n];
        rows.extend(real.skip(total - n));
        debug_assert_eq!(rows.len(), window);
        Layer { meta, rows, real_rows: n }
    }

    pub fn pad_rows(&self) -> usize {
        self.rows.len() - self.real_rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub window_length: usize,
    pub layers: Vec<Layer>,
}

impl FeatureMatrix {
    /// Dimensions as (layers, rows, columns).
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.layers.len(), self.window_length, COLUMNS)
    }

    /// Row-major flattening: layer by layer, row by row.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layers.len() * self.window_length * COLUMNS);
        self.flatten_into(&mut out);
        out
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            for row in &layer.rows {
                out.extend_from_slice(row);
            }
        }
    }

    pub fn flat_len(&self) -> usize {
        self.layers.len() * self.window_length * COLUMNS
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    None,
    /// Per-layer, per-column z-score using statistics of the layer's real rows.
    ZScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Stroke scales, finest first. Empty gives a raw-window-only observation.
    pub scales: Vec<TimeScale>,
    pub window_length: usize,
    pub normalization: Normalization,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scales: vec![TimeScale::Day, TimeScale::Week, TimeScale::Month],
            window_length: 30,
            normalization: Normalization::ZScore,
        }
    }
}

impl PipelineConfig {
    /// Single-scale baseline: the last `window_length` raw bars, z-scored.
    pub fn raw_window(window_length: usize) -> Self {
        Self {
            scales: Vec::new(),
            window_length,
            normalization: Normalization::ZScore,
        }
    }

    pub fn validate(&self, raw_scale: TimeScale) -> Result<(), FeatureError> {
        if self.window_length == 0 {
            return Err(FeatureError::Config("window_length must be at least 1".into()));
        }
        if self.scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(FeatureError::Config(
                "scales must be strictly increasing in coarseness".into(),
            ));
        }
        if let Some(first) = self.scales.first() {
            if *first < raw_scale {
                return Err(FeatureError::Config(format!(
                    "stroke scale {first} is finer than the raw series scale {raw_scale}"
                )));
            }
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.scales.len() + 1
    }
}

fn stroke_row(f: &StrokeFeatures) -> Row {
    [f.open, f.close, f.high, f.low, f.volume, f.trend()]
}

/// Confirmed stroke records visible at every raw index, for one scale.
#[derive(Debug, Clone)]
pub struct StrokeTable {
    pub scale: TimeScale,
    /// `visible[t]` holds at most `keep` most recent confirmed strokes at `t`, oldest first.
    visible: Vec<Vec<StrokeFeatures>>,
}

impl StrokeTable {
    pub fn at(&self, t: usize) -> &[StrokeFeatures] {
        &self.visible[t]
    }

    pub fn len(&self) -> usize {
        self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible.is_empty()
    }
}

/// Builds the causal stroke table of `raw` at `scale`, keeping the last `keep`
/// confirmed strokes per index.
pub fn build_stroke_table(raw: &BarSeries, scale: TimeScale, keep: usize) -> Result<StrokeTable, FeatureError> {
    if scale < raw.scale() {
        return Err(FeatureError::Config(format!(
            "stroke scale {scale} is finer than the raw series scale {}",
            raw.scale()
        )));
    }
    let tail = |stream: &StrokeStream| -> Vec<StrokeFeatures> {
        let confirmed = stream.confirmed_strokes();
        let skip = confirmed.len().saturating_sub(keep);
        confirmed[skip..].iter().map(|s| stream.features(s)).collect()
    };

    let mut visible = Vec::with_capacity(raw.len());
    if scale == raw.scale() {
        let mut stream = StrokeStream::default();
        for bar in raw.bars() {
            stream.push(*bar);
            visible.push(tail(&stream));
        }
    } else {
        // Completed buckets live in `stream`; the open bucket is appended to a copy.
        let mut stream = StrokeStream::default();
        let mut resampler = Resampler::new(scale);
        for bar in raw.bars() {
            if let Some(done) = resampler.push(bar) {
                stream.push(done);
            }
            let mut snapshot = stream.clone();
            snapshot.push(resampler.partial().expect("at least one bar pushed"));
            visible.push(tail(&snapshot));
        }
    }
    Ok(StrokeTable { scale, visible })
}

/// Stroke tables for every scale in `cfg`.
pub fn build_stroke_tables(raw: &BarSeries, cfg: &PipelineConfig) -> Result<Vec<StrokeTable>, FeatureError> {
    cfg.validate(raw.scale())?;
    cfg.scales
        .iter()
        .map(|&scale| build_stroke_table(raw, scale, cfg.window_length))
        .collect()
}

/// Assembles the observation at index `t`: raw bars ending at `t`, then the
/// last confirmed strokes of each table, all left-padded to `window_length`.
pub fn build_observation(
    raw: &BarSeries,
    stroke_tables: &[StrokeTable],
    t: usize,
    cfg: &PipelineConfig,
) -> Result<FeatureMatrix, FeatureError> {
    if t >= raw.len() {
        return Err(FeatureError::Index { t, len: raw.len() });
    }
    if stroke_tables.len() != cfg.scales.len() {
        return Err(FeatureError::Config(format!(
            "{} stroke tables for {} scales",
            stroke_tables.len(),
            cfg.scales.len()
        )));
    }
    let window = cfg.window_length;
    let start = (t + 1).saturating_sub(window);
    let raw_rows = raw.bars()[start..=t]
        .iter()
        .map(|b| [b.open, b.close, b.high, b.low, b.volume, 0.0]);
    let mut layers = vec![Layer::from_rows(
        LayerMeta {
            scale: raw.scale(),
            kind: LayerKind::RawBars,
        },
        window,
        raw_rows,
    )];

    for table in stroke_tables {
        if table.len() <= t {
            return Err(FeatureError::Index { t, len: table.len() });
        }
        let records = table.at(t);
        let skip = records.len().saturating_sub(window);
        layers.push(Layer::from_rows(
            LayerMeta {
                scale: table.scale,
                kind: LayerKind::Strokes,
            },
            window,
            records[skip..].iter().map(stroke_row),
        ));
    }
    Ok(FeatureMatrix {
        window_length: window,
        layers,
    })
}

/// Mean and standard deviation per column of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnStats {
    pub mean: Row,
    pub std: Row,
}

pub const STD_FLOOR: f64 = 1e-8;

/// Population statistics over each layer's real rows. Pad rows are excluded.
pub fn trailing_stats(m: &FeatureMatrix) -> Vec<ColumnStats> {
    m.layers
        .iter()
        .map(|layer| {
            let real = &layer.rows[layer.pad_rows()..];
            let mut mean = [0.0; COLUMNS];
            let mut std = [0.0; COLUMNS];
            if !real.is_empty() {
                let n = real.len() as f64;
                for c in 0..COLUMNS {
                    let mu = real.iter().map(|r| r[c]).sum::<f64>() / n;
                    let var = real.iter().map(|r| (r[c] - mu).powi(2)).sum::<f64>() / n;
                    mean[c] = mu;
                    std[c] = var.sqrt();
                }
            }
            ColumnStats { mean, std }
        })
        .collect()
}

/// Z-scores each real row with `stats`; the standard deviation is floored at
/// `STD_FLOOR`, the trend column passes through and pad rows stay zero.
pub fn normalize_observation(m: &FeatureMatrix, stats: &[ColumnStats]) -> FeatureMatrix {
    let layers = m
        .layers
        .iter()
        .zip(stats)
        .map(|(layer, st)| {
            let pad = layer.pad_rows();
            let rows = layer
                .rows
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    if i < pad {
                        return *row;
                    }
                    let mut out = *row;
                    for c in 0..COLUMNS {
                        if c != TREND_COLUMN {
                            out[c] = (row[c] - st.mean[c]) / st.std[c].max(STD_FLOOR);
                        }
                    }
                    out
                })
                .collect();
            Layer {
                meta: layer.meta,
                rows,
                real_rows: layer.real_rows,
            }
        })
        .collect();
    FeatureMatrix {
        window_length: m.window_length,
        layers,
    }
}

/// Observation at every index of `raw`, normalized per `cfg`.
pub fn build_all_observations(raw: &BarSeries, cfg: &PipelineConfig) -> Result<Vec<FeatureMatrix>, FeatureError> {
    let tables = build_stroke_tables(raw, cfg)?;
    (0..raw.len())
        .map(|t| {
            let m = build_observation(raw, &tables, t, cfg)?;
            Ok(match cfg.normalization {
                Normalization::None => m,
                Normalization::ZScore => {
                    let stats = trailing_stats(&m);
                    normalize_observation(&m, &stats)
                }
            })
        })
        .collect()
}
