//! Chan-theory bar preprocessing: inclusion removal, top/bottom shapes and
//! strict strokes.
//!
//! All comparisons are strict. Two bars with an equal high (or an equal low)
//! are never in an inclusion relationship, and a shape needs all four of its
//! inequalities to hold strictly.

use std::io::Write;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::ChanError;
use crate::market_data::{format_timestamp, Bar, BarSeries};

/// Minimum number of inclusion-free bars from a stroke's start extreme to its
/// end extreme, both ends counted.
pub const MIN_STROKE_BARS: usize = 5;

/// A bar of the inclusion-free sequence, covering `first..=last` source bars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergedBar {
    pub low: f64,
    pub high: f64,
    pub first: usize,
    pub last: usize,
    /// Close time of the last constituent source bar.
    pub timestamp: DateTime<Utc>,
}

impl MergedBar {
    fn from_source(index: usize, bar: &Bar) -> Self {
        Self {
            low: bar.low,
            high: bar.high,
            first: index,
            last: index,
            timestamp: bar.timestamp,
        }
    }

    pub fn span_len(&self) -> usize {
        self.last - self.first + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrendDirection {
    Ascending,
    Descending,
}

/// True if one bar's range strictly contains the other's.
pub fn is_inclusion(a: &MergedBar, b: &MergedBar) -> bool {
    (a.high < b.high && a.low > b.low) || (a.high > b.high && a.low < b.low)
}

fn merge(a: &MergedBar, b: &MergedBar, direction: TrendDirection) -> MergedBar {
    let (low, high) = match direction {
        TrendDirection::Ascending => (a.low.max(b.low), a.high.max(b.high)),
        TrendDirection::Descending => (a.low.min(b.low), a.high.min(b.high)),
    };
    MergedBar {
        low,
        high,
        first: a.first.min(b.first),
        last: a.last.max(b.last),
        timestamp: a.timestamp.max(b.timestamp),
    }
}

/// Left-to-right inclusion remover. Only the last merged bar can still change
/// when more source bars arrive.
#[derive(Debug, Clone)]
pub struct InclusionMerger {
    bars: Vec<MergedBar>,
    initial_direction: TrendDirection,
    pushed: usize,
}

impl Default for InclusionMerger {
    fn default() -> Self {
        Self::new(TrendDirection::Ascending)
    }
}

impl InclusionMerger {
    /// `initial_direction` is used while fewer than two merged bars exist.
    pub fn new(initial_direction: TrendDirection) -> Self {
        Self {
            bars: Vec::new(),
            initial_direction,
            pushed: 0,
        }
    }

    pub fn bars(&self) -> &[MergedBar] {
        &self.bars
    }

    /// Number of source bars consumed so far.
    pub fn source_len(&self) -> usize {
        self.pushed
    }

    /// Trend of the two merged bars preceding position `end` (exclusive).
    fn direction_before(&self, end: usize) -> TrendDirection {
        if end >= 2 {
            if self.bars[end - 1].high > self.bars[end - 2].high {
                TrendDirection::Ascending
            } else {
                TrendDirection::Descending
            }
        } else {
            self.initial_direction
        }
    }

    pub fn push(&mut self, bar: &Bar) {
        let incoming = MergedBar::from_source(self.pushed, bar);
        self.pushed += 1;
        match self.bars.last() {
            Some(last) if is_inclusion(last, &incoming) => {
                let n = self.bars.len();
                let direction = self.direction_before(n);
                self.bars[n - 1] = merge(&self.bars[n - 1], &incoming, direction);
                self.settle();
            }
            _ => self.bars.push(incoming),
        }
    }

    /// Re-merges the tail until the last two bars are inclusion-free.
    fn settle(&mut self) {
        while self.bars.len() >= 2 {
            let n = self.bars.len();
            if !is_inclusion(&self.bars[n - 2], &self.bars[n - 1]) {
                break;
            }
            let direction = self.direction_before(n - 1);
            let tail = self.bars.pop().expect("len >= 2");
            self.bars[n - 2] = merge(&self.bars[n - 2], &tail, direction);
        }
    }
}

/// Removes inclusion relationships, starting in the ascending direction.
pub fn remove_inclusions(series: &BarSeries) -> Result<Vec<MergedBar>, ChanError> {
    remove_inclusions_with(series, TrendDirection::Ascending)
}

pub fn remove_inclusions_with(
    series: &BarSeries,
    initial_direction: TrendDirection,
) -> Result<Vec<MergedBar>, ChanError> {
    if series.is_empty() {
        return Err(ChanError::Empty);
    }
    let mut merger = InclusionMerger::new(initial_direction);
    for bar in series.bars() {
        merger.push(bar);
    }
    Ok(merger.bars)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Top,
    Bottom,
}

impl ShapeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ShapeKind::Top => "top",
            ShapeKind::Bottom => "bottom",
        }
    }
}

/// A three-bar turning point centred on `center` in the merged sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub center: usize,
    /// Centre bar's high for a top, its low for a bottom.
    pub pivot_price: f64,
    pub timestamp: DateTime<Utc>,
}

impl Shape {
    /// True if `self` is the same kind as `other` and strictly more extreme.
    fn dominates(&self, other: &Shape) -> bool {
        self.kind == other.kind
            && match self.kind {
                ShapeKind::Top => self.pivot_price > other.pivot_price,
                ShapeKind::Bottom => self.pivot_price < other.pivot_price,
            }
    }
}

/// Classifies the window `(a, b, c)` centred on `b`.
pub fn classify_window(a: &MergedBar, b: &MergedBar, c: &MergedBar) -> Option<ShapeKind> {
    if a.high < b.high && c.high < b.high && a.low < b.low && c.low < b.low {
        Some(ShapeKind::Top)
    } else if a.high > b.high && c.high > b.high && a.low > b.low && c.low > b.low {
        Some(ShapeKind::Bottom)
    } else {
        None
    }
}

/// Emits every top and bottom shape of an inclusion-free sequence, in order.
pub fn detect_shapes(merged: &[MergedBar]) -> Vec<Shape> {
    merged
        .windows(3)
        .enumerate()
        .filter_map(|(i, w)| {
            classify_window(&w[0], &w[1], &w[2]).map(|kind| {
                let center = &w[1];
                Shape {
                    kind,
                    center: i + 1,
                    pivot_price: match kind {
                        ShapeKind::Top => center.high,
                        ShapeKind::Bottom => center.low,
                    },
                    timestamp: center.timestamp,
                }
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrokeDirection {
    Rising,
    Descending,
}

impl StrokeDirection {
    pub fn as_str(&self) -> &'static str {
        match self {
            StrokeDirection::Rising => "rising",
            StrokeDirection::Descending => "descending",
        }
    }

    /// Trend judgment feature: +1 rising, -1 descending.
    pub fn sign(&self) -> f64 {
        match self {
            StrokeDirection::Rising => 1.0,
            StrokeDirection::Descending => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    pub start: Shape,
    pub end: Shape,
    pub direction: StrokeDirection,
}

impl Stroke {
    /// Merged bars from the start extreme to the end extreme, inclusive.
    pub fn bar_count(&self) -> usize {
        self.end.center - self.start.center + 1
    }
}

/// Rules (2) and (3) for an alternating pair `from -> to`.
fn valid_pair(from: &Shape, to: &Shape) -> bool {
    if from.kind == to.kind || to.center < from.center {
        return false;
    }
    if to.center - from.center + 1 < MIN_STROKE_BARS {
        return false;
    }
    let (top, bottom) = match from.kind {
        ShapeKind::Top => (from, to),
        ShapeKind::Bottom => (to, from),
    };
    top.pivot_price > bottom.pivot_price
}

/// Stroke endpoints chosen from `shapes`. Every point except the last is final;
/// the last may still be replaced by a more extreme shape of the same kind.
pub fn stroke_points(shapes: &[Shape]) -> Vec<Shape> {
    let mut points: Vec<Shape> = Vec::new();
    for shape in shapes {
        match points.last_mut() {
            None => points.push(*shape),
            Some(last) if last.kind == shape.kind => {
                if shape.dominates(last) {
                    *last = *shape;
                }
            }
            Some(last) => {
                if valid_pair(last, shape) {
                    points.push(*shape);
                }
                // otherwise skip it and keep looking for the next alternating shape
            }
        }
    }
    points
}

/// Connects alternating shapes into strict strokes. The output is contiguous:
/// each stroke starts where the previous one ended.
pub fn extract_strokes(shapes: &[Shape], merged: &[MergedBar]) -> Vec<Stroke> {
    debug_assert!(shapes.iter().all(|s| s.center + 1 < merged.len().max(1)));
    stroke_points(shapes)
        .windows(2)
        .map(|w| Stroke {
            start: w[0],
            end: w[1],
            direction: match w[0].kind {
                ShapeKind::Bottom => StrokeDirection::Rising,
                ShapeKind::Top => StrokeDirection::Descending,
            },
        })
        .collect()
}

/// OHLCV summary of the source bars a stroke covers, plus its trend judgment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrokeFeatures {
    pub start_ts: DateTime<Utc>,
    pub end_ts: DateTime<Utc>,
    pub direction: StrokeDirection,
    pub open: f64,
    pub close: f64,
    pub high: f64,
    pub low: f64,
    pub volume: f64,
}

impl StrokeFeatures {
    pub fn trend(&self) -> f64 {
        self.direction.sign()
    }
}

/// Summarises the source bars from the first bar of the start extreme's merged
/// bar through the last bar of the end extreme's merged bar.
pub fn stroke_span_features(stroke: &Stroke, merged: &[MergedBar], source: &BarSeries) -> StrokeFeatures {
    span_summary(stroke, merged, source.bars())
}

fn span_summary(stroke: &Stroke, merged: &[MergedBar], source: &[Bar]) -> StrokeFeatures {
    let first = merged[stroke.start.center].first;
    let last = merged[stroke.end.center].last;
    let span = &source[first..=last];
    let (high, low, volume) = span.iter().fold(
        (f64::NEG_INFINITY, f64::INFINITY, 0.0),
        |(h, l, v), b| (h.max(b.high), l.min(b.low), v + b.volume),
    );
    StrokeFeatures {
        start_ts: stroke.start.timestamp,
        end_ts: stroke.end.timestamp,
        direction: stroke.direction,
        open: span[0].open,
        close: span[span.len() - 1].close,
        high,
        low,
        volume,
    }
}

/// Incremental extractor. Bars are appended one at a time; results equal the
/// batch functions run on the prefix seen so far.
#[derive(Debug, Clone, Default)]
pub struct StrokeStream {
    merger: InclusionMerger,
    source: Vec<Bar>,
}

impl StrokeStream {
    pub fn new(initial_direction: TrendDirection) -> Self {
        Self {
            merger: InclusionMerger::new(initial_direction),
            source: Vec::new(),
        }
    }

    pub fn push(&mut self, bar: Bar) {
        self.merger.push(&bar);
        self.source.push(bar);
    }

    pub fn merged(&self) -> &[MergedBar] {
        self.merger.bars()
    }

    pub fn source(&self) -> &[Bar] {
        &self.source
    }

    pub fn shapes(&self) -> Vec<Shape> {
        detect_shapes(self.merger.bars())
    }

    /// All strokes on the current prefix; the last one is still mutable.
    pub fn strokes(&self) -> Vec<Stroke> {
        extract_strokes(&self.shapes(), self.merger.bars())
    }

    /// Strokes that no future bar can change: everything but the last.
    pub fn confirmed_strokes(&self) -> Vec<Stroke> {
        let mut strokes = self.strokes();
        strokes.pop();
        strokes
    }

    /// Span features of `stroke`, read from this stream's own bars.
    pub fn features(&self, stroke: &Stroke) -> StrokeFeatures {
        span_summary(stroke, self.merger.bars(), &self.source)
    }
}

/// Full annotation of one series: merged bars, shapes, strokes and their features.
#[derive(Debug, Clone)]
pub struct Annotation {
    pub merged: Vec<MergedBar>,
    pub shapes: Vec<Shape>,
    pub strokes: Vec<Stroke>,
    pub features: Vec<StrokeFeatures>,
}

pub fn annotate(series: &BarSeries) -> Result<Annotation, ChanError> {
    let merged = remove_inclusions(series)?;
    let shapes = detect_shapes(&merged);
    let strokes = extract_strokes(&shapes, &merged);
    let features = strokes
        .iter()
        .map(|s| stroke_span_features(s, &merged, series))
        .collect();
    Ok(Annotation {
        merged,
        shapes,
        strokes,
        features,
    })
}

/// Writes shapes as `index,kind,pivot_price,timestamp`.
pub fn write_shapes_csv<W: Write>(mut w: W, shapes: &[Shape]) -> std::io::Result<()> {
    writeln!(w, "index,kind,pivot_price,timestamp")?;
    for s in shapes {
        writeln!(
            w,
            "{},{},{},{}",
            s.center,
            s.kind.as_str(),
            s.pivot_price,
            format_timestamp(&s.timestamp)
        )?;
    }
    Ok(())
}

/// Writes strokes as `start_ts,end_ts,direction,open,close,high,low,volume`.
pub fn write_strokes_csv<W: Write>(mut w: W, features: &[StrokeFeatures]) -> std::io::Result<()> {
    writeln!(w, "start_ts,end_ts,direction,open,close,high,low,volume")?;
    for f in features {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            format_timestamp(&f.start_ts),
            format_timestamp(&f.end_ts),
            f.direction.as_str(),
            f.open,
            f.close,
            f.high,
            f.low,
            f.volume
        )?;
    }
    Ok(())
}
