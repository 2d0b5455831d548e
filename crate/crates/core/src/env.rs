//! Single-asset trading environment: portfolio accounting, reward and
//! episode control.

use std::ops::Range;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::EnvError;
use crate::features::{build_all_observations, PipelineConfig};
use crate::market_data::BarSeries;

/// Holdings and cash. `shares` is a whole number and `cash` never goes negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Portfolio {
    pub shares: u64,
    pub cash: f64,
    pub last_value: f64,
}

impl Portfolio {
    pub fn new(cash: f64) -> Self {
        Self {
            shares: 0,
            cash,
            last_value: cash,
        }
    }

    pub fn value(&self, price: f64) -> f64 {
        self.cash + self.shares as f64 * price
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Buy,
    Hold,
    Sell,
}

/// A trade instruction. `fraction` is zero exactly when `side` is `Hold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub side: Side,
    pub fraction: f64,
}

impl Action {
    pub const HOLD: Action = Action {
        side: Side::Hold,
        fraction: 0.0,
    };

    /// Builds an action, normalizing a zero fraction to `Hold` and clamping
    /// the fraction to `[0, 1]`.
    pub fn new(side: Side, fraction: f64) -> Self {
        let fraction = if fraction.is_nan() { 0.0 } else { fraction.clamp(0.0, 1.0) };
        if side == Side::Hold || fraction == 0.0 {
            Self::HOLD
        } else {
            Self { side, fraction }
        }
    }

    pub fn buy(fraction: f64) -> Self {
        Self::new(Side::Buy, fraction)
    }

    pub fn sell(fraction: f64) -> Self {
        Self::new(Side::Sell, fraction)
    }
}

pub const DEFAULT_DEAD_ZONE: f64 = 0.1;

/// Maps a continuous actor output to an action. Values are clamped to
/// `[-1, 1]`; magnitudes up to `dead_zone` hold.
pub fn encode_action(raw: f64, dead_zone: f64) -> Action {
    let raw = if raw.is_nan() { 0.0 } else { raw.clamp(-1.0, 1.0) };
    if raw > dead_zone {
        Action::buy(raw)
    } else if raw < -dead_zone {
        Action::sell(-raw)
    } else {
        Action::HOLD
    }
}

/// Fills `action` at `price`. Buys spend at most `fraction` of cash including
/// fees; sells liquidate `floor(fraction * shares)`. Infeasible sizes round
/// down to a smaller or empty fill.
pub fn execute_trade(p: Portfolio, action: Action, price: f64, fee_rate: f64) -> Portfolio {
    let mut out = p;
    match action.side {
        Side::Hold => {}
        Side::Buy => {
            let unit_cost = price * (1.0 + fee_rate);
            let mut shares = (action.fraction * p.cash / unit_cost).floor().max(0.0) as u64;
            while shares > 0 && shares as f64 * unit_cost > p.cash {
                shares -= 1;
            }
            out.shares += shares;
            out.cash = (p.cash - shares as f64 * unit_cost).max(0.0);
        }
        Side::Sell => {
            let shares = ((action.fraction * p.shares as f64).floor() as u64).min(p.shares);
            out.shares -= shares;
            out.cash += shares as f64 * price * (1.0 - fee_rate);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum EpisodeMode {
    FullSpan,
    RandomWindow { length: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub fee_rate: f64,
    pub initial_cash: f64,
    pub episode: EpisodeMode,
    pub dead_zone: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            fee_rate: 0.001,
            initial_cash: 1e6,
            episode: EpisodeMode::RandomWindow { length: 252 },
            dead_zone: DEFAULT_DEAD_ZONE,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.fee_rate >= 0.0 && self.fee_rate < 1.0) {
            return Err(EnvError::Data(format!("fee_rate {} outside [0, 1)", self.fee_rate)));
        }
        if !(self.initial_cash > 0.0 && self.initial_cash.is_finite()) {
            return Err(EnvError::Data(format!("initial_cash {} must be positive", self.initial_cash)));
        }
        if !(0.0..1.0).contains(&self.dead_zone) {
            return Err(EnvError::Data(format!("dead_zone {} outside [0, 1)", self.dead_zone)));
        }
        if let EpisodeMode::RandomWindow { length } = self.episode {
            if length < 2 {
                return Err(EnvError::Data("random episode window needs at least 2 bars".into()));
            }
        }
        Ok(())
    }
}

/// Prices plus the precomputed, flattened observation at every index.
#[derive(Debug, Clone)]
pub struct MarketData {
    timestamps: Vec<DateTime<Utc>>,
    closes: Vec<f64>,
    observations: Vec<Arc<[f64]>>,
    first_full: usize,
}

impl MarketData {
    pub fn build(series: &BarSeries, cfg: &PipelineConfig) -> Result<Self, EnvError> {
        let observations = build_all_observations(series, cfg)?
            .into_iter()
            .map(|m| Arc::from(m.flatten()))
            .collect();
        Ok(Self {
            timestamps: series.bars().iter().map(|b| b.timestamp).collect(),
            closes: series.closes(),
            observations,
            first_full: cfg.window_length.saturating_sub(1),
        })
    }

    pub fn len(&self) -> usize {
        self.closes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.closes.is_empty()
    }

    pub fn closes(&self) -> &[f64] {
        &self.closes
    }

    pub fn timestamps(&self) -> &[DateTime<Utc>] {
        &self.timestamps
    }

    pub fn observation(&self, t: usize) -> &Arc<[f64]> {
        &self.observations[t]
    }

    /// Length of a flattened observation.
    pub fn observation_len(&self) -> usize {
        self.observations.first().map_or(0, |o| o.len())
    }

    /// First index whose raw window is completely filled.
    pub fn first_full_index(&self) -> usize {
        self.first_full
    }

    /// Clips `span` to the indices with a full observation window.
    pub fn tradable(&self, span: Range<usize>) -> Result<Range<usize>, EnvError> {
        let start = span.start.max(self.first_full);
        let end = span.end.min(self.len());
        if end < start + 2 {
            return Err(EnvError::Data(format!(
                "span {}..{} leaves fewer than 2 bars after the {}-bar warm-up",
                span.start, span.end, self.first_full
            )));
        }
        Ok(start..end)
    }
}

/// Agent-facing state: the observation followed by stock and cash weights.
pub fn agent_state(observation: &[f64], portfolio: &Portfolio, price: f64) -> Vec<f64> {
    let value = portfolio.value(price);
    let stock = if value > 0.0 { portfolio.shares as f64 * price / value } else { 0.0 };
    let mut out = Vec::with_capacity(observation.len() + 2);
    out.extend_from_slice(observation);
    out.push(stock);
    out.push(1.0 - stock);
    out
}

/// Number of portfolio features appended by `agent_state`.
pub const PORTFOLIO_FEATURES: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub observation: Arc<[f64]>,
    pub portfolio: Portfolio,
    pub t: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
}

/// One trading episode over a span of `MarketData`.
#[derive(Debug)]
pub struct TradingEnv<'a> {
    data: &'a MarketData,
    cfg: EnvConfig,
    span: Range<usize>,
    t: usize,
    end: usize,
    portfolio: Portfolio,
    done: bool,
}

impl<'a> TradingEnv<'a> {
    pub fn new(data: &'a MarketData, cfg: EnvConfig, span: Range<usize>) -> Result<Self, EnvError> {
        cfg.validate()?;
        let span = data.tradable(span)?;
        Ok(Self {
            data,
            cfg,
            t: span.start,
            end: span.end,
            span,
            portfolio: Portfolio::new(cfg.initial_cash),
            done: false,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn data(&self) -> &MarketData {
        self.data
    }

    /// Starts a new episode. Full-span episodes begin at the first tradable
    /// index; random windows draw a start uniformly.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> EnvState {
        let (start, end) = match self.cfg.episode {
            EpisodeMode::FullSpan => (self.span.start, self.span.end),
            EpisodeMode::RandomWindow { length } => {
                let available = self.span.end - self.span.start;
                if length >= available {
                    (self.span.start, self.span.end)
                } else {
                    let start = rng.random_range(self.span.start..=self.span.end - length);
                    (start, start + length)
                }
            }
        };
        self.t = start;
        self.end = end;
        self.portfolio = Portfolio::new(self.cfg.initial_cash);
        self.done = false;
        self.state()
    }

    pub fn state(&self) -> EnvState {
        EnvState {
            observation: self.data.observation(self.t).clone(),
            portfolio: self.portfolio,
            t: self.t,
        }
    }

    /// Observation plus portfolio weights at the current index.
    pub fn agent_state(&self) -> Vec<f64> {
        agent_state(self.data.observation(self.t), &self.portfolio, self.price())
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Decisions per episode under the configured episode mode.
    pub fn steps_per_episode(&self) -> usize {
        let available = self.span.end - self.span.start;
        let bars = match self.cfg.episode {
            EpisodeMode::FullSpan => available,
            EpisodeMode::RandomWindow { length } => length.min(available),
        };
        bars - 1
    }

    pub fn episode_end(&self) -> usize {
        self.end
    }

    pub fn portfolio(&self) -> &Portfolio {
        &self.portfolio
    }

    pub fn price(&self) -> f64 {
        self.data.closes[self.t]
    }

    pub fn value(&self) -> f64 {
        self.portfolio.value(self.price())
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Trades at the close of the current bar, then marks to the next close.
    pub fn step(&mut self, action: Action) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::Episode);
        }
        let price = self.price();
        if !(price > 0.0 && price.is_finite()) {
            return Err(EnvError::Price(price));
        }
        let before = self.portfolio.value(price);
        let traded = execute_trade(self.portfolio, action, price, self.cfg.fee_rate);
        self.t += 1;
        let after = traded.value(self.price());
        self.portfolio = Portfolio {
            last_value: after,
            ..traded
        };
        self.done = self.t + 1 >= self.end;
        Ok(StepOutcome {
            reward: (after - before) / before,
            done: self.done,
        })
    }
}
