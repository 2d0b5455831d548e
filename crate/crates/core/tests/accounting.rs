use chanstroke::agents::{evaluate, AgentParams};
use chanstroke::env::{
    encode_action, execute_trade, Action, EnvConfig, EpisodeMode, MarketData, Portfolio, Side, TradingEnv,
};
use chanstroke::features::PipelineConfig;
use chanstroke::market_data::{synth_series, SynthSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_action(rng: &mut ChaCha8Rng) -> Action {
    let side = match rng.random_range(0..3) {
        0 => Side::Buy,
        1 => Side::Sell,
        _ => Side::Hold,
    };
    Action::new(side, rng.random_range(0.0..=1.0))
}

#[test]
fn fee_free_trades_conserve_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0_f64;
    for _ in 0..100_000 {
        let p = Portfolio {
            shares: rng.random_range(0..100_000),
            cash: rng.random_range(0.0..1e7),
            last_value: 0.0,
        };
        let price = rng.random_range(1.0..500.0);
        let before = p.value(price);
        let q = execute_trade(p, random_action(&mut rng), price, 0.0);
        worst = worst.max((q.value(price) - before).abs() / before);
        assert!(q.cash >= 0.0);
    }
    assert!(worst <= 1e-10, "worst relative drift {worst:e}");
}

proptest! {
    #[test]
    fn fees_never_create_value(cash in 1.0f64..1e7, shares in 0u64..10_000, price in 0.5f64..1000.0,
                               fee in 0.0f64..0.05, side in 0u8..3, w in 0.0f64..=1.0) {
        let p = Portfolio { shares, cash, last_value: 0.0 };
        let side = [Side::Buy, Side::Sell, Side::Hold][side as usize];
        let q = execute_trade(p, Action::new(side, w), price, fee);
        prop_assert!(q.cash >= 0.0);
        prop_assert!(q.value(price) <= p.value(price) * (1.0 + 1e-12));
    }
}

fn sine_data(len: usize, seed: u64) -> MarketData {
    let s = synth_series(&SynthSpec::sine(100.0, 10.0, 50.0, len, seed)).unwrap();
    MarketData::build(&s, &PipelineConfig::raw_window(30)).unwrap()
}

#[test]
fn rewards_telescope_to_total_return() {
    let data = sine_data(600, 4);
    for (episode, fee) in [(0u64, 0.0), (1, 0.001), (2, 0.01)] {
        let cfg = EnvConfig {
            fee_rate: fee,
            episode: EpisodeMode::RandomWindow { length: 252 },
            ..EnvConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(episode);
        let mut env = TradingEnv::new(&data, cfg, 0..600).unwrap();
        env.reset(&mut rng);
        let initial = env.value();
        let mut growth = 1.0;
        while !env.is_done() {
            let raw = rng.random_range(-1.0..1.0);
            let outcome = env.step(encode_action(raw, cfg.dead_zone)).unwrap();
            growth *= 1.0 + outcome.reward;
            assert!(env.portfolio().cash >= 0.0);
        }
        let ratio = env.value() / initial;
        assert!((growth - ratio).abs() <= 1e-10 * ratio, "fee {fee}: {growth} vs {ratio}");
    }
}

#[test]
fn step_reward_examples() {
    let data = sine_data(200, 1);
    let cfg = EnvConfig {
        fee_rate: 0.0,
        episode: EpisodeMode::FullSpan,
        ..EnvConfig::default()
    };
    let mut env = TradingEnv::new(&data, cfg, 100..200).unwrap();
    env.reset(&mut ChaCha8Rng::seed_from_u64(0));
    let p0 = env.price();
    let r = env.step(Action::buy(1.0)).unwrap().reward;
    let shares = (1e6 / p0).floor();
    let expected = shares * (env.price() - p0) / 1e6;
    assert!((r - expected).abs() < 1e-12);
}

#[test]
fn buy_and_hold_tracks_the_index() {
    let data = sine_data(1000, 8);
    let cfg = EnvConfig {
        fee_rate: 0.0,
        ..EnvConfig::default()
    };
    let curve = evaluate(&AgentParams::BuyAndHold, &data, 500..1000, &cfg).unwrap();
    let closes = &data.closes()[500..1000];
    let shares = (cfg.initial_cash / closes[0]).floor();
    let leftover = cfg.initial_cash - shares * closes[0];
    for (v, c) in curve.values().iter().zip(closes) {
        // Exact whole-share reconstruction of the index position.
        assert!((v - (leftover + shares * c)).abs() < 1e-6);
        // And within one share's worth of the normalized index.
        assert!((v / cfg.initial_cash - c / closes[0]).abs() < closes[0] / cfg.initial_cash);
    }
}

#[test]
fn turtle_on_flat_prices_keeps_cash() {
    let s = synth_series(&SynthSpec::new(
        chanstroke::market_data::SynthKind::Trend {
            start: 100.0,
            slope: 0.0,
            noise: 0.0,
        },
        300,
        0,
    ))
    .unwrap();
    let data = MarketData::build(&s, &PipelineConfig::raw_window(30)).unwrap();
    let curve = evaluate(&AgentParams::Turtle, &data, 0..300, &EnvConfig::default()).unwrap();
    assert!(curve.values().iter().all(|&v| v == 1e6));
}
