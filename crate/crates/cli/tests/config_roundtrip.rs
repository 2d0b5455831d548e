use chanstroke::agents::AgentKind;
use chanstroke::env::EpisodeMode;
use chanstroke::market_data::{SynthSpec, TimeScale};
use chanstroke_cli::config::{SpanSpec, SplitConfig};
use chanstroke_cli::RunConfig;
use proptest::prelude::*;

fn scales() -> impl Strategy<Value = Vec<TimeScale>> {
    prop::sample::subsequence(vec![TimeScale::Day, TimeScale::Week, TimeScale::Month], 0..=3)
}

fn kinds() -> impl Strategy<Value = Vec<AgentKind>> {
    prop::sample::subsequence(vec![AgentKind::Dqn, AgentKind::Ddpg, AgentKind::Mssddpg], 0..=3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn parse_serialize_parse_is_identity(
        fee in 0.0f64..0.05,
        cash in 1.0f64..1e9,
        seeds in prop::collection::vec(any::<u64>(), 1..5),
        split_at in 10usize..5000,
        test_len in 1usize..2000,
        window in 1usize..100,
        scales in scales(),
        kinds in kinds(),
        full_span in any::<bool>(),
        decay in prop::option::of(1usize..100_000),
        gamma in 0.0f64..1.0,
        synth_seed in any::<u64>(),
        by_date in any::<bool>(),
    ) {
        let mut cfg = RunConfig::default();
        cfg.data.synth = Some(SynthSpec::sine(100.0, 10.0, 50.0, 4000, synth_seed));
        cfg.env.fee_rate = fee;
        cfg.env.initial_cash = cash;
        cfg.env.episode = if full_span { EpisodeMode::FullSpan } else { EpisodeMode::RandomWindow { length: window + 1 } };
        cfg.run.seeds = seeds;
        cfg.pipeline.scales = scales;
        cfg.pipeline.window_length = window;
        cfg.agent.kinds = kinds;
        cfg.agent.train.ddpg.noise_decay_steps = decay;
        cfg.agent.train.ddpg.gamma = gamma;
        cfg.split = if by_date {
            SplitConfig {
                train: SpanSpec::Dates { start: "2001-01-01".into(), end: format!("{}-01-01", 2002 + split_at % 20) },
                test: SpanSpec::Dates { start: "2030-01-01".into(), end: "2031-06-30".into() },
            }
        } else {
            SplitConfig {
                train: SpanSpec::Bars { start_bar: 0, end_bar: split_at },
                test: SpanSpec::Bars { start_bar: split_at, end_bar: split_at + test_len },
            }
        };
        let text = cfg.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_toml_string().unwrap(), text);
        prop_assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }
}

#[test]
fn readme_example_parses() {
    let readme = include_str!("../../../README.md");
    let start = readme.find("```toml\n").unwrap() + "```toml\n".len();
    let end = start + readme[start..].find("```").unwrap();
    let cfg = RunConfig::from_toml_str(&readme[start..end]).unwrap();
    assert_eq!(cfg.pipeline.scales, vec![TimeScale::Day, TimeScale::Week, TimeScale::Month]);
    assert_eq!(cfg.env.episode, EpisodeMode::RandomWindow { length: 252 });
    cfg.split.validate().unwrap();
}
