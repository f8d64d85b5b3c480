use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate};
use leakwatch_core::detect::engine::{Engine, EngineSettings, EngineState};
use leakwatch_core::detect::{AlertState, AlertTransition, Criterion};
use leakwatch_core::md::CoefficientTable;
use leakwatch_core::metering::{to_flow, FlowEntry};
use leakwatch_core::sim::{
    inject_air_pockets, inject_leak, injection_rng, meter_samples, simulate, HouseholdProfile,
    LeakSpec,
};
use proptest::prelude::*;

fn trace_flows(family: u32, seed: u64, rate: f64, onset: u32, blips: usize) -> Vec<FlowEntry> {
    let start = NaiveDate::from_ymd_opt(2024, 3, 1).unwrap();
    let mut trace = simulate(&HouseholdProfile::new(family, seed), start, 15).unwrap();
    if rate > 0.0 {
        let at = trace.start + Duration::days(14) + Duration::minutes(onset as i64);
        inject_leak(&mut trace, &LeakSpec::per_minute(rate, at, None)).unwrap();
    }
    inject_air_pockets(&mut trace, blips, &mut injection_rng(seed));
    to_flow(&meter_samples(&trace, 0.0), 1).unwrap()
}

fn engine() -> Engine {
    Engine::new(EngineSettings::default(), CoefficientTable::defaults()).unwrap()
}

fn legal(from: Option<AlertState>, to: AlertState, criterion: Criterion) -> bool {
    use AlertState::*;
    match (from, to) {
        (None, Potential) => criterion == Criterion::AverageDeviation,
        (None, Confirmed) => criterion == Criterion::SteadyConsumption,
        (Some(Potential), Confirmed | ClearedByZeroFlow | Expired) => true,
        _ => false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn lifecycle_and_conjunction(
        family in 1u32..7,
        seed in any::<u64>(),
        rate in prop_oneof![Just(0.0), 0.5f64..8.0],
        onset in 0u32..1300,
        blips in 0usize..40,
    ) {
        let flows = trace_flows(family, seed, rate, onset, blips);
        let mut e = engine();
        let transitions = e.push_all(&flows).unwrap();
        let mut last: BTreeMap<u64, AlertState> = BTreeMap::new();
        for t in &transitions {
            prop_assert!(legal(last.get(&t.id).copied(), t.state, t.criterion), "{:?} after {:?}", t, last.get(&t.id));
            last.insert(t.id, t.state);
        }
        prop_assert_eq!(last.len(), e.alerts().len());
        for a in e.alerts() {
            prop_assert_eq!(Some(&a.state), last.get(&a.id));
            if a.criterion == Criterion::AverageDeviation && a.state == AlertState::Confirmed {
                let first = a.first.as_ref().unwrap();
                let second = a.confirmation.as_ref().unwrap();
                prop_assert!(first.measured > first.threshold);
                prop_assert!(second.measured > second.threshold);
                prop_assert!(second.tile.span().start <= first.tile.span().end);
                prop_assert!(second.tile.window.length() > first.tile.window.length());
            }
        }
        // Nothing is confirmed before learning, except by the steady criterion.
        let learned = flows[0].start() + Duration::days(14);
        prop_assert!(transitions
            .iter()
            .filter(|t| t.criterion == Criterion::AverageDeviation)
            .all(|t| t.timestamp >= learned));
    }

    #[test]
    fn restart_anywhere_matches_one_run(
        family in 1u32..7,
        seed in any::<u64>(),
        rate in 0.5f64..8.0,
        onset in 0u32..1300,
        cut in 0usize..21_600,
    ) {
        let flows = trace_flows(family, seed, rate, onset, 5);
        let mut whole = engine();
        let expected = whole.push_all(&flows).unwrap();

        let mut first = engine();
        let mut got: Vec<AlertTransition> = first.push_all(&flows[..cut]).unwrap();
        let json = serde_json::to_string(first.state()).unwrap();
        let state: EngineState = serde_json::from_str(&json).unwrap();
        let mut second = Engine::from_state(EngineSettings::default(), CoefficientTable::defaults(), state).unwrap();
        got.extend(second.push_all(&flows[cut..]).unwrap());
        prop_assert_eq!(got, expected);
        prop_assert_eq!(second.state(), whole.state());
    }
}
