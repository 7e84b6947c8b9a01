use moveover::layout::LayoutKind;
use moveover::metrics::{percentile, records_csv, summarize, summary_json, sustainable_density, Capacity};
use moveover::protocol::Network;
use moveover::simulator::{run, Method, ScenarioConfig, SimError};
use proptest::prelude::*;

fn cfg(layout: LayoutKind, method: Method, network: Network, rate: f64, seed: u64, duration: f64) -> ScenarioConfig {
    ScenarioConfig {
        seed,
        duration,
        ..ScenarioConfig::new(layout, method, network, rate)
    }
}

fn methods(layout: LayoutKind) -> Vec<(Method, Network)> {
    let mut out: Vec<(Method, Network)> = Method::ALL
        .into_iter()
        .filter(|m| *m != Method::Moveover && m.supports(layout))
        .map(|m| (m, Network::Ideal))
        .collect();
    out.extend(Network::ALL.map(|n| (Method::Moveover, n)));
    out
}

#[test]
fn repeated_runs_are_identical() {
    for layout in LayoutKind::ALL {
        let c = cfg(layout, Method::Moveover, Network::FiveG, 0.15, 4, 300.0);
        let (a, b) = (run(&c).unwrap(), run(&c).unwrap());
        assert_eq!(records_csv(&a.records), records_csv(&b.records));
        let v_min = c.vehicle_params().unwrap().v_min;
        assert_eq!(
            summary_json(&summarize(&a, v_min)).unwrap(),
            summary_json(&summarize(&b, v_min)).unwrap()
        );
        assert_eq!(a, b);
    }
}

#[test]
fn different_seeds_differ() {
    let a = run(&cfg(
        LayoutKind::FourWay1L,
        Method::Priority,
        Network::Ideal,
        0.1,
        1,
        300.0,
    ))
    .unwrap();
    let b = run(&cfg(
        LayoutKind::FourWay1L,
        Method::Priority,
        Network::Ideal,
        0.1,
        2,
        300.0,
    ))
    .unwrap();
    assert_ne!(records_csv(&a.records), records_csv(&b.records));
}

#[test]
fn every_method_runs_safely_on_every_layout() {
    for layout in LayoutKind::ALL {
        for (method, network) in methods(layout) {
            let r = run(&cfg(layout, method, network, 0.1, 9, 600.0)).unwrap();
            assert!(!r.records.is_empty());
            assert_eq!(r.safety.co_occupancy_events, 0, "{layout} {method} {network}");
            assert_eq!(r.safety.table_overlaps, 0, "{layout} {method} {network}");
            let done = r.records.iter().filter(|v| v.completed()).count();
            assert!(
                done * 2 >= r.records.len(),
                "{layout} {method} {network}: {done}/{}",
                r.records.len()
            );
            for v in r.records.iter().filter(|v| v.completed()) {
                assert!(v.travel_time > 0.0 && v.co2_kg > 0.0);
                assert_eq!(v.negotiated, method == Method::Moveover, "{layout} {method}");
            }
        }
    }
}

#[test]
fn unsupported_combinations_are_rejected() {
    for method in [Method::TrafficLight, Method::Fifo] {
        let c = cfg(LayoutKind::Roundabout, method, Network::Ideal, 0.1, 1, 60.0);
        assert!(matches!(c.validate(), Err(SimError::Config { .. })));
        assert!(run(&c).is_err());
    }
    let mut c = cfg(LayoutKind::FourWay1L, Method::Moveover, Network::Ideal, -0.1, 1, 60.0);
    assert!(c.validate().is_err());
    c.arrival_rate = 0.1;
    c.timestep = 0.0;
    assert!(c.validate().is_err());
}

#[test]
fn config_survives_toml() {
    let c = cfg(LayoutKind::FourWay2L, Method::Moveover, Network::FourG, 0.2, 17, 900.0);
    assert_eq!(ScenarioConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    assert!(matches!(
        ScenarioConfig::from_toml("layout = 1"),
        Err(SimError::Parse(_))
    ));
    assert!(ScenarioConfig::from_toml(
        "layout = \"four-way-1L\"\nmethod = \"moveover\"\narrival_rate = 0.1\nbogus = 3"
    )
    .is_err());
}

#[test]
fn zero_rate_spawns_nothing() {
    let r = run(&cfg(
        LayoutKind::ThreeWay1L,
        Method::Moveover,
        Network::Ideal,
        0.0,
        1,
        120.0,
    ))
    .unwrap();
    assert!(r.records.is_empty());
    assert_eq!(r.backup_activations, 0);
}

/// Largest grid density before the first failure, computed directly.
fn capacity_oracle(points: &[(f64, f64)], threshold: f64) -> Option<f64> {
    points
        .iter()
        .take_while(|(_, p)| *p < threshold)
        .map(|(d, _)| *d)
        .last()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn short_runs_never_share_a_zone(
        layout in prop::sample::select(LayoutKind::ALL.to_vec()),
        pick in 0usize..8,
        rate in 0.02f64..0.3,
        seed in any::<u64>(),
    ) {
        let ms = methods(layout);
        let (method, network) = ms[pick % ms.len()];
        let r = run(&cfg(layout, method, network, rate, seed, 120.0)).unwrap();
        prop_assert_eq!(r.safety.co_occupancy_events, 0);
        prop_assert_eq!(r.safety.table_overlaps, 0);
        for v in &r.records {
            prop_assert!(v.messages <= 2 * 10 + 1);
            if let Some(t) = v.arrive {
                prop_assert!(t >= v.depart);
            }
        }
    }
}

proptest! {
    #[test]
    fn capacity_is_last_density_before_first_failure(
        p90s in prop::collection::vec(0.0f64..200.0, 1..20),
        threshold in 1.0f64..200.0,
    ) {
        let points: Vec<(f64, f64)> = p90s.iter().enumerate().map(|(i, p)| (0.05 + 0.025 * i as f64, *p)).collect();
        let (cap, monotone) = sustainable_density(&points, threshold);
        match capacity_oracle(&points, threshold) {
            Some(d) => prop_assert_eq!(cap, Capacity::Density(d)),
            None => prop_assert_eq!(cap, Capacity::BelowGridMinimum),
        }
        let first_fail = points.iter().position(|(_, p)| *p >= threshold).unwrap_or(points.len());
        prop_assert_eq!(monotone, points[first_fail..].iter().all(|(_, p)| *p >= threshold));
    }

    #[test]
    fn percentile_is_a_member_with_enough_mass_below(mut xs in prop::collection::vec(-1e3f64..1e3, 1..200), p in 1.0f64..=100.0) {
        xs.sort_by(f64::total_cmp);
        let q = percentile(&xs, p).unwrap();
        prop_assert!(xs.contains(&q));
        let at_or_below = xs.iter().filter(|x| **x <= q).count() as f64;
        prop_assert!(at_or_below >= p / 100.0 * xs.len() as f64 - 1e-9);
    }
}
