//! Fixtures shared by the benchmarks.

use std::path::PathBuf;

use fusiontest_core::harness::scenario::load_scenario;
use fusiontest_core::rng::SimRng;
use fusiontest_core::{ScenarioMap, ScenarioSpec, Session, SessionOptions};

/// A smooth signal with noise, `len` samples long.
pub fn signal(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = SimRng::new(seed, 0);
    (0..len).map(|k| (k as f64 * 0.05).sin() * 3.0 + rng.range(-0.2, 0.2)).collect()
}

/// `len` rows of `cols` correlated channels.
pub fn rows(seed: u64, len: usize, cols: usize) -> Vec<Vec<f64>> {
    let base = signal(seed, len);
    let mut rng = SimRng::new(seed, 1);
    base.iter()
        .map(|b| (0..cols).map(|c| b * (1.0 + c as f64 * 0.3) + rng.range(-0.5, 0.5)).collect())
        .collect()
}

pub fn shipped(name: &str) -> (ScenarioSpec, ScenarioMap) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml"));
    load_scenario(&path).expect("shipped scenario loads")
}

/// A session on `name` advanced by `warmup` ticks.
pub fn warm_session(name: &str, warmup: usize) -> Session {
    let (spec, map) = shipped(name);
    let mut s = Session::new(spec, map, SessionOptions::default()).expect("session starts");
    for _ in 0..warmup {
        s.step().expect("tick");
    }
    s
}
