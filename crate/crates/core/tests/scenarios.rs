use std::collections::BTreeSet;
use std::path::PathBuf;

use fusiontest_core::evaluation::{conflict_passages, diagnose, evaluate, pet, Rulebase, Scheme};
use fusiontest_core::harness::runlog::{LogEvent, Termination};
use fusiontest_core::harness::scenario::load_scenario;
use fusiontest_core::harness::session::{replay, run};
use fusiontest_core::{RunLog, SessionOptions};

const SCENARIOS: [&str; 6] =
    ["car-following", "lane-change", "unprotected-left-turn", "roundabout", "unsignalized-intersection", "merge"];

fn run_scenario(name: &str) -> RunLog {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml"));
    let (spec, map) = load_scenario(&path).unwrap();
    run(spec, map, SessionOptions::default()).unwrap()
}

#[test]
fn shipped_scenarios_run_without_background_collisions() {
    for name in SCENARIOS {
        let log = run_scenario(name);
        let footer = log.footer.as_ref().unwrap();
        assert_ne!(footer.termination, Termination::Collision, "{name}: {:?}", footer.detail);
        assert!(log.verify(), "{name}");
    }
}

#[test]
fn replay_reproduces_every_tick() {
    for name in SCENARIOS {
        let log = run_scenario(name);
        let r = replay(&log).unwrap();
        assert!(r.identical && r.digest_ok, "{name}: {r:?}");
        assert_eq!(r.ticks, log.ticks.len());
    }
}

#[test]
fn saved_logs_load_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let log = run_scenario("roundabout");
    let path = dir.path().join("roundabout.jsonl");
    log.save(&path).unwrap();
    let back = RunLog::load(&path).unwrap();
    assert_eq!(back.to_jsonl(), log.to_jsonl());
    assert_eq!(back.header, log.header);
    for (a, b) in back.ticks.iter().zip(&log.ticks) {
        assert_eq!(a, b);
    }
    assert_eq!(back.events, log.events);
    assert_eq!(back.footer, log.footer);
}

#[test]
fn entity_count_changes_only_through_spawn_and_despawn() {
    for name in SCENARIOS {
        let log = run_scenario(name);
        for w in log.ticks.windows(2) {
            let before: BTreeSet<&String> = w[0].entities.keys().collect();
            let after: BTreeSet<&String> = w[1].entities.keys().collect();
            let spawned: BTreeSet<&String> = log
                .events_at(w[0].tick)
                .filter_map(|e| match &e.event {
                    LogEvent::Spawn { id } => Some(id),
                    _ => None,
                })
                .collect();
            let despawned: BTreeSet<&String> = log
                .events_at(w[0].tick)
                .filter_map(|e| match &e.event {
                    LogEvent::Despawn { id } => Some(id),
                    _ => None,
                })
                .collect();
            let expected: BTreeSet<&String> = before.difference(&despawned).copied().chain(spawned.iter().copied()).collect();
            assert_eq!(after, expected, "{name} tick {}", w[1].tick);
        }
    }
}

#[test]
fn flow_conservation() {
    for name in SCENARIOS {
        let log = run_scenario(name);
        let roster: BTreeSet<&str> = log.header.spec.roster.iter().map(|r| r.id.as_str()).collect();
        let count = |k: &dyn Fn(&LogEvent) -> bool| log.events.iter().filter(|e| k(&e.event)).count();
        let spawned = count(&|e| matches!(e, LogEvent::Spawn { .. }));
        let despawned = count(&|e| matches!(e, LogEvent::Despawn { id } if !roster.contains(id.as_str())));
        let last = log.ticks.last().unwrap();
        let tail_tick = last.tick;
        let tail_spawn = log.events_at(tail_tick).filter(|e| matches!(e.event, LogEvent::Spawn { .. })).count();
        let tail_despawn = log.events_at(tail_tick).filter(|e| matches!(&e.event, LogEvent::Despawn { id } if !roster.contains(id.as_str()))).count();
        let in_network = last.entities.keys().filter(|id| !roster.contains(id.as_str())).count();
        assert_eq!(spawned - despawned, in_network + tail_spawn - tail_despawn, "{name}");
    }
}

#[test]
fn pet_is_never_negative() {
    for name in ["unprotected-left-turn", "roundabout", "unsignalized-intersection", "merge"] {
        let log = run_scenario(name);
        for (cid, passages) in conflict_passages(&log) {
            for a in &passages {
                for b in passages.iter().filter(|b| b.vehicle != a.vehicle && b.lane != a.lane) {
                    if let Some(r) = pet(&log, &cid, &a.vehicle, &b.vehicle) {
                        assert!(r.pet >= 0.0, "{name} {cid}: {r:?}");
                    }
                }
            }
        }
    }
}

#[test]
fn evaluation_is_deterministic_and_bounded() {
    let scheme = Scheme::default_scheme();
    let rules = Rulebase::default_rules();
    for name in SCENARIOS {
        let log = run_scenario(name);
        let a = evaluate(&log, &scheme).unwrap();
        let b = evaluate(&log, &scheme).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=100.0).contains(&a.overall), "{name}: {}", a.overall);
        for (d, s) in &a.dimensions {
            if let Some(s) = s {
                assert!((0.0..=100.0).contains(s), "{name} {d:?}: {s}");
            }
        }
        diagnose(&a, &rules).unwrap();
    }
}
