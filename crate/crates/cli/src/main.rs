//! `fusiontest` command line.

mod serve;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Parser, Subcommand};
use fusiontest_core::credibility::{assess, recommend_mix, render_table, CredibilityConfig, Mix, Verdict};
use fusiontest_core::deduction::{compare_outcomes, run_deduction, DeductionVerdict, OutcomeComparison};
use fusiontest_core::evaluation::{diagnose, evaluate, Rulebase, Scheme};
use fusiontest_core::harness::risk::{allocate_elements, risk_field};
use fusiontest_core::harness::scenario::load_scenario;
use fusiontest_core::harness::session::{make_adapters, replay, Session, SessionOptions};
use fusiontest_core::{RunLog, ScenarioMap, ScenarioSpec};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "fusiontest", version, about = "Virtual/physical fusion test harness for automated-driving algorithms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its log.
    Run {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Log path; defaults to runs/<scenario>-<seed>.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, action = ArgAction::Set)]
        halt_on_collision: Option<bool>,
        /// Skip the deduction branches of takeovers.
        #[arg(long)]
        no_deduction: bool,
    },
    /// Score the vehicle under test of a log.
    Eval {
        log: PathBuf,
        #[arg(long)]
        scheme: Option<PathBuf>,
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Output directory; defaults to the log's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a fusion log against a real one.
    Credibility {
        real: PathBuf,
        fusion: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit non-zero when the verdict is fail.
        #[arg(long)]
        strict: bool,
    },
    /// Re-simulate a log and check it reproduces exactly.
    Replay { log: PathBuf },
    /// Serve a live session to the operator console over a websocket.
    Serve {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 8787)]
        port: u16,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, action = ArgAction::Set)]
        halt_on_collision: Option<bool>,
        /// Simulation speed relative to wall clock; 0 runs unpaced.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// Hold tick 0 until a console connects.
        #[arg(long)]
        wait_for_console: bool,
    },
    /// Rank roster entities by risk contribution and split them into
    /// physical and virtual elements.
    Allocate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        budget: usize,
        #[arg(long, default_value_t = 1.0)]
        grid: f64,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            spec,
            seed,
            out,
            halt_on_collision,
            no_deduction,
        } => cmd_run(&spec, seed, out, halt_on_collision, !no_deduction),
        Command::Eval { log, scheme, rules, out } => cmd_eval(&log, scheme, rules, out),
        Command::Credibility {
            real,
            fusion,
            out,
            strict,
        } => cmd_credibility(&real, &fusion, out, strict),
        Command::Replay { log } => cmd_replay(&log),
        Command::Serve {
            spec,
            port,
            seed,
            out,
            halt_on_collision,
            speed,
            wait_for_console,
        } => {
            let (spec_v, map) = load_scenario(&spec)?;
            let opts = SessionOptions { seed, halt_on_collision };
            let out = out.unwrap_or_else(|| default_log_path(&spec_v, seed));
            let cfg = serve::ServeConfig {
                port,
                speed,
                wait_for_console,
                out,
            };
            serve::serve(spec_v, map, opts, &cfg)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Allocate { spec, budget, grid } => cmd_allocate(&spec, budget, grid),
    }
}

fn default_log_path(spec: &ScenarioSpec, seed: Option<u64>) -> PathBuf {
    PathBuf::from("runs").join(format!("{}-{}.jsonl", spec.id, seed.unwrap_or(spec.seed)))
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub(crate) fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    path.with_file_name(format!("{stem}{suffix}"))
}

#[derive(Serialize)]
pub(crate) struct DeductionRecord {
    pub verdict: DeductionVerdict,
    pub comparison: Option<OutcomeComparison>,
}

/// Deduction branches for every takeover of a finished run.
pub(crate) fn deduce_all(
    spec: &ScenarioSpec,
    map: &ScenarioMap,
    log: &RunLog,
    takeovers: &[(fusiontest_core::deduction::TakeoverEvent, fusiontest_core::Snapshot)],
) -> Result<Vec<DeductionRecord>> {
    let mut out = Vec::new();
    for (ev, snap) in takeovers {
        let adapters = make_adapters(spec)?;
        let verdict = run_deduction(snap, spec, map, &ev.vehicle, adapters, spec.deduction.horizon)?;
        let comparison = match &verdict.branch_log {
            Some(b) => compare_outcomes(log, b, &ev.vehicle).ok(),
            None => None,
        };
        out.push(DeductionRecord { verdict, comparison });
    }
    Ok(out)
}

fn cmd_run(spec_path: &Path, seed: Option<u64>, out: Option<PathBuf>, halt: Option<bool>, deduce: bool) -> Result<ExitCode> {
    let (spec, map) = load_scenario(spec_path)?;
    let out = out.unwrap_or_else(|| default_log_path(&spec, seed));
    let opts = SessionOptions {
        seed,
        halt_on_collision: halt,
    };
    let session = Session::new(spec, map, opts)?;
    let spec = session.spec().clone();
    let map = session.map().clone();
    let (log, takeovers) = session.run_with_takeovers()?;
    write_file(&out, &log.to_jsonl())?;
    let footer = log.footer.as_ref().expect("finished log has a footer");
    println!(
        "{}: {} ticks, {:?}{} -> {}",
        spec.id,
        footer.ticks,
        footer.termination,
        footer.detail.as_deref().map(|d| format!(" ({d})")).unwrap_or_default(),
        out.display()
    );
    if deduce && !takeovers.is_empty() {
        let records = deduce_all(&spec, &map, &log, &takeovers)?;
        for r in &records {
            println!("deduction {} @ tick {}: {:?}", r.verdict.vehicle, r.verdict.tick, r.verdict.outcome);
        }
        let path = sibling(&out, ".deduction.json");
        write_file(&path, &serde_json::to_string_pretty(&records)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(log_path: &Path, scheme: Option<PathBuf>, rules: Option<PathBuf>, out: Option<PathBuf>) -> Result<ExitCode> {
    let log = RunLog::load(log_path).with_context(|| format!("loading {}", log_path.display()))?;
    let scheme = match scheme {
        Some(p) => Scheme::load(&p).with_context(|| format!("loading {}", p.display()))?,
        None => Scheme::default_scheme(),
    };
    let rules = match rules {
        Some(p) => Rulebase::load(&p).with_context(|| format!("loading {}", p.display()))?,
        None => Rulebase::default_rules(),
    };
    let report = evaluate(&log, &scheme)?;
    let diagnosis = diagnose(&report, &rules)?;
    let dir = out.unwrap_or_else(|| log_path.parent().map(Path::to_path_buf).unwrap_or_default());
    let stem = log_path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    write_file(&dir.join(format!("{stem}.eval.json")), &serde_json::to_string_pretty(&report)?)?;
    let text = format!("{}\n{}", report.render(), diagnosis.render());
    write_file(&dir.join(format!("{stem}.eval.txt")), &text)?;
    write_file(&dir.join(format!("{stem}.diagnosis.json")), &serde_json::to_string_pretty(&diagnosis)?)?;
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

/// Physical and virtual vehicle counts at the first tick, the VUT aside.
fn element_mix(log: &RunLog) -> Mix {
    let vut = &log.header.spec.vut;
    let mut m = Mix { physical: 0, virtual_: 0 };
    if let Some(t) = log.ticks.first() {
        for e in t.entities.values().filter(|e| e.kind.is_vehicle() && &e.id != vut) {
            if e.kind.is_physical() {
                m.physical += 1;
            } else {
                m.virtual_ += 1;
            }
        }
    }
    m
}

fn cmd_credibility(real: &Path, fusion: &Path, out: Option<PathBuf>, strict: bool) -> Result<ExitCode> {
    let a = RunLog::load(real).with_context(|| format!("loading {}", real.display()))?;
    let b = RunLog::load(fusion).with_context(|| format!("loading {}", fusion.display()))?;
    let report = assess(&a, &b, &CredibilityConfig::default())?;
    let rec = recommend_mix(&report, element_mix(&b));
    print!("{}", render_table(std::slice::from_ref(&report)));
    println!(
        "element mix: {} physical / {} virtual{}",
        rec.mix.physical,
        rec.mix.virtual_,
        if rec.changed { " (changed)" } else { "" }
    );
    if let Some(p) = out {
        let doc = serde_json::json!({ "report": report, "recommendation": rec });
        write_file(&p, &serde_json::to_string_pretty(&doc)?)?;
    }
    Ok(if strict && report.verdict == Verdict::Fail {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_replay(path: &Path) -> Result<ExitCode> {
    let log = RunLog::load(path).with_context(|| format!("loading {}", path.display()))?;
    let r = replay(&log)?;
    if r.identical && r.digest_ok {
        println!("replay identical: {} ticks, digest verified", r.ticks);
        return Ok(ExitCode::SUCCESS);
    }
    if !r.digest_ok {
        println!("digest mismatch: the log was modified after it was written");
    }
    if let Some(l) = r.first_difference {
        println!("re-simulation differs from line {l}");
    }
    Ok(ExitCode::from(1))
}

fn cmd_allocate(spec_path: &Path, budget: usize, grid: f64) -> Result<ExitCode> {
    let (spec, map) = load_scenario(spec_path)?;
    let session = Session::new(spec.clone(), map.clone(), SessionOptions::default())?;
    let world = session.world();
    if !world.entities.contains_key(&spec.vut) {
        bail!("vehicle under test {} is not in the roster", spec.vut);
    }
    let field = risk_field(world, &map, &spec.vut, grid);
    let ids: Vec<&str> = spec
        .roster
        .iter()
        .filter(|r| r.id != spec.vut && r.kind.is_vehicle())
        .map(|r| r.id.as_str())
        .collect();
    let alloc = allocate_elements(ids.iter().copied(), &field.contributions, budget);
    let mut rows: Vec<(&str, f64)> = ids.iter().map(|id| (*id, field.contributions.get(*id).copied().unwrap_or(0.0))).collect();
    rows.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
    let table: BTreeMap<&str, _> = alloc.iter().map(|(k, v)| (k.as_str(), v)).collect();
    for (id, c) in rows {
        println!("{id:<20} {c:>12.3} {:?}", table[id]);
    }
    Ok(ExitCode::SUCCESS)
}
