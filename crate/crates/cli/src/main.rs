//! `leakwatch`: simulate traces, run detection offline, emit report tables,
//! calibrate coefficients and run the monitor.
//!
//! Exit codes: 0 success, 1 runtime or input failure, 2 bad flags,
//! 3 calibration could not meet the false-alert budget.

mod specs;

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand};
use leakwatch_core::calibrate::{self, Grid};
use leakwatch_core::config::EngineConfig;
use leakwatch_core::detect::engine::{Engine, EngineSettings};
use leakwatch_core::md::CoefficientTable;
use leakwatch_core::metering::{ingest_csv, to_flow_with, FlowEntry, MeteringError};
use leakwatch_core::report::{
    parse_transitions, transitions_jsonl, window_table_name, window_tables, RunSummary,
};
use leakwatch_core::sim::{
    emit_labels_jsonl, emit_meter_csv, inject_air_pockets_in, inject_burst, inject_fire_surge,
    inject_leak, injection_rng, simulate, HouseholdProfile, LeakSpec, SidecarMeta, Trace,
};
use leakwatch_service::Source;

use specs::{parse_burst, parse_fire, parse_leak, parse_range, DayPoint, LeakArg, PulseArg};

#[derive(Parser)]
#[command(
    name = "leakwatch",
    version,
    about = "Water leak detection from cumulative meter readings"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a household trace: meter CSV plus label and metadata sidecars.
    Simulate {
        #[arg(long)]
        family: u32,
        #[arg(long)]
        days: u32,
        #[arg(long)]
        seed: u64,
        /// RATE(Lpm|Lps|Lph)@dayNThh:mm-[dayNThh:mm]; repeatable.
        #[arg(long, value_parser = parse_leak)]
        leak: Vec<LeakArg>,
        /// LITERS L@dayNThh:mm+MINUTES; repeatable.
        #[arg(long, value_parser = parse_burst)]
        burst: Vec<PulseArg>,
        /// RATE Lpm@dayNThh:mm+MINUTES sprinkler draw; repeatable.
        #[arg(long, value_parser = parse_fire)]
        fire: Vec<PulseArg>,
        /// Number of isolated air-pocket blips.
        #[arg(long, default_value_t = 0)]
        air_pockets: usize,
        /// Restrict blips to dayNThh:mm-dayNThh:mm.
        #[arg(long, value_parser = parse_range)]
        air_window: Option<(DayPoint, DayPoint)>,
        /// First simulated day.
        #[arg(long, default_value = "2024-01-01")]
        start: NaiveDate,
        /// Meter reading before the first minute, liters.
        #[arg(long, default_value_t = 0.0)]
        initial: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the bundled calibration corpus to a directory.
    Corpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "2024-01-01")]
        start: NaiveDate,
    },
    /// Run detection over a meter log and write the alert transitions.
    Detect {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Also write the summary printed on stdout.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Per-window consumption against threshold, one CSV per window length.
    Report {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        alerts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Search coefficients that keep confirmed false alerts within a budget.
    Calibrate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0)]
        budget: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the monitor and its HTTP API.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replay a meter log instead of reading standard input.
        #[arg(long, conflicts_with = "stdin")]
        replay: Option<PathBuf>,
        /// Read meter rows from standard input.
        #[arg(long)]
        stdin: bool,
    },
}

struct Failure(String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

fn usage_error(msg: String) -> ! {
    Cli::command().error(ErrorKind::InvalidValue, msg).exit()
}

fn load_config(path: Option<&Path>) -> Result<EngineConfig, Failure> {
    Ok(match path {
        Some(p) => EngineConfig::load(p)?,
        None => EngineConfig::default(),
    })
}

fn read_flows(path: &Path, settings: &EngineSettings) -> Result<Vec<FlowEntry>, Failure> {
    let f =
        File::open(path).map_err(|e| Failure(format!("cannot open {}: {e}", path.display())))?;
    let samples =
        ingest_csv(BufReader::new(f)).map_err(|e| Failure(format!("{}: {e}", path.display())))?;
    match to_flow_with(&samples, settings.interval_minutes, settings.gap_policy) {
        Ok(f) => Ok(f),
        Err(MeteringError::InsufficientData) => Ok(Vec::new()),
        Err(e) => Err(Failure(format!("{}: {e}", path.display()))),
    }
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents)
        .map_err(|e| Failure(format!("cannot write {}: {e}", path.display())))
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    out.with_file_name(format!("{stem}{suffix}"))
}

fn write_trace(
    trace: &Trace,
    profile: &HouseholdProfile,
    initial: f64,
    out: &Path,
) -> Result<(), Failure> {
    write(out, &emit_meter_csv(trace, initial))?;
    write(&sidecar(out, ".labels.jsonl"), &emit_labels_jsonl(trace))?;
    let meta = SidecarMeta {
        meta: trace.meta.clone(),
        patterns: profile.truth_schedule(EngineSettings::default().stp.lengths()),
    };
    write(
        &sidecar(out, ".meta.json"),
        &(serde_json::to_string_pretty(&meta).expect("metadata serializes") + "\n"),
    )
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    family: u32,
    days: u32,
    seed: u64,
    leaks: Vec<LeakArg>,
    bursts: Vec<PulseArg>,
    fires: Vec<PulseArg>,
    air_pockets: usize,
    air_window: Option<(DayPoint, DayPoint)>,
    start: NaiveDate,
    initial: f64,
    out: PathBuf,
) -> Result<ExitCode, Failure> {
    if initial < 0.0 {
        usage_error("--initial must be non-negative".into());
    }
    let check = |p: &DayPoint, what: &str| {
        if !p.within(days) {
            usage_error(format!(
                "{what} day{} lies outside the {days}-day trace",
                p.day
            ));
        }
    };
    for l in &leaks {
        check(&l.start, "--leak");
        if let Some(e) = &l.end {
            check(e, "--leak");
        }
    }
    for b in bursts.iter().chain(&fires) {
        check(&b.start, "--burst/--fire");
    }
    if let Some((a, b)) = &air_window {
        check(a, "--air-window");
        check(b, "--air-window");
    }
    let profile = HouseholdProfile::new(family, seed);
    let mut trace = simulate(&profile, start, days).map_err(|e| Failure(e.to_string()))?;
    for l in &leaks {
        let spec = LeakSpec {
            rate: l.rate,
            start: l.start.at(start),
            end: l.end.map(|e| e.at(start)),
        };
        inject_leak(&mut trace, &spec).map_err(|e| Failure(e.to_string()))?;
    }
    for b in &bursts {
        inject_burst(&mut trace, b.start.at(start), b.minutes, b.amount)
            .map_err(|e| Failure(e.to_string()))?;
    }
    for f in &fires {
        inject_fire_surge(&mut trace, f.start.at(start), f.minutes, f.amount)
            .map_err(|e| Failure(e.to_string()))?;
    }
    if air_pockets > 0 {
        let range = air_window.map(|(a, b)| (a.at(start), b.at(start)));
        inject_air_pockets_in(&mut trace, air_pockets, range, &mut injection_rng(seed));
    }
    write_trace(&trace, &profile, initial, &out)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_corpus(out: PathBuf, start: NaiveDate) -> Result<ExitCode, Failure> {
    let traces = calibrate::default_corpus_traces(start)?;
    for (name, trace) in &traces {
        let profile = HouseholdProfile::new(trace.meta.family_size, trace.meta.seed);
        write_trace(trace, &profile, 0.0, &out.join(format!("{name}.csv")))?;
    }
    println!("wrote {} traces to {}", traces.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn run_detection(
    config: &EngineConfig,
    trace: &Path,
    keep_evaluations: bool,
) -> Result<
    (
        Engine,
        Vec<FlowEntry>,
        Vec<leakwatch_core::detect::AlertTransition>,
    ),
    Failure,
> {
    let mut settings = config.settings()?;
    if keep_evaluations {
        settings.evaluation_log = usize::MAX;
    }
    let flows = read_flows(trace, &settings)?;
    let mut engine = Engine::new(settings, config.coefficients()?)?;
    let transitions = engine.push_all(&flows)?;
    Ok((engine, flows, transitions))
}

fn cmd_detect(
    trace: PathBuf,
    config: Option<PathBuf>,
    report: PathBuf,
    summary: Option<PathBuf>,
) -> Result<ExitCode, Failure> {
    let cfg = load_config(config.as_deref())?;
    let (engine, flows, transitions) = run_detection(&cfg, &trace, false)?;
    write(&report, &transitions_jsonl(&transitions))?;
    let text = RunSummary::from_run(&flows, &transitions, &engine).to_json() + "\n";
    if let Some(p) = summary {
        write(&p, &text)?;
    }
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(
    trace: PathBuf,
    alerts: PathBuf,
    out: PathBuf,
    config: Option<PathBuf>,
) -> Result<ExitCode, Failure> {
    let cfg = load_config(config.as_deref())?;
    let text = std::fs::read_to_string(&alerts)
        .map_err(|e| Failure(format!("cannot read {}: {e}", alerts.display())))?;
    let recorded =
        parse_transitions(&text).map_err(|e| Failure(format!("{}: {e}", alerts.display())))?;
    let (engine, _, transitions) = run_detection(&cfg, &trace, true)?;
    if recorded != transitions {
        return Err(Failure(format!(
            "{} does not match detection over {} under this configuration",
            alerts.display(),
            trace.display()
        )));
    }
    let tables = window_tables(
        engine.settings().stp.lengths(),
        engine.evaluations(),
        &recorded,
    );
    for (len, table) in &tables {
        write(&out.join(window_table_name(*len)), table)?;
    }
    println!("wrote {} tables to {}", tables.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_calibrate(
    corpus: PathBuf,
    budget: usize,
    out: PathBuf,
    config: Option<PathBuf>,
) -> Result<ExitCode, Failure> {
    let cfg = load_config(config.as_deref())?;
    let settings = cfg.settings()?;
    let traces = calibrate::load_corpus(&corpus, &settings)?;
    let start: CoefficientTable = cfg.coefficients()?;
    let result = calibrate::calibrate(&traces, &settings, &start, budget, &Grid::default())?;
    let header = format!(
        "# Calibrated by `leakwatch calibrate` on {} ({} traces), false-alert budget {budget}.\n\
         # Result: {} false alerts, {} of {} leaks missed, {} confirmed after {} min.\n",
        corpus.display(),
        traces.len(),
        result.score.false_alerts,
        result.score.missed_leaks,
        result.score.incidents,
        result.score.late_leaks,
        Grid::default().deadline_minutes,
    );
    write(&out, &(header + &result.table.to_csv()))?;
    println!(
        "{}",
        serde_json::to_string_pretty(&result.score).expect("score serializes")
    );
    if result.feasible {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "budget {budget} unreachable: best table has {} false alerts, written to {}",
            result.score.false_alerts,
            out.display()
        );
        Ok(ExitCode::from(3))
    }
}

fn cmd_serve(
    config: Option<PathBuf>,
    replay: Option<PathBuf>,
    stdin: bool,
) -> Result<ExitCode, Failure> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let cfg = load_config(config.as_deref())?;
    let source = match (replay, stdin) {
        (Some(p), _) => Source::Replay(p),
        (None, true) => Source::Reader(Box::new(BufReader::new(std::io::stdin()))),
        (None, false) => Source::Idle,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(leakwatch_service::serve(cfg, source))?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Simulate {
            family,
            days,
            seed,
            leak,
            burst,
            fire,
            air_pockets,
            air_window,
            start,
            initial,
            out,
        } => cmd_simulate(
            family,
            days,
            seed,
            leak,
            burst,
            fire,
            air_pockets,
            air_window,
            start,
            initial,
            out,
        ),
        Cmd::Corpus { out, start } => cmd_corpus(out, start),
        Cmd::Detect {
            trace,
            config,
            report,
            summary,
        } => cmd_detect(trace, config, report, summary),
        Cmd::Report {
            trace,
            alerts,
            out,
            config,
        } => cmd_report(trace, alerts, out, config),
        Cmd::Calibrate {
            corpus,
            budget,
            out,
            config,
        } => cmd_calibrate(corpus, budget, out, config),
        Cmd::Serve {
            config,
            replay,
            stdin,
        } => cmd_serve(config, replay, stdin),
    };
    match result {
        Ok(code) => code,
        Err(Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
