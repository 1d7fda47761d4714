//! Experiment driver: rollouts, input design, detection telemetry, closed-loop runs and oracle checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use asentinel::detector::{telemetry_header, telemetry_rows, Belief, DetectorBank};
use asentinel::io::{mask_to_bits, SystemDocument};
use asentinel::model::{sample_rollout, ControlSequence, LinearGaussianSystem, ModeSet};
use asentinel::optimizer::{solve, Formulation, ProblemSpec, SolverOptions};
use asentinel::scenario::{run_batch, summarize, worker_pool, ChannelScenario, ExperimentLog};
use asentinel::oracle;

#[derive(Parser)]
#[command(name = "asentinel", version, about = "Active detection of prevented-actuation attacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample trajectories of one mode under a fixed input.
    Simulate(RunArgs),
    /// Design one input sequence.
    Optimize(RunArgs),
    /// Run the detector bank on sampled trajectories.
    Detect(RunArgs),
    /// Run the attack scenario with detection windows designed online.
    ClosedLoop(RunArgs),
    /// Check the numerics against independent oracles.
    Verify(RunArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// System document (JSON).
    #[arg(long, conflicts_with = "scenario")]
    system: Option<PathBuf>,
    /// Scenario document (JSON); defaults to the shipped Haughton scenario.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Formulation; `closed-loop` runs all three when omitted.
    #[arg(long)]
    formulation: Option<Formulation>,
    /// Seeds: `7`, `1,2,5`, `0..50` or `0..=49`.
    #[arg(long, default_value = "0")]
    seeds: String,
    #[arg(long, default_value = "out")]
    output_dir: PathBuf,
    /// Detection bound ceiling `J̄_d`.
    #[arg(long)]
    jd_max: Option<f64>,
    /// Control cost ceiling `J̄_c`.
    #[arg(long)]
    jc_max: Option<f64>,
    /// Scales every noise covariance of the scenario.
    #[arg(long)]
    noise_scale: Option<f64>,
    /// True mode index for `simulate` and `detect`.
    #[arg(long, default_value_t = 0)]
    mode: usize,
    /// Input sequence: a JSON array of stacked inputs, or a solution document.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Horizon when neither the input nor the document fixes it.
    #[arg(long)]
    horizon: Option<usize>,
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let text = text.trim();
    let seeds: Vec<u64> = if let Some((a, b)) = text.split_once("..=") {
        (a.trim().parse()?..=b.trim().parse()?).collect()
    } else if let Some((a, b)) = text.split_once("..") {
        (a.trim().parse()?..b.trim().parse()?).collect()
    } else {
        text.split(',').map(|s| s.trim().parse::<u64>()).collect::<std::result::Result<_, _>>()?
    };
    if seeds.is_empty() {
        bail!("seed list `{text}` is empty");
    }
    Ok(seeds)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn load_scenario(args: &RunArgs) -> Result<ChannelScenario> {
    let mut s = match &args.scenario {
        Some(p) => ChannelScenario::from_json(&read(p)?).with_context(|| format!("in {}", p.display()))?,
        None => ChannelScenario::haughton(),
    };
    if let Some(scale) = args.noise_scale {
        s = s.with_noise_scale(scale);
    }
    if let Some(v) = args.jd_max {
        s.jd_max = v;
    }
    if let Some(v) = args.jc_max {
        s.jc_max = v;
    }
    s.validate()?;
    Ok(s)
}

/// A system, its modes and (when available) a problem builder.
struct Setup {
    system: LinearGaussianSystem<f64>,
    modes: ModeSet<f64>,
    horizon: Option<usize>,
    builder: Box<dyn Fn(Formulation) -> asentinel::Result<ProblemSpec<f64>>>,
}

fn load_setup(args: &RunArgs) -> Result<Setup> {
    if let Some(path) = &args.system {
        if args.noise_scale.is_some() {
            bail!("--noise-scale applies to scenarios only");
        }
        let doc = SystemDocument::from_json(&read(path)?).with_context(|| format!("in {}", path.display()))?;
        let loaded = doc.load().with_context(|| format!("in {}", path.display()))?;
        let mut problem = loaded.problem.clone();
        if let Some(p) = problem.as_mut() {
            if let Some(v) = args.jd_max {
                p.jd_max = v;
            }
            if let Some(v) = args.jc_max {
                p.jc_max = v;
            }
        }
        let (sys, modes) = (loaded.system.clone(), loaded.modes.clone());
        let label = path.display().to_string();
        return Ok(Setup {
            horizon: problem.as_ref().map(|p| p.horizon),
            system: loaded.system,
            modes: loaded.modes,
            builder: Box::new(move |kind| match &problem {
                Some(p) => p.build(kind, &sys, &modes),
                None => Err(asentinel::Error::InvalidArgument(format!("{label} has no `problem` section"))),
            }),
        });
    }
    let s = load_scenario(args)?;
    let (sys, modes) = (s.system()?, s.modes()?);
    let (bsys, bmodes) = (sys.clone(), modes.clone());
    Ok(Setup {
        horizon: Some(s.horizon),
        system: sys,
        modes,
        builder: Box::new(move |kind| s.problem(kind, &bsys, &bmodes)),
    })
}

/// Input from `--input`, else one unit on every actuator at every step.
fn load_input(args: &RunArgs, setup: &Setup) -> Result<ControlSequence<f64>> {
    let p = setup.system.p();
    if let Some(path) = &args.input {
        let value: serde_json::Value =
            serde_json::from_str(&read(path)?).with_context(|| format!("in {}", path.display()))?;
        let list = value.get("u_star").unwrap_or(&value);
        let u: Vec<f64> = serde_json::from_value(list.clone())
            .with_context(|| format!("{}: expected an array of numbers or a `u_star` field", path.display()))?;
        return Ok(ControlSequence::new(DVector::from_vec(u), p)?);
    }
    let horizon = args.horizon.or(setup.horizon).unwrap_or(20);
    Ok(ControlSequence::new(DVector::from_element(p * horizon, 1.0), p)?)
}

fn check_mode(args: &RunArgs, modes: &ModeSet<f64>) -> Result<()> {
    if args.mode >= modes.len() {
        bail!("--mode {} out of range ({} modes)", args.mode, modes.len());
    }
    Ok(())
}

fn writer(dir: &Path, name: &str) -> Result<csv::Writer<fs::File>> {
    let path = dir.join(name);
    csv::Writer::from_path(&path).with_context(|| format!("cannot write {}", path.display()))
}

fn simulate(args: &RunArgs) -> Result<()> {
    let setup = load_setup(args)?;
    check_mode(args, &setup.modes)?;
    let u = load_input(args, &setup)?;
    let seeds = parse_seeds(&args.seeds)?;
    let rollouts = worker_pool()?.install(|| {
        seeds
            .par_iter()
            .map(|&s| sample_rollout(&setup.system, &setup.modes, args.mode, &u, s))
            .collect::<asentinel::Result<Vec<_>>>()
    })?;
    let (n, m, p) = (setup.system.n(), setup.system.m(), setup.system.p());
    let mut w = writer(&args.output_dir, "rollouts.csv")?;
    let mut header = vec!["seed".to_string(), "k".into(), "mode".into()];
    header.extend((0..n).map(|i| format!("x_{i}")));
    header.extend((0..m).map(|i| format!("y_{i}")));
    header.extend((0..p).map(|i| format!("u_{i}")));
    w.write_record(&header)?;
    for (seed, r) in seeds.iter().zip(&rollouts) {
        for k in 0..r.states.len() {
            let mut row = vec![seed.to_string(), k.to_string(), args.mode.to_string()];
            row.extend(r.states[k].iter().map(f64::to_string));
            row.extend(r.outputs[k].iter().map(f64::to_string));
            if k < u.horizon() {
                row.extend(u.step(k).iter().map(f64::to_string));
            } else {
                row.extend((0..p).map(|_| String::new()));
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    println!("wrote {} rollouts to {}", seeds.len(), args.output_dir.join("rollouts.csv").display());
    Ok(())
}

#[derive(Serialize)]
struct SolutionDocument {
    formulation: Formulation,
    status: asentinel::optimizer::SolveStatus,
    u_star: Vec<f64>,
    objective_value: f64,
    jc: f64,
    jd: f64,
    jd_max: f64,
    jc_max: Option<f64>,
    constraint_violation: f64,
    side_constraint_slack: Option<f64>,
    stationarity: f64,
    restarts_used: usize,
    seed: u64,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn optimize(args: &RunArgs) -> Result<bool> {
    let setup = load_setup(args)?;
    let kind = args.formulation.unwrap_or(Formulation::PureControl);
    let spec = (setup.builder)(kind)?;
    let seed = parse_seeds(&args.seeds)?[0];
    let opts = SolverOptions { seed, record_trace: true, ..SolverOptions::default() };
    let report = solve(&spec, &opts)?;
    let sol = &report.solution;
    let doc = SolutionDocument {
        formulation: kind,
        status: sol.status,
        u_star: sol.u_star.iter().copied().collect(),
        objective_value: sol.objective_value,
        jc: spec.control.eval(&sol.u_star),
        jd: spec.detection.eval(&sol.u_star),
        jd_max: spec.jd_max,
        jc_max: finite(spec.jc_max),
        constraint_violation: sol.constraint_violation,
        side_constraint_slack: finite(sol.side_constraint_slack),
        stationarity: sol.stationarity,
        restarts_used: sol.restarts_used,
        seed,
    };
    fs::write(args.output_dir.join("solution.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    let mut w = writer(&args.output_dir, "trace.csv")?;
    for rec in &report.trace {
        w.serialize(rec)?;
    }
    if report.trace.is_empty() {
        w.write_record(["restart", "iteration", "objective", "side_value", "violation", "multiplier", "penalty"])?;
    }
    w.flush()?;
    println!(
        "{kind}: {:?}, objective {:.6e}, J_c {:.6e}, J_d {:.6e}, violation {:.3e}",
        sol.status, sol.objective_value, doc.jc, doc.jd, sol.constraint_violation
    );
    if !sol.status.is_accepted() {
        eprintln!("error: solver finished with status {:?}", sol.status);
    }
    Ok(sol.status.is_accepted())
}

fn detect(args: &RunArgs) -> Result<()> {
    let setup = load_setup(args)?;
    check_mode(args, &setup.modes)?;
    let u = load_input(args, &setup)?;
    let horizon = args.horizon.or(setup.horizon).unwrap_or(u.horizon()).max(1);
    let seeds = parse_seeds(&args.seeds)?;
    let tables = worker_pool()?.install(|| {
        seeds
            .par_iter()
            .map(|&seed| -> asentinel::Result<Vec<String>> {
                let r = sample_rollout(&setup.system, &setup.modes, args.mode, &u, seed)?;
                let mut bank = DetectorBank::new(horizon, &setup.modes, &Belief::of_system(&setup.system))?;
                let mut rows = Vec::new();
                for k in 0..u.horizon() {
                    let out = bank.step(&setup.system, &r.outputs[k], &u.step(k))?;
                    rows.extend(telemetry_rows(&bank, k, out.decision));
                }
                Ok(rows)
            })
            .collect::<asentinel::Result<Vec<_>>>()
    })?;
    for (seed, rows) in seeds.iter().zip(tables) {
        let path = args.output_dir.join(format!("detect_seed{seed}.csv"));
        let mut text = telemetry_header(setup.modes.len()) + "\n";
        for row in rows {
            text.push_str(&row);
            text.push('\n');
        }
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    }
    let masks: Vec<String> = setup.modes.masks().iter().map(|m| mask_to_bits(m)).collect();
    println!("modes {masks:?}; wrote {} telemetry files to {}", seeds.len(), args.output_dir.display());
    Ok(())
}

/// Writes `rec` after the run-identifying columns, emitting the header on first use.
fn write_prefixed(w: &mut csv::Writer<fs::File>, started: &mut bool, log: &ExperimentLog, rec: &impl Serialize) -> Result<()> {
    let mut tmp = csv::Writer::from_writer(Vec::new());
    tmp.serialize(rec)?;
    let bytes = tmp.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(bytes.as_slice());
    let lines: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;
    let [header, row] = lines.as_slice() else { bail!("unexpected record shape") };
    if !*started {
        w.write_record(["formulation", "seed"].into_iter().chain(header.iter()))?;
        *started = true;
    }
    let seed = log.seed.to_string();
    w.write_record([log.formulation.name(), seed.as_str()].into_iter().chain(row.iter()))?;
    Ok(())
}

fn write_logs(dir: &Path, logs: &[ExperimentLog]) -> Result<()> {
    let mut steps = writer(dir, "steps.csv")?;
    let mut windows = writer(dir, "windows.csv")?;
    let mut latencies = writer(dir, "latencies.csv")?;
    let mut started = [false; 3];
    for log in logs {
        for r in &log.steps {
            write_prefixed(&mut steps, &mut started[0], log, r)?;
        }
        for r in &log.windows {
            write_prefixed(&mut windows, &mut started[1], log, r)?;
        }
        for r in &log.latencies {
            write_prefixed(&mut latencies, &mut started[2], log, r)?;
        }
    }
    steps.flush()?;
    windows.flush()?;
    latencies.flush()?;
    Ok(())
}

fn closed_loop(args: &RunArgs) -> Result<()> {
    if args.system.is_some() {
        bail!("closed-loop runs a scenario; use --scenario");
    }
    let s = load_scenario(args)?;
    let seeds = parse_seeds(&args.seeds)?;
    let kinds: Vec<Formulation> = match args.formulation {
        Some(k) => vec![k],
        None => Formulation::ALL.to_vec(),
    };
    // normalization always needs the pure-control runs
    let baseline = run_batch(&s, Formulation::PureControl, &seeds)?;
    let mut logs = Vec::new();
    let mut rows = Vec::new();
    for &kind in &kinds {
        let runs = if kind == Formulation::PureControl { baseline.clone() } else { run_batch(&s, kind, &seeds)? };
        for run in &runs {
            for w in run.windows.iter().filter(|w| w.failed) {
                log::warn!("{kind} seed {}: window {} {:?}, zero input applied", run.seed, w.window, w.status);
            }
        }
        rows.push(summarize(&baseline, &runs)?);
        logs.extend(runs);
    }
    write_logs(&args.output_dir, &logs)?;
    let mut w = writer(&args.output_dir, "summary.csv")?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    println!(
        "{:<22} {:>5} {:>10} {:>10} {:>7} {:>12} {:>10}",
        "formulation", "seeds", "norm J_c", "norm J_d", "failed", "latency min", "max level"
    );
    for r in &rows {
        let latency = r.mean_latency_minutes.map_or("-".to_string(), |l| format!("{l:.1}"));
        println!(
            "{:<22} {:>5} {:>10.4} {:>10.4} {:>7} {:>12} {:>10.3}",
            r.formulation.name(),
            r.seeds,
            r.mean_normalized_jc,
            r.mean_normalized_jd,
            r.failed_windows,
            latency,
            r.max_expected_level
        );
    }
    Ok(())
}

fn verify(args: &RunArgs) -> Result<bool> {
    let seed = parse_seeds(&args.seeds)?[0];
    let checks = oracle::run_all(seed)?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    Ok(failed == 0)
}

fn run(cli: Cli) -> Result<bool> {
    let args = match &cli.command {
        Command::Simulate(a) | Command::Optimize(a) | Command::Detect(a) | Command::ClosedLoop(a) => a,
        Command::Verify(a) => return verify(a),
    };
    fs::create_dir_all(&args.output_dir)
        .with_context(|| format!("cannot create {}", args.output_dir.display()))?;
    match &cli.command {
        Command::Simulate(a) => simulate(a).map(|_| true),
        Command::Optimize(a) => optimize(a),
        Command::Detect(a) => detect(a).map(|_| true),
        Command::ClosedLoop(a) => closed_loop(a).map(|_| true),
        Command::Verify(_) => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
