use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use spatial_memory::construct::{build_memory, sample_overview, ConstructConfig};
use spatial_memory::harness::{
    generate_scene, run_episode, run_episode_recorded, run_suite, EpisodeConfig, MemoryMode,
};
use spatial_memory::metrics::{aggregate, compute_metrics, to_csv, EpisodeLog, EventKind, DEFAULT_DEADBAND};
use spatial_memory::preprocess::{
    preprocess_trajectory, quality_report, Event, StampedFrame, TrajectoryFile, TrajectoryMeta, ValidatorConfig,
};
use spatial_memory::retrieve::{retrieve, QueryConfig};
use spatial_memory::Error;

/// Exit status for inputs or configurations that fail validation.
const EXIT_INVALID: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "spatial-memory", version, about = "Object-level spatial memory for out-of-view search and grasping")]
struct Cli {
    /// Seed (overrides the config file; base seed for `suite`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a scene and write it with a recorded scan and episode trajectory.
    Simulate(ModeArg),
    /// Back-map a trajectory onto sparse overview records.
    Preprocess(PreprocessArgs),
    /// Build scene memory from the scan phase of a trajectory.
    Construct(ConstructArgs),
    /// Run one episode and write its log, memory dump and metrics.
    Episode(ModeArg),
    /// Run paired episodes over several memory modes.
    Suite(SuiteArgs),
    /// Compute metrics over a directory of episode logs.
    Metrics(MetricsArgs),
}

#[derive(Args, Debug)]
struct ModeArg {
    /// full, scan_only, no_scan or none (defaults to the config value).
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    /// Sparse key interval N.
    #[arg(long, default_value_t = 20)]
    interval: usize,
    #[arg(long)]
    out: PathBuf,
    /// Run the data-quality validators; exit 2 if any rule fails.
    #[arg(long)]
    validate: bool,
    /// Where to write the quality report (default: <out-dir>/quality_report.json).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ConstructArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    interval: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SuiteArgs {
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    /// Comma-separated memory modes.
    #[arg(long, default_value = "full,scan_only,no_scan,none")]
    modes: String,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    /// Directory of episode log files (`*.json`); subdirectories form groups.
    #[arg(long)]
    logs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write a CSV of group means next to `--out`.
    #[arg(long)]
    csv: bool,
    #[arg(long, default_value_t = DEFAULT_DEADBAND)]
    deadband: f64,
}

/// Contents of `--config`: episode settings at the top level plus an
/// optional `validators` section.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct FileConfig {
    #[serde(flatten)]
    episode: EpisodeConfig,
    #[serde(default)]
    validators: ValidatorConfig,
}

/// Failure that maps to exit status 2.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn load_config(cli: &Cli) -> anyhow::Result<FileConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str::<FileConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.episode.seed = s;
    }
    cfg.episode.validate()?;
    Ok(cfg)
}

fn with_mode(mut cfg: EpisodeConfig, mode: &ModeArg) -> anyhow::Result<EpisodeConfig> {
    if let Some(m) = &mode.mode {
        cfg.memory_mode = m.parse()?;
    }
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_trajectory(path: &Path) -> anyhow::Result<TrajectoryFile> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(TrajectoryFile::read_jsonl(BufReader::new(f))?)
}

fn simulate(cli: &Cli, cfg: FileConfig, mode: &ModeArg) -> anyhow::Result<()> {
    let ecfg = with_mode(cfg.episode, mode)?;
    let (nets, booster) = ecfg.build_nets()?;
    let scene = generate_scene(&ecfg)?;
    let (outcome, rec) = run_episode_recorded(&ecfg, &scene, &nets, &booster)?;
    let dt = ecfg.step_duration;
    let stamped = |frames: Vec<_>| -> Vec<StampedFrame> {
        frames
            .into_iter()
            .map(|frame: spatial_memory::scene::FrameRecord| StampedFrame { stamp: Some(frame.t as f64 * dt), frame })
            .collect()
    };
    let scan_len = rec.scan.len() as u64;
    let mut events = Vec::new();
    let grasp_steps: Vec<u64> =
        outcome.log.events.iter().filter(|e| e.kind == EventKind::GraspClose).map(|e| e.t).collect();
    for s in &outcome.log.steps {
        let t = (scan_len + s.t) as f64 * dt;
        events.push(Event { t, kind: "command".into(), payload: json!({ "id": s.t, "pan": s.pan, "tilt": s.tilt }) });
        events.push(Event { t: t + 0.5 * dt, kind: "actuation".into(), payload: json!({ "id": s.t }) });
        let value = if grasp_steps.contains(&s.t) { 800.0 } else { 0.0 };
        events.push(Event { t, kind: "gripper".into(), payload: json!({ "value": value }) });
    }
    let traj = TrajectoryFile {
        meta: TrajectoryMeta { fps: 1.0 / dt, gripper_range: (0.0, 1000.0) },
        scan_frames: stamped(rec.scan),
        manip_frames: stamped(rec.live),
        events,
    };
    fs::create_dir_all(&cli.out_dir)?;
    write_json(&cli.out_dir.join("scene.json"), &scene)?;
    let path = cli.out_dir.join("trajectory.jsonl");
    let mut w = BufWriter::new(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    traj.write_jsonl(&mut w)?;
    w.flush()?;
    write_json(&cli.out_dir.join("episode_log.json"), &outcome.log)?;
    println!(
        "simulate: seed {} mode {} target {} frames {}+{} success {}",
        ecfg.seed,
        ecfg.memory_mode.name(),
        outcome.target_category,
        traj.scan_frames.len(),
        traj.manip_frames.len(),
        outcome.success
    );
    Ok(())
}

fn preprocess(cli: &Cli, cfg: FileConfig, args: &PreprocessArgs) -> anyhow::Result<()> {
    let traj = read_trajectory(&args.input)?;
    let ccfg = ConstructConfig { interval: args.interval, ..cfg.episode.construct };
    let out = preprocess_trajectory(&traj, &ccfg)?;
    write_json(&args.out, &out)?;
    println!("preprocess: {} steps, {} sparse records", out.steps.len(), out.sparse.len());
    if args.validate {
        let report = quality_report(&traj, &cfg.validators)?;
        let path = args.report.clone().unwrap_or_else(|| cli.out_dir.join("quality_report.json"));
        write_json(&path, &report)?;
        for r in &report.rules {
            println!("  {:<20} {:?}", r.rule, r.status);
        }
        if !report.passed {
            return Err(Invalid(format!("quality validation failed (report: {})", path.display())).into());
        }
    }
    Ok(())
}

fn construct(cfg: FileConfig, args: &ConstructArgs) -> anyhow::Result<()> {
    let traj = read_trajectory(&args.input)?;
    if traj.scan_frames.is_empty() {
        return Err(Error::Format("trajectory has no scan frames".into()).into());
    }
    let ccfg =
        ConstructConfig { interval: args.interval.unwrap_or(cfg.episode.construct.interval), ..cfg.episode.construct };
    let (nets, _) = cfg.episode.build_nets()?;
    let frames: Vec<_> = traj.scan_frames.into_iter().map(|f| f.frame).collect();
    let created = frames.last().map_or(0, |f| f.t);
    let memory = build_memory(&sample_overview(&frames, ccfg.interval)?, &nets, &ccfg, created)?;
    write_json(&args.out, &memory)?;
    println!("construct: {} tokens ({})", memory.len(), memory.categories().join(", "));
    Ok(())
}

fn episode(cli: &Cli, cfg: FileConfig, mode: &ModeArg) -> anyhow::Result<()> {
    let ecfg = with_mode(cfg.episode, mode)?;
    let (nets, booster) = ecfg.build_nets()?;
    let outcome = run_episode(&ecfg, &nets, &booster)?;
    let metrics = compute_metrics(&outcome.log, DEFAULT_DEADBAND)?;
    let dir = &cli.out_dir;
    write_json(&dir.join("episode_log.json"), &outcome.log)?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    if let Some(mem) = &outcome.memory {
        write_json(&dir.join("memory.json"), mem)?;
        if mem.categories().contains(&outcome.target_category) {
            let r = retrieve(mem, &outcome.target_category, &nets, &booster, &QueryConfig::default())?;
            write_json(&dir.join("retrieval.json"), &r.dump(&outcome.target_category))?;
        }
        let path = dir.join("refine_audit.jsonl");
        let mut w = BufWriter::new(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        for a in &outcome.audit {
            serde_json::to_writer(&mut w, a)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    println!(
        "episode: seed {} mode {} target {} success {} steps {}",
        ecfg.seed,
        ecfg.memory_mode.name(),
        outcome.target_category,
        outcome.success,
        outcome.log.steps.len()
    );
    Ok(())
}

fn suite(cli: &Cli, cfg: FileConfig, args: &SuiteArgs) -> anyhow::Result<()> {
    let modes = args.modes.split(',').map(|m| m.trim().parse::<MemoryMode>()).collect::<Result<Vec<_>, _>>()?;
    let base = cli.seed.unwrap_or(cfg.episode.seed);
    let run = run_suite(args.episodes, base, &cfg.episode, &modes)?;
    let dir = &cli.out_dir;
    for o in &run.outcomes {
        write_json(&dir.join("logs").join(o.mode.name()).join(format!("episode_{:06}.json", o.seed)), &o.log)?;
    }
    write_json(&dir.join("suite_report.json"), &run.report)?;
    let rows: Vec<(String, _)> =
        run.report.modes.iter().map(|m| (m.mode.name().to_string(), m.metrics.clone())).collect();
    fs::write(dir.join("suite.csv"), to_csv(&rows))?;
    for m in &run.report.modes {
        println!(
            "{:<10} success {:>5.1}%  median head path {}",
            m.mode.name(),
            100.0 * m.success_rate,
            m.metrics.head_search_path_length.median.map_or("-".into(), |v| format!("{v:.1}°"))
        );
    }
    if let Some(r) = run.report.median_head_path_ratio {
        println!("median head path full/none: {r:.3}");
    }
    Ok(())
}

fn collect_logs(dir: &Path) -> anyhow::Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    let mut entries: Vec<_> =
        fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            let group = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let mut files: Vec<_> =
                fs::read_dir(&p)?.collect::<Result<Vec<_>, _>>()?.into_iter().map(|e| e.path()).collect();
            files.retain(|f| f.extension().is_some_and(|x| x == "json"));
            files.sort();
            out.extend(files.into_iter().map(|f| (group.clone(), f)));
        } else if p.extension().is_some_and(|x| x == "json") {
            out.push(("all".to_string(), p));
        }
    }
    Ok(out)
}

fn metrics(args: &MetricsArgs) -> anyhow::Result<()> {
    let files = collect_logs(&args.logs)?;
    if files.is_empty() {
        bail!(Invalid(format!("no episode logs under {}", args.logs.display())));
    }
    let mut per_file = Vec::new();
    let mut groups: Vec<(String, Vec<_>)> = Vec::new();
    for (group, path) in &files {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let log: EpisodeLog =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let report = compute_metrics(&log, args.deadband).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if groups.last().is_none_or(|g| &g.0 != group) {
            groups.push((group.clone(), Vec::new()));
        }
        groups.last_mut().expect("group").1.push(report.clone());
        per_file
            .push(json!({ "file": path.strip_prefix(&args.logs).unwrap_or(path), "group": group, "metrics": report }));
    }
    let aggregates: Vec<(String, _)> = groups.iter().map(|(g, r)| (g.clone(), aggregate(r))).collect();
    let out = json!({
        "episodes": per_file,
        "groups": aggregates.iter().map(|(g, a)| json!({ "group": g, "aggregate": a })).collect::<Vec<_>>(),
    });
    write_json(&args.out, &out)?;
    if args.csv {
        fs::write(args.out.with_extension("csv"), to_csv(&aggregates))?;
    }
    println!("metrics: {} logs in {} groups", files.len(), groups.len());
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Simulate(m) => simulate(cli, cfg, m),
        Command::Preprocess(a) => preprocess(cli, cfg, a),
        Command::Construct(a) => construct(cfg, a),
        Command::Episode(m) => episode(cli, cfg, m),
        Command::Suite(a) => suite(cli, cfg, a),
        Command::Metrics(a) => metrics(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Invalid>().is_some() {
        return EXIT_INVALID;
    }
    match err.downcast_ref::<Error>() {
        Some(
            Error::Config(_)
            | Error::Format(_)
            | Error::InvalidArgument(_)
            | Error::UnknownCategory { .. }
            | Error::CategoryMismatch(..)
            | Error::Json(_),
        ) => EXIT_INVALID,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
