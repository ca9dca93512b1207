//! Operator entry point: import, synthesize, simulate, train, and
//! evaluate. Every simulate/train/evaluate output directory carries a
//! manifest (config snapshot, seeds, input hashes, artifact names) and can
//! be reproduced byte-for-byte from it.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::engine::{
    run_segment, BackgroundPolicy, EgoPolicy, EgoSelection, LaneChangeScript, LeftTurnScript,
    Models, PredictorChoice, SimConfig, SimTrace,
};
use crate::map::HDMap;
use crate::metrics::{colliding_agents, MetricsReport};
use crate::predict::{ModelParams, PredictorConfig};
use crate::scenario::{
    parse_ngsim_csv, read_log_file, segment_log, write_log_file, AgentId, ColumnMap, InputUnits,
    LogScenario, ScenarioError,
};

/// Exit codes: 0 ok, 1 runtime, 2 input format, 3 validation.
pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;

#[derive(Debug)]
struct CliFailure {
    code: i32,
    message: String,
}

impl CliFailure {
    fn runtime(msg: impl Into<String>) -> CliFailure {
        CliFailure {
            code: EXIT_RUNTIME,
            message: msg.into(),
        }
    }
    fn input(msg: impl Into<String>) -> CliFailure {
        CliFailure {
            code: EXIT_INPUT,
            message: msg.into(),
        }
    }
    fn validation(msg: impl Into<String>) -> CliFailure {
        CliFailure {
            code: EXIT_VALIDATION,
            message: msg.into(),
        }
    }
}

impl From<std::io::Error> for CliFailure {
    fn from(e: std::io::Error) -> Self {
        CliFailure::runtime(e.to_string())
    }
}

impl From<ScenarioError> for CliFailure {
    fn from(e: ScenarioError) -> Self {
        let code = match &e {
            ScenarioError::MissingColumn(_)
            | ScenarioError::NonMonotonicFrames { .. }
            | ScenarioError::Parse { .. } => EXIT_INPUT,
            ScenarioError::UnitRange { .. }
            | ScenarioError::TooShort { .. }
            | ScenarioError::Invalid(_) => EXIT_VALIDATION,
            ScenarioError::Io(_) => EXIT_RUNTIME,
        };
        CliFailure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<crate::map::MapError> for CliFailure {
    fn from(e: crate::map::MapError) -> Self {
        match &e {
            crate::map::MapError::Format(_) => CliFailure::input(e.to_string()),
            crate::map::MapError::Io(_) => CliFailure::runtime(e.to_string()),
            _ => CliFailure::validation(e.to_string()),
        }
    }
}

impl From<crate::engine::EngineError> for CliFailure {
    fn from(e: crate::engine::EngineError) -> Self {
        CliFailure::validation(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "logsim",
    about = "Closed-loop traffic simulation by log replay with conflict-aware takeover",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Import an NGSIM-style CSV into the canonical log format.
    Import(ImportArgs),
    /// Generate built-in synthetic scenarios (logs plus maps).
    Synth(SynthArgs),
    /// Segment a log and run the closed-loop engine on every segment.
    Simulate(SimulateArgs),
    /// Train the motion predictor or the takeover policy.
    Train(TrainArgs),
    /// Compute the evaluation report for simulated traces.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct ImportArgs {
    /// NGSIM-style CSV file.
    #[arg(long)]
    csv: PathBuf,
    /// Map document to attach (JSON).
    #[arg(long)]
    map: Option<PathBuf>,
    /// Output canonical log path.
    #[arg(long)]
    out: PathBuf,
    /// Input units of lengths and speeds.
    #[arg(long, default_value = "feet")]
    units: String,
    /// Column overrides, e.g. "vehicle_id=0,frame=1,local_x=4".
    #[arg(long)]
    columns: Option<String>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// One of: cut-in, left-turn, no-conflict, corpus.
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Clone)]
struct SimulateArgs {
    /// Canonical log file.
    #[arg(long)]
    log: PathBuf,
    /// Map document (JSON).
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Region-of-interest radius in meters.
    #[arg(long)]
    roi: Option<f64>,
    /// Ego agent id, or "random".
    #[arg(long)]
    ego: Option<String>,
    /// Ego motion: replay | lane-change | left-turn | idm.
    #[arg(long)]
    ego_policy: Option<String>,
    /// Tick at which a scripted ego deviation begins.
    #[arg(long)]
    script_tick: Option<usize>,
    /// Conflict-gating predictor for the ego: replay | kinematic | learned.
    #[arg(long)]
    predictor: Option<String>,
    /// Predictor checkpoint (required for --predictor learned).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Pure replay baseline: never take over background agents.
    #[arg(long)]
    disable_takeover: bool,
    /// Background agents: replay | idm.
    #[arg(long)]
    background: Option<String>,
    /// Flat key=value config file; flags win over file entries.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// What to train: predictor | policy.
    kind: String,
    /// Canonical log with training data (predictor only).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Map document for the training data.
    #[arg(long)]
    map: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training epochs (predictor).
    #[arg(long)]
    epochs: Option<usize>,
    /// Recurrent hidden width (predictor).
    #[arg(long)]
    hidden: Option<usize>,
    /// Gradient updates (policy).
    #[arg(long, default_value_t = 200)]
    updates: usize,
    /// Rollout steps collected per update (policy).
    #[arg(long, default_value_t = 400)]
    steps: usize,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Directory produced by `simulate` (contains seg*/trace.csv).
    #[arg(long)]
    traces: PathBuf,
    /// The source canonical log.
    #[arg(long)]
    log: PathBuf,
    /// Map document.
    #[arg(long)]
    map: PathBuf,
    /// Output report path (JSON).
    #[arg(long)]
    out: PathBuf,
}

/// Run the CLI; returns the process exit code.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let mut argv: Vec<String> = vec!["logsim".to_string()];
    argv.extend(args);
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the error path with code 0
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Cmd::Import(a) => cmd_import(a),
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// Flat snapshot of the effective configuration.
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    /// Input paths with SHA-256 content hashes.
    pub inputs: BTreeMap<String, String>,
    /// Artifact names relative to the output directory.
    pub artifacts: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, seed: u64) -> RunManifest {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: BTreeMap::new(),
            seed,
            inputs: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    fn add_input(&mut self, path: &Path) -> Result<(), CliFailure> {
        let bytes = fs::read(path)
            .map_err(|e| CliFailure::input(format!("cannot read {}: {e}", path.display())))?;
        let digest = sha2::Sha256::digest(&bytes);
        self.inputs
            .insert(path.display().to_string(), hex::encode(digest));
        Ok(())
    }

    fn write(&self, dir: &Path) -> Result<(), CliFailure> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliFailure::runtime(e.to_string()))?;
        fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// import
// ---------------------------------------------------------------------------

fn parse_columns(spec: &str) -> Result<ColumnMap, CliFailure> {
    let mut map = ColumnMap::default();
    for part in spec.split(',') {
        let (name, idx) = part
            .split_once('=')
            .ok_or_else(|| CliFailure::input(format!("bad column override {part:?}")))?;
        let idx: usize = idx
            .trim()
            .parse()
            .map_err(|e| CliFailure::input(format!("column {name}: {e}")))?;
        match name.trim() {
            "vehicle_id" => map.vehicle_id = idx,
            "frame" => map.frame = idx,
            "local_x" => map.local_x = idx,
            "local_y" => map.local_y = idx,
            "length" => map.length = idx,
            "width" => map.width = idx,
            "velocity" => map.velocity = idx,
            "lane_id" => map.lane_id = idx,
            other => return Err(CliFailure::input(format!("unknown column {other:?}"))),
        }
    }
    Ok(map)
}

fn cmd_import(args: ImportArgs) -> Result<(), CliFailure> {
    let units = match args.units.as_str() {
        "feet" => InputUnits::Feet,
        "meters" => InputUnits::Meters,
        other => return Err(CliFailure::input(format!("unknown units {other:?}"))),
    };
    let columns = match &args.columns {
        Some(spec) => parse_columns(spec)?,
        None => ColumnMap::default(),
    };
    let file = fs::File::open(&args.csv)
        .map_err(|e| CliFailure::input(format!("cannot open {}: {e}", args.csv.display())))?;
    let mut log = parse_ngsim_csv(BufReader::new(file), &columns, units)?;
    if let Some(map_path) = &args.map {
        let map = HDMap::read_file(map_path)?;
        log = log.with_map(map);
    }
    write_log_file(&log, &args.out)?;
    println!(
        "{} tracks, {} steps -> {}",
        log.tracks.len(),
        log.duration_steps,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct ScenarioMeta {
    pub kind: String,
    pub ego: u64,
    pub victim: u64,
    pub script_tick: usize,
    pub seed: u64,
}

fn write_scenario(
    dir: &Path,
    log: &LogScenario,
    meta: &ScenarioMeta,
) -> Result<(), CliFailure> {
    fs::create_dir_all(dir)?;
    write_log_file(log, &dir.join("log.csv"))?;
    log.map.write_file(&dir.join("map.json"))?;
    fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(meta).map_err(|e| CliFailure::runtime(e.to_string()))?,
    )?;
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliFailure> {
    fs::create_dir_all(&args.out_dir)?;
    match args.scenario.as_str() {
        "cut-in" => {
            let (log, roles) = crate::synth::cut_in_log(args.seed);
            write_scenario(
                &args.out_dir,
                &log,
                &ScenarioMeta {
                    kind: "cut-in".into(),
                    ego: roles.ego.0,
                    victim: roles.victim.0,
                    script_tick: roles.script_tick,
                    seed: args.seed,
                },
            )?;
        }
        "left-turn" => {
            let (log, roles) = crate::synth::left_turn_log(args.seed);
            write_scenario(
                &args.out_dir,
                &log,
                &ScenarioMeta {
                    kind: "left-turn".into(),
                    ego: roles.ego.0,
                    victim: roles.victim.0,
                    script_tick: roles.script_tick,
                    seed: args.seed,
                },
            )?;
        }
        "no-conflict" => {
            let log = crate::synth::no_conflict_log(args.seed);
            let ego = *log.tracks.keys().next().unwrap();
            write_scenario(
                &args.out_dir,
                &log,
                &ScenarioMeta {
                    kind: "no-conflict".into(),
                    ego: ego.0,
                    victim: ego.0,
                    script_tick: 0,
                    seed: args.seed,
                },
            )?;
        }
        "corpus" => {
            for (i, entry) in crate::synth::conflict_corpus(args.seed).into_iter().enumerate() {
                let kind = match entry.kind {
                    crate::synth::CorpusKind::CutIn => "cut-in",
                    crate::synth::CorpusKind::LeftTurn => "left-turn",
                    crate::synth::CorpusKind::Benign => "no-conflict",
                };
                write_scenario(
                    &args.out_dir.join(format!("seg{i:02}")),
                    &entry.log,
                    &ScenarioMeta {
                        kind: kind.into(),
                        ego: entry.roles.ego.0,
                        victim: entry.roles.victim.0,
                        script_tick: entry.roles.script_tick,
                        seed: args.seed,
                    },
                )?;
            }
        }
        other => return Err(CliFailure::input(format!("unknown scenario {other:?}"))),
    }
    println!("wrote {} scenario to {}", args.scenario, args.out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>, CliFailure> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliFailure::input(format!("cannot read {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliFailure::input(format!("config line {}: expected key = value", i + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Flags win over config-file entries, which win over defaults.
fn resolve<T, F>(flag: Option<T>, file: Option<&String>, default: T, parse: F) -> Result<T, CliFailure>
where
    F: FnOnce(&str) -> Result<T, String>,
{
    if let Some(v) = flag {
        return Ok(v);
    }
    if let Some(s) = file {
        return parse(s).map_err(CliFailure::input);
    }
    Ok(default)
}

struct ResolvedSim {
    cfg: SimConfig,
    snapshot: BTreeMap<String, String>,
    checkpoint: Option<PathBuf>,
}

fn resolve_sim_config(args: &SimulateArgs) -> Result<ResolvedSim, CliFailure> {
    let file = match &args.config {
        Some(p) => read_config_file(p)?,
        None => BTreeMap::new(),
    };
    let get = |k: &str| file.get(k);

    let roi = resolve(args.roi, get("roi"), 30.0, |s| {
        s.parse().map_err(|e| format!("roi: {e}"))
    })?;
    let seed = resolve(args.seed, get("seed"), 0, |s| {
        s.parse().map_err(|e| format!("seed: {e}"))
    })?;
    let ego_str = resolve(
        args.ego.clone(),
        get("ego"),
        "random".to_string(),
        |s| Ok(s.to_string()),
    )?;
    let ego = if ego_str == "random" {
        EgoSelection::Random
    } else {
        EgoSelection::Agent(AgentId(ego_str.parse().map_err(|e| {
            CliFailure::input(format!("ego: {e}"))
        })?))
    };
    let script_tick = resolve(args.script_tick, get("script_tick"), 80, |s| {
        s.parse().map_err(|e| format!("script_tick: {e}"))
    })?;
    let ego_policy_str = resolve(
        args.ego_policy.clone(),
        get("ego_policy"),
        "replay".to_string(),
        |s| Ok(s.to_string()),
    )?;
    let ego_policy = match ego_policy_str.as_str() {
        "replay" => EgoPolicy::Replay,
        "lane-change" => EgoPolicy::LaneChange(LaneChangeScript {
            at_tick: script_tick,
            ..LaneChangeScript::default()
        }),
        "left-turn" => EgoPolicy::LeftTurn(LeftTurnScript {
            at_tick: script_tick,
            turn_speed: 6.0,
        }),
        "idm" => EgoPolicy::IdmFollow,
        other => return Err(CliFailure::input(format!("unknown ego policy {other:?}"))),
    };
    let predictor_str = resolve(
        args.predictor.clone(),
        get("predictor"),
        "kinematic".to_string(),
        |s| Ok(s.to_string()),
    )?;
    let predictor = match predictor_str.as_str() {
        "replay" => PredictorChoice::Replay,
        "kinematic" => PredictorChoice::Kinematic,
        "learned" => PredictorChoice::Learned,
        other => return Err(CliFailure::input(format!("unknown predictor {other:?}"))),
    };
    let background_str = resolve(
        args.background.clone(),
        get("background"),
        "replay".to_string(),
        |s| Ok(s.to_string()),
    )?;
    let background = match background_str.as_str() {
        "replay" => BackgroundPolicy::Replay,
        "idm" => BackgroundPolicy::Idm,
        other => return Err(CliFailure::input(format!("unknown background {other:?}"))),
    };
    let disable_takeover = args.disable_takeover
        || get("disable_takeover").map(|s| s == "true").unwrap_or(false);

    let cfg = SimConfig {
        roi_radius: roi,
        seed,
        ego,
        ego_policy,
        predictor,
        background,
        disable_takeover,
        ..SimConfig::default()
    };
    let mut snapshot = BTreeMap::new();
    snapshot.insert("roi".into(), format!("{roi}"));
    snapshot.insert("seed".into(), format!("{seed}"));
    snapshot.insert("ego".into(), ego_str);
    snapshot.insert("ego_policy".into(), ego_policy_str);
    snapshot.insert("script_tick".into(), format!("{script_tick}"));
    snapshot.insert("predictor".into(), predictor_str);
    snapshot.insert("background".into(), background_str);
    snapshot.insert("disable_takeover".into(), format!("{disable_takeover}"));
    Ok(ResolvedSim {
        cfg,
        snapshot,
        checkpoint: args.checkpoint.clone(),
    })
}

fn load_models(resolved: &ResolvedSim) -> Result<Models, CliFailure> {
    let mut models = Models::default();
    if resolved.cfg.predictor == PredictorChoice::Learned {
        let path = resolved
            .checkpoint
            .as_ref()
            .ok_or_else(|| CliFailure::validation("--predictor learned needs --checkpoint"))?;
        let ckpt = crate::nn::Checkpoint::read_file(path)
            .map_err(|e| CliFailure::input(e.to_string()))?;
        let cfg: PredictorConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| CliFailure::input(format!("checkpoint config: {e}")))?;
        models.predictor = Some((ModelParams { store: ckpt.params }, cfg));
    }
    Ok(models)
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliFailure> {
    let resolved = resolve_sim_config(&args)?;
    let map = HDMap::read_file(&args.map)?;
    let log = read_log_file(&args.log)?.with_map(map);
    let segments = segment_log(&log)?;
    let models = load_models(&resolved)?;

    fs::create_dir_all(&args.out_dir)?;
    let mut manifest = RunManifest::new("simulate", resolved.cfg.seed);
    manifest.config = resolved.snapshot.clone();
    manifest.add_input(&args.log)?;
    manifest.add_input(&args.map)?;
    if let Some(ck) = &resolved.checkpoint {
        manifest.add_input(ck)?;
    }

    let mut total_takeovers = 0usize;
    let mut total_collisions = 0usize;
    for (k, seg) in segments.iter().enumerate() {
        let cfg = SimConfig {
            seed: resolved.cfg.seed.wrapping_add(k as u64),
            ..resolved.cfg.clone()
        };
        let trace = run_segment(seg, &cfg, &models)?;
        let seg_dir = args.out_dir.join(format!("seg{k:03}"));
        fs::create_dir_all(&seg_dir)?;
        let mut w = BufWriter::new(fs::File::create(seg_dir.join("trace.csv"))?);
        trace.write_csv(&mut w)?;
        let mut w = BufWriter::new(fs::File::create(seg_dir.join("conflicts.csv"))?);
        trace.write_conflicts_csv(&mut w)?;
        let mut w = BufWriter::new(fs::File::create(seg_dir.join("takeovers.csv"))?);
        trace.write_takeovers_csv(&mut w)?;
        manifest.artifacts.push(format!("seg{k:03}/trace.csv"));
        manifest.artifacts.push(format!("seg{k:03}/conflicts.csv"));
        manifest.artifacts.push(format!("seg{k:03}/takeovers.csv"));
        total_takeovers += trace.takeover_count();
        total_collisions += colliding_agents(&trace).len();
    }
    manifest.write(&args.out_dir)?;
    println!(
        "{} segments, {} takeovers, {} colliding agents -> {}",
        segments.len(),
        total_takeovers,
        total_collisions,
        args.out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(args: TrainArgs) -> Result<(), CliFailure> {
    match args.kind.as_str() {
        "predictor" => {
            let data = args
                .data
                .as_ref()
                .ok_or_else(|| CliFailure::validation("train predictor needs --data"))?;
            let mut log = read_log_file(data)?;
            if let Some(map_path) = &args.map {
                log = log.with_map(HDMap::read_file(map_path)?);
            }
            let segments = segment_log(&log)?;
            let cfg = PredictorConfig {
                epochs: args.epochs.unwrap_or(20),
                hidden: args.hidden.unwrap_or(32),
                embed: 16,
                ..PredictorConfig::default()
            };
            let (params, curve) = crate::predict::train_predictor(&segments, &cfg, args.seed)
                .map_err(|e| CliFailure::runtime(e.to_string()))?;
            let ckpt = crate::nn::Checkpoint::new(
                "predictor",
                args.seed,
                serde_json::to_value(&cfg).map_err(|e| CliFailure::runtime(e.to_string()))?,
                params.store,
            );
            ckpt.write_file(&args.out)
                .map_err(|e| CliFailure::runtime(e.to_string()))?;
            let curve_path = args.out.with_extension("curve.csv");
            let mut text = String::from("step,loss\n");
            for (i, loss) in curve.iter().enumerate() {
                text.push_str(&format!("{i},{loss}\n"));
            }
            fs::write(&curve_path, text)?;
            write_train_manifest(&args, &["checkpoint", "curve"])?;
            println!(
                "predictor: {} epochs, loss {:.4} -> {:.4}, checkpoint {}",
                curve.len(),
                curve.first().unwrap_or(&0.0),
                curve.last().unwrap_or(&0.0),
                args.out.display()
            );
        }
        "policy" => {
            let (params, curve) = crate::learning::train_policy(args.updates, args.steps, args.seed)
                .map_err(|e| CliFailure::runtime(e.to_string()))?;
            let ckpt = crate::nn::Checkpoint::new(
                "policy",
                args.seed,
                serde_json::json!({"updates": args.updates, "steps_per_update": args.steps}),
                params.store,
            );
            ckpt.write_file(&args.out)
                .map_err(|e| CliFailure::runtime(e.to_string()))?;
            let curve_path = args.out.with_extension("curve.csv");
            let mut text = String::from("update,mean_return,disc_accuracy\n");
            for row in &curve {
                text.push_str(&format!(
                    "{},{},{}\n",
                    row.update, row.mean_return, row.disc_accuracy
                ));
            }
            fs::write(&curve_path, text)?;
            write_train_manifest(&args, &["checkpoint", "curve"])?;
            println!(
                "policy: {} updates, return {:.2} -> {:.2}, checkpoint {}",
                curve.len(),
                curve.first().map(|r| r.mean_return).unwrap_or(0.0),
                curve.last().map(|r| r.mean_return).unwrap_or(0.0),
                args.out.display()
            );
        }
        other => return Err(CliFailure::input(format!("unknown train kind {other:?}"))),
    }
    Ok(())
}

fn write_train_manifest(args: &TrainArgs, artifacts: &[&str]) -> Result<(), CliFailure> {
    let dir = args.out.parent().unwrap_or(Path::new("."));
    let mut manifest = RunManifest::new("train", args.seed);
    manifest.config.insert("kind".into(), args.kind.clone());
    if let Some(e) = args.epochs {
        manifest.config.insert("epochs".into(), format!("{e}"));
    }
    if let Some(h) = args.hidden {
        manifest.config.insert("hidden".into(), format!("{h}"));
    }
    manifest
        .config
        .insert("updates".into(), format!("{}", args.updates));
    manifest.config.insert("steps".into(), format!("{}", args.steps));
    if let Some(d) = &args.data {
        manifest.add_input(d)?;
    }
    if let Some(m) = &args.map {
        manifest.add_input(m)?;
    }
    manifest.artifacts = artifacts.iter().map(|s| s.to_string()).collect();
    manifest.write(dir)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct ScenarioRow {
    segment: String,
    agents: usize,
    colliding_agents: usize,
    taken_over: usize,
    takeover_events: usize,
    ade_25s: f64,
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliFailure> {
    let map = HDMap::read_file(&args.map)?;
    let log = read_log_file(&args.log)?.with_map(map);
    let segments = segment_log(&log)?;
    let dims: BTreeMap<AgentId, (f64, f64)> = log
        .tracks
        .iter()
        .map(|(id, t)| (*id, (t.states[0].width, t.states[0].length)))
        .collect();

    let mut seg_dirs: Vec<PathBuf> = fs::read_dir(&args.traces)
        .map_err(|e| CliFailure::input(format!("cannot read {}: {e}", args.traces.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("trace.csv").exists())
        .collect();
    seg_dirs.sort();
    if seg_dirs.is_empty() {
        return Err(CliFailure::validation(format!(
            "no seg*/trace.csv under {}",
            args.traces.display()
        )));
    }
    if seg_dirs.len() != segments.len() {
        return Err(CliFailure::validation(format!(
            "{} traces but the log yields {} segments",
            seg_dirs.len(),
            segments.len()
        )));
    }

    let mut traces = Vec::new();
    for dir in &seg_dirs {
        let file = fs::File::open(dir.join("trace.csv"))?;
        traces.push(SimTrace::read_csv(BufReader::new(file), &dims)?);
    }
    let pairs: Vec<(&SimTrace, &crate::scenario::Segment)> =
        traces.iter().zip(segments.iter()).collect();
    let report = MetricsReport::compute(&pairs).map_err(|e| CliFailure::validation(e.to_string()))?;

    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&args.out, report.to_json())?;

    // per-scenario breakdown next to the report
    let mut rows = Vec::new();
    for ((trace, seg), dir) in pairs.iter().zip(&seg_dirs) {
        rows.push(ScenarioRow {
            segment: dir.file_name().unwrap().to_string_lossy().into_owned(),
            agents: trace
                .ticks
                .iter()
                .flat_map(|t| t.agents.keys())
                .collect::<std::collections::BTreeSet<_>>()
                .len(),
            colliding_agents: colliding_agents(trace).len(),
            taken_over: trace.taken_over.len(),
            takeover_events: trace.takeover_count(),
            ade_25s: crate::metrics::ade(trace, seg, 25.0)
                .map_err(|e| CliFailure::validation(e.to_string()))?,
        });
    }
    let breakdown_path = args.out.with_extension("scenarios.csv");
    let mut text = String::from("segment,agents,colliding_agents,taken_over,takeover_events,ade_25s\n");
    for r in &rows {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.segment, r.agents, r.colliding_agents, r.taken_over, r.takeover_events, r.ade_25s
        ));
    }
    fs::write(&breakdown_path, text)?;

    let mut manifest = RunManifest::new("evaluate", 0);
    manifest.add_input(&args.log)?;
    manifest.add_input(&args.map)?;
    manifest.artifacts = vec![
        args.out
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        breakdown_path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
    ];
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            manifest.write(parent)?;
        } else {
            manifest.write(Path::new("."))?;
        }
    }
    println!(
        "collision_rate={:.4} reactivity={:.4} relevant={:.4} progress={:.1} -> {}",
        report.collision_rate,
        report.reactivity_rate,
        report.relevant_ratio,
        report.progress,
        args.out.display()
    );
    Ok(())
}
