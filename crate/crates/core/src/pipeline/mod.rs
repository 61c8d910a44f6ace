//! Command orchestration behind the `posecraft` binary.
//!
//! Commands compute every artifact in memory first; the output directory is
//! touched only once a command has succeeded, or to write `error.json`.

mod config;
mod demo;

pub use config::{DepthSelectionConfig, DiffusionConfig, PredictorKind, RingConfig, RunConfig, ScheduleConfig};

use crate::align::{optimize_pose, AlignProblem, OptimReport, TargetSet};
use crate::depthsel::DepthSelection;
use crate::error::{Error, Result};
use crate::io::{self, CamerasDoc, LoadedRig, PoseDoc, RigDoc, TargetsDoc};
use crate::mvcam::{pixel_distance, ViewRig};
use crate::rig::{forward_kinematics, obj, skin};
use crate::synth::render_targets;
use config::resolve;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVALID_INPUT: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_NO_SIGNAL: i32 = 4;

pub const DEFAULT_OUTPUT_DIR: &str = "posecraft-out";
pub const ERROR_FILE: &str = "error.json";
pub const REPORT_FILE: &str = "report.json";

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidInput(_) | Error::Dimension(_) | Error::NoMatchedPairs | Error::Io { .. } | Error::Json { .. } => {
            EXIT_INVALID_INPUT
        }
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::NoSignal => EXIT_NO_SIGNAL,
        Error::NonFiniteGradient { .. } | Error::MissingCache { .. } => EXIT_FAILURE,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    /// Fit the rig to target keypoints.
    Pose,
    /// Render targets from a known pose.
    MakeTargets { pose: PathBuf, noise_sigma: f64, drop_rate: f64 },
    /// Inversion, depth selection and articulation with a toy predictor.
    DiffusionDemo,
    /// Load and cross-check every input without running anything.
    Validate,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Pose => "pose",
            Command::MakeTargets { .. } => "make-targets",
            Command::DiffusionDemo => "diffusion-demo",
            Command::Validate => "validate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Takes precedence over the config's `output_dir`.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViewResidual {
    pub view_id: usize,
    pub pairs: usize,
    pub loss: f64,
    pub rms_px: f64,
    pub max_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: &'static str,
    pub version: &'static str,
    pub config: RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth_selection: Option<DepthSelection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inversion_depth: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub per_view_residuals: Vec<ViewResidual>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<Check>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub counts: BTreeMap<String, usize>,
    /// SHA-256 of every other file written by the run.
    pub artifacts: BTreeMap<String, String>,
    pub wall_time_s: f64,
}

impl RunReport {
    fn new(command: &Command, config: &RunConfig) -> Self {
        RunReport {
            command: command.name(),
            version: env!("CARGO_PKG_VERSION"),
            config: config.echo(),
            optimizer: None,
            depth_selection: None,
            inversion_depth: None,
            per_view_residuals: Vec::new(),
            checks: Vec::new(),
            counts: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            wall_time_s: 0.0,
        }
    }
}

/// Artifacts of a successful command, not yet written.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub files: Vec<(String, Vec<u8>)>,
    pub report: RunReport,
}

struct Loaded {
    config: RunConfig,
    base: PathBuf,
}

fn load(inv: &Invocation) -> Result<Loaded> {
    let (mut config, base) = match &inv.config {
        Some(path) => {
            let config: RunConfig = io::read_json(path, "run config")?;
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (config, base)
        }
        None => (RunConfig::default(), PathBuf::new()),
    };
    if let Some(seed) = inv.seed {
        config.seed = seed;
    }
    config.optimizer.seed = config.seed;
    config.validate()?;
    Ok(Loaded { config, base })
}

/// Output directory: explicit flag (or its environment variable), then the
/// config's `output_dir`, then [`DEFAULT_OUTPUT_DIR`].
pub fn output_dir(inv: &Invocation) -> PathBuf {
    if let Some(out) = &inv.out {
        return out.clone();
    }
    inv.config
        .as_ref()
        .and_then(|path| {
            let config: RunConfig = io::read_json(path, "run config").ok()?;
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            config.output_dir.map(|d| resolve(&base, &d))
        })
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

struct Scene {
    rig: LoadedRig,
    cameras: ViewRig,
    rig_bytes: Vec<u8>,
}

fn required<'a>(field: &'a Option<PathBuf>, name: &str, command: &Command) -> Result<&'a PathBuf> {
    field
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("config field `{name}` is required for `{}`", command.name())))
}

fn load_scene(loaded: &Loaded, command: &Command) -> Result<Scene> {
    let cfg = &loaded.config;
    let rig_path = resolve(&loaded.base, required(&cfg.rig, "rig", command)?);
    let rig_text = io::read_text(&rig_path, "rig")?;
    let rig_doc: RigDoc = io::parse_json(&rig_text, "rig")?;
    let geometry = match &cfg.mesh {
        Some(p) => Some(obj::parse_obj(&io::read_text(&resolve(&loaded.base, p), "mesh")?)?),
        None => None,
    };
    let rig = rig_doc.build(geometry)?;
    let cameras = match &cfg.cameras {
        Some(p) => io::read_json::<CamerasDoc>(&resolve(&loaded.base, p), "cameras")?.build()?,
        None => cfg.views.build()?,
    };
    Ok(Scene { rig, cameras, rig_bytes: rig_text.into_bytes() })
}

fn load_targets(loaded: &Loaded, command: &Command) -> Result<TargetSet> {
    let path = resolve(&loaded.base, required(&loaded.config.targets, "targets", command)?);
    io::read_json::<TargetsDoc>(&path, "targets")?.build()
}

fn problem(scene: &Scene, targets: TargetSet, cfg: &RunConfig) -> Result<AlignProblem> {
    let r = &scene.rig;
    let mut p = AlignProblem::new(
        r.skeleton.clone(),
        r.mesh.clone(),
        r.bindings.clone(),
        scene.cameras.clone(),
        targets,
        cfg.root_attenuation,
    )?;
    p.execution = cfg.execution;
    Ok(p)
}

fn residuals(problem: &AlignProblem, report: &OptimReport) -> Result<Vec<ViewResidual>> {
    (0..problem.n_views())
        .map(|view| {
            let rendered = problem.render_keypoints(view)?;
            let dists: Vec<f64> = problem
                .targets()
                .observations()
                .iter()
                .filter(|o| o.view_id == view && o.visible)
                .filter_map(|o| match rendered.get(&o.keypoint_id) {
                    Some(&(pixel, true)) => Some(pixel_distance(pixel, o.position)),
                    _ => None,
                })
                .collect();
            let pairs = dists.len();
            let rms_px = if pairs > 0 { (dists.iter().map(|d| d * d).sum::<f64>() / pairs as f64).sqrt() } else { 0.0 };
            Ok(ViewResidual {
                view_id: view,
                pairs,
                loss: report.per_view_loss.get(view).copied().unwrap_or(0.0),
                rms_px,
                max_px: dists.iter().cloned().fold(0.0, f64::max),
            })
        })
        .collect()
}

fn cmd_pose(loaded: &Loaded, command: &Command) -> Result<RunOutput> {
    let cfg = &loaded.config;
    let scene = load_scene(loaded, command)?;
    let targets = load_targets(loaded, command)?;
    let problem = problem(&scene, targets, cfg)?;
    let result = optimize_pose(&problem, &cfg.optimizer)?;

    let skeleton = &scene.rig.skeleton;
    let world = forward_kinematics(skeleton, &result.pose)?;
    let posed = skin(skeleton, &scene.rig.mesh, &world)?;
    let posed_obj = obj::write_obj(&posed, &scene.rig.mesh.faces);
    let pose_json = io::to_json(&PoseDoc::from_pose(skeleton, &result.pose, &result.per_view_root));

    let mut report = RunReport::new(command, cfg);
    report.per_view_residuals = residuals(&result.problem, &result.report)?;
    report.counts.insert("matched_pairs".into(), result.report.matched_pairs);
    report.counts.insert("unmatched_targets".into(), result.report.unmatched_targets);
    report.optimizer = Some(result.report);
    Ok(RunOutput {
        files: vec![("pose.json".into(), pose_json.into_bytes()), ("posed.obj".into(), posed_obj.into_bytes())],
        report,
    })
}

fn cmd_make_targets(loaded: &Loaded, command: &Command, pose_path: &Path, sigma: f64, drop: f64) -> Result<RunOutput> {
    let cfg = &loaded.config;
    let scene = load_scene(loaded, command)?;
    let pose_text = io::read_text(pose_path, "pose")?;
    let (pose, _) = io::parse_json::<PoseDoc>(&pose_text, "pose")?.build(&scene.rig.skeleton)?;
    let problem = problem(&scene, TargetSet::default(), cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let targets = render_targets(&mut rng, &problem, &pose, sigma, drop)?;

    let provenance = serde_json::json!({
        "generator": "posecraft make-targets",
        "seed": cfg.seed,
        "noise_sigma": sigma,
        "drop_rate": drop,
        "pose_sha256": io::sha256_hex(pose_text.as_bytes()),
        "rig_sha256": io::sha256_hex(&scene.rig_bytes),
        "views": scene.cameras.len(),
    });
    let doc = TargetsDoc::from_targets(&targets, Some(provenance));
    let mut report = RunReport::new(command, cfg);
    let obs = targets.observations();
    report.counts.insert("observations".into(), obs.len());
    report.counts.insert("visible".into(), obs.iter().filter(|o| o.visible).count());
    Ok(RunOutput { files: vec![("targets.json".into(), io::to_json(&doc).into_bytes())], report })
}

fn cmd_validate(loaded: &Loaded, command: &Command) -> Result<RunOutput> {
    let cfg = &loaded.config;
    let mut report = RunReport::new(command, cfg);
    if cfg.rig.is_some() {
        let scene = load_scene(loaded, command)?;
        let targets = match cfg.targets {
            Some(_) => load_targets(loaded, command)?,
            None => TargetSet::default(),
        };
        let p = problem(&scene, targets, cfg)?;
        report.counts.insert("bones".into(), scene.rig.skeleton.len());
        report.counts.insert("bindings".into(), scene.rig.bindings.len());
        report.counts.insert("vertices".into(), scene.rig.mesh.vertices.len());
        report.counts.insert("views".into(), p.n_views());
        report.counts.insert("candidate_pairs".into(), p.candidate_pairs());
        report.counts.insert("unmatched_targets".into(), p.unmatched_targets());
    } else if cfg.targets.is_some() || cfg.mesh.is_some() || cfg.cameras.is_some() {
        return Err(Error::invalid("config field `rig` is required when mesh, cameras or targets are given"));
    }
    Ok(RunOutput { files: Vec::new(), report })
}

/// Runs a command without touching the filesystem beyond reading inputs.
pub fn execute(inv: &Invocation) -> Result<RunOutput> {
    let start = Instant::now();
    let loaded = load(inv)?;
    let mut out = match &inv.command {
        Command::Pose => cmd_pose(&loaded, &inv.command)?,
        Command::MakeTargets { pose, noise_sigma, drop_rate } => {
            cmd_make_targets(&loaded, &inv.command, pose, *noise_sigma, *drop_rate)?
        }
        Command::DiffusionDemo => demo::run(&loaded.config, &inv.command)?,
        Command::Validate => cmd_validate(&loaded, &inv.command)?,
    };
    out.report.artifacts = out.files.iter().map(|(name, bytes)| (name.clone(), io::sha256_hex(bytes))).collect();
    out.report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(out)
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|source| Error::Io { context: format!("cannot write '{}'", path.display()), source })
}

/// Writes a successful run's files plus `report.json`, clearing any stale
/// `error.json`.
pub fn commit(dir: &Path, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|source| Error::Io { context: format!("cannot create '{}'", dir.display()), source })?;
    let stale = dir.join(ERROR_FILE);
    if stale.exists() {
        std::fs::remove_file(&stale)
            .map_err(|source| Error::Io { context: format!("cannot remove '{}'", stale.display()), source })?;
    }
    for (name, bytes) in &out.files {
        write_file(dir, name, bytes)?;
    }
    write_file(dir, REPORT_FILE, io::to_json(&out.report).as_bytes())
}

#[derive(Debug, Serialize)]
pub struct ErrorReport<'a> {
    pub command: &'static str,
    pub error: &'static str,
    pub message: String,
    pub exit_code: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<&'a OptimReport>,
}

pub fn error_report<'a>(command: &Command, err: &'a Error) -> ErrorReport<'a> {
    ErrorReport {
        command: command.name(),
        error: err.kind(),
        message: err.to_string(),
        exit_code: exit_code(err),
        optimizer: match err {
            Error::Diverged { report, .. } => Some(report),
            _ => None,
        },
    }
}

/// Writes `error.json` into a directory this run leaves otherwise untouched.
pub fn commit_error(dir: &Path, command: &Command, err: &Error) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|source| Error::Io { context: format!("cannot create '{}'", dir.display()), source })?;
    write_file(dir, ERROR_FILE, io::to_json(&error_report(command, err)).as_bytes())
}

/// Full command run: execute, then write outputs or the error report.
/// `validate` never writes. Returns the process exit code.
pub fn run(inv: &Invocation) -> (i32, Result<RunOutput>) {
    let result = execute(inv);
    if inv.command == Command::Validate {
        let code = result.as_ref().err().map_or(EXIT_OK, exit_code);
        return (code, result);
    }
    let dir = output_dir(inv);
    match result {
        Ok(out) => match commit(&dir, &out) {
            Ok(()) => (EXIT_OK, Ok(out)),
            Err(e) => (exit_code(&e), Err(e)),
        },
        Err(e) => {
            let code = exit_code(&e);
            let _ = commit_error(&dir, &inv.command, &e);
            (code, Err(e))
        }
    }
}
