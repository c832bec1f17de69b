//! Command-line driver. Every command returns its report text and fills a
//! [`RunManifest`]; [`run`] turns the outcome into an exit code.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use diagnet_core::diagnet::{forward, grad_check, GradCheckConfig, GradCheckDims};
use diagnet_core::geom::{build_targets, TargetMode};
use diagnet_core::pipeline::{evaluate_prepared, EvalOptions};
use diagnet_core::synth::{gen_dataset, SynthSpec};
use diagnet_core::trainer::{
    loss_kind_name, mode_name, prepare_dataset, run_epochs, Checkpoint, PreparedScene, TrainConfig,
};

use crate::dataset::{self, Dataset};
use crate::error::{CliError, Result};
use crate::exec::Parallel;
use crate::manifest::RunManifest;
use crate::{checkpoint, losslog, render};

pub const CHECKPOINT_FILE: &str = "checkpoint.dgnt";
pub const LOSS_FILE: &str = "loss.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Parser)]
#[command(
    name = "diagnet",
    version,
    about = "Diagonal-constraint detection neck on synthetic scenes"
)]
pub struct Cli {
    /// Where to write the run manifest (defaults next to --out).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset file.
    Synth(SynthArgs),
    /// Train a model and write checkpoint, loss CSV and manifest into a directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Finite-difference check of the neck gradients.
    Gradcheck(GradArgs),
    /// Train one soft model per alpha plus a hard baseline and tabulate map50.
    SweepAlpha(SweepArgs),
    /// Render a target matrix or a diagonal map as a PGM image.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[arg(long, default_value_t = 64)]
    pub h_in: usize,
    #[arg(long, default_value_t = 8)]
    pub h: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: u32,
    #[arg(long, default_value_t = 2)]
    pub max_objects: usize,
    /// Reject placements that overlap an earlier box.
    #[arg(long)]
    pub no_overlap: bool,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint; its config is used as is.
    #[arg(long, conflicts_with_all = ["config", "sets", "seed"])]
    pub resume: Option<PathBuf>,
    /// Number of epochs to run (defaults to the config value).
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = diagnet_core::pipeline::DEFAULT_SCORE_THRESHOLD)]
    pub score_threshold: f64,
    #[arg(long, default_value_t = diagnet_core::pipeline::DEFAULT_NMS_IOU)]
    pub nms_iou: f64,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    /// Grid side; N = side².
    #[arg(long, default_value_t = 4)]
    pub side: usize,
    #[arg(long, default_value_t = 8)]
    pub features: usize,
    #[arg(long, default_value_t = 4)]
    pub reduced: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Debug: perturb the analytic gradient so the check must fail.
    #[arg(long, hide = true)]
    pub corrupt: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Validation set; defaults to the training set.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Comma-separated alphas.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub alphas: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RenderWhat {
    Targets,
    Diagmap,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// targets | diagmap
    pub what: String,
    #[arg(long)]
    pub data: PathBuf,
    /// Scene index within the dataset.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Required for diagmap; supplies the config for targets when given.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn load_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        cfg.apply_kv(&text)?;
    }
    for kv in &args.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn check_compatible(ds: &Dataset, cfg: &TrainConfig, what: &str) -> Result<()> {
    if ds.h_in != cfg.h_in {
        return Err(CliError::Usage(format!(
            "grid mismatch: dataset images are {0}×{0} but the {what} expects h_in={1}",
            ds.h_in, cfg.h_in
        )));
    }
    if ds.classes > cfg.classes {
        return Err(CliError::Usage(format!(
            "dataset has {} classes but the {what} predicts {}",
            ds.classes, cfg.classes
        )));
    }
    Ok(())
}

fn prepared(ds: &Dataset, cfg: &TrainConfig, what: &str) -> Result<Vec<PreparedScene>> {
    check_compatible(ds, cfg, what)?;
    Ok(prepare_dataset(&ds.scenes, cfg)?)
}

fn train_eval(
    train: &[PreparedScene],
    val: &[PreparedScene],
    cfg: &TrainConfig,
    exec: &Parallel,
) -> Result<f64> {
    let mut ck = Checkpoint::init(cfg)?;
    run_epochs(&mut ck, train, cfg.epochs, exec)?;
    Ok(evaluate_prepared(val, &ck, &EvalOptions::default(), exec)?.map50)
}

fn create_new(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(CliError::Usage(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn cmd_synth(a: &SynthArgs, m: &mut RunManifest) -> Result<String> {
    if a.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let spec = SynthSpec {
        h_in: a.h_in,
        h: a.h,
        classes: a.classes,
        max_objects: a.max_objects,
        overlap_allowed: !a.no_overlap,
        ..SynthSpec::default()
    };
    m.config = vec![
        ("seed".into(), a.seed.to_string()),
        ("count".into(), a.count.to_string()),
        ("h_in".into(), spec.h_in.to_string()),
        ("h".into(), spec.h.to_string()),
        ("classes".into(), spec.classes.to_string()),
        ("max_objects".into(), spec.max_objects.to_string()),
        ("overlap_allowed".into(), spec.overlap_allowed.to_string()),
    ];
    m.outputs.push(a.out.clone());
    create_new(&a.out, a.force)?;
    let scenes = gen_dataset(a.seed, a.count, &spec)?;
    let boxes: usize = scenes.iter().map(|s| s.boxes.len()).sum();
    dataset::write(
        &a.out,
        &Dataset {
            h_in: spec.h_in,
            classes: spec.classes,
            scenes,
        },
    )?;
    m.result("scenes", a.count);
    m.result("boxes", boxes);
    Ok(format!("scenes={}\nboxes={boxes}\n", a.count))
}

pub fn cmd_train(a: &TrainArgs, m: &mut RunManifest) -> Result<String> {
    m.inputs.push(a.data.clone());
    let mut ck = match &a.resume {
        Some(path) => {
            m.inputs.push(path.clone());
            checkpoint::load(path)?
        }
        None => {
            if let Some(c) = &a.cfg.config {
                m.inputs.push(c.clone());
            }
            Checkpoint::init(&load_config(&a.cfg)?)?
        }
    };
    m.config_kv(&ck.config.to_kv());
    let epochs = a.epochs.unwrap_or(ck.config.epochs);
    let ds = dataset::read(&a.data)?;
    let data = prepared(&ds, &ck.config, "config")?;
    let exec = Parallel::from_env()?;

    std::fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let ck_path = a.out.join(CHECKPOINT_FILE);
    let csv_path = a.out.join(LOSS_FILE);
    m.outputs.extend([ck_path.clone(), csv_path.clone()]);

    let log = run_epochs(&mut ck, &data, epochs, &exec)?;
    checkpoint::save(&ck, &ck_path)?;
    losslog::write(&csv_path, &log)?;

    let mut out = String::new();
    let _ = writeln!(out, "epochs_run={epochs}");
    let _ = writeln!(out, "epoch={}", ck.epoch);
    if let Some(last) = log.rows.last() {
        let _ = writeln!(out, "diag_loss={:?}", last.diag_loss);
        let _ = writeln!(out, "det_loss={:?}", last.det_loss);
    }
    let _ = writeln!(out, "threads={}", exec.threads());
    for line in out.lines() {
        if let Some((k, v)) = line.split_once('=') {
            m.result(k, v);
        }
    }
    Ok(out)
}

pub fn cmd_eval(a: &EvalArgs, m: &mut RunManifest) -> Result<String> {
    m.inputs.extend([a.data.clone(), a.checkpoint.clone()]);
    m.outputs.extend(a.out.clone());
    let opts = EvalOptions {
        score_threshold: a.score_threshold,
        nms_iou: a.nms_iou,
    };
    m.config = vec![
        (
            "score_threshold".into(),
            format!("{:?}", opts.score_threshold),
        ),
        ("nms_iou".into(), format!("{:?}", opts.nms_iou)),
    ];
    opts.validate()?;
    let ck = checkpoint::load(&a.checkpoint)?;
    let ds = dataset::read(&a.data)?;
    let data = prepared(&ds, &ck.config, "checkpoint")?;
    let exec = Parallel::from_env()?;
    let r = evaluate_prepared(&data, &ck, &opts, &exec)?;

    let mut out = format!(
        "map50={:?}\nmap75={:?}\nmap={:?}\nscenes={}\n",
        r.map50,
        r.map75,
        r.map_coco,
        data.len()
    );
    for (class, ap) in &r.per_class_ap {
        let _ = writeln!(out, "ap50.class{class}={:?}", ap[0]);
    }
    for line in out.lines() {
        if let Some((k, v)) = line.split_once('=') {
            m.result(k, v);
        }
    }
    if let Some(path) = &a.out {
        std::fs::write(path, &out).map_err(|e| CliError::io(path, e))?;
    }
    Ok(out)
}

pub fn cmd_gradcheck(a: &GradArgs, m: &mut RunManifest) -> Result<String> {
    let cfg = GradCheckConfig {
        seed: a.seed,
        trials: a.trials,
        dims: GradCheckDims {
            side: a.side,
            features: a.features,
            reduced: a.reduced,
        },
        tolerance: a.tolerance,
        corrupt: a.corrupt,
        ..GradCheckConfig::default()
    };
    m.config = vec![
        ("seed".into(), a.seed.to_string()),
        ("trials".into(), a.trials.to_string()),
        ("nodes".into(), (a.side * a.side).to_string()),
        ("features".into(), a.features.to_string()),
        ("reduced".into(), a.reduced.to_string()),
        ("step".into(), format!("{:?}", cfg.step)),
        ("tolerance".into(), format!("{:?}", cfg.tolerance)),
        ("corrupt".into(), a.corrupt.to_string()),
    ];
    m.outputs.extend(a.out.clone());
    let report = grad_check(&cfg)?;
    let verdict = |p: bool| if p { "pass" } else { "fail" };
    let mut out = String::new();
    for c in &report.combos {
        let key = format!("{}_{}", loss_kind_name(c.kind), mode_name(c.mode));
        let _ = writeln!(
            out,
            "{key}.max_rel_error={:e}\n{key}.result={}",
            c.max_rel_error,
            verdict(c.pass)
        );
    }
    let _ = writeln!(out, "max_rel_error={:e}", report.max_rel_error);
    let _ = writeln!(out, "result={}", verdict(report.pass));
    for line in out.lines() {
        if let Some((k, v)) = line.split_once('=') {
            m.result(k, v);
        }
    }
    if let Some(path) = &a.out {
        std::fs::write(path, &out).map_err(|e| CliError::io(path, e))?;
    }
    if !report.pass {
        print!("{out}");
        return Err(CliError::Failed(format!(
            "gradient check failed: max relative error {:e} exceeds {:e}",
            report.max_rel_error, cfg.tolerance
        )));
    }
    Ok(out)
}

pub fn cmd_sweep_alpha(a: &SweepArgs, m: &mut RunManifest) -> Result<String> {
    m.inputs.push(a.data.clone());
    m.inputs.extend(a.val.clone());
    m.outputs.push(a.out.clone());
    if a.alphas.is_empty() {
        return Err(CliError::Usage("--alphas needs at least one value".into()));
    }
    let base = load_config(&a.cfg)?;
    m.config_kv(&base.to_kv());
    let train_ds = dataset::read(&a.data)?;
    let val_ds = match &a.val {
        Some(p) => dataset::read(p)?,
        None => train_ds.clone(),
    };
    let exec = Parallel::from_env()?;

    let mut rows = Vec::new();
    let mut runs: Vec<(String, TrainConfig)> = Vec::new();
    for &alpha in &a.alphas {
        let cfg = TrainConfig {
            mode: TargetMode::Soft,
            alpha,
            ..base
        };
        cfg.validate()?;
        runs.push((format!("{alpha:?}"), cfg));
    }
    runs.push((
        "hard".into(),
        TrainConfig {
            mode: TargetMode::Hard,
            ..base
        },
    ));
    let val = prepared(&val_ds, &base, "config")?;
    for (label, cfg) in &runs {
        // Targets depend on mode and alpha, so the training set is rebuilt per run.
        let train = prepared(&train_ds, cfg, "config")?;
        let map50 = train_eval(&train, &val, cfg, &exec)?;
        m.result(&format!("map50.alpha_{label}"), format!("{map50:?}"));
        rows.push((label.clone(), map50));
    }
    let mut csv = String::from("alpha,map50\n");
    for (label, v) in &rows {
        let _ = writeln!(csv, "{label},{v:?}");
    }
    std::fs::write(&a.out, &csv).map_err(|e| CliError::io(&a.out, e))?;
    Ok(csv)
}

pub fn cmd_render(a: &RenderArgs, m: &mut RunManifest) -> Result<String> {
    m.inputs.push(a.data.clone());
    m.inputs.extend(a.checkpoint.clone());
    m.outputs.push(a.out.clone());
    let what = RenderWhat::from_str(&a.what, true).map_err(|_| {
        CliError::Usage(format!(
            "unknown render target {:?}; expected targets or diagmap",
            a.what
        ))
    })?;
    let ck = match &a.checkpoint {
        Some(p) => Some(checkpoint::load(p)?),
        None if what == RenderWhat::Diagmap => {
            return Err(CliError::Usage("diagmap needs --checkpoint".into()))
        }
        None => None,
    };
    let cfg = match &ck {
        Some(ck) => ck.config,
        None => load_config(&a.cfg)?,
    };
    m.config_kv(&cfg.to_kv());
    let ds = dataset::read(&a.data)?;
    check_compatible(&ds, &cfg, "config")?;
    let scene = ds.scenes.get(a.index).ok_or_else(|| {
        CliError::Usage(format!(
            "scene index {} out of range for {} scenes",
            a.index,
            ds.scenes.len()
        ))
    })?;
    let grid = cfg.grid()?;
    let values = match (what, &ck) {
        (RenderWhat::Targets, _) => {
            let t = build_targets(&grid, &scene.boxes, cfg.mode, cfg.alpha, cfg.diagonal)?;
            render::target_map(&t.a_diag)
        }
        (RenderWhat::Diagmap, Some(ck)) => {
            let data = prepare_dataset(std::slice::from_ref(scene), &cfg)?;
            render::diag_map(&forward(&data[0].graph, &ck.diag)?.y_hat)
        }
        (RenderWhat::Diagmap, None) => unreachable!(),
    };
    let img = render::pgm(&values, grid.h())?;
    std::fs::write(&a.out, &img).map_err(|e| CliError::io(&a.out, e))?;
    m.result("width", grid.h());
    m.result("height", grid.h());
    Ok(format!(
        "wrote {}×{} image to {}\n",
        grid.h(),
        grid.h(),
        a.out.display()
    ))
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Gradcheck(_) => "gradcheck",
            Command::SweepAlpha(_) => "sweep-alpha",
            Command::Render(_) => "render",
        }
    }

    fn default_manifest(&self) -> Option<PathBuf> {
        match self {
            Command::Synth(a) => Some(sibling(&a.out, ".manifest")),
            Command::Train(a) => Some(a.out.join(MANIFEST_FILE)),
            Command::Eval(a) => a.out.as_deref().map(|p| sibling(p, ".manifest")),
            Command::Gradcheck(a) => a.out.as_deref().map(|p| sibling(p, ".manifest")),
            Command::SweepAlpha(a) => Some(sibling(&a.out, ".manifest")),
            Command::Render(a) => Some(sibling(&a.out, ".manifest")),
        }
    }

    pub fn execute(&self, m: &mut RunManifest) -> Result<String> {
        match self {
            Command::Synth(a) => cmd_synth(a, m),
            Command::Train(a) => cmd_train(a, m),
            Command::Eval(a) => cmd_eval(a, m),
            Command::Gradcheck(a) => cmd_gradcheck(a, m),
            Command::SweepAlpha(a) => cmd_sweep_alpha(a, m),
            Command::Render(a) => cmd_render(a, m),
        }
    }
}

/// Parses `args`, runs the command, writes the manifest and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let mut m = RunManifest::new(cli.command.name());
    let start = Instant::now();
    let outcome = cli.command.execute(&mut m);
    m.duration = start.elapsed();
    let code = match &outcome {
        Ok(report) => {
            print!("{report}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            m.status = "error".into();
            m.result("error", e);
            e.exit_code()
        }
    };
    m.result("exit_code", code);
    match cli.manifest.or_else(|| cli.command.default_manifest()) {
        Some(path) => {
            let written = path
                .parent()
                .filter(|p| !p.as_os_str().is_empty() && !p.exists())
                .map_or(Ok(()), std::fs::create_dir_all)
                .and_then(|_| std::fs::write(&path, m.to_text()));
            if let Err(e) = written {
                eprintln!("error: cannot write manifest {}: {e}", path.display());
                return code.max(1);
            }
        }
        None => eprint!("{}", m.to_text()),
    }
    code
}
