//! The `aortaseg` command-line tool.
//!
//! Every subcommand writes a JSON manifest next to its outputs
//! (`manifest.json` inside an output directory, `<file>.manifest.json`
//! beside an output file). Failures print one line to stderr:
//!
//! ```text
//! error: kind=<kind> msg="<message>"
//! ```
//!
//! and exit with 2 for usage/config problems and missing inputs, 1 for
//! everything else.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::infer::{find_checkpoints, Blend, Ensemble, InferConfig, InferReport};
use crate::mesh::{marching_cubes, mesh_stats, save_mesh, MeshFormat};
use crate::metrics::{evaluate_case, read_eval_csv, summarize, write_eval_csv};
use crate::phantom::{generate_dataset, DatasetOptions};
use crate::train::{checkpoint_path, load_cases, make_folds, train_all, train_fold, Datalist};
use crate::volume::{load_volume_as, save_volume, VolumeKind};

#[derive(Debug, Parser)]
#[command(name = "aortaseg", version, about = "Aorta segmentation: phantoms, training, two-stage inference, evaluation, meshing")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic aorta phantoms and a datalist.
    Phantom(PhantomArgs),
    /// Assign cross-validation folds to a datalist.
    Split(SplitArgs),
    /// Train the fold x repeat ensemble.
    Train(TrainArgs),
    /// Two-stage ensemble inference.
    Infer(InferArgs),
    /// Dice / HD95 of predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Extract a surface mesh from a mask.
    Mesh(MeshArgs),
    /// Summarize checkpoints and an evaluation CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `N` or `X,Y,Z`.
    #[arg(long, default_value = "64", value_parser = parse_triple)]
    pub shape: [usize; 3],
    #[arg(long, default_value_t = 0.0)]
    pub offset_fraction: f64,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// `nii.gz`, `nii` or `vol`.
    #[arg(long, default_value = "nii.gz")]
    pub ext: String,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub datalist: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Defaults to `dataset.json` beside the input.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub ckpt_dir: PathBuf,
    /// Train a single fold (requires --repeat).
    #[arg(long, requires = "repeat")]
    pub fold: Option<usize>,
    #[arg(long, requires = "fold")]
    pub repeat: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep checkpoints already on disk instead of retraining them.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt_dir: PathBuf,
    /// An image file or a directory of images.
    #[arg(long)]
    pub input: PathBuf,
    /// Output mask file, or directory when the input is a directory.
    #[arg(long)]
    pub output: PathBuf,
    /// Experiment config whose `infer` section provides defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_triple)]
    pub roi: Option<[usize; 3]>,
    #[arg(long)]
    pub overlap: Option<f64>,
    #[arg(long)]
    pub blend: Option<String>,
    #[arg(long)]
    pub paper_literal: bool,
    #[arg(long)]
    pub no_postfilter: bool,
    /// JSON report path.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Defaults to `eval.csv` inside the prediction directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MeshArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// `stl` or `obj`; inferred from the output extension when omitted.
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub smooth_iters: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub ckpt_dir: Option<PathBuf>,
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn parse_triple(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let t = match parts[..] {
        [n] => [n; 3],
        [x, y, z] => [x, y, z],
        _ => return Err(format!("expected N or X,Y,Z, got {s:?}")),
    };
    if t.contains(&0) {
        return Err("sizes must be >= 1".into());
    }
    Ok(t)
}

#[derive(Debug, Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    command: String,
    args: Vec<String>,
    started_unix: u64,
    seconds: f64,
    threads: usize,
    config: Value,
    outputs: Vec<PathBuf>,
}

/// Manifest location for an output path.
pub fn manifest_path(output: &Path) -> PathBuf {
    if output.is_dir() {
        output.join("manifest.json")
    } else {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        output.with_file_name(name)
    }
}

struct Run {
    command: &'static str,
    args: Vec<String>,
    started: Instant,
    started_unix: u64,
}

impl Run {
    fn finish(&self, anchor: &Path, config: Value, outputs: Vec<PathBuf>) -> Result<()> {
        let m = Manifest {
            tool: "aortaseg",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command.into(),
            args: self.args.clone(),
            started_unix: self.started_unix,
            seconds: self.started.elapsed().as_secs_f64(),
            threads: rayon::current_num_threads(),
            config,
            outputs,
        };
        let path = manifest_path(anchor);
        write_json(&path, &m)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn is_volume_file(p: &Path) -> bool {
    let n = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    n.ends_with(".nii") || n.ends_with(".nii.gz") || n.ends_with(".vol")
}

/// File name without volume extension and without an `_image`, `_label`
/// or `_pred` suffix.
pub fn volume_case_id(p: &Path) -> String {
    let n = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let n = n.trim_end_matches(".gz").trim_end_matches(".nii").trim_end_matches(".vol");
    for suffix in ["_image", "_label", "_pred"] {
        if let Some(s) = n.strip_suffix(suffix) {
            return s.to_string();
        }
    }
    n.to_string()
}

fn list_volumes(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_volume_file(p))
        .collect();
    out.sort();
    Ok(out)
}

fn require_exists(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory")))
    }
}

fn ensure_parent(p: &Path) -> Result<()> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => std::fs::create_dir_all(d).map_err(|e| Error::io(d, e)),
        _ => Ok(()),
    }
}

// ---------------------------------------------------------------------------

fn cmd_phantom(a: &PhantomArgs, run: &Run) -> Result<()> {
    let opts = DatasetOptions {
        shape: a.shape,
        folds: a.folds,
        offset_fraction: a.offset_fraction,
        extension: a.ext.clone(),
    };
    if !["nii.gz", "nii", "vol"].contains(&a.ext.as_str()) {
        return Err(Error::InvalidArgument(format!("unsupported extension {:?}", a.ext)));
    }
    let list = generate_dataset(a.n, &a.out, a.seed, &opts)?;
    log::info!("wrote {} phantom cases to {}", list.training.len(), a.out.display());
    run.finish(
        &a.out,
        json!({ "n": a.n, "seed": a.seed, "options": to_value(&opts) }),
        vec![a.out.join("dataset.json")],
    )
}

fn cmd_split(a: &SplitArgs, run: &Run) -> Result<()> {
    require_exists(&a.datalist)?;
    let mut list = Datalist::load(&a.datalist)?;
    let ids: Vec<String> = list.training.iter().map(Datalist::case_id).collect();
    let folds = make_folds(&ids, a.k, a.seed)?;
    for (e, f) in list.training.iter_mut().zip(folds) {
        e.fold = f;
    }
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.datalist.with_file_name("dataset.json"));
    ensure_parent(&out)?;
    list.save(&out)?;
    run.finish(&out, json!({ "k": a.k, "seed": a.seed, "input": a.datalist }), vec![out.clone()])
}

fn cmd_train(a: &TrainArgs, run: &Run) -> Result<()> {
    require_exists(&a.config)?;
    let exp = ExperimentConfig::load(&a.config)?;
    let mut cfg = exp.train_config();
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let list = Datalist::load(&exp.datalist)?;
    list.validate(cfg.folds)?;
    let cases = load_cases(&list, &exp.dataroot, cfg.target_spacing)?;
    std::fs::create_dir_all(&a.ckpt_dir).map_err(|e| Error::io(&a.ckpt_dir, e))?;
    let outputs = match (a.fold, a.repeat) {
        (Some(fold), Some(repeat)) => {
            if fold >= cfg.folds || repeat >= cfg.repeats {
                return Err(Error::InvalidArgument(format!(
                    "fold {fold} / repeat {repeat} outside {} folds x {} repeats",
                    cfg.folds, cfg.repeats
                )));
            }
            let path = checkpoint_path(&a.ckpt_dir, fold, repeat);
            if !(a.resume && Checkpoint::load(&path).is_ok()) {
                train_fold(&cfg, &cases, fold, repeat, Some(&path))?;
            }
            vec![path]
        }
        _ => {
            if !a.resume {
                for r in 0..cfg.repeats {
                    for f in 0..cfg.folds {
                        let p = checkpoint_path(&a.ckpt_dir, f, r);
                        if p.is_file() {
                            std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                        }
                    }
                }
            }
            let runs = train_all(&cfg, &cases, &a.ckpt_dir)?;
            write_json(&a.ckpt_dir.join("runs.json"), &runs)?;
            runs.into_iter().map(|r| r.path).collect()
        }
    };
    run.finish(
        &a.ckpt_dir,
        json!({ "experiment": to_value(&exp), "train": to_value(&cfg) }),
        outputs,
    )
}

fn infer_config(a: &InferArgs) -> Result<InferConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            require_exists(p)?;
            ExperimentConfig::load(p)?.infer
        }
        None => InferConfig::default(),
    };
    if a.roi.is_some() {
        cfg.roi_size = a.roi;
    }
    if let Some(o) = a.overlap {
        if !(0.0..1.0).contains(&o) {
            return Err(Error::InvalidArgument(format!("--overlap must be in [0, 1), got {o}")));
        }
        cfg.overlap = o;
    }
    if let Some(b) = &a.blend {
        cfg.blend = match b.as_str() {
            "gaussian" => Blend::Gaussian,
            "constant" => Blend::Constant,
            _ => return Err(Error::InvalidArgument(format!("unknown blend {b:?}"))),
        };
    }
    cfg.paper_literal |= a.paper_literal;
    if a.no_postfilter {
        cfg.postfilter = false;
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct CaseReport {
    input: PathBuf,
    output: PathBuf,
    report: InferReport,
}

fn cmd_infer(a: &InferArgs, run: &Run) -> Result<()> {
    require_exists(&a.ckpt_dir)?;
    require_exists(&a.input)?;
    let cfg = infer_config(a)?;
    let ensemble = Ensemble::load(&a.ckpt_dir, &cfg)?;
    let jobs: Vec<(PathBuf, PathBuf)> = if a.input.is_dir() {
        std::fs::create_dir_all(&a.output).map_err(|e| Error::io(&a.output, e))?;
        list_volumes(&a.input)?
            .into_iter()
            .filter(|p| !p.to_string_lossy().contains("_label"))
            .map(|p| {
                let name = p.file_name().unwrap().to_string_lossy().replace("_image", "_pred");
                (p.clone(), a.output.join(name))
            })
            .collect()
    } else {
        ensure_parent(&a.output)?;
        vec![(a.input.clone(), a.output.clone())]
    };
    if jobs.is_empty() {
        return Err(Error::InvalidArgument(format!("no images found in {}", a.input.display())));
    }
    let mut reports = Vec::new();
    for (input, output) in jobs {
        let raw = load_volume_as(&input, VolumeKind::Image)?;
        let (mask, report) = ensemble.predict(&raw, &cfg)?;
        save_volume(&mask, &output)?;
        log::info!(
            "{} -> {} ({} foreground voxels{})",
            input.display(),
            output.display(),
            report.output_foreground_voxels,
            if report.fallback { ", fallback" } else { "" }
        );
        reports.push(CaseReport { input, output, report });
    }
    if let Some(r) = &a.report {
        ensure_parent(r)?;
        write_json(r, &reports)?;
    }
    let outputs = reports.iter().map(|r| r.output.clone()).collect();
    let ckpts = find_checkpoints(&a.ckpt_dir)?;
    run.finish(
        &a.output,
        json!({ "infer": to_value(&cfg), "checkpoints": ckpts }),
        outputs,
    )
}

fn cmd_evaluate(a: &EvaluateArgs, run: &Run) -> Result<()> {
    require_exists(&a.pred)?;
    require_exists(&a.gt)?;
    let pairs: Vec<(String, PathBuf, PathBuf)> = if a.gt.is_dir() {
        let mut gts = list_volumes(&a.gt)?;
        if gts.iter().any(|p| p.to_string_lossy().contains("_label")) {
            gts.retain(|p| p.to_string_lossy().contains("_label"));
        }
        let preds = list_volumes(&a.pred)?;
        gts.into_iter()
            .map(|g| {
                let id = volume_case_id(&g);
                let p = preds
                    .iter()
                    .find(|p| volume_case_id(p) == id && !p.to_string_lossy().contains("_image"))
                    .ok_or_else(|| Error::InvalidArgument(format!("no prediction for case {id} in {}", a.pred.display())))?;
                Ok((id, p.clone(), g))
            })
            .collect::<Result<_>>()?
    } else {
        vec![(volume_case_id(&a.gt), a.pred.clone(), a.gt.clone())]
    };
    let mut results = Vec::new();
    for (id, p, g) in &pairs {
        let pred = load_volume_as(p, VolumeKind::Label)?;
        let gt = load_volume_as(g, VolumeKind::Label)?;
        results.push(evaluate_case(id, &pred, &gt)?);
    }
    let out = a.out.clone().unwrap_or_else(|| {
        if a.pred.is_dir() {
            a.pred.join("eval.csv")
        } else {
            a.pred.with_extension("eval.csv")
        }
    });
    ensure_parent(&out)?;
    write_eval_csv(&results, &out)?;
    let d = summarize(&results.iter().map(|r| r.dice).collect::<Vec<_>>());
    let h = summarize(&results.iter().map(|r| r.hd95).collect::<Vec<_>>());
    println!("cases={} dice_mean={:.6} hd95_mean={:.6}", results.len(), d.mean, h.mean);
    run.finish(&out, json!({ "pred": a.pred, "gt": a.gt }), vec![out.clone()])
}

fn cmd_mesh(a: &MeshArgs, run: &Run) -> Result<()> {
    require_exists(&a.input)?;
    let format: MeshFormat = match &a.format {
        Some(f) => f.parse()?,
        None => match a.output.extension().and_then(|e| e.to_str()) {
            Some("obj") => MeshFormat::Obj,
            _ => MeshFormat::StlBinary,
        },
    };
    let mask = load_volume_as(&a.input, VolumeKind::Label)?;
    let mesh = marching_cubes(&mask, a.smooth_iters)?;
    ensure_parent(&a.output)?;
    save_mesh(&mesh, &a.output, format)?;
    let stats = mesh_stats(&mesh);
    println!("{}", serde_json::to_string(&stats).unwrap_or_default());
    run.finish(
        &a.output,
        json!({ "input": a.input, "format": to_value(&format), "smooth_iters": a.smooth_iters, "stats": to_value(&stats) }),
        vec![a.output.clone()],
    )
}

fn cmd_report(a: &ReportArgs, run: &Run) -> Result<()> {
    if a.ckpt_dir.is_none() && a.eval.is_none() {
        return Err(Error::InvalidArgument("report needs --ckpt-dir and/or --eval".into()));
    }
    let mut report = serde_json::Map::new();
    if let Some(dir) = &a.ckpt_dir {
        require_exists(dir)?;
        let mut rows = Vec::new();
        for p in find_checkpoints(dir)? {
            let m = Checkpoint::load(&p)?.meta;
            rows.push(json!({
                "path": p,
                "fold": m.fold,
                "repeat": m.repeat,
                "normalization_mode": to_value(&m.normalization_mode),
                "seed": m.seed,
                "epoch": m.epoch,
                "val_dice": m.val_dice,
            }));
        }
        report.insert("checkpoints".into(), Value::Array(rows));
    }
    if let Some(e) = &a.eval {
        require_exists(e)?;
        let res = read_eval_csv(e)?;
        let d = summarize(&res.iter().map(|r| r.dice).collect::<Vec<_>>());
        let h = summarize(&res.iter().map(|r| r.hd95).collect::<Vec<_>>());
        let num = |v: f64| if v.is_finite() { json!(v) } else { json!(v.to_string()) };
        report.insert(
            "evaluation".into(),
            json!({
                "cases": res.len(),
                "dice": { "mean": num(d.mean), "median": num(d.median), "std": num(d.std) },
                "hd95": { "mean": num(h.mean), "median": num(h.median), "std": num(h.std) },
            }),
        );
    }
    let report = Value::Object(report);
    match &a.output {
        Some(p) => {
            ensure_parent(p)?;
            write_json(p, &report)?;
            run.finish(p, json!({ "ckpt_dir": a.ckpt_dir, "eval": a.eval }), vec![p.clone()])
        }
        None => {
            println!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
            Ok(())
        }
    }
}

/// Exit status for an error: 2 for usage-type problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli, args: Vec<String>) -> Result<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Error::InvalidArgument("--jobs must be >= 1".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let command = match &cli.command {
        Command::Phantom(_) => "phantom",
        Command::Split(_) => "split",
        Command::Train(_) => "train",
        Command::Infer(_) => "infer",
        Command::Evaluate(_) => "evaluate",
        Command::Mesh(_) => "mesh",
        Command::Report(_) => "report",
    };
    let r = Run {
        command,
        args,
        started: Instant::now(),
        started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    match &cli.command {
        Command::Phantom(a) => cmd_phantom(a, &r),
        Command::Split(a) => cmd_split(a, &r),
        Command::Train(a) => cmd_train(a, &r),
        Command::Infer(a) => cmd_infer(a, &r),
        Command::Evaluate(a) => cmd_evaluate(a, &r),
        Command::Mesh(a) => cmd_mesh(a, &r),
        Command::Report(a) => cmd_report(a, &r),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit
/// status.
pub fn main_with_args(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, args.into_iter().skip(1).collect()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: kind={} msg={:?}", e.kind(), e.to_string());
            exit_code(&e)
        }
    }
}

pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    main_with_args(std::env::args().collect())
}
