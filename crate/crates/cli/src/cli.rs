use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use radiomae::datamodel::{image_dimensions, ingest_image, load_manifest, make_splits, DatasetManifest, DiskSource, ImageSource, SplitParams, SplitPlan};
use radiomae::errormap::{compare_groups, foreground_mask, generate_error_map, score_image, DEFAULT_FOREGROUND, DEFAULT_PASSES};
use radiomae::finetune::{
    evaluate_test, evaluate_test_grouped, finetune_cv, label_efficiency_sweep, lookup_task, resolve_task, FinetuneConfig, TaskSpec,
    DEFAULT_FRACTIONS,
};
use radiomae::mae::{pretrain, MaeConfig, MaeModel};
use radiomae::multihead::{train_multihead, DetectionProposer, MultiheadConfig, RegionProposer, WholeImageProposer};
use radiomae::synthgen::{build_corpus, AnomalyKind, CorpusSpec, TASK_ABNORMALITY};
use radiomae::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::service::{self, AppState};

/// Task name that selects the five-head region classifier.
pub const MULTIHEAD_TASK: &str = "multihead";

#[derive(Debug, Parser)]
#[command(name = "radiomae", version, about = "Masked-autoencoder radiograph workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic radiograph corpus with a manifest.
    Synth(SynthArgs),
    /// Masked-autoencoder pretraining.
    Pretrain(PretrainArgs),
    /// Cross-validated fine-tuning of one task, or of the five-head region
    /// classifier with `--task multihead`.
    Finetune(FinetuneArgs),
    /// Label-efficiency sweep over training fractions and seeds.
    Sweep(SweepArgs),
    /// Reconstruction-error maps for one image or a whole manifest.
    Errormap(ErrormapArgs),
    /// Evaluate fold checkpoints on a saved split plan's test set.
    Evaluate(EvaluateArgs),
    /// Serve a multi-head checkpoint over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    pub n_normal: usize,
    #[arg(long, default_value_t = 100)]
    pub n_abnormal: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Anomaly proportions, e.g. `tumor_blob=0.5,fracture_gap=0.3,implant_bar=0.2`.
    #[arg(long)]
    pub mix: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON file with (a subset of) the pretraining configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base configuration: `vit-l` or `toy`.
    #[arg(long, default_value = "toy")]
    pub preset: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct SplitArgs {
    #[arg(long, default_value_t = 0.1)]
    pub test_frac: f64,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Manifest field that keeps related images on one side of every split.
    #[arg(long, default_value = "patient_id")]
    pub group_key: String,
    /// Task whose labels stratify the split (defaults to the trained task).
    #[arg(long)]
    pub stratify: Option<String>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base configuration: `vit-l`, `conv`, `toy` or `toy-conv`.
    #[arg(long, default_value = "toy")]
    pub preset: String,
    /// Pretraining checkpoint whose encoder initializes the backbone.
    #[arg(long)]
    pub init_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "toy")]
    pub preset: String,
    /// Comma-separated training fractions.
    #[arg(long)]
    pub fractions: Option<String>,
    /// Number of seeds per fraction.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ErrormapArgs {
    /// Pretraining checkpoint directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Single image to map.
    #[arg(long, conflicts_with = "manifest")]
    pub image: Option<PathBuf>,
    /// Map every entry and compare normal against abnormal scores.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PASSES)]
    pub passes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Score over pixels brighter than `--foreground` only.
    #[arg(long)]
    pub foreground_only: bool,
    #[arg(long, default_value_t = DEFAULT_FOREGROUND)]
    pub foreground: f32,
    /// Task whose binary label defines the abnormal group.
    #[arg(long, default_value = TASK_ABNORMALITY)]
    pub group_task: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Split plan written by `finetune` (`plan.json`).
    #[arg(long)]
    pub plan: PathBuf,
    /// Fold checkpoint directories.
    #[arg(long, num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Also report metrics per value of this manifest field.
    #[arg(long)]
    pub group_by: Option<String>,
    #[arg(long, default_value_t = 0.95)]
    pub ci_level: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Multi-head checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Detection JSON (`{"<image id>": [{"class", "box", "score"}]}`).
    #[arg(long)]
    pub detections: Option<PathBuf>,
    #[arg(long, env = "RADIOMAE_HOST", default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "RADIOMAE_PORT", default_value_t = 8080)]
    pub port: u16,
}

/// Short machine-readable category of an error.
pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Io { .. } => "io",
        Error::Parse(_) | Error::Json(_) => "parse",
        Error::UnknownTask(_) => "unknown_task",
        Error::Config(_) => "invalid_config",
        Error::Image(_) => "image",
        Error::Checkpoint(_) => "checkpoint",
        Error::MissingLabel { .. } | Error::InvalidLabel { .. } | Error::UndeclaredTask { .. } | Error::DuplicateId(_) => {
            "manifest"
        }
        Error::AurocUndefined(_) | Error::EmptyClass(_) | Error::EmptyScope(_) | Error::Insufficient(_) => "data",
        _ => "runtime",
    }
}

/// One JSON line for stderr.
pub fn error_line(kind: &str, message: &str) -> String {
    json!({"error": {"kind": kind, "message": message}}).to_string()
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run(argv: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind::*;
            if matches!(e.kind(), DisplayHelp | DisplayVersion | DisplayHelpOnMissingArgumentOrSubcommand) {
                print!("{e}");
                return 0;
            }
            let kind = match e.kind() {
                InvalidSubcommand => "unknown_subcommand",
                _ => "usage",
            };
            let msg = e.to_string();
            eprintln!("{}", error_line(kind, msg.lines().next().unwrap_or("usage error")));
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let kind = error_kind(&e);
            eprintln!("{}", error_line(kind, &e.to_string()));
            if matches!(kind, "unknown_task" | "invalid_config" | "parse") {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Errormap(a) => errormap_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| io_err(path, e))
}

/// Recursively overlays `patch` onto `base`.
pub fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge_json(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// Preset, then the JSON config file, then flag overrides (given as a JSON
/// object), later layers winning.
pub fn layered_config<T: Serialize + DeserializeOwned>(preset: T, file: Option<&Path>, overrides: Value) -> Result<T> {
    let mut v = serde_json::to_value(preset)?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let patch: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !patch.is_object() {
            return Err(Error::Config(format!("{} must hold a JSON object", path.display())));
        }
        merge_json(&mut v, patch);
    }
    merge_json(&mut v, overrides);
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

fn overrides(pairs: &[(&str, Option<Value>)]) -> Value {
    let mut m = serde_json::Map::new();
    for (k, v) in pairs {
        if let Some(v) = v {
            m.insert(k.to_string(), v.clone());
        }
    }
    Value::Object(m)
}

fn echo(out: &Path, command: &str, config: &impl Serialize, extra: Value) -> Result<()> {
    write_json(
        &out.join("run_config.json"),
        &json!({"command": command, "version": env!("CARGO_PKG_VERSION"), "config": config, "inputs": extra}),
    )
}

fn parse_mix(text: &str) -> Result<Vec<(AnomalyKind, f64)>> {
    text.split(',')
        .map(|part| {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("mix entry {part:?} is not kind=weight")))?;
            let kind: AnomalyKind = serde_json::from_value(json!(k.trim()))
                .map_err(|_| Error::Config(format!("unknown anomaly kind {k:?}")))?;
            let w: f64 = v.trim().parse().map_err(|_| Error::Config(format!("bad weight {v:?}")))?;
            Ok((kind, w))
        })
        .collect()
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = CorpusSpec::new(a.n_normal, a.n_abnormal, a.size, a.seed);
    if let Some(mix) = &a.mix {
        spec = spec.with_mix(&parse_mix(mix)?);
    }
    let manifest = build_corpus(&spec, &a.out)?;
    echo(&a.out, "synth", &spec, json!({}))?;
    println!("{}", json!({"manifest": a.out.join("manifest.json"), "images": manifest.entries.len()}));
    Ok(())
}

fn mae_preset(name: &str) -> Result<MaeConfig> {
    match name {
        "toy" => Ok(MaeConfig::toy()),
        "vit-l" | "default" => Ok(MaeConfig::default()),
        other => Err(Error::Config(format!("unknown pretraining preset {other:?}"))),
    }
}

fn pretrain_cmd(a: PretrainArgs) -> Result<()> {
    let mut over = overrides(&[
        ("epochs", a.epochs.map(|v| json!(v))),
        ("batch_size", a.batch_size.map(|v| json!(v))),
        ("seed", a.seed.map(|v| json!(v))),
    ]);
    if let Some(lr) = a.lr {
        merge_json(&mut over, json!({"optimizer": {"base_lr": lr}}));
    }
    let config: MaeConfig = layered_config(mae_preset(&a.preset)?, a.config.as_deref(), over)?;
    config.validate()?;
    let manifest = load_manifest(&a.manifest)?;
    let source = DiskSource::new(manifest, (config.image_size[0], config.image_size[1]), config.channels);
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    echo(&a.out, "pretrain", &config, json!({"manifest": a.manifest}))?;
    let report = pretrain(&source, &config, &a.out)?;
    write_json(&a.out.join("report.json"), &report)?;
    println!("{}", json!({"best": report.best_dir, "last": report.last_dir, "epochs": report.epoch_losses.len()}));
    Ok(())
}

fn finetune_preset(name: &str) -> Result<FinetuneConfig> {
    match name {
        "toy" => Ok(FinetuneConfig::toy()),
        "toy-conv" => Ok(FinetuneConfig::toy_conv()),
        "conv" => Ok(FinetuneConfig::conv_baseline()),
        "vit-l" | "default" => Ok(FinetuneConfig::default()),
        other => Err(Error::Config(format!("unknown fine-tuning preset {other:?}"))),
    }
}

fn multihead_preset(name: &str) -> Result<MultiheadConfig> {
    match name {
        "toy" | "toy-conv" => Ok(MultiheadConfig::toy()),
        "vit-l" | "default" => Ok(MultiheadConfig::default()),
        other => Err(Error::Config(format!("unknown multi-head preset {other:?}"))),
    }
}

/// Resolves a task name, failing with `unknown task` before any data is read
/// when the name is neither built in nor declared by the manifest.
fn task_for(name: &str, manifest: Option<&DatasetManifest>) -> Result<TaskSpec> {
    match manifest {
        Some(m) => resolve_task(name, m),
        None => lookup_task(name),
    }
}

fn split_plan(manifest: &DatasetManifest, split: &SplitArgs, stratify: &str) -> Result<SplitPlan> {
    let mut params = SplitParams::new(split.test_frac, split.folds, split.split_seed).group_by(split.group_key.clone());
    let key = split.stratify.clone().unwrap_or_else(|| stratify.to_string());
    if manifest.task(&key).is_some() {
        params = params.stratify(key);
    }
    make_splits(manifest, &params)
}

fn load_manifest_arg(path: Option<&Path>) -> Result<DatasetManifest> {
    let path = path.ok_or_else(|| Error::Config("--manifest is required".into()))?;
    load_manifest(path)
}

fn finetune_cmd(a: FinetuneArgs) -> Result<()> {
    if a.task == MULTIHEAD_TASK {
        return multihead_cmd(a);
    }
    // reject unknown names before touching any data
    if lookup_task(&a.task).is_err() && a.manifest.is_none() {
        return Err(Error::UnknownTask(a.task.clone()));
    }
    let manifest = load_manifest_arg(a.manifest.as_deref())?;
    let task = task_for(&a.task, Some(&manifest))?;
    let over = overrides(&[
        ("epochs", a.epochs.map(|v| json!(v))),
        ("batch_size", a.batch_size.map(|v| json!(v))),
        ("base_lr", a.lr.map(|v| json!(v))),
        ("seed", a.seed.map(|v| json!(v))),
        ("init_checkpoint", a.init_checkpoint.as_ref().map(|v| json!(v))),
    ]);
    let config: FinetuneConfig = layered_config(finetune_preset(&a.preset)?, a.config.as_deref(), over)?;
    config.validate()?;
    let plan = split_plan(&manifest, &a.split, task.label_key())?;
    let (c, h, w) = config.backbone.input_shape();
    let source = DiskSource::new(manifest, (h, w), c);
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    echo(&a.out, "finetune", &config, json!({"task": task, "manifest": a.manifest}))?;
    write_json(&a.out.join("plan.json"), &plan)?;
    let cv = finetune_cv(&source, &task, &plan, &config, &a.out)?;
    let report = evaluate_test(&source, &cv.checkpoints(), &plan, &task, config.ci_level)?;
    write_json(&a.out.join("test.json"), &report)?;
    println!("{}", serde_json::to_string(&json!({"task": task.id, "test": report.summary}))?);
    Ok(())
}

fn native_size(manifest: &DatasetManifest) -> Result<(usize, usize)> {
    let first = manifest
        .entries
        .first()
        .ok_or_else(|| Error::EmptyScope("manifest has no entries".into()))?;
    image_dimensions(&manifest.resolve(first))
}

fn multihead_cmd(a: FinetuneArgs) -> Result<()> {
    let manifest = load_manifest_arg(a.manifest.as_deref())?;
    let over = overrides(&[
        ("epochs", a.epochs.map(|v| json!(v))),
        ("batch_size", a.batch_size.map(|v| json!(v))),
        ("base_lr", a.lr.map(|v| json!(v))),
        ("seed", a.seed.map(|v| json!(v))),
        ("init_checkpoint", a.init_checkpoint.as_ref().map(|v| json!(v))),
    ]);
    let config: MultiheadConfig = layered_config(multihead_preset(&a.preset)?, a.config.as_deref(), over)?;
    config.validate()?;
    let plan = split_plan(&manifest, &a.split, TASK_ABNORMALITY)?;
    // region boxes are in native pixel coordinates
    let size = native_size(&manifest)?;
    let (c, _, _) = config.backbone.input_shape();
    let source = DiskSource::new(manifest, size, c);
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    echo(&a.out, "finetune", &config, json!({"task": MULTIHEAD_TASK, "manifest": a.manifest}))?;
    write_json(&a.out.join("plan.json"), &plan)?;
    let result = train_multihead(&source, &plan, &config, &a.out)?;
    let auroc: serde_json::Map<String, Value> =
        result.test.iter().map(|(k, r)| (k.clone(), json!(r.mean("auroc")))).collect();
    println!("{}", json!({"task": MULTIHEAD_TASK, "test_auroc": auroc, "untrained": result.untrained}));
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let task = task_for(&a.task, Some(&manifest))?;
    let over = overrides(&[("epochs", a.epochs.map(|v| json!(v)))]);
    let config: FinetuneConfig = layered_config(finetune_preset(&a.preset)?, a.config.as_deref(), over)?;
    config.validate()?;
    let fractions: Vec<f64> = match &a.fractions {
        Some(text) => text
            .split(',')
            .map(|f| f.trim().parse().map_err(|_| Error::Config(format!("bad fraction {f:?}"))))
            .collect::<Result<_>>()?,
        None => DEFAULT_FRACTIONS.to_vec(),
    };
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let plan = split_plan(&manifest, &a.split, task.label_key())?;
    let (c, h, w) = config.backbone.input_shape();
    let source = DiskSource::new(manifest, (h, w), c);
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    echo(&a.out, "sweep", &config, json!({"task": task, "fractions": fractions, "seeds": seeds}))?;
    let result = label_efficiency_sweep(&source, &task, &plan, &fractions, &seeds, &config, &a.out)?;
    let curve: Vec<Value> = fractions.iter().map(|&f| json!({"fraction": f, "values": result.at(f)})).collect();
    println!("{}", json!({"task": task.id, "metric": result.metric, "curve": curve}));
    Ok(())
}

fn errormap_cmd(a: ErrormapArgs) -> Result<()> {
    let model = MaeModel::load(&a.ckpt)?;
    let size = (model.config.image_size[0], model.config.image_size[1]);
    let channels = model.config.channels;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let settings = json!({"passes": a.passes, "seed": a.seed, "foreground_only": a.foreground_only, "foreground": a.foreground});
    echo(&a.out, "errormap", &settings, json!({"ckpt": a.ckpt, "image": a.image, "manifest": a.manifest}))?;
    let score = |img: &radiomae::datamodel::Image, dir: Option<&Path>| -> Result<(f64, usize)> {
        let map = generate_error_map(img, &model, a.passes, a.seed)?;
        if let Some(dir) = dir {
            map.save(dir)?;
        }
        let fg = a.foreground_only.then(|| foreground_mask(img, a.foreground));
        Ok((score_image(&map, fg.as_deref())?, map.defined_count()))
    };
    match (&a.image, &a.manifest) {
        (Some(path), None) => {
            let img = ingest_image(path, size, channels)?;
            let (s, defined) = score(&img, Some(&a.out))?;
            let summary = json!({"image": path, "score": s, "defined_pixels": defined, "passes": a.passes,
                "scope": if a.foreground_only { "foreground" } else { "whole_image" }});
            write_json(&a.out.join("score.json"), &summary)?;
            println!("{summary}");
        }
        (None, Some(path)) => {
            let manifest = load_manifest(path)?;
            let source = DiskSource::new(manifest, size, channels);
            let (mut normal, mut abnormal) = (Vec::new(), Vec::new());
            let mut rows = Vec::new();
            for e in &source.manifest().entries {
                let (s, _) = score(&source.load(&e.id)?, None)?;
                match e.label(&a.group_task).filter(|t| !t.is_masked()) {
                    Some(t) if t.y >= 0.5 => abnormal.push(s),
                    Some(_) => normal.push(s),
                    None => {}
                }
                rows.push(json!({"id": e.id, "score": s}));
            }
            write_json(&a.out.join("scores.json"), &rows)?;
            let cmp = compare_groups(&normal, &abnormal)?;
            write_json(&a.out.join("comparison.json"), &cmp)?;
            println!("{}", serde_json::to_string(&cmp)?);
        }
        _ => return Err(Error::Config("give exactly one of --image or --manifest".into())),
    }
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let task = task_for(&a.task, Some(&manifest))?;
    let text = fs::read_to_string(&a.plan).map_err(|e| io_err(&a.plan, e))?;
    let plan: SplitPlan = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", a.plan.display())))?;
    let first = radiomae::finetune::Model::load(&a.checkpoints[0])?;
    let (c, h, w) = first.input_shape();
    drop(first);
    let source = DiskSource::new(manifest, (h, w), c);
    let report = evaluate_test(&source, &a.checkpoints, &plan, &task, a.ci_level)?;
    let mut out = json!({"task": task.id, "overall": report});
    if let Some(key) = &a.group_by {
        let (groups, warnings) = evaluate_test_grouped(&source, &a.checkpoints, &plan, &task, key, a.ci_level)?;
        out["groups"] = serde_json::to_value(groups)?;
        out["group_warnings"] = json!(warnings);
    }
    write_json(&a.out.join("evaluation.json"), &out)?;
    println!("{}", serde_json::to_string(&out["overall"]["summary"])?);
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let proposer: Box<dyn RegionProposer> = match &a.detections {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            Box::new(DetectionProposer::from_json(&text, 0.0)?)
        }
        None => Box::new(WholeImageProposer),
    };
    let state = Arc::new(AppState::load(&a.checkpoint, proposer)?);
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| Error::Config(format!("bad listen address: {e}")))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Config(format!("runtime: {e}")))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Error::Config(format!("bind {addr}: {e}")))?;
        log::info!("serving {} on {addr}", state.model_version);
        service::serve(listener, state)
            .await
            .map_err(|e| Error::Config(format!("server: {e}")))
    })
}
