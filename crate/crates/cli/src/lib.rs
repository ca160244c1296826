//! `maskpool-lab`: config-driven generation, training, evaluation and
//! intervention runs.
//!
//! Every command reads one JSON config (`"schema": 1`) and uses the section
//! named after it. Relative paths in the config resolve against the config
//! file's directory.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use mplab_core::boxes::Detection;
use mplab_core::experiments::{
    baseline_report, diff_report, hierarchy_for, score_detections, BgPool, EvalContext, EvalSettings,
    ExperimentError, ExperimentReport, SweepSpec, DEFAULT_ABLATION_FACTORS,
};
use mplab_core::minidet::{self, load_checkpoint, save_checkpoint, DetError, ModelConfig, TrainConfig};
use mplab_core::scenegen::{self, generate_bg_pool, load_bg_dir, load_dataset, save_dataset, GeneratorConfig, SceneError};
use mplab_core::tensor::{OptimizerConfig, TensorError};

pub const CONFIG_SCHEMA: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "maskpool-lab", version, about = "Mask pooling experiments on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(Common),
    /// Train a detector.
    Train(Common),
    /// Evaluate a checkpoint (or the ground-truth oracle).
    Eval(Common),
    /// Evaluate under random or fixed background replacement.
    SwapBg(Common),
    /// Sweep background activation weights.
    Perturb(Common),
    /// Feed dilated / eroded masks to a mask-variant model.
    Ablate(Common),
    /// Per-class F1 comparison of two reports.
    Report(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the config section.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::Gen(c) => ("gen", c),
            Command::Train(c) => ("train", c),
            Command::Eval(c) => ("eval", c),
            Command::SwapBg(c) => ("swap-bg", c),
            Command::Perturb(c) => ("perturb", c),
            Command::Ablate(c) => ("ablate", c),
            Command::Report(c) => ("report", c),
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Usage(#[from] clap::Error),
    #[error("config {path}: {reason}")]
    Config { path: String, reason: String },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 2 for usage and configuration problems, 1 for failures while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(e) if !e.use_stderr() => 0,
            CliError::Usage(_) | CliError::Config { .. } => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

impl From<DetError> for CliError {
    fn from(e: DetError) -> Self {
        match e {
            DetError::Config(reason) => CliError::Config {
                path: "<model>".into(),
                reason,
            },
            DetError::Tensor(TensorError::Config { op, reason }) => CliError::Config {
                path: op.into(),
                reason,
            },
            other => runtime(other),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(reason) => CliError::Config {
                path: "<experiment>".into(),
                reason,
            },
            ExperimentError::Detector(d) => d.into(),
            other => runtime(other),
        }
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        match e {
            SceneError::Config(reason) => CliError::Config {
                path: "<generator>".into(),
                reason,
            },
            other => runtime(other),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    pub gen: Option<GeneratorConfig>,
    pub train: Option<TrainSection>,
    pub eval: Option<EvalSection>,
    pub swap_bg: Option<SwapBgSection>,
    pub perturb: Option<PerturbSection>,
    pub ablate: Option<AblateSection>,
    pub report: Option<ReportSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub manifest: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: TrainConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    pub manifest: PathBuf,
    #[serde(default)]
    pub dataset_id: Option<String>,
    /// Score the ground truth itself instead of a model.
    #[serde(default)]
    pub oracle: bool,
    #[serde(default)]
    pub settings: EvalSettings,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum SwapMode {
    Random,
    Fixed,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "lowercase")]
pub enum PoolSource {
    /// Procedural backgrounds from texture families unused in training.
    Generated { count: usize, size: u32, seed: u64 },
    /// Every image file in a directory.
    Dir { path: PathBuf },
    /// Each image recomposed onto itself.
    Own,
}

fn default_repetitions() -> usize {
    5
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwapBgSection {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    #[serde(default)]
    pub dataset_id: Option<String>,
    pub mode: SwapMode,
    pub pool: PoolSource,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub settings: EvalSettings,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSection {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    #[serde(default)]
    pub dataset_id: Option<String>,
    #[serde(default)]
    pub weights: SweepSpec,
    #[serde(default)]
    pub settings: EvalSettings,
}

fn default_factors() -> Vec<f64> {
    DEFAULT_ABLATION_FACTORS.to_vec()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    #[serde(default)]
    pub dataset_id: Option<String>,
    #[serde(default = "default_factors")]
    pub factors: Vec<f64>,
    #[serde(default)]
    pub settings: EvalSettings,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    pub a: PathBuf,
    pub b: PathBuf,
    #[serde(default = "label_a")]
    pub label_a: String,
    #[serde(default = "label_b")]
    pub label_b: String,
}

fn label_a() -> String {
    "A".into()
}

fn label_b() -> String {
    "B".into()
}

/// Written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: String,
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub outputs: Vec<String>,
}

struct Loaded {
    config: RunConfig,
    dir: PathBuf,
    sha256: String,
}

fn load_config(path: &Path) -> Result<Loaded> {
    let err = |reason: String| CliError::Config {
        path: path.display().to_string(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))?;
    match value.get("schema").and_then(serde_json::Value::as_u64) {
        Some(s) if s == CONFIG_SCHEMA as u64 => {}
        Some(s) => return Err(err(format!("unsupported schema {s}, expected {CONFIG_SCHEMA}"))),
        None => return Err(err("missing integer \"schema\" field".into())),
    }
    let config: RunConfig = serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
    let sha256 = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    Ok(Loaded {
        config,
        dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        sha256,
    })
}

fn section<'a, T>(s: &'a Option<T>, name: &str, path: &Path) -> Result<&'a T> {
    s.as_ref().ok_or_else(|| CliError::Config {
        path: path.display().to_string(),
        reason: format!("missing \"{name}\" section"),
    })
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn dataset_id(explicit: &Option<String>, manifest: &Path) -> String {
    explicit.clone().unwrap_or_else(|| {
        manifest
            .parent()
            .and_then(Path::file_name)
            .and_then(|s| s.to_str())
            .unwrap_or("dataset")
            .to_string()
    })
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    run(&cli.command)
}

pub fn run(command: &Command) -> Result<()> {
    let (name, common) = command.parts();
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Config {
                path: "--threads".into(),
                reason: "must be at least 1".into(),
            });
        }
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::warn!("thread pool already initialized; --threads {n} ignored");
        }
    }
    let loaded = load_config(&common.config)?;
    let cfg = &loaded.config;
    let resolve = |p: &Path| loaded.dir.join(p);
    let out = &common.out;
    create_out(out)?;
    let cfg_path = &common.config;
    let mut seed_used = common.seed;
    let outputs: Vec<String> = match command {
        Command::Gen(_) => {
            let mut gen = section(&cfg.gen, "gen", cfg_path)?.clone();
            gen.seed = common.seed.unwrap_or(gen.seed);
            seed_used = Some(gen.seed);
            let ds = scenegen::generate_dataset(&gen)?;
            save_dataset(&ds, &out.join("annotations.json"))?;
            log::info!("generated {} images into {}", ds.len(), out.display());
            vec!["annotations.json".into(), "images/".into(), "masks/".into()]
        }
        Command::Train(_) => {
            let t = section(&cfg.train, "train", cfg_path)?;
            let mut schedule = t.schedule.clone();
            schedule.seed = common.seed.unwrap_or(schedule.seed);
            seed_used = Some(schedule.seed);
            let ds = load_dataset(&resolve(&t.manifest))?;
            let outcome = minidet::train(&ds, &t.model, &t.optimizer, &schedule)?;
            save_checkpoint(&outcome.checkpoint, &out.join("model.ckpt"))?;
            let log_json = serde_json::to_string_pretty(&outcome.log).expect("loss log serializes");
            write_text(&out.join("loss_log.json"), &(log_json + "\n"))?;
            vec!["model.ckpt".into(), "loss_log.json".into()]
        }
        Command::Eval(_) => {
            let e = section(&cfg.eval, "eval", cfg_path)?;
            let manifest = resolve(&e.manifest);
            let ds = load_dataset(&manifest)?;
            let id = dataset_id(&e.dataset_id, &manifest);
            let report = if e.oracle {
                let dets: Vec<Vec<Detection>> = ds
                    .records
                    .iter()
                    .map(|r| {
                        r.instances
                            .iter()
                            .map(|i| Detection {
                                class_id: i.class_id,
                                score: 1.0,
                                bbox: i.bbox,
                            })
                            .collect()
                    })
                    .collect();
                let hierarchy = hierarchy_for(&ds.classes);
                let ev = score_detections(dets, &ds.ground_truth(), ds.num_classes(), hierarchy.as_ref(), &e.settings)?;
                baseline_report("oracle", &id, &ds.classes, &ev)
            } else {
                let ckpt_path = e.checkpoint.as_ref().ok_or_else(|| CliError::Config {
                    path: cfg_path.display().to_string(),
                    reason: "eval needs \"checkpoint\" unless \"oracle\" is true".into(),
                })?;
                let ckpt = load_checkpoint(&resolve(ckpt_path))?;
                let ctx = EvalContext::new(&ckpt, &ds, &id, e.settings.clone())?;
                baseline_report(&ctx.model_id, &id, &ds.classes, &ctx.evaluate()?)
            };
            println!("mAP50 {:.3}", report.rows[0].map50);
            report.write(out, "eval")?;
            vec!["eval.csv".into(), "eval.json".into()]
        }
        Command::SwapBg(_) => {
            let s = section(&cfg.swap_bg, "swap_bg", cfg_path)?;
            let seed = common.seed.unwrap_or(s.seed);
            seed_used = Some(seed);
            let manifest = resolve(&s.manifest);
            let ds = load_dataset(&manifest)?;
            let ckpt = load_checkpoint(&resolve(&s.checkpoint))?;
            let ctx = EvalContext::new(&ckpt, &ds, &dataset_id(&s.dataset_id, &manifest), s.settings.clone())?;
            let pool = match &s.pool {
                PoolSource::Generated { count, size, seed } => BgPool::Images(generate_bg_pool(*count, *size, *seed)),
                PoolSource::Dir { path } => BgPool::Images(load_bg_dir(&resolve(path))?),
                PoolSource::Own => BgPool::Own,
            };
            let (report, stem) = match s.mode {
                SwapMode::Random => (ctx.run_random_bg_eval(&pool, s.repetitions, seed)?, "random_bg"),
                SwapMode::Fixed => (ctx.run_fixed_bg_eval(&pool, s.repetitions, seed)?, "fixed_bg"),
            };
            print_aggregates(&report);
            report.write(out, stem)?;
            vec![format!("{stem}.csv"), format!("{stem}.json")]
        }
        Command::Perturb(_) => {
            let p = section(&cfg.perturb, "perturb", cfg_path)?;
            let manifest = resolve(&p.manifest);
            let ds = load_dataset(&manifest)?;
            let ckpt = load_checkpoint(&resolve(&p.checkpoint))?;
            let ctx = EvalContext::new(&ckpt, &ds, &dataset_id(&p.dataset_id, &manifest), p.settings.clone())?;
            let report = ctx.run_bg_activation_sweep(&p.weights)?;
            print_aggregates(&report);
            report.write(out, "bg_activation_sweep")?;
            vec!["bg_activation_sweep.csv".into(), "bg_activation_sweep.json".into()]
        }
        Command::Ablate(_) => {
            let a = section(&cfg.ablate, "ablate", cfg_path)?;
            let manifest = resolve(&a.manifest);
            let ds = load_dataset(&manifest)?;
            let ckpt = load_checkpoint(&resolve(&a.checkpoint))?;
            let ctx = EvalContext::new(&ckpt, &ds, &dataset_id(&a.dataset_id, &manifest), a.settings.clone())?;
            let report = ctx.run_boundary_ablation(&a.factors)?;
            for r in &report.rows {
                println!("{:<12} mAP50 {:.3}", r.intervention_id, r.map50);
            }
            report.write(out, "boundary_ablation")?;
            vec!["boundary_ablation.csv".into(), "boundary_ablation.json".into()]
        }
        Command::Report(_) => {
            let r = section(&cfg.report, "report", cfg_path)?;
            let a = ExperimentReport::read_json(&resolve(&r.a))?;
            let b = ExperimentReport::read_json(&resolve(&r.b))?;
            let diff = diff_report(&a, &b, &r.label_a, &r.label_b);
            let text = diff.render();
            print!("{text}");
            write_text(&out.join("diff.txt"), &text)?;
            let json = serde_json::to_string_pretty(&diff).expect("diff serializes");
            write_text(&out.join("diff.json"), &(json + "\n"))?;
            vec!["diff.txt".into(), "diff.json".into()]
        }
    };
    let manifest = RunManifest {
        command: name.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: common.config.display().to_string(),
        config_sha256: loaded.sha256,
        seed: seed_used,
        threads: common.threads,
        outputs,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("run manifest serializes");
    write_text(&out.join(format!("run_{}.json", name.replace('-', "_"))), &(json + "\n"))
}

fn print_aggregates(report: &ExperimentReport) {
    if let Some(a) = report.aggregates {
        println!(
            "{}: mean {:.3} ± {:.3}  min {:.3}  max {:.3}  diff {:.3}",
            report.experiment, a.mean, a.std, a.min, a.max, a.diff
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_cfg(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("cfg.json");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn schema_is_required() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(dir.path(), r#"{"gen": {}}"#);
        let e = load_config(&p).err().unwrap();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("schema"));
        let p = write_cfg(dir.path(), r#"{"schema": 2}"#);
        assert!(load_config(&p).err().unwrap().to_string().contains("unsupported schema 2"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(dir.path(), r#"{"schema": 1, "gen": {"n_imgs": 3}}"#);
        assert!(load_config(&p).err().unwrap().to_string().contains("n_imgs"));
        let p = write_cfg(dir.path(), r#"{"schema": 1, "extra": true}"#);
        assert!(load_config(&p).is_err());
    }

    #[test]
    fn missing_section_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(dir.path(), r#"{"schema": 1}"#);
        let out = dir.path().join("o");
        let e = run_from(["maskpool-lab", "train", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("\"train\""));
    }

    #[test]
    fn bad_arguments_exit_2() {
        let e = run_from(["maskpool-lab", "fly"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = run_from(["maskpool-lab", "gen"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn config_hash_is_sha256_of_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(dir.path(), r#"{"schema": 1}"#);
        let l = load_config(&p).unwrap();
        assert_eq!(l.sha256.len(), 64);
        let again = load_config(&p).unwrap();
        assert_eq!(l.sha256, again.sha256);
    }
}
