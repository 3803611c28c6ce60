//! Command-line interface: `train`, `render`, `eval-fid`, `synth-data` and
//! `inspect`. Every invocation writes its outputs and a resolved
//! `run_config.json` into a fresh timestamped run directory.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::conditioning::ConditionVector;
use crate::data::{generate_synthetic, load_manifest, ImageSet, SyntheticSpec};
use crate::error::{Error, Result};
use crate::evaluation::{
    compute_fid_by_class, generate_samples, linspace, render_class_interpolation, render_condition_sweep,
    render_latent_interpolation, render_pose_controls, render_rotation_grid, EmbeddingModel, PoseControl,
    RandomConvEmbedding, RowSpec,
};
use crate::training::{read_checkpoint, smoke_config, Precision, Trainer, TrainingConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "condnerf", version, about = "Conditional generative feature-field GAN: train, render, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes metrics.jsonl and checkpoints into the run directory.
    Train(TrainArgs),
    /// Render a figure-style grid (PNG plus JSON sidecar) from a checkpoint.
    Render(RenderArgs),
    /// Compute toy-FID (overall and per class) between a dataset and generated samples.
    EvalFid(EvalFidArgs),
    /// Generate the synthetic hue-controlled dataset.
    SynthData(SynthDataArgs),
    /// Print checkpoint metadata as JSON.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Training config (JSON, or YAML with a .yaml/.yml extension).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from a built-in preset instead of a config file.
    #[arg(long, value_enum, conflicts_with = "config")]
    pub preset: Option<Preset>,
    /// Dataset: a directory (manifest.csv or class folders) or a CSV manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Parent directory of the timestamped run directory.
    #[arg(long, default_value = "runs")]
    pub out_root: PathBuf,
    /// Abort on the first unreadable image instead of skipping it.
    #[arg(long)]
    pub hard_fail: bool,
    /// Override the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the iteration count (0 writes only the initial checkpoint).
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Override the batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Override the generator learning rate.
    #[arg(long)]
    pub lr_generator: Option<f64>,
    /// Override the discriminator learning rate.
    #[arg(long)]
    pub lr_discriminator: Option<f64>,
    /// Override the R1 penalty weight.
    #[arg(long)]
    pub r1_lambda: Option<f64>,
    /// Override the checkpoint interval (0: only at the end).
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Override the floating-point precision.
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 32x32 hue/size configuration used by the smoke test.
    Smoke,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridKind {
    /// Rows of seeds, columns of object rotation angles (`--angles`).
    Rotation,
    /// Sweep one attribute (`--attr`, `--range lo:hi:steps`) from `--condition`.
    Sweep,
    /// Interpolate between two classes (`--classes a,b`, `--steps`).
    ClassInterp,
    /// Interpolate latents between two seeds (`--seeds a,b`, `--steps`).
    LatentInterp,
    /// Pose edits (`--control`, `--values`).
    Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlArg {
    Horizontal,
    Depth,
    Scale,
    AddObject,
}

impl From<ControlArg> for PoseControl {
    fn from(c: ControlArg) -> Self {
        match c {
            ControlArg::Horizontal => PoseControl::Horizontal,
            ControlArg::Depth => PoseControl::Depth,
            ControlArg::Scale => PoseControl::Scale,
            ControlArg::AddObject => PoseControl::AddObject,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RenderArgs {
    /// Grid kind.
    pub kind: GridKind,
    /// Checkpoint file (`.safetensors`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Parent directory of the timestamped run directory.
    #[arg(long, default_value = "runs")]
    pub out_root: PathBuf,
    /// Comma-separated row seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    pub seeds: Vec<u64>,
    /// Comma-separated condition vector (default: 1 for the first attribute, 0 elsewhere).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub condition: Option<Vec<f64>>,
    /// Rotation angles in degrees.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0,30,60,90")]
    pub angles: Vec<f64>,
    /// Attribute to sweep, by name or index.
    #[arg(long)]
    pub attr: Option<String>,
    /// Sweep range `lo:hi:steps`.
    #[arg(long, default_value = "0:3:7")]
    pub range: String,
    /// Two class names or indices for class interpolation.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
    /// Interpolation steps.
    #[arg(long, default_value_t = 7)]
    pub steps: usize,
    #[arg(long, value_enum, default_value = "horizontal")]
    pub control: ControlArg,
    /// Control values (world units, scale factors or offsets).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-0.3,0,0.3")]
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalFidArgs {
    /// Checkpoint file (`.safetensors`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Real images (same forms as `train --data`).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Number of real and of generated images (capped at the dataset size).
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    /// Embedding weights file; the fixed-seed random embedding when omitted.
    #[arg(long)]
    pub embedding: Option<PathBuf>,
    /// Compare the real set with itself (sanity check; reports ~0).
    #[arg(long)]
    pub self_test: bool,
    /// Seed for record selection and generated latents.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Parent directory of the timestamped run directory.
    #[arg(long, default_value = "runs")]
    pub out_root: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthDataArgs {
    /// Dataset spec (JSON or YAML); overrides `--labels`.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Built-in label semantics used without `--spec`.
    #[arg(long, value_enum, default_value = "hue-size")]
    pub labels: LabelsArg,
    /// Number of images.
    #[arg(long, default_value_t = 1024)]
    pub count: usize,
    /// Seed for labels, colours and jitter.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (images/ plus manifest.csv).
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelsArg {
    /// Binary `hue` (blue/red) and `size` (small/large) attributes (matches `--preset smoke`).
    HueSize,
    /// One-hot `red`/`blue` classes.
    Classes,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InspectArgs {
    /// Checkpoint file (`.safetensors`).
    #[arg(long)]
    pub checkpoint: PathBuf,
}

/// Resolved record of one invocation, written as `run_config.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig<A: Serialize, C: Serialize> {
    pub command: &'static str,
    pub args: A,
    pub resolved: C,
    pub seed: u64,
    pub run_dir: PathBuf,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Checkpoint(_) | Error::Json(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Image(_) | Error::Io { .. } => EXIT_DATA,
        Error::Numerical { .. } => EXIT_NUMERICAL,
        Error::Tensor(_) => EXIT_FAILURE,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(dir) => {
            if let Some(dir) = dir {
                println!("{}", dir.display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Numerical {
                last_checkpoint: Some(p), ..
            } = &e
            {
                eprintln!("last checkpoint: {}", p.display());
            }
            exit_code(&e)
        }
    }
}

/// Runs a parsed command and returns its output directory, if any.
pub fn execute(command: &Command) -> Result<Option<PathBuf>> {
    match command {
        Command::Train(a) => cmd_train(a).map(Some),
        Command::Render(a) => cmd_render(a).map(Some),
        Command::EvalFid(a) => cmd_eval_fid(a).map(Some),
        Command::SynthData(a) => cmd_synth_data(a).map(Some),
        Command::Inspect(a) => cmd_inspect(a).map(|_| None),
    }
}

/// Reads JSON, or YAML when the extension is `.yaml`/`.yml`.
pub fn read_config_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let yaml = matches!(path.extension().and_then(|e| e.to_str()), Some("yaml" | "yml"));
    let parsed = if yaml {
        serde_yaml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Config file (or preset) with flag overrides applied and validated.
pub fn resolve_training_config(a: &TrainArgs) -> Result<TrainingConfig> {
    let mut cfg = match (&a.config, a.preset) {
        (Some(path), _) => read_config_file(path)?,
        (None, Some(Preset::Smoke)) => smoke_config(),
        (None, None) => return Err(Error::Config("one of --config or --preset is required".into())),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr_generator {
        cfg.lr_generator = v;
    }
    if let Some(v) = a.lr_discriminator {
        cfg.lr_discriminator = v;
    }
    if let Some(v) = a.r1_lambda {
        cfg.r1_lambda = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(p) = a.precision {
        cfg.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates `<root>/<command>-<timestamp>` (suffixed if it already exists).
pub fn create_run_dir(root: &Path, command: &str) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for k in 0.. {
        let name = if k == 0 {
            format!("{command}-{stamp}")
        } else {
            format!("{command}-{stamp}-{k}")
        };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!()
}

fn write_run_config<A: Serialize, C: Serialize>(run: &RunConfig<A, C>) -> Result<()> {
    let path = run.run_dir.join("run_config.json");
    fs::write(&path, serde_json::to_string_pretty(run)?).map_err(|e| Error::io(&path, e))
}

fn as_data_error(e: Error) -> Error {
    match e {
        Error::Io { path, source } => Error::Data(format!("{}: {source}", path.display())),
        other => other,
    }
}

/// Loads a checkpoint; every failure is reported as a checkpoint error.
pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    Trainer::load(path).map_err(|e| match e {
        Error::Checkpoint(_) => e,
        other => Error::Checkpoint(format!("{}: {other}", path.display())),
    })
}

pub fn cmd_train(a: &TrainArgs) -> Result<PathBuf> {
    let mut cfg = resolve_training_config(a)?;
    let manifest = load_manifest(&a.data).map_err(as_data_error)?;
    let data = ImageSet::load(&manifest, cfg.generator.output_resolution(), a.hard_fail).map_err(as_data_error)?;
    if cfg.attributes.is_empty() && data.condition_dim() == cfg.generator.condition_dim {
        cfg.attributes = data.attributes.clone();
    }
    let dir = create_run_dir(&a.out_root, "train")?;
    write_run_config(&RunConfig {
        command: "train",
        args: a.clone(),
        resolved: &cfg,
        seed: cfg.seed,
        run_dir: dir.clone(),
    })?;
    log::info!("training {} iterations on {} images into {}", cfg.iterations, data.len(), dir.display());
    let mut trainer = Trainer::new(cfg)?;
    trainer.train(&data, Some(&dir))?;
    Ok(dir)
}

fn parse_range(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || Error::Config(format!("range must be lo:hi:steps, got {s:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let steps: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if steps == 0 || !lo.is_finite() || !hi.is_finite() {
        return Err(bad());
    }
    Ok(linspace(lo, hi, steps))
}

/// Resolves an attribute by name or index.
fn attribute_index(names: &[String], dim: usize, key: &str) -> Result<usize> {
    if let Some(i) = names.iter().position(|n| n == key) {
        return Ok(i);
    }
    match key.parse::<usize>() {
        Ok(i) if i < dim => Ok(i),
        _ => Err(Error::Config(format!("unknown attribute {key:?}; valid: {names:?} or 0..{dim}"))),
    }
}

pub fn cmd_render(a: &RenderArgs) -> Result<PathBuf> {
    let trainer = load_checkpoint(&a.checkpoint)?;
    let gen = &trainer.generator;
    let names = &trainer.config.attributes;
    let dim = gen.config.condition_dim;
    let condition = match &a.condition {
        Some(v) => {
            let c = ConditionVector::new(v.clone());
            c.check_len(dim).map_err(|e| Error::Config(e.to_string()))?;
            c
        }
        None if dim > 0 => ConditionVector::one_hot(dim, 0)?,
        None => ConditionVector::zeros(0),
    };
    if let Some(w) = condition.extrapolation_warning() {
        log::warn!("{w}");
    }
    let rows: Vec<RowSpec> = a
        .seeds
        .iter()
        .map(|&seed| RowSpec {
            seed,
            condition: condition.clone(),
        })
        .collect();
    let grid = match a.kind {
        GridKind::Rotation => render_rotation_grid(gen, &rows, &a.angles)?,
        GridKind::Sweep => {
            let key = a.attr.as_deref().ok_or_else(|| Error::Config("sweep needs --attr".into()))?;
            let attribute = attribute_index(names, dim, key)?;
            render_condition_sweep(gen, &a.seeds, &condition, attribute, &parse_range(&a.range)?)?
        }
        GridKind::ClassInterp => {
            let classes = a.classes.as_deref().unwrap_or_default();
            if classes.len() != 2 {
                return Err(Error::Config("class-interp needs --classes a,b".into()));
            }
            let ka = attribute_index(names, dim, &classes[0])?;
            let kb = attribute_index(names, dim, &classes[1])?;
            render_class_interpolation(gen, &a.seeds, ka, kb, a.steps)?
        }
        GridKind::LatentInterp => {
            if a.seeds.len() != 2 {
                return Err(Error::Config("latent-interp needs exactly two --seeds".into()));
            }
            render_latent_interpolation(gen, &condition, a.seeds[0], a.seeds[1], a.steps)?
        }
        GridKind::Pose => render_pose_controls(gen, &rows, a.control.into(), &a.values)?,
    };
    for w in &grid.sidecar.warnings {
        log::warn!("{w}");
    }
    let dir = create_run_dir(&a.out_root, "render")?;
    write_run_config(&RunConfig {
        command: "render",
        args: a.clone(),
        resolved: &trainer.meta()?,
        seed: trainer.config.seed,
        run_dir: dir.clone(),
    })?;
    let name = a.kind.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default();
    grid.save(&dir.join(format!("{name}.png")))?;
    Ok(dir)
}

pub fn cmd_eval_fid(a: &EvalFidArgs) -> Result<PathBuf> {
    let trainer = load_checkpoint(&a.checkpoint)?;
    let gen = &trainer.generator;
    let manifest = load_manifest(&a.manifest).map_err(as_data_error)?;
    let data = ImageSet::load(&manifest, gen.config.output_resolution(), false).map_err(as_data_error)?;
    if data.condition_dim() != gen.config.condition_dim {
        return Err(Error::Data(format!(
            "manifest has {} attributes, model expects {}",
            data.condition_dim(),
            gen.config.condition_dim
        )));
    }
    let mut count = a.count;
    if count > data.len() {
        log::warn!("requested {count} images but the dataset has {}; using {}", data.len(), data.len());
        count = data.len();
    }
    if count < 2 {
        return Err(Error::Data("FID needs at least two images".into()));
    }
    let embedding = match &a.embedding {
        Some(p) => RandomConvEmbedding::from_file(p)?,
        None => RandomConvEmbedding::new(RandomConvEmbedding::DEFAULT_SEED)?,
    };
    let pick = data.batch_indices(count, a.seed, 0)?;
    let real: Vec<_> = pick.iter().map(|&i| data.images[i].clone()).collect();
    let real_classes: Vec<_> = pick.iter().map(|&i| data.class_of(i)).collect();
    let class_names = if data.is_class_dataset() { data.attributes.clone() } else { Vec::new() };
    let report = if a.self_test {
        compute_fid_by_class(&real, &real_classes, &real, &real_classes, &class_names, &embedding)?
    } else {
        // Fakes use the conditions of a second, independent draw of records.
        let cond_pick = data.batch_indices(count, a.seed, 1)?;
        let conditions: Vec<_> = cond_pick.iter().map(|&i| data.conditions[i].clone()).collect();
        let fake_classes: Vec<_> = cond_pick.iter().map(|&i| data.class_of(i)).collect();
        let fake = generate_samples(gen, &conditions, a.seed, 16)?;
        compute_fid_by_class(&real, &real_classes, &fake, &fake_classes, &class_names, &embedding)?
    };
    let dir = create_run_dir(&a.out_root, "eval-fid")?;
    write_run_config(&RunConfig {
        command: "eval-fid",
        args: a.clone(),
        resolved: serde_json::json!({ "count": count, "embedding": embedding.id() }),
        seed: a.seed,
        run_dir: dir.clone(),
    })?;
    let path = dir.join("fid.json");
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(&path, &json).map_err(|e| Error::io(&path, e))?;
    println!("{json}");
    Ok(dir)
}

pub fn cmd_synth_data(a: &SynthDataArgs) -> Result<PathBuf> {
    let spec: SyntheticSpec = match &a.spec {
        Some(p) => read_config_file(p)?,
        None => match a.labels {
            LabelsArg::HueSize => SyntheticSpec::hue_size(),
            LabelsArg::Classes => SyntheticSpec::default(),
        },
    };
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    if a.count == 0 {
        return Err(Error::Config("--count must be at least 1".into()));
    }
    generate_synthetic(&spec, a.count, a.seed, &a.out_dir)?;
    write_run_config(&RunConfig {
        command: "synth-data",
        args: a.clone(),
        resolved: &spec,
        seed: a.seed,
        run_dir: a.out_dir.clone(),
    })?;
    Ok(a.out_dir.clone())
}

pub fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let (meta, tensors) = read_checkpoint(&a.checkpoint).map_err(|e| match e {
        Error::Checkpoint(_) => e,
        other => Error::Checkpoint(format!("{}: {other}", a.checkpoint.display())),
    })?;
    let params: usize = tensors.iter().filter(|(k, _)| !k.starts_with("opt.")).map(|(_, t)| t.elem_count()).sum();
    let out = serde_json::json!({ "meta": meta, "tensors": tensors.len(), "parameters": params });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}
