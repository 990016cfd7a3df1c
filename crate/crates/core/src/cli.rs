//! Command-line front end. Exit codes: 0 success, 1 runtime failure,
//! 2 usage error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::error::{PimmsError, Result};
use crate::eval::{self, SubsetGrid};
use crate::io::{self, Metadata};
use crate::model::{Model, Variant};
use crate::parallel;
use crate::routing::{ModalityLabel, ScanSet};
use crate::synth::{self, DatasetConfig, Split};
use crate::training::{self, TrainConfig, TrainState};
use crate::verify::{self, Level};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Parser)]
#[command(name = "pimms", version = VERSION, about = "Permutation-invariant multi-modal segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset.
    GenData(GenDataArgs),
    /// Train a segmentation variant.
    Train(TrainArgs),
    /// Train the modality classifier alone.
    TrainFmod(TrainFmodArgs),
    /// Evaluate checkpoints on every modality subset.
    Eval(EvalArgs),
    /// Segment a set of unlabelled scans.
    Infer(InferArgs),
    /// Run the self-verification suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub variant: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long = "fmod-checkpoint")]
    pub fmod_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a saved training state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainFmodArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// `variant=path` pairs.
    #[arg(long, num_args = 1.., required = true)]
    pub checkpoints: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, num_args = 1..=3, required = true)]
    pub scans: Vec<PathBuf>,
    /// Output binary mask; the `H × W × 2` probability map goes next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated modality labels, one per scan (hemis only).
    #[arg(long)]
    pub labels: Option<String>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value = "quick")]
    pub level: String,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<PimmsError> for Failure {
    fn from(e: PimmsError) -> Self {
        Failure {
            code: 1,
            message: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: msg.into(),
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Record of one run: command line, effective config, inputs, outputs and
/// timestamps.
#[derive(Debug, Default)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub config: Metadata,
    pub seed: Option<u64>,
    pub inputs: Vec<(String, PathBuf)>,
    pub outputs: Vec<(String, PathBuf)>,
    pub started: u64,
}

impl RunManifest {
    fn new(command_line: &[String]) -> Self {
        RunManifest {
            command_line: command_line.to_vec(),
            started: now(),
            ..RunManifest::default()
        }
    }

    pub fn to_metadata(&self, finished: u64) -> Metadata {
        let mut m = Metadata::new();
        m.insert("command".into(), self.command_line.join(" "));
        m.insert("version".into(), VERSION.into());
        m.insert("started_unix".into(), self.started.to_string());
        m.insert("finished_unix".into(), finished.to_string());
        if let Some(s) = self.seed {
            m.insert("seed".into(), s.to_string());
        }
        for (k, v) in &self.config {
            m.insert(format!("config.{k}"), v.clone());
        }
        for (k, p) in &self.inputs {
            m.insert(format!("input.{k}"), p.display().to_string());
        }
        for (k, p) in &self.outputs {
            m.insert(format!("output.{k}"), p.display().to_string());
        }
        m
    }

    fn write(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, io::encode_metadata(&self.to_metadata(now())).as_bytes())
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| PimmsError::io(path, e))
}

/// Parse `args` (including the program name) and run the command, printing
/// to stdout and stderr. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let line: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli.command, &line) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn execute(command: Command, line: &[String]) -> std::result::Result<(), Failure> {
    match command {
        Command::GenData(a) => gen_data(&a, line),
        Command::Train(a) => train(&a, line),
        Command::TrainFmod(a) => train_fmod(&a, line),
        Command::Eval(a) => evaluate(&a, line),
        Command::Infer(a) => infer(&a),
        Command::Verify(a) => run_verify(&a),
    }
}

fn read_config(path: Option<&Path>) -> Result<Metadata> {
    match path {
        Some(p) => io::read_key_values(p),
        None => Ok(Metadata::new()),
    }
}

/// The dataset directory holds only generated data; its manifest sits
/// beside it as `<dir>.manifest.txt`.
pub fn dataset_manifest_path(out: &Path) -> PathBuf {
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into());
    out.with_file_name(format!("{name}.manifest.txt"))
}

fn gen_data(a: &GenDataArgs, line: &[String]) -> std::result::Result<(), Failure> {
    let mut meta = read_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        meta.insert("seed".into(), s.to_string());
    }
    let cfg = DatasetConfig::from_metadata(&meta)?;
    let ds = synth::generate_dataset(&cfg)?;
    synth::write_dataset(&ds, &a.out)?;
    let mut summary = String::new();
    for s in Split::ALL {
        let n = ds.split(s).len();
        if s != Split::Holdout || n > 0 {
            let _ = write!(summary, "{}{s}:{n}", if summary.is_empty() { "" } else { " " });
        }
    }
    println!("{summary}");
    let mut m = RunManifest::new(line);
    m.config = cfg.to_metadata();
    m.seed = Some(cfg.seed);
    m.outputs.push(("dataset".into(), a.out.clone()));
    m.write(&dataset_manifest_path(&a.out))?;
    Ok(())
}

fn train(a: &TrainArgs, line: &[String]) -> std::result::Result<(), Failure> {
    let variant: Variant = a.variant.parse().map_err(|_| {
        usage(format!("unknown variant `{}` (expected hemis, soft, hard or online)", a.variant))
    })?;
    match (variant.needs_pretrained_classifier(), &a.fmod_checkpoint) {
        (true, None) => return Err(usage(format!("{variant} requires pretrained f_mod (--fmod-checkpoint)"))),
        (false, Some(_)) => {
            return Err(usage(format!("{variant} does not take --fmod-checkpoint")));
        }
        _ => {}
    }
    let mut meta = read_config(a.config.as_deref())?;
    meta.insert("variant".into(), variant.to_string());
    let cfg = TrainConfig::from_metadata(&meta)?;
    let fmod = match &a.fmod_checkpoint {
        Some(p) => Some(io::read_checkpoint(p)?.0),
        None => None,
    };
    let resume = a.resume.as_deref().map(TrainState::read).transpose()?;
    let train_set = synth::read_split(&a.data, Split::Train)?;
    let val_set = synth::read_split(&a.data, Split::Val)?;
    create_dir(&a.out)?;
    let outcome = training::train(&cfg, &train_set, &val_set, fmod.as_ref(), resume, &mut |r| {
        if let Some(d) = r.val_dice {
            eprintln!("iter {} l_seg {:.4} val_dice {d:.4}", r.iteration, r.l_seg);
        }
    })?;
    let ckpt = a.out.join("model.ckpt");
    let trace = a.out.join("trace.csv");
    let state = a.out.join("state.bin");
    let meta = training::model_metadata(&outcome.model, &cfg, &outcome.state);
    training::save_model(&ckpt, &outcome.model, &meta)?;
    io::write_atomic(&trace, training::trace_csv(&outcome.state.trace).as_bytes())?;
    outcome.state.write(&state)?;
    if let Some(d) = outcome.best_val_dice() {
        println!("best val dice {d:.4}");
    }
    let mut m = RunManifest::new(line);
    m.config = cfg.to_metadata();
    m.seed = Some(cfg.seed);
    m.inputs.push(("data".into(), a.data.clone()));
    if let Some(p) = &a.fmod_checkpoint {
        m.inputs.push(("fmod_checkpoint".into(), p.clone()));
    }
    if let Some(p) = &a.resume {
        m.inputs.push(("resume".into(), p.clone()));
    }
    m.outputs.extend([("checkpoint".into(), ckpt), ("trace".into(), trace), ("state".into(), state)]);
    m.write(&a.out.join("manifest.txt"))?;
    Ok(())
}

fn train_fmod(a: &TrainFmodArgs, line: &[String]) -> std::result::Result<(), Failure> {
    let meta = read_config(a.config.as_deref())?;
    let cfg = TrainConfig::from_metadata(&meta)?;
    let train_set = synth::read_split(&a.data, Split::Train)?;
    create_dir(&a.out)?;
    let outcome = training::train_classifier(&cfg, &train_set, &mut |i, l| {
        if i % 100 == 0 {
            eprintln!("iter {i} l_class {l:.4}");
        }
    })?;
    let ckpt = a.out.join("fmod.ckpt");
    io::write_checkpoint(&ckpt, &outcome.params, &training::classifier_metadata(&cfg, cfg.fmod_iters))?;
    let mut trace = String::from("iteration,l_class\n");
    for (i, l) in &outcome.trace {
        let _ = writeln!(trace, "{i},{l}");
    }
    let trace_path = a.out.join("trace.csv");
    io::write_atomic(&trace_path, trace.as_bytes())?;
    // Accuracy of the stored (f32) weights, as a later run would load them.
    let stored = outcome.params.round_to_f32();
    let mut acc = Metadata::new();
    for s in Split::ALL {
        let samples = synth::read_split(&a.data, s)?;
        if samples.is_empty() {
            continue;
        }
        let v = training::classifier_accuracy(&cfg.model.classifier, &stored, &samples)?;
        println!("{s} accuracy {v:.4}");
        acc.insert(s.to_string(), v.to_string());
    }
    let acc_path = a.out.join("accuracy.txt");
    io::write_atomic(&acc_path, io::encode_metadata(&acc).as_bytes())?;
    let mut m = RunManifest::new(line);
    m.config = cfg.to_metadata();
    m.seed = Some(cfg.seed);
    m.inputs.push(("data".into(), a.data.clone()));
    m.outputs.extend([("checkpoint".into(), ckpt), ("trace".into(), trace_path), ("accuracy".into(), acc_path)]);
    m.write(&a.out.join("manifest.txt"))?;
    Ok(())
}

fn evaluate(a: &EvalArgs, line: &[String]) -> std::result::Result<(), Failure> {
    let split = Split::parse(&a.split).map_err(|e| usage(e.to_string()))?;
    let mut pairs = Vec::new();
    for spec in &a.checkpoints {
        let (v, p) = spec
            .split_once('=')
            .ok_or_else(|| usage(format!("expected variant=path, got `{spec}`")))?;
        let variant: Variant = v.parse().map_err(|_| usage(format!("unknown variant `{v}`")))?;
        pairs.push((variant, PathBuf::from(p)));
    }
    let mut models = Vec::new();
    for (v, p) in &pairs {
        let model = training::load_model(p)?;
        if model.variant != *v {
            return Err(usage(format!("{} holds a {} model, not {v}", p.display(), model.variant)));
        }
        models.push(model);
    }
    let samples = synth::read_split(&a.data, split)?;
    if samples.is_empty() {
        return Err(PimmsError::invalid(format!("split `{split}` of {} is empty", a.data.display())).into());
    }
    let grid = eval::evaluate_subsets(&models, &samples, parallel::threads_from_env())?;
    create_dir(&a.out)?;
    let csv = a.out.join("grid.csv");
    let table = a.out.join("grid.txt");
    io::write_atomic(&csv, grid.to_csv().as_bytes())?;
    io::write_atomic(&table, grid.render_table().as_bytes())?;
    print!("{}", grid.render_table());
    let mut m = RunManifest::new(line);
    m.inputs.push(("data".into(), a.data.clone()));
    m.config.insert("split".into(), split.to_string());
    for (v, p) in &pairs {
        m.inputs.push((format!("checkpoint.{v}"), p.clone()));
    }
    m.outputs.extend([("grid_csv".into(), csv), ("grid_table".into(), table)]);
    m.write(&a.out.join("manifest.txt"))?;
    Ok(())
}

/// Path of the probability map written next to a mask.
pub fn probability_path(mask: &Path) -> PathBuf {
    let stem = mask.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    mask.with_file_name(format!("{stem}.prob.rawt"))
}

fn infer(a: &InferArgs) -> std::result::Result<(), Failure> {
    let model = training::load_model(&a.checkpoint)?;
    let labels = match (&a.labels, model.variant) {
        (Some(_), v) if v != Variant::Hemis => {
            return Err(usage(format!("--labels is only accepted by hemis models, not {v}")))
        }
        (None, Variant::Hemis) => return Err(usage("hemis models need --labels")),
        (Some(s), _) => Some(
            s.split(',')
                .map(|l| ModalityLabel::parse(l.trim()).ok_or_else(|| usage(format!("unknown modality `{l}`"))))
                .collect::<std::result::Result<Vec<_>, _>>()?,
        ),
        (None, _) => None,
    };
    let scans = a.scans.iter().map(|p| io::read_rawt(p)).collect::<Result<Vec<_>>>()?;
    let set = ScanSet::new(scans)?;
    let pred = model.predict(&set, labels.as_deref())?;
    io::write_rawt(&a.out, &pred.mask())?;
    io::write_rawt(&probability_path(&a.out), &pred.probs)?;
    let lesion = pred.mask().sum();
    println!("{} lesion pixels of {}", lesion, pred.mask().len());
    Ok(())
}

fn run_verify(a: &VerifyArgs) -> std::result::Result<(), Failure> {
    let level = Level::parse(&a.level).ok_or_else(|| usage(format!("unknown level `{}`", a.level)))?;
    let results = verify::run(level, &mut |r, secs| {
        println!("{} {} ({secs:.1}s) {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    });
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", results.len());
    if failed > 0 {
        return Err(Failure {
            code: 1,
            message: format!("{failed} verification checks failed"),
        });
    }
    Ok(())
}

/// Load every checkpoint of a grid evaluation; convenience for examples.
pub fn load_models(paths: &[(Variant, PathBuf)]) -> Result<Vec<Model>> {
    paths.iter().map(|(_, p)| training::load_model(p)).collect()
}

/// Re-read a grid CSV as rows of fields, checking the header.
pub fn parse_grid_csv(text: &str) -> Result<Vec<Vec<String>>> {
    let mut lines = text.lines();
    if lines.next() != Some(SubsetGrid::CSV_HEADER) {
        return Err(PimmsError::invalid("unexpected grid header"));
    }
    Ok(lines.map(|l| l.split(',').map(str::to_string).collect()).collect())
}
