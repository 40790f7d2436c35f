//! `conformer-forge` command line: synthesize data, train, evaluate,
//! analyze latents, interpolate and transfer.
//!
//! Exit codes: 0 on success, 1 on invalid input (bad flags, missing or
//! incompatible files), 2 when the computation itself fails.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use conformer_forge::latent::{
    embed_frames, extrinsic_features, first_per_class, interp_to_csv, interpolate_latent, one_shot_classifier,
    pca_baseline, regression_probe, run_cca, ProbeResult, INTERP_STEPS,
};
use conformer_forge::progae::{DEFAULT_LAMBDA_R, LATENT_EXTRINSIC};
use conformer_forge::train::{
    evaluate, load_checkpoint, save_checkpoint, train_model, transfer_fit, FilterSubset, MANIFEST_FILE, PAYLOAD_FILE,
    TRANSFER_EPOCHS,
};
use conformer_forge::trajdata::{
    generate_synthetic, load_dataset, write_dataset, Split, COORDS_FILE, META_FILE,
};
use conformer_forge::{ProGaeModel, SyntheticConfig, TrainConfig, TrajectoryDataset};

pub const RUN_MANIFEST: &str = "run-manifest.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const REPORT_JSON: &str = "report.json";
pub const EMBEDDINGS_CSV: &str = "embeddings.csv";
pub const CCA_JSON: &str = "cca.json";
pub const PROBE_JSON: &str = "probe.json";
pub const INTERP_CSV: &str = "interp_rmsd.csv";
pub const CHECKPOINT_DIR: &str = "ckpt";

#[derive(Debug, Parser)]
#[command(name = "conformer-forge", version, about = "Geometric autoencoder for conformational ensembles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic helix ensemble.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint, metrics.csv and a test report.
    Train(TrainArgs),
    /// Reconstruction metrics of a checkpoint on one split.
    Eval(EvalArgs),
    /// CCA between intrinsic and extrinsic latents plus one-shot accuracies.
    Cca(CcaArgs),
    /// Held-out linear property regression against a PCA baseline.
    Probe(ProbeArgs),
    /// Decode the latent segment between two frames.
    Interp(InterpArgs),
    /// Fit a new chain by retraining only the latent-to-decoder layer.
    Transfer(TransferArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    pub atoms: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub frames_per_class: usize,
    /// Class-mode displacement amplitude (Å).
    #[arg(long, default_value_t = 6.0)]
    pub amplitude: f64,
    /// Per-coordinate Gaussian noise (Å).
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Consecutive-atom distance (Å).
    #[arg(long, default_value_t = 3.8)]
    pub spacing: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Optimizer settings shared by `train` and `transfer`.
#[derive(Debug, Args, Serialize)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Multiplicative learning-rate decay per epoch.
    #[arg(long, default_value_t = 0.995)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = 5e-5)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Weight of the bond-length penalty.
    #[arg(long, default_value_t = DEFAULT_LAMBDA_R)]
    pub lambda_r: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl OptimArgs {
    fn config(&self, epochs: usize, use_intrinsic: bool) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            lr_decay: self.lr_decay,
            weight_decay: self.weight_decay,
            epochs,
            batch_size: self.batch_size,
            lambda_r: self.lambda_r,
            seed: self.seed,
            use_intrinsic,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Drop the intrinsic branch.
    #[arg(long)]
    pub extrinsic_only: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = DEFAULT_LAMBDA_R)]
    pub lambda_r: f64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CcaArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Frames to embed; one-shot exemplars always come from the train split.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ProbeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Property to regress; every dataset property when omitted.
    #[arg(long)]
    pub property: Option<String>,
    /// PCA components of the raw extrinsic signal.
    #[arg(long, default_value_t = LATENT_EXTRINSIC)]
    pub components: usize,
    /// Seed of the 80/20 held-out row split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct InterpArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub frame_a: usize,
    #[arg(long)]
    pub frame_b: usize,
    #[arg(long, default_value_t = INTERP_STEPS)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TransferArgs {
    /// Target ensemble.
    #[arg(long)]
    pub data: PathBuf,
    /// Pretrained source checkpoint.
    #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
    pub ckpt: Option<PathBuf>,
    /// Train the same layer from a random initialization instead.
    #[arg(long)]
    pub baseline: bool,
    /// Encoder filters to copy: all, intrinsic or extrinsic.
    #[arg(long, default_value = "all")]
    pub subset: String,
    #[arg(long, default_value_t = TRANSFER_EPOCHS)]
    pub epochs: usize,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long)]
    pub out: PathBuf,
}

/// Resolved invocation recorded next to every run's artifacts.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// SHA-256 of every input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
}

enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome<T> = std::result::Result<T, Failure>;

trait Classify<T> {
    fn invalid(self) -> Outcome<T>;
    fn runtime(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for std::result::Result<T, E> {
    fn invalid(self) -> Outcome<T> {
        self.map_err(|e| Failure::Invalid(e.into()))
    }

    fn runtime(self) -> Outcome<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn dispatch(command: Command) -> Outcome<()> {
    match command {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Cca(a) => cca(&a),
        Command::Probe(a) => probe(&a),
        Command::Interp(a) => interp(&a),
        Command::Transfer(a) => transfer(&a),
    }
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn hash_inputs(dir: &Path, files: &[&str], into: &mut BTreeMap<String, String>) -> anyhow::Result<()> {
    for f in files {
        let p = dir.join(f);
        into.insert(p.display().to_string(), sha256_file(&p)?);
    }
    Ok(())
}

fn open_dataset(dir: &Path, inputs: &mut BTreeMap<String, String>) -> Outcome<TrajectoryDataset> {
    if !dir.join(META_FILE).is_file() {
        return Err(Failure::Invalid(anyhow::anyhow!("no dataset at {}", dir.display())));
    }
    let ds = load_dataset(dir)
        .with_context(|| format!("loading dataset {}", dir.display()))
        .invalid()?;
    hash_inputs(dir, &[META_FILE, COORDS_FILE], inputs).invalid()?;
    Ok(ds)
}

fn open_checkpoint(dir: &Path, inputs: &mut BTreeMap<String, String>) -> Outcome<ProGaeModel> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(Failure::Invalid(anyhow::anyhow!("no checkpoint at {}", dir.display())));
    }
    let model = load_checkpoint(dir)
        .with_context(|| format!("loading checkpoint {}", dir.display()))
        .invalid()?;
    hash_inputs(dir, &[MANIFEST_FILE, PAYLOAD_FILE], inputs).invalid()?;
    Ok(model)
}

fn open_pair(
    data: &Path,
    ckpt: &Path,
    inputs: &mut BTreeMap<String, String>,
) -> Outcome<(TrajectoryDataset, ProGaeModel)> {
    let ds = open_dataset(data, inputs)?;
    let model = open_checkpoint(ckpt, inputs)?;
    if model.config.atom_count != ds.meta.atom_count {
        return Err(Failure::Invalid(anyhow::anyhow!(
            "checkpoint expects {} atoms, dataset has {}",
            model.config.atom_count,
            ds.meta.atom_count
        )));
    }
    Ok((ds, model))
}

fn parse_split(s: &str) -> Outcome<Split> {
    s.parse::<Split>().invalid()
}

fn prepare_out(dir: &Path) -> Outcome<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .invalid()
}

fn write_text(dir: &Path, name: &str, text: &str) -> Outcome<()> {
    let p = dir.join(name);
    fs::write(&p, text)
        .with_context(|| format!("writing {}", p.display()))
        .runtime()
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Outcome<()> {
    let text = serde_json::to_string_pretty(value).runtime()?;
    write_text(dir, name, &(text + "\n"))
}

fn write_manifest(
    dir: &Path,
    command: &'static str,
    config: &impl Serialize,
    seed: Option<u64>,
    inputs: BTreeMap<String, String>,
) -> Outcome<()> {
    let manifest = RunManifest {
        tool: "conformer-forge",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config: serde_json::to_value(config).runtime()?,
        seed,
        inputs,
    };
    write_json(dir, RUN_MANIFEST, &manifest)
}

fn synth(a: &SynthArgs) -> Outcome<()> {
    let cfg = SyntheticConfig {
        atom_count: a.atoms,
        class_count: a.classes,
        frames_per_class: a.frames_per_class,
        spacing: a.spacing,
        mode_amplitude: a.amplitude,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    cfg.validate().invalid()?;
    prepare_out(&a.out)?;
    let ds = generate_synthetic(&cfg).runtime()?;
    write_dataset(&ds, &a.out).runtime()?;
    write_manifest(&a.out, "synth", &cfg, Some(a.seed), BTreeMap::new())
}

#[derive(Serialize)]
struct TrainResolved<'a> {
    data: &'a Path,
    out: &'a Path,
    train: &'a TrainConfig,
}

fn train(a: &TrainArgs) -> Outcome<()> {
    let cfg = a.optim.config(a.epochs, !a.extrinsic_only);
    cfg.validate().invalid()?;
    let mut inputs = BTreeMap::new();
    let ds = open_dataset(&a.data, &mut inputs)?;
    if ds.splits.train.is_empty() {
        return Err(Failure::Invalid(anyhow::anyhow!("dataset has an empty train split")));
    }
    let model_cfg = cfg.model_config(ds.meta.atom_count);
    model_cfg.validate().invalid()?;
    prepare_out(&a.out)?;

    let reference = &ds.frames[ds.splits.train[0]].coords;
    let mut model = ProGaeModel::init(model_cfg, reference).runtime()?;
    let history = train_model(&mut model, &ds, &cfg).runtime()?;
    save_checkpoint(&model, a.out.join(CHECKPOINT_DIR)).runtime()?;
    write_text(&a.out, METRICS_CSV, &history.to_csv())?;
    if !ds.splits.test.is_empty() {
        let report = evaluate(&model, &ds, Split::Test, cfg.lambda_r).runtime()?;
        write_json(&a.out, REPORT_JSON, &report)?;
    }
    let resolved = TrainResolved {
        data: &a.data,
        out: &a.out,
        train: &cfg,
    };
    write_manifest(&a.out, "train", &resolved, Some(cfg.seed), inputs)
}

fn eval(a: &EvalArgs) -> Outcome<()> {
    let split = parse_split(&a.split)?;
    if !(a.lambda_r >= 0.0 && a.lambda_r.is_finite()) {
        return Err(Failure::Invalid(anyhow::anyhow!("lambda_r must be non-negative")));
    }
    let mut inputs = BTreeMap::new();
    let (ds, model) = open_pair(&a.data, &a.ckpt, &mut inputs)?;
    prepare_out(&a.out)?;
    let report = evaluate(&model, &ds, split, a.lambda_r).runtime()?;
    println!("{}", serde_json::to_string_pretty(&report).runtime()?);
    write_json(&a.out, REPORT_JSON, &report)?;
    write_manifest(&a.out, "eval", a, None, inputs)
}

#[derive(Serialize)]
struct CcaSummary {
    split: String,
    frames: usize,
    leading_correlation: f64,
    correlations: Vec<f64>,
    intrinsic_accuracy: f64,
    extrinsic_accuracy: f64,
    /// Frame indices of the one-shot exemplars, one per class.
    exemplar_frames: Vec<usize>,
}

fn cca(a: &CcaArgs) -> Outcome<()> {
    let split = parse_split(&a.split)?;
    let mut inputs = BTreeMap::new();
    let (ds, model) = open_pair(&a.data, &a.ckpt, &mut inputs)?;
    prepare_out(&a.out)?;
    let frames = ds.split_frames(split);
    let (zi, ze) = embed_frames(&model, &frames).runtime()?;
    let corr = run_cca(&zi, &ze).runtime()?;

    let (ti, te) = embed_frames(&model, &ds.split_frames(Split::Train)).runtime()?;
    let ex = first_per_class(&te).runtime()?;
    let summary = CcaSummary {
        split: split.name().to_string(),
        frames: frames.len(),
        leading_correlation: corr.leading(),
        correlations: corr.correlations.clone(),
        intrinsic_accuracy: one_shot_classifier(&ti.select(&ex), &zi).runtime()?,
        extrinsic_accuracy: one_shot_classifier(&te.select(&ex), &ze).runtime()?,
        exemplar_frames: ex.iter().map(|&r| te.frame_indices[r]).collect(),
    };
    write_text(&a.out, EMBEDDINGS_CSV, &joint_csv(&zi, &ze))?;
    write_json(&a.out, CCA_JSON, &summary)?;
    write_manifest(&a.out, "cca", a, None, inputs)
}

/// `frame_index,label,zi0..,ze0..` with one row per frame.
fn joint_csv(zi: &conformer_forge::EmbeddingMatrix, ze: &conformer_forge::EmbeddingMatrix) -> String {
    let left = zi.to_csv("zi");
    let right = ze.to_csv("ze");
    let skip = if ze.labels.is_some() { 2 } else { 1 };
    let mut out = String::new();
    for (l, r) in left.lines().zip(right.lines()) {
        out.push_str(l);
        for field in r.split(',').skip(skip) {
            out.push(',');
            out.push_str(field);
        }
        out.push('\n');
    }
    out
}

fn probe(a: &ProbeArgs) -> Outcome<()> {
    let mut inputs = BTreeMap::new();
    let (ds, model) = open_pair(&a.data, &a.ckpt, &mut inputs)?;
    let names: Vec<String> = match &a.property {
        Some(p) if ds.meta.property_names.contains(p) => vec![p.clone()],
        Some(p) => return Err(Failure::Invalid(anyhow::anyhow!("dataset has no property {p:?}"))),
        None => ds.meta.property_names.clone(),
    };
    if names.is_empty() {
        return Err(Failure::Invalid(anyhow::anyhow!("dataset carries no properties")));
    }
    prepare_out(&a.out)?;
    let frames: Vec<_> = ds.frames.iter().collect();
    let (_, ze) = embed_frames(&model, &frames).runtime()?;
    let pca = pca_baseline(&extrinsic_features(&frames).runtime()?, a.components).runtime()?;
    let mut results = Vec::new();
    for name in names {
        let y = ze
            .properties
            .get(&name)
            .with_context(|| format!("property {name} is missing on some frames"))
            .invalid()?;
        results.push(ProbeResult {
            value: regression_probe(&ze, y, a.seed).runtime()?,
            baseline: Some(regression_probe(&pca, y, a.seed).runtime()?),
            task: name,
        });
    }
    write_json(&a.out, PROBE_JSON, &results)?;
    write_manifest(&a.out, "probe", a, Some(a.seed), inputs)
}

fn interp(a: &InterpArgs) -> Outcome<()> {
    if a.steps < 2 {
        return Err(Failure::Invalid(anyhow::anyhow!("--steps must be at least 2")));
    }
    let mut inputs = BTreeMap::new();
    let (ds, model) = open_pair(&a.data, &a.ckpt, &mut inputs)?;
    let frame = |i: usize| -> Outcome<_> {
        ds.frames
            .get(i)
            .map(|f| f.coords.as_slice())
            .ok_or_else(|| Failure::Invalid(anyhow::anyhow!("frame {i} is out of range ({} frames)", ds.frames.len())))
    };
    let (fa, fb) = (frame(a.frame_a)?, frame(a.frame_b)?);
    prepare_out(&a.out)?;
    let path = interpolate_latent(&model, fa, fb, a.steps).runtime()?;
    write_text(&a.out, INTERP_CSV, &interp_to_csv(&path))?;
    write_manifest(&a.out, "interp", a, None, inputs)
}

#[derive(Serialize)]
struct TransferResolved<'a> {
    data: &'a Path,
    source: Option<&'a Path>,
    subset: FilterSubset,
    out: &'a Path,
    train: &'a TrainConfig,
}

fn transfer(a: &TransferArgs) -> Outcome<()> {
    let subset: FilterSubset = a.subset.parse().invalid()?;
    let cfg = a.optim.config(a.epochs, true);
    cfg.validate().invalid()?;
    let mut inputs = BTreeMap::new();
    let ds = open_dataset(&a.data, &mut inputs)?;
    let source = match (&a.ckpt, a.baseline) {
        (Some(p), false) => Some(open_checkpoint(p, &mut inputs)?),
        (None, true) => None,
        _ => return Err(Failure::Invalid(anyhow::anyhow!("pass exactly one of --ckpt or --baseline"))),
    };
    prepare_out(&a.out)?;
    let outcome = transfer_fit(source.as_ref(), &ds, &cfg, subset).runtime()?;
    save_checkpoint(&outcome.model, a.out.join(CHECKPOINT_DIR)).runtime()?;
    write_text(&a.out, METRICS_CSV, &outcome.history.to_csv())?;
    write_json(&a.out, REPORT_JSON, &outcome.report)?;
    let resolved = TransferResolved {
        data: &a.data,
        source: a.ckpt.as_deref(),
        subset,
        out: &a.out,
        train: &cfg,
    };
    write_manifest(&a.out, "transfer", &resolved, Some(cfg.seed), inputs)
}
