//! `lungvol` command line: dataset generation, simulation, training,
//! search, fine-tuning, evaluation, reporting and the staged experiment
//! ladder.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::drr::{encode_rimg, simulate_network_inputs, View, CANVAS};
use crate::evalstat::{self, EvalReport, MetricsRow, StatError};
use crate::io::FormatError;
use crate::nnreg::{
    build_conv_block_cnn, build_dual_cnn, ensemble_predict, ArchitectureRegistry, Checkpoint, HeadInput, ModelSpec,
    NnError, OptimizerKind, Variant,
};
use crate::phantom::{
    make_dataset, read_manifest, relabel, write_manifest, CaseRecord, DatasetOptions, LabelNoise, PhantomError,
    PhantomParams, Split, SplitPlan, MANIFEST_NAME,
};
use crate::seed::derive_seed;
use crate::trainer::{
    self, check_disjoint, finetune, predict, random_search, write_ranking_csv, write_run_dir, Augmentation, Dataset,
    DrawStatus, EpochRecord, HyperDraw, Oversampling, SearchEntry, TrainConfig, TrainError, TrainOutcome,
};
use crate::volgrid::{read_rvol_file, Rvol};

/// Failure of a command; each kind maps to its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("cannot write {}: {source}", path.display())]
    Unwritable { path: PathBuf, source: std::io::Error },
    #[error("malformed input: {0}")]
    Format(String),
    #[error("split overlap: {0}")]
    SplitOverlap(String),
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("statistics: {0}")]
    Statistics(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::InvalidArgument(_) => 2,
            CliError::MissingFile(_) => 3,
            CliError::Unwritable { .. } => 4,
            CliError::Format(_) => 5,
            CliError::SplitOverlap(_) => 6,
            CliError::ArchitectureMismatch(_) => 7,
            CliError::Training(_) => 8,
            CliError::Statistics(_) => 9,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::SplitOverlap { .. } => CliError::SplitOverlap(e.to_string()),
            TrainError::ArchitectureMismatch { .. }
            | TrainError::Nn(NnError::ArchitectureMismatch(_))
            | TrainError::Nn(NnError::UnknownArchitecture(_)) => CliError::ArchitectureMismatch(e.to_string()),
            TrainError::InvalidConfig(_) | TrainError::EmptySplit(_) => CliError::InvalidArgument(e.to_string()),
            TrainError::Image { .. } | TrainError::ImageSize { .. } | TrainError::Manifest(_) | TrainError::Csv(_) => {
                CliError::Format(e.to_string())
            }
            TrainError::Io { path, source } => CliError::Unwritable { path, source },
            _ => CliError::Training(e.to_string()),
        }
    }
}

impl From<StatError> for CliError {
    fn from(e: StatError) -> Self {
        match e {
            StatError::Io { path, source } => CliError::Unwritable { path, source },
            other => CliError::Statistics(other.to_string()),
        }
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        match e {
            PhantomError::BadNoiseSpec(_) | PhantomError::InvalidParams(_) => CliError::InvalidArgument(e.to_string()),
            PhantomError::Io { path, source } => CliError::Unwritable { path, source },
            other => CliError::Format(other.to_string()),
        }
    }
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingFile(path.to_path_buf()))
    }
}

fn format_err(path: &Path, e: FormatError) -> CliError {
    match e {
        FormatError::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => CliError::MissingFile(path.to_path_buf()),
        other => CliError::Format(format!("{}: {other}", path.display())),
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|source| CliError::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Parser)]
#[command(name = "lungvol", version, about = "Total lung volume regression from simulated radiographs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset with a manifest.
    PhantomGen(PhantomGenArgs),
    /// Project an RVOL volume to a frontal/lateral RIMG pair.
    Simulate(SimulateArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Random hyperparameter search.
    Search(SearchArgs),
    /// Fine-tune a checkpoint on the manifest's train split.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint or a predictions file against a manifest split.
    Evaluate(EvaluateArgs),
    /// Metrics table for several checkpoints and an output-average ensemble.
    Report(ReportArgs),
    /// Agreement between two paired measurement columns.
    Compare(CompareArgs),
    /// Staged experiment ladder: sim-exact, real-noisy, finetune-gold.
    Ladder(LadderArgs),
}

#[derive(Debug, Args)]
pub struct PhantomGenArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    /// exact | mult:<rel> | add:<ml> | bias:<ml>
    #[arg(long, default_value = "exact")]
    pub noise: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Side of the stored network-input images.
    #[arg(long, default_value_t = 128)]
    pub side: usize,
    /// Skip writing RVOL volumes and masks.
    #[arg(long)]
    pub no_volumes: bool,
    /// Also write PGM previews next to the RIMG files.
    #[arg(long)]
    pub previews: bool,
    /// Explicit split sizes `train,val,test` (default 60/20/20).
    #[arg(long)]
    pub splits: Option<String>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long)]
    pub out_frontal: PathBuf,
    #[arg(long)]
    pub out_lateral: PathBuf,
    /// Output side; 512 keeps the full preprocessed canvas.
    #[arg(long, default_value_t = CANVAS)]
    pub side: usize,
}

/// Model architecture flags; defaults give the six-layer CNN on 128 px.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// frontal | lateral | dual
    #[arg(long)]
    pub view: Option<Variant>,
    #[arg(long)]
    pub side: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Hidden head widths, comma separated.
    #[arg(long)]
    pub head: Option<String>,
    /// Flatten the final feature map instead of global average pooling.
    #[arg(long)]
    pub flatten: bool,
}

impl ModelArgs {
    fn spec(&self, default_view: Variant) -> Result<ModelSpec, CliError> {
        let variant = self.view.unwrap_or(default_view);
        let head = match &self.head {
            Some(h) => parse_list::<usize>(h, "head width")?,
            None => vec![512, 128],
        };
        let view = match variant {
            Variant::Single(v) => v,
            Variant::Dual => View::Frontal,
        };
        let mut spec = build_conv_block_cnn(
            view,
            self.side.unwrap_or(128),
            self.depth.unwrap_or(6),
            self.base_channels.unwrap_or(32),
            head,
        )
        .map_err(|e| CliError::InvalidArgument(e.to_string()))?;
        if self.flatten {
            spec.head_input = HeadInput::Flatten;
        }
        if variant == Variant::Dual {
            spec = build_dual_cnn(&spec).map_err(|e| CliError::InvalidArgument(e.to_string()))?;
        }
        Ok(spec)
    }

    fn any_set(&self) -> bool {
        self.view.is_some()
            || self.side.is_some()
            || self.depth.is_some()
            || self.base_channels.is_some()
            || self.head.is_some()
            || self.flatten
    }
}

/// Optimization flags; each overrides the config file when given.
#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    /// TrainConfig JSON snapshot to start from.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// sgd | adam
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Comma-separated subset of shift,scale,rotation,intensity (or none).
    #[arg(long)]
    pub augment: Option<String>,
    /// none | bins:<k>
    #[arg(long)]
    pub oversample: Option<String>,
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| CliError::InvalidArgument(format!("bad {what} `{t}`")))
        })
        .collect()
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, CliError> {
    match s {
        "sgd" | "sgd-momentum" => Ok(OptimizerKind::sgd()),
        "adam" => Ok(OptimizerKind::adam()),
        _ => Err(CliError::InvalidArgument(format!("unknown optimizer `{s}`"))),
    }
}

fn parse_augment(s: &str) -> Result<Vec<Augmentation>, CliError> {
    if s == "none" {
        return Ok(Vec::new());
    }
    let defaults = Augmentation::defaults();
    s.split(',')
        .map(|t| match t.trim() {
            "shift" => Ok(defaults[0]),
            "scale" => Ok(defaults[1]),
            "rotation" => Ok(defaults[2]),
            "intensity" => Ok(defaults[3]),
            other => Err(CliError::InvalidArgument(format!("unknown augmentation `{other}`"))),
        })
        .collect()
}

fn parse_oversample(s: &str) -> Result<Oversampling, CliError> {
    if s == "none" {
        return Ok(Oversampling::None);
    }
    s.strip_prefix("bins:")
        .and_then(|k| k.parse().ok())
        .filter(|&k: &usize| k > 0)
        .map(|bins| Oversampling::VolumeBins { bins })
        .ok_or_else(|| CliError::InvalidArgument(format!("bad oversampling `{s}`; expected none or bins:<k>")))
}

fn load_config(path: &Path) -> Result<TrainConfig, CliError> {
    require(path)?;
    let text = fs::read_to_string(path).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    TrainConfig::from_json(&text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

/// Builds a config from an optional snapshot, the model flags (or
/// `fallback_model`) and the optimization overrides.
fn build_config(
    model: &ModelArgs,
    optim: &OptimArgs,
    seed: u64,
    fallback_model: Option<&ModelSpec>,
) -> Result<TrainConfig, CliError> {
    let mut cfg = match &optim.config {
        Some(path) => {
            let mut c = load_config(path)?;
            if model.any_set() {
                c.model = model.spec(c.model.variant)?;
            }
            c
        }
        None => {
            let spec = match fallback_model {
                Some(s) if !model.any_set() => s.clone(),
                _ => model.spec(Variant::Dual)?,
            };
            TrainConfig::new(spec, seed)
        }
    };
    cfg.seed = seed;
    if let Some(lr) = optim.lr {
        cfg.learning_rate = lr;
    }
    if let Some(o) = &optim.optimizer {
        cfg.optimizer = parse_optimizer(o)?;
    }
    if let Some(b) = optim.batch_size {
        cfg.batch_size = b;
    }
    if let Some(m) = optim.max_epochs {
        cfg.max_epochs = m;
    }
    if let Some(p) = optim.patience {
        cfg.patience = p;
    }
    if let Some(a) = &optim.augment {
        cfg.augmentations = parse_augment(a)?;
    }
    if let Some(o) = &optim.oversample {
        cfg.oversampling = parse_oversample(o)?;
    }
    Ok(cfg)
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub draws: usize,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// CSV with `case_id` and `predicted_liters` columns.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Model name written to the metrics table.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    /// Frontal and lateral checkpoints whose outputs are averaged.
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    pub ensemble: Option<Vec<PathBuf>>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// CSV with a `case_id` column; treated as the prediction.
    #[arg(long)]
    pub a: PathBuf,
    /// CSV with a `case_id` column; treated as the reference.
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value = "label_liters")]
    pub column_a: String,
    #[arg(long, default_value = "label_liters")]
    pub column_b: String,
    #[arg(long, default_value = "A")]
    pub label_a: String,
    #[arg(long, default_value = "B")]
    pub label_b: String,
    /// Keep only rows whose `split` column equals this value.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LadderArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated stages in order: sim-exact,real-noisy,finetune-gold.
    #[arg(long, default_value = "sim-exact")]
    pub stages: String,
    /// Model variants trained per stage.
    #[arg(long, default_value = "frontal,lateral,dual")]
    pub views: String,
    /// Label noise of the real-noisy stage.
    #[arg(long, default_value = "mult:0.1")]
    pub noise: String,
    /// Validation cases re-labelled exactly for the finetune-gold stage.
    #[arg(long, default_value_t = 150)]
    pub gold_cases: usize,
    #[arg(long, default_value_t = 1)]
    pub draws: usize,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::InvalidArgument(e.to_string()))?;
    execute(cli.command)
}

/// Process entry point: diagnostics to stderr, exit code per error kind.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lungvol: error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::PhantomGen(a) => phantom_gen(&a),
        Command::Simulate(a) => simulate(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Search(a) => search_cmd(&a),
        Command::Finetune(a) => finetune_cmd(&a),
        Command::Evaluate(a) => evaluate_cmd(&a),
        Command::Report(a) => report_cmd(&a),
        Command::Compare(a) => compare_cmd(&a),
        Command::Ladder(a) => ladder_cmd(&a),
    }
}

fn phantom_gen(a: &PhantomGenArgs) -> Result<(), CliError> {
    let noise: LabelNoise = a.noise.parse()?;
    if a.n == 0 {
        return Err(CliError::InvalidArgument("--n must be > 0".into()));
    }
    let splits = match &a.splits {
        Some(s) => match parse_list::<usize>(s, "split size")?.as_slice() {
            &[train, val, test] if train + val + test == a.n => SplitPlan { train, val, test },
            _ => {
                return Err(CliError::InvalidArgument(format!(
                    "--splits must be three counts summing to {}",
                    a.n
                )))
            }
        },
        None => SplitPlan::proportional(a.n),
    };
    if a.side == 0 || CANVAS % a.side != 0 {
        return Err(CliError::InvalidArgument(format!("--side must divide {CANVAS}")));
    }
    create_dir(&a.out)?;
    let options = DatasetOptions {
        splits,
        image_side: a.side,
        save_volumes: !a.no_volumes,
        save_previews: a.previews,
    };
    let records = make_dataset(&PhantomParams::default(), noise, a.seed, &options, &a.out)?;
    let tlv: Vec<f64> = records.iter().map(|r| r.true_tlv_liters).collect();
    let (lo, hi) = tlv
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    println!(
        "generated {} cases (train {}, val {}, test {}); TLV min {lo:.3} L, median {:.3} L, max {hi:.3} L",
        records.len(),
        splits.train,
        splits.val,
        splits.test,
        evalstat::median(&tlv)
    );
    Ok(())
}

fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    require(&a.volume)?;
    let vol = match read_rvol_file(&a.volume).map_err(|e| format_err(&a.volume, e))? {
        Rvol::Volume(v) => v,
        Rvol::Mask(_) => {
            return Err(CliError::Format(format!(
                "{}: expected an f32 volume, found a mask",
                a.volume.display()
            )))
        }
    };
    let (f, l) = simulate_network_inputs(&vol, a.side).map_err(|e| CliError::InvalidArgument(e.to_string()))?;
    write_bytes(&a.out_frontal, &encode_rimg(&f))?;
    write_bytes(&a.out_lateral, &encode_rimg(&l))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|source| CliError::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

/// Manifest rows and the directory their image paths are relative to.
fn manifest_rows(path: &Path) -> Result<(Vec<CaseRecord>, PathBuf), CliError> {
    require(path)?;
    let records = read_manifest(path).map_err(|e| CliError::Format(e.to_string()))?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((records, root))
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(CliError::InvalidArgument(format!("unknown split `{s}`"))),
    }
}

fn split_records(records: &[CaseRecord], split: Split) -> Vec<CaseRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

/// Loads train/val/test datasets and checks their case ids are disjoint.
fn load_all(manifest: &Path, side: usize) -> Result<[Dataset; 3], CliError> {
    let (records, root) = manifest_rows(manifest)?;
    let [tr, va, te] = [Split::Train, Split::Val, Split::Test]
        .map(|s| Dataset::load(&root, &split_records(&records, s), side));
    let sets = [tr?, va?, te?];
    check_disjoint(&[("train", &sets[0]), ("validation", &sets[1]), ("test", &sets[2])])?;
    Ok(sets)
}

fn progress(tag: String) -> impl FnMut(&EpochRecord) {
    move |r| eprintln!("[{tag}] epoch {} train_mse {:.6} val_mse {:.6}", r.epoch, r.train_mse, r.val_mse)
}

fn train_cmd(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = build_config(&a.model, &a.optim, a.seed, None)?;
    let [tr, va, _] = load_all(&a.manifest, cfg.model.input_side)?;
    let registry = ArchitectureRegistry::default();
    let mut cb = progress(cfg.variant().to_string());
    let outcome = trainer::train(&cfg, &registry, &tr, &va, Some(&mut cb))?;
    write_run_dir(&a.out, &cfg, &outcome)?;
    println!(
        "best epoch {} of {}: val_mse {:.6}, val_mape {:.3}%",
        outcome.best_epoch,
        outcome.history.len(),
        outcome.best_val_mse,
        outcome.best_val_mape
    );
    Ok(())
}

fn search_space(a: &SearchArgs) -> Result<HyperDraw, CliError> {
    let base = build_config(&a.model, &a.optim, a.seed, None)?;
    let mut space = HyperDraw::new(base, a.draws, a.seed);
    if let Some(lo) = a.lr_min {
        space.lr_range.0 = lo;
    }
    if let Some(hi) = a.lr_max {
        space.lr_range.1 = hi;
    }
    Ok(space)
}

fn search_cmd(a: &SearchArgs) -> Result<(), CliError> {
    let space = search_space(a)?;
    let [tr, va, _] = load_all(&a.manifest, space.base.model.input_side)?;
    let registry = ArchitectureRegistry::default();
    let entries = random_search(&space, &registry, &tr, &va, a.jobs)?;
    create_dir(&a.out)?;
    write_ranking_csv(&a.out.join("search_ranking.csv"), &entries)?;
    for e in &entries {
        if let DrawStatus::Ok(o) = &e.status {
            write_run_dir(&a.out.join(format!("draw_{:04}", e.draw)), &e.config, o)?;
        }
    }
    match entries.first() {
        Some(e @ SearchEntry { status: DrawStatus::Ok(o), .. }) => {
            write_run_dir(&a.out.join("best"), &e.config, o)?;
            println!("best draw {}: val_mape {:.3}%, val_mse {:.6}", e.draw, o.best_val_mape, o.best_val_mse);
            Ok(())
        }
        _ => Err(CliError::Training("every search draw failed; see search_ranking.csv".into())),
    }
}


fn finetune_cmd(a: &FinetuneArgs) -> Result<(), CliError> {
    require(&a.checkpoint)?;
    let pretrained = Checkpoint::load(&a.checkpoint).map_err(|e| format_err(&a.checkpoint, e))?;
    let cfg = build_config(&a.model, &a.optim, a.seed, Some(&pretrained.spec))?;
    let [tr, va, te] = load_all(&a.manifest, pretrained.spec.input_side)?;
    check_disjoint(&[("fine-tune", &tr), ("test", &te)])?;
    let registry = ArchitectureRegistry::default();
    let mut cb = progress(format!("finetune {}", cfg.variant()));
    let outcome = finetune(&pretrained, &cfg, &registry, &tr, &va, Some(&mut cb))?;
    write_run_dir(&a.out, &cfg, &outcome)?;
    println!(
        "best epoch {}: val_mse {:.6}, val_mape {:.3}%",
        outcome.best_epoch, outcome.best_val_mse, outcome.best_val_mape
    );
    Ok(())
}

/// Predictions of a checkpoint on the given manifest rows.
fn checkpoint_predictions(
    path: &Path,
    root: &Path,
    rows: &[CaseRecord],
    registry: &ArchitectureRegistry,
) -> Result<(Checkpoint, Vec<f64>), CliError> {
    require(path)?;
    let ck = Checkpoint::load(path).map_err(|e| format_err(path, e))?;
    let data = Dataset::load(root, rows, ck.spec.input_side)?;
    let mut model = ck.to_model(registry).map_err(|e| CliError::ArchitectureMismatch(e.to_string()))?;
    let pred = predict(&mut model, &data)?;
    Ok((ck, pred))
}

/// Reads `(case_id, value)` pairs from a CSV column, optionally filtered by
/// a `split` column.
fn read_column(path: &Path, column: &str, split: Option<&str>) -> Result<Vec<(String, f64)>, CliError> {
    require(path)?;
    let bad = |m: String| CliError::Format(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let id_col = find("case_id").ok_or_else(|| bad("no case_id column".into()))?;
    let val_col = find(column).ok_or_else(|| bad(format!("no `{column}` column")))?;
    let split_col = match split {
        Some(_) => Some(find("split").ok_or_else(|| bad("no split column".into()))?),
        None => None,
    };
    let mut out = Vec::new();
    for (line, row) in r.records().enumerate() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        if let (Some(c), Some(want)) = (split_col, split) {
            if &row[c] != want {
                continue;
            }
        }
        let v: f64 = row[val_col]
            .parse()
            .map_err(|_| bad(format!("row {}: `{}` is not a number", line + 2, &row[val_col])))?;
        out.push((row[id_col].to_string(), v));
    }
    Ok(out)
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<(), CliError> {
    let split = parse_split(&a.split)?;
    let (records, root) = manifest_rows(&a.manifest)?;
    let rows = split_records(&records, split);
    let reference: Vec<f64> = rows.iter().map(|r| r.label_liters).collect();
    let ids: Vec<String> = rows.iter().map(|r| r.case_id.clone()).collect();
    let registry = ArchitectureRegistry::default();
    let (pred, name, arch) = match (&a.checkpoint, &a.predictions) {
        (Some(ck), _) => {
            let (ck, pred) = checkpoint_predictions(ck, &root, &rows, &registry)?;
            (pred, ck.spec.variant.to_string(), ck.spec.architecture.clone())
        }
        (None, Some(p)) => {
            let map: HashMap<String, f64> = read_column(p, "predicted_liters", None)?.into_iter().collect();
            let pred = ids
                .iter()
                .map(|id| {
                    map.get(id)
                        .copied()
                        .ok_or_else(|| CliError::Format(format!("{}: no prediction for {id}", p.display())))
                })
                .collect::<Result<Vec<_>, _>>()?;
            (pred, "predictions".to_string(), "external".to_string())
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    let name = a.name.clone().unwrap_or(name);
    let report = EvalReport::new(ids, pred, reference)?;
    create_dir(&a.out)?;
    evalstat::write_report_files(&a.out, &report, &name, "reference")?;
    evalstat::write_metrics_csv(&a.out.join("metrics.csv"), &[MetricsRow::from_report(&name, &arch, &report)])?;
    print_row(&name, &report);
    Ok(())
}

fn print_row(name: &str, r: &EvalReport) {
    println!(
        "{name}: MAPE {:.3}%, MAE {:.1} ml, r {}, bias {:.1} ml, N {}",
        r.mape_pct, r.mae_ml, r.pearson, r.bland_altman.bias_ml, r.n
    );
}

fn unique_name(base: String, taken: &mut Vec<String>) -> String {
    let mut name = base.clone();
    let mut k = 2;
    while taken.contains(&name) {
        name = format!("{base}_{k}");
        k += 1;
    }
    taken.push(name.clone());
    name
}

fn report_cmd(a: &ReportArgs) -> Result<(), CliError> {
    if a.checkpoints.is_empty() && a.ensemble.is_none() {
        return Err(CliError::InvalidArgument("give at least one --checkpoint or --ensemble A B".into()));
    }
    let split = parse_split(&a.split)?;
    let (records, root) = manifest_rows(&a.manifest)?;
    let rows = split_records(&records, split);
    let reference: Vec<f64> = rows.iter().map(|r| r.label_liters).collect();
    let ids: Vec<String> = rows.iter().map(|r| r.case_id.clone()).collect();
    let registry = ArchitectureRegistry::default();
    create_dir(&a.out)?;

    let mut taken = Vec::new();
    let mut table = Vec::new();
    let mut emit = |name: String, arch: &str, pred: Vec<f64>| -> Result<(), CliError> {
        let report = EvalReport::new(ids.clone(), pred, reference.clone())?;
        evalstat::write_report_files(&a.out.join(&name), &report, &name, "reference")?;
        print_row(&name, &report);
        table.push(MetricsRow::from_report(&name, arch, &report));
        Ok(())
    };
    for path in &a.checkpoints {
        let (ck, pred) = checkpoint_predictions(path, &root, &rows, &registry)?;
        emit(unique_name(ck.spec.variant.to_string(), &mut taken), &ck.spec.architecture, pred)?;
    }
    if let Some(pair) = &a.ensemble {
        let (ca, pa) = checkpoint_predictions(&pair[0], &root, &rows, &registry)?;
        let (_, pb) = checkpoint_predictions(&pair[1], &root, &rows, &registry)?;
        let pred = pa.iter().zip(&pb).map(|(&x, &y)| ensemble_predict(x, y)).collect();
        emit(unique_name("ensemble".into(), &mut taken), &ca.spec.architecture, pred)?;
    }
    evalstat::write_metrics_csv(&a.out.join("metrics.csv"), &table)?;
    Ok(())
}

fn compare_cmd(a: &CompareArgs) -> Result<(), CliError> {
    let xa = read_column(&a.a, &a.column_a, a.split.as_deref())?;
    let xb: HashMap<String, f64> = read_column(&a.b, &a.column_b, a.split.as_deref())?.into_iter().collect();
    let mut ids = Vec::with_capacity(xa.len());
    let (mut va, mut vb) = (Vec::new(), Vec::new());
    for (id, v) in xa {
        let w = *xb
            .get(&id)
            .ok_or_else(|| CliError::Format(format!("{}: no row for case {id}", a.b.display())))?;
        ids.push(id);
        va.push(v);
        vb.push(w);
    }
    let report = evalstat::compare_measurements(ids, &va, &vb, &a.label_a, &a.label_b, &a.out)?;
    evalstat::write_metrics_csv(
        &a.out.join("metrics.csv"),
        &[MetricsRow::from_report(&a.label_a, "measurement", &report)],
    )?;
    print_row(&format!("{} vs {}", a.label_a, a.label_b), &report);
    Ok(())
}

/// Stages of the experiment ladder, in their fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    /// Exact labels on train, validation and test.
    SimExact,
    /// Noisy reference labels everywhere.
    RealNoisy,
    /// Real-noisy models fine-tuned on a few exactly labelled validation
    /// cases, evaluated against exact test labels.
    FinetuneGold,
}

impl std::str::FromStr for Stage {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim-exact" => Ok(Stage::SimExact),
            "real-noisy" => Ok(Stage::RealNoisy),
            "finetune-gold" => Ok(Stage::FinetuneGold),
            _ => Err(CliError::InvalidArgument(format!("unknown stage `{s}`"))),
        }
    }
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::SimExact => "sim-exact",
            Stage::RealNoisy => "real-noisy",
            Stage::FinetuneGold => "finetune-gold",
        }
    }
}

/// Everything the ladder needs beyond the datasets.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub stages: Vec<Stage>,
    pub views: Vec<Variant>,
    /// Template for every training run; its model variant is replaced per
    /// view.
    pub base: TrainConfig,
    pub draws: usize,
    pub jobs: usize,
    pub noise: LabelNoise,
    pub gold_cases: usize,
    pub seed: u64,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.stages.is_empty() || self.stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CliError::InvalidArgument(
                "stages must be a non-empty subsequence of sim-exact,real-noisy,finetune-gold".into(),
            ));
        }
        if self.stages.contains(&Stage::FinetuneGold) && !self.stages.contains(&Stage::RealNoisy) {
            return Err(CliError::InvalidArgument("finetune-gold requires the real-noisy stage".into()));
        }
        if self.views.is_empty() {
            return Err(CliError::InvalidArgument("no views to train".into()));
        }
        if self.draws == 0 {
            return Err(CliError::InvalidArgument("--draws must be > 0".into()));
        }
        Ok(())
    }

    fn config_for(&self, variant: Variant) -> Result<TrainConfig, CliError> {
        let mut cfg = self.base.clone();
        cfg.model = match variant {
            Variant::Dual => build_dual_cnn(&single_of(&self.base.model, View::Frontal))
                .map_err(|e| CliError::InvalidArgument(e.to_string()))?,
            Variant::Single(v) => single_of(&self.base.model, v),
        };
        Ok(cfg)
    }
}

fn single_of(spec: &ModelSpec, view: View) -> ModelSpec {
    ModelSpec {
        variant: Variant::Single(view),
        ..spec.clone()
    }
}

/// Metrics rows and selected models of one stage.
#[derive(Debug)]
pub struct StageResult {
    pub stage: Stage,
    pub rows: Vec<MetricsRow>,
    pub models: Vec<(Variant, TrainOutcome)>,
}

fn with_labels(ds: &Dataset, label: impl Fn(&str) -> f64) -> Dataset {
    let mut out = ds.clone();
    for s in &mut out.samples {
        s.label = label(&s.case_id);
    }
    out
}

/// Trains the best of `draws` configs for each view, evaluates on `test`
/// and appends the ensemble when both single views are present.
fn fit_views(
    plan: &ExperimentPlan,
    stage_seed: u64,
    registry: &ArchitectureRegistry,
    sets: &[Dataset; 3],
    out: &Path,
) -> Result<(Vec<MetricsRow>, Vec<(Variant, TrainOutcome)>), CliError> {
    let [tr, va, te] = sets;
    let mut rows = Vec::new();
    let mut models = Vec::new();
    let mut preds: HashMap<Variant, Vec<f64>> = HashMap::new();
    for (k, &variant) in plan.views.iter().enumerate() {
        let base = plan.config_for(variant)?;
        let seed = derive_seed(stage_seed, k as u64);
        let outcome = if plan.draws == 1 {
            let cfg = TrainConfig { seed, ..base };
            let mut cb = progress(variant.to_string());
            let o = trainer::train(&cfg, registry, tr, va, Some(&mut cb))?;
            write_run_dir(&out.join(variant.to_string()), &cfg, &o)?;
            o
        } else {
            let space = HyperDraw::new(base, plan.draws, seed);
            let entries = random_search(&space, registry, tr, va, plan.jobs)?;
            let dir = out.join(variant.to_string());
            create_dir(&dir)?;
            write_ranking_csv(&dir.join("search_ranking.csv"), &entries)?;
            let best = entries.into_iter().next().expect("draws > 0");
            match best.status {
                DrawStatus::Ok(o) => {
                    write_run_dir(&dir, &best.config, &o)?;
                    o
                }
                DrawStatus::Failed(reason) => return Err(CliError::Training(reason)),
            }
        };
        let mut model = outcome.checkpoint.to_model(registry).map_err(TrainError::from)?;
        let pred = predict(&mut model, te)?;
        let report = EvalReport::new(te.case_ids(), pred.clone(), te.labels())?;
        let name = variant.to_string();
        evalstat::write_report_files(&out.join(&name), &report, &name, "reference")?;
        print_row(&name, &report);
        rows.push(MetricsRow::from_report(&name, &outcome.checkpoint.spec.architecture, &report));
        preds.insert(variant, pred);
        models.push((variant, outcome));
    }
    if let (Some(f), Some(l)) = (
        preds.get(&Variant::Single(View::Frontal)),
        preds.get(&Variant::Single(View::Lateral)),
    ) {
        let pred = f.iter().zip(l).map(|(&a, &b)| ensemble_predict(a, b)).collect();
        let report = EvalReport::new(te.case_ids(), pred, te.labels())?;
        evalstat::write_report_files(&out.join("ensemble"), &report, "ensemble", "reference")?;
        print_row("ensemble", &report);
        rows.push(MetricsRow::from_report("ensemble", &plan.base.model.architecture, &report));
    }
    Ok((rows, models))
}

/// Runs the planned stages on a manifest; writes one directory per stage
/// with run directories and a `metrics.csv`.
pub fn run_ladder(plan: &ExperimentPlan, manifest: &Path, out: &Path) -> Result<Vec<StageResult>, CliError> {
    plan.validate()?;
    let registry = ArchitectureRegistry::default();
    let (records, _) = manifest_rows(manifest)?;
    let sets = load_all(manifest, plan.base.model.input_side)?;
    let truth: HashMap<String, f64> = records.iter().map(|r| (r.case_id.clone(), r.true_tlv_liters)).collect();
    let mut results: Vec<StageResult> = Vec::new();
    for (si, &stage) in plan.stages.iter().enumerate() {
        let dir = out.join(stage.name());
        create_dir(&dir)?;
        let stage_seed = derive_seed(plan.seed, si as u64);
        let (rows, models) = match stage {
            Stage::SimExact => fit_views(plan, stage_seed, &registry, &sets, &dir)?,
            Stage::RealNoisy => {
                let noisy = relabel(&records, plan.noise, plan.seed);
                write_manifest(&dir.join(MANIFEST_NAME), &noisy)?;
                let map: HashMap<&str, f64> = noisy.iter().map(|r| (r.case_id.as_str(), r.label_liters)).collect();
                let noisy_sets = sets.clone().map(|d| with_labels(&d, |id| map[id]));
                fit_views(plan, stage_seed, &registry, &noisy_sets, &dir)?
            }
            Stage::FinetuneGold => {
                let pretrained = results
                    .iter()
                    .find(|r| r.stage == Stage::RealNoisy)
                    .expect("validated: real-noisy precedes finetune-gold");
                finetune_gold(plan, stage_seed, &registry, &sets, &truth, &pretrained.models, &dir)?
            }
        };
        evalstat::write_metrics_csv(&dir.join("metrics.csv"), &rows)?;
        results.push(StageResult { stage, rows, models });
    }
    Ok(results)
}

fn finetune_gold(
    plan: &ExperimentPlan,
    stage_seed: u64,
    registry: &ArchitectureRegistry,
    sets: &[Dataset; 3],
    truth: &HashMap<String, f64>,
    pretrained: &[(Variant, TrainOutcome)],
    out: &Path,
) -> Result<(Vec<MetricsRow>, Vec<(Variant, TrainOutcome)>), CliError> {
    let gold = |d: &Dataset| with_labels(d, |id| truth[id]);
    let val = gold(&sets[1]);
    if plan.gold_cases == 0 || plan.gold_cases >= val.len() {
        return Err(CliError::InvalidArgument(format!(
            "--gold-cases must be in 1..{} (validation split size)",
            val.len()
        )));
    }
    let ft_train = val.subset(0..plan.gold_cases);
    let ft_val = val.subset(plan.gold_cases..val.len());
    let test = gold(&sets[2]);
    check_disjoint(&[("fine-tune", &ft_train), ("fine-tune validation", &ft_val), ("test", &test)])?;
    let mut rows = Vec::new();
    let mut models = Vec::new();
    for (k, (variant, pre)) in pretrained.iter().enumerate() {
        let cfg = TrainConfig {
            seed: derive_seed(stage_seed, k as u64),
            ..plan.config_for(*variant)?
        };
        let mut cb = progress(format!("finetune {variant}"));
        let tuned = finetune(&pre.checkpoint, &cfg, registry, &ft_train, &ft_val, Some(&mut cb))?;
        write_run_dir(&out.join(variant.to_string()), &cfg, &tuned)?;
        for (name, ck) in [
            (format!("pretrained-{variant}"), &pre.checkpoint),
            (format!("finetuned-{variant}"), &tuned.checkpoint),
        ] {
            let mut model = ck.to_model(registry).map_err(TrainError::from)?;
            let report = EvalReport::new(test.case_ids(), predict(&mut model, &test)?, test.labels())?;
            evalstat::write_report_files(&out.join(&name), &report, &name, "reference")?;
            print_row(&name, &report);
            rows.push(MetricsRow::from_report(&name, &ck.spec.architecture, &report));
        }
        models.push((*variant, tuned));
    }
    Ok((rows, models))
}

fn ladder_cmd(a: &LadderArgs) -> Result<(), CliError> {
    let base = build_config(&a.model, &a.optim, a.seed, None)?;
    let plan = ExperimentPlan {
        stages: parse_list(&a.stages, "stage")?,
        views: a
            .views
            .split(',')
            .map(|v| v.trim().parse::<Variant>().map_err(CliError::InvalidArgument))
            .collect::<Result<_, _>>()?,
        base,
        draws: a.draws,
        jobs: a.jobs,
        noise: a.noise.parse()?,
        gold_cases: a.gold_cases,
        seed: a.seed,
    };
    create_dir(&a.out)?;
    run_ladder(&plan, &a.manifest, &a.out)?;
    Ok(())
}
