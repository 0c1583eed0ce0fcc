//! Training harness: epoch loop with patience-based early stopping, random
//! hyperparameter search, fine-tuning from a checkpoint, and train-time
//! augmentation / oversampling.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drr::{read_rimg_file, Image2D, View};
use crate::evalstat::{mape_pct, StatError};
use crate::io::FormatError;
use crate::nnreg::{
    mse_loss, ArchitectureRegistry, Checkpoint, Model, ModelInput, ModelSpec, NnError, Optimizer, OptimizerKind,
    Tensor4, Variant,
};
use crate::phantom::{read_manifest, CaseRecord, PhantomError, Split};
use crate::seed::{derive_seed, stream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("case `{case_id}` appears in both the {a} and {b} splits")]
    SplitOverlap {
        case_id: String,
        a: &'static str,
        b: &'static str,
    },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("non-finite validation MSE at epoch {0}")]
    NonFiniteValidation(usize),
    #[error("checkpoint architecture {checkpoint} does not match config architecture {config}")]
    ArchitectureMismatch { checkpoint: String, config: String },
    #[error("image {path}: {source}")]
    Image { path: PathBuf, source: FormatError },
    #[error("image {path} is {got}x{got2}, expected {side}x{side}")]
    ImageSize {
        path: PathBuf,
        got: usize,
        got2: usize,
        side: usize,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Stat(#[from] StatError),
    #[error(transparent)]
    Manifest(#[from] PhantomError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Geometric and intensity perturbations; each draws a value uniformly
/// in `±max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Augmentation {
    Shift { max_px: f64 },
    Scale { max_frac: f64 },
    Rotation { max_deg: f64 },
    IntensityScale { max_frac: f64 },
}

impl Augmentation {
    /// The four default augmentations: ±8 px, ±5 %, ±5°, ±10 %.
    pub fn defaults() -> Vec<Augmentation> {
        vec![
            Augmentation::Shift { max_px: 8.0 },
            Augmentation::Scale { max_frac: 0.05 },
            Augmentation::Rotation { max_deg: 5.0 },
            Augmentation::IntensityScale { max_frac: 0.1 },
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Oversampling {
    None,
    /// Equal-width label bins; every bin is topped up with repeats to the
    /// size of the largest bin.
    VolumeBins { bins: usize },
}

/// Concrete perturbation applied to one image.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Transform {
    /// Shift in pixels (columns, rows).
    pub shift: [f64; 2],
    /// Relative scale change; 0.05 enlarges by 5 %.
    pub scale: f64,
    pub rotation_deg: f64,
    /// Relative intensity change.
    pub intensity: f64,
}

impl Transform {
    pub fn sample(ops: &[Augmentation], rng: &mut impl Rng) -> Self {
        let mut t = Transform::default();
        let sym = |m: f64, rng: &mut dyn rand::RngCore| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        for op in ops {
            match *op {
                Augmentation::Shift { max_px } => t.shift = [sym(max_px, rng), sym(max_px, rng)],
                Augmentation::Scale { max_frac } => t.scale = sym(max_frac, rng),
                Augmentation::Rotation { max_deg } => t.rotation_deg = sym(max_deg, rng),
                Augmentation::IntensityScale { max_frac } => t.intensity = sym(max_frac, rng),
            }
        }
        t
    }

    fn is_geometric_identity(&self) -> bool {
        self.shift == [0.0, 0.0] && self.scale == 0.0 && self.rotation_deg == 0.0
    }
}

/// Applies `t` to a row-major `width x height` plane. Geometry is taken
/// about the image center; sources outside the image read 0, interior
/// bilinear taps clamp to the edge. Intensity scaling re-clamps to [-1, 1].
pub fn apply_transform(data: &[f32], width: usize, height: usize, t: &Transform) -> Vec<f32> {
    let mut out = if t.is_geometric_identity() {
        data.to_vec()
    } else {
        let (cx, cy) = (0.5 * (width as f64 - 1.0), 0.5 * (height as f64 - 1.0));
        let (sin, cos) = t.rotation_deg.to_radians().sin_cos();
        let inv_s = 1.0 / (1.0 + t.scale);
        let mut out = vec![0.0f32; width * height];
        for row in 0..height {
            for col in 0..width {
                // Inverse map: undo shift, then rotation, then scale.
                let u = col as f64 - cx - t.shift[0];
                let v = row as f64 - cy - t.shift[1];
                let sx = (cos * u + sin * v) * inv_s + cx;
                let sy = (-sin * u + cos * v) * inv_s + cy;
                if sx < -0.5 || sy < -0.5 || sx > width as f64 - 0.5 || sy > height as f64 - 0.5 {
                    continue;
                }
                out[row * width + col] = bilinear(data, width, height, sx, sy);
            }
        }
        out
    };
    if t.intensity != 0.0 {
        let k = (1.0 + t.intensity) as f32;
        out.iter_mut().for_each(|v| *v = (*v * k).clamp(-1.0, 1.0));
    }
    out
}

fn bilinear(data: &[f32], width: usize, height: usize, x: f64, y: f64) -> f32 {
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let clamp = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
    let (xa, xb) = (clamp(x0, width), clamp(x0 + 1.0, width));
    let (ya, yb) = (clamp(y0, height), clamp(y0 + 1.0, height));
    let at = |c: usize, r: usize| data[r * width + c] as f64;
    let top = at(xa, ya) * (1.0 - fx) + at(xb, ya) * fx;
    let bottom = at(xa, yb) * (1.0 - fx) + at(xb, yb) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

/// Samples a transform from `ops` and applies it to `img`.
pub fn augment(img: &Image2D, ops: &[Augmentation], rng: &mut impl Rng) -> Image2D {
    if ops.is_empty() {
        return img.clone();
    }
    let t = Transform::sample(ops, rng);
    let data = apply_transform(img.data(), img.width(), img.height(), &t);
    img.with_data(data).expect("transform preserves size and finiteness")
}

/// Everything that defines one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub oversampling: Oversampling,
    pub augmentations: Vec<Augmentation>,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Start the output unit's bias at the mean training label.
    pub init_output_bias: bool,
}

impl TrainConfig {
    /// Adam at 1e-3, batch 16, no oversampling or augmentation, 300 epochs
    /// with patience 50.
    pub fn new(model: ModelSpec, seed: u64) -> Self {
        Self {
            model,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::adam(),
            batch_size: 16,
            oversampling: Oversampling::None,
            augmentations: Vec::new(),
            max_epochs: 300,
            patience: 50,
            seed,
            init_output_bias: true,
        }
    }

    pub fn variant(&self) -> Variant {
        self.model.variant
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.learning_rate));
        }
        if self.patience >= self.max_epochs {
            return bad(format!(
                "patience ({}) must be < max_epochs ({})",
                self.patience, self.max_epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be > 0".into());
        }
        if let Oversampling::VolumeBins { bins: 0 } = self.oversampling {
            return bad("oversampling needs at least one bin".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        serde_json::from_str(text).map_err(|e| TrainError::InvalidConfig(e.to_string()))
    }
}

/// One case held in memory: both network-input views and the label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub case_id: String,
    pub frontal: Vec<f32>,
    pub lateral: Vec<f32>,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub side: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn case_ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.case_id.clone()).collect()
    }

    /// Loads the manifest rows in `records` (paths relative to `root`).
    pub fn load(root: &Path, records: &[CaseRecord], side: usize) -> Result<Self, TrainError> {
        let read = |rel: &str| -> Result<Vec<f32>, TrainError> {
            let path = root.join(rel);
            let img = read_rimg_file(&path).map_err(|source| TrainError::Image {
                path: path.clone(),
                source,
            })?;
            if img.width() != side || img.height() != side {
                return Err(TrainError::ImageSize {
                    path,
                    got: img.width(),
                    got2: img.height(),
                    side,
                });
            }
            Ok(img.into_data())
        };
        let samples = records
            .iter()
            .map(|r| {
                Ok(Sample {
                    case_id: r.case_id.clone(),
                    frontal: read(&r.frontal_path)?,
                    lateral: read(&r.lateral_path)?,
                    label: r.label_liters,
                })
            })
            .collect::<Result<_, TrainError>>()?;
        Ok(Self { side, samples })
    }

    /// Subset by positions.
    pub fn subset(&self, idx: impl IntoIterator<Item = usize>) -> Self {
        Self {
            side: self.side,
            samples: idx.into_iter().map(|i| self.samples[i].clone()).collect(),
        }
    }

    /// Builds the `(B, 1, S, S)` inputs for `variant` from `indices`,
    /// applying per-image transforms when `aug` is given.
    pub fn batch(
        &self,
        indices: &[usize],
        variant: Variant,
        mut aug: Option<(&[Augmentation], &mut ChaCha8Rng)>,
    ) -> ModelInput<f32> {
        let s = self.side;
        let stack = |view: View, aug: &mut Option<(&[Augmentation], &mut ChaCha8Rng)>| {
            let mut data = Vec::with_capacity(indices.len() * s * s);
            for &i in indices {
                let sample = &self.samples[i];
                let plane = match view {
                    View::Frontal => &sample.frontal,
                    View::Lateral => &sample.lateral,
                };
                match aug {
                    Some((ops, rng)) if !ops.is_empty() => {
                        let t = Transform::sample(ops, &mut **rng);
                        data.extend(apply_transform(plane, s, s, &t));
                    }
                    _ => data.extend_from_slice(plane),
                }
            }
            Tensor4::new([indices.len(), 1, s, s], data).expect("batch shape")
        };
        match variant {
            Variant::Single(v) => ModelInput::Single(stack(v, &mut aug)),
            Variant::Dual => {
                let frontal = stack(View::Frontal, &mut aug);
                let lateral = stack(View::Lateral, &mut aug);
                ModelInput::Dual { frontal, lateral }
            }
        }
    }
}

/// Loads the three splits of a manifest.
pub fn load_splits(manifest: &Path, side: usize) -> Result<[Dataset; 3], TrainError> {
    let records = read_manifest(manifest)?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let pick = |split: Split| -> Vec<CaseRecord> { records.iter().filter(|r| r.split == split).cloned().collect() };
    Ok([
        Dataset::load(root, &pick(Split::Train), side)?,
        Dataset::load(root, &pick(Split::Val), side)?,
        Dataset::load(root, &pick(Split::Test), side)?,
    ])
}

/// Rejects any case id shared between two of the named splits.
pub fn check_disjoint(splits: &[(&'static str, &Dataset)]) -> Result<(), TrainError> {
    for (i, (a_name, a)) in splits.iter().enumerate() {
        let ids: HashSet<&str> = a.samples.iter().map(|s| s.case_id.as_str()).collect();
        for (b_name, b) in &splits[i + 1..] {
            if let Some(s) = b.samples.iter().find(|s| ids.contains(s.case_id.as_str())) {
                return Err(TrainError::SplitOverlap {
                    case_id: s.case_id.clone(),
                    a: a_name,
                    b: b_name,
                });
            }
        }
    }
    Ok(())
}

/// Case order for one epoch. Under volume-bin balancing every case appears
/// once and each non-empty bin is topped up with random repeats to the
/// largest bin's count.
pub fn epoch_order(labels: &[f64], oversampling: Oversampling, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    if let Oversampling::VolumeBins { bins } = oversampling {
        let lo = labels.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / bins as f64;
        let mut members = vec![Vec::new(); bins];
        for (i, &l) in labels.iter().enumerate() {
            let b = if width > 0.0 {
                (((l - lo) / width) as usize).min(bins - 1)
            } else {
                0
            };
            members[b].push(i);
        }
        let target = members.iter().map(Vec::len).max().unwrap_or(0);
        for m in members.iter().filter(|m| !m.is_empty()) {
            for _ in m.len()..target {
                order.push(m[rng.gen_range(0..m.len())]);
            }
        }
    }
    order.shuffle(rng);
    order
}

/// Patience-based stopping rule: stop once `patience` consecutive epochs
/// bring no strictly lower validation MSE than the running minimum, or
/// after `max_epochs`. Epochs are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    max_epochs: usize,
    patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(max_epochs: usize, patience: usize) -> Self {
        Self {
            max_epochs,
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
        }
    }

    /// Records the next epoch's validation MSE; returns whether it is a new
    /// minimum.
    pub fn observe(&mut self, val_mse: f64) -> bool {
        self.epoch += 1;
        if val_mse < self.best {
            self.best = val_mse;
            self.best_epoch = self.epoch;
            true
        } else {
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.epoch >= self.max_epochs || self.epoch - self.best_epoch >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }
}

/// `(stop_epoch, best_epoch)` the rule yields on a validation sequence.
/// The sequence must be long enough to reach the stop.
pub fn simulate_stopping(val_mse: &[f64], max_epochs: usize, patience: usize) -> (usize, usize) {
    let mut es = EarlyStopping::new(max_epochs, patience);
    for &v in val_mse {
        es.observe(v);
        if es.should_stop() {
            break;
        }
    }
    (es.epoch(), es.best_epoch())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with minimal validation MSE.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    /// Validation MAPE of the returned checkpoint.
    pub best_val_mape: f64,
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<(), TrainError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["epoch", "train_mse", "val_mse"])?;
    for r in history {
        w.write_record([r.epoch.to_string(), format!("{:.9}", r.train_mse), format!("{:.9}", r.val_mse)])?;
    }
    w.flush().map_err(io_err(path))
}

const EVAL_BATCH: usize = 32;

/// Eval-mode predictions in liters, never augmented.
pub fn predict(model: &mut Model<f32>, data: &Dataset) -> Result<Vec<f64>, TrainError> {
    let variant = model.spec().variant;
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let y = model.forward(&data.batch(chunk, variant, None), false)?;
        out.extend(y.data().iter().map(|&v| v as f64));
    }
    Ok(out)
}

fn mse(pred: &[f64], labels: &[f64]) -> f64 {
    pred.iter().zip(labels).map(|(p, l)| (p - l) * (p - l)).sum::<f64>() / pred.len() as f64
}

/// Groups an epoch order into batches; a trailing single case joins the
/// previous batch so batch statistics never see one sample alone.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().map_or(false, |b| b.len() == 1) {
        out.pop();
        let start = order.len() - size - 1;
        *out.last_mut().expect("non-empty") = &order[start..];
    }
    out
}

/// Progress hook invoked after each epoch.
pub type EpochCallback<'a> = &'a mut dyn FnMut(&EpochRecord);

/// Trains a freshly initialized model.
pub fn train(
    config: &TrainConfig,
    registry: &ArchitectureRegistry,
    train_set: &Dataset,
    val_set: &Dataset,
    on_epoch: Option<EpochCallback>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut model = Model::<f32>::new(&config.model, registry, config.seed)?;
    if config.init_output_bias && !train_set.is_empty() {
        let mean = train_set.labels().iter().sum::<f64>() / train_set.len() as f64;
        model.set_output_bias(mean as f32);
    }
    run(config, model, train_set, val_set, on_epoch)
}

/// Continues training all layers of a pretrained model under `config`.
/// With `max_epochs == 0` the input checkpoint is returned unchanged.
pub fn finetune(
    pretrained: &Checkpoint,
    config: &TrainConfig,
    registry: &ArchitectureRegistry,
    train_set: &Dataset,
    val_set: &Dataset,
    on_epoch: Option<EpochCallback>,
) -> Result<TrainOutcome, TrainError> {
    if pretrained.spec != config.model {
        return Err(TrainError::ArchitectureMismatch {
            checkpoint: pretrained.spec.to_json(),
            config: config.model.to_json(),
        });
    }
    let mut model = pretrained.to_model(registry)?;
    if config.max_epochs == 0 {
        check_inputs(train_set, val_set)?;
        let pred = predict(&mut model, val_set)?;
        let labels = val_set.labels();
        return Ok(TrainOutcome {
            checkpoint: pretrained.clone(),
            history: Vec::new(),
            best_epoch: 0,
            best_val_mse: mse(&pred, &labels),
            best_val_mape: mape_pct(&pred, &labels)?,
        });
    }
    config.validate()?;
    run(config, model, train_set, val_set, on_epoch)
}

fn check_inputs(train_set: &Dataset, val_set: &Dataset) -> Result<(), TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    check_disjoint(&[("train", train_set), ("validation", val_set)])
}

fn run(
    config: &TrainConfig,
    mut model: Model<f32>,
    train_set: &Dataset,
    val_set: &Dataset,
    mut on_epoch: Option<EpochCallback>,
) -> Result<TrainOutcome, TrainError> {
    check_inputs(train_set, val_set)?;
    let variant = config.variant();
    let mut rng = stream(config.seed, 0x7261_696e);
    let mut opt = Optimizer::<f32>::new(config.optimizer, config.learning_rate);
    let labels = train_set.labels();
    let val_labels = val_set.labels();
    let mut stopper = EarlyStopping::new(config.max_epochs, config.patience);
    let mut history = Vec::new();
    let mut best: Option<(Checkpoint, f64)> = None;

    while !stopper.should_stop() {
        let epoch = stopper.epoch() + 1;
        let order = epoch_order(&labels, config.oversampling, &mut rng);
        let (mut sum, mut count) = (0.0f64, 0usize);
        for (step, idx) in batches(&order, config.batch_size).into_iter().enumerate() {
            let input = train_set.batch(idx, variant, Some((&config.augmentations, &mut rng)));
            let target = Tensor4::new([idx.len(), 1, 1, 1], idx.iter().map(|&i| labels[i] as f32).collect())?;
            let pred = model.forward(&input, true)?;
            let (loss, grad) = mse_loss(&pred, &target)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step: step + 1 });
            }
            model.zero_grad();
            model.backward(&grad);
            opt.step(model.params_mut().into_iter().map(|(_, p)| p));
            sum += loss as f64 * idx.len() as f64;
            count += idx.len();
        }
        let val_pred = predict(&mut model, val_set)?;
        let val_mse = mse(&val_pred, &val_labels);
        if !val_mse.is_finite() {
            return Err(TrainError::NonFiniteValidation(epoch));
        }
        let record = EpochRecord {
            epoch,
            train_mse: sum / count as f64,
            val_mse,
        };
        if stopper.observe(val_mse) {
            best = Some((Checkpoint::from_model(&model), mape_pct(&val_pred, &val_labels)?));
        }
        if let Some(cb) = on_epoch.as_mut() {
            cb(&record);
        }
        history.push(record);
    }
    let (checkpoint, best_val_mape) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        checkpoint,
        history,
        best_epoch: stopper.best_epoch(),
        best_val_mse: stopper.best(),
        best_val_mape,
    })
}

/// Ranges for random hyperparameter search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperDraw {
    /// Fixed parts of every drawn config (model, epochs, patience).
    pub base: TrainConfig,
    /// Learning rate, sampled log-uniformly.
    pub lr_range: (f64, f64),
    pub optimizers: Vec<OptimizerKind>,
    pub batch_sizes: Vec<usize>,
    /// Each draw uses a uniformly random subset of these.
    pub augmentation_pool: Vec<Augmentation>,
    pub oversampling: Vec<Oversampling>,
    pub draws: usize,
    pub master_seed: u64,
}

impl HyperDraw {
    pub fn new(base: TrainConfig, draws: usize, master_seed: u64) -> Self {
        Self {
            base,
            lr_range: (1e-5, 1e-2),
            optimizers: vec![OptimizerKind::sgd(), OptimizerKind::adam()],
            batch_sizes: vec![8, 16, 32],
            augmentation_pool: Augmentation::defaults(),
            oversampling: vec![Oversampling::None, Oversampling::VolumeBins { bins: 5 }],
            draws,
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        let (lo, hi) = self.lr_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad("learning-rate range must satisfy 0 < lo <= hi");
        }
        if self.optimizers.is_empty() || self.batch_sizes.is_empty() || self.oversampling.is_empty() {
            return bad("search ranges must be non-empty");
        }
        if self.draws == 0 {
            return bad("need at least one draw");
        }
        Ok(())
    }

    /// Config of draw `index`, sampled from its own stream.
    pub fn sample(&self, index: usize) -> TrainConfig {
        let mut rng = stream(self.master_seed, index as u64);
        let (lo, hi) = self.lr_range;
        let lr = (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp();
        let optimizer = *self.optimizers.choose(&mut rng).expect("non-empty");
        let batch_size = *self.batch_sizes.choose(&mut rng).expect("non-empty");
        let augmentations = self
            .augmentation_pool
            .iter()
            .filter(|_| rng.gen_bool(0.5))
            .copied()
            .collect();
        let oversampling = *self.oversampling.choose(&mut rng).expect("non-empty");
        TrainConfig {
            learning_rate: lr,
            optimizer,
            batch_size,
            augmentations,
            oversampling,
            seed: derive_seed(self.master_seed, index as u64),
            ..self.base.clone()
        }
    }
}

#[derive(Debug)]
pub enum DrawStatus {
    Ok(TrainOutcome),
    Failed(String),
}

#[derive(Debug)]
pub struct SearchEntry {
    pub draw: usize,
    pub config: TrainConfig,
    pub status: DrawStatus,
}

impl SearchEntry {
    pub fn val_mape(&self) -> Option<f64> {
        match &self.status {
            DrawStatus::Ok(o) => Some(o.best_val_mape),
            DrawStatus::Failed(_) => None,
        }
    }

    pub fn val_mse(&self) -> Option<f64> {
        match &self.status {
            DrawStatus::Ok(o) => Some(o.best_val_mse),
            DrawStatus::Failed(_) => None,
        }
    }
}

/// Orders entries by validation MAPE, then validation MSE, then draw index;
/// failed draws go last in draw order.
pub fn rank_entries(entries: &mut [SearchEntry]) {
    entries.sort_by(|a, b| match (a.val_mape(), b.val_mape()) {
        (Some(ma), Some(mb)) => ma
            .total_cmp(&mb)
            .then(a.val_mse().unwrap().total_cmp(&b.val_mse().unwrap()))
            .then(a.draw.cmp(&b.draw)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.draw.cmp(&b.draw),
    });
}

/// Trains every draw (up to `jobs` at a time) and returns them ranked.
/// A failing draw is recorded, not propagated.
pub fn random_search(
    space: &HyperDraw,
    registry: &ArchitectureRegistry,
    train_set: &Dataset,
    val_set: &Dataset,
    jobs: usize,
) -> Result<Vec<SearchEntry>, TrainError> {
    space.validate()?;
    check_inputs(train_set, val_set)?;
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(space.draws));
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, space.draws) {
            scope.spawn(|| loop {
                let draw = next.fetch_add(1, Ordering::Relaxed);
                if draw >= space.draws {
                    break;
                }
                let config = space.sample(draw);
                let status = match train(&config, registry, train_set, val_set, None) {
                    Ok(o) => DrawStatus::Ok(o),
                    Err(e) => DrawStatus::Failed(e.to_string()),
                };
                results.lock().expect("no poisoned lock").push(SearchEntry { draw, config, status });
            });
        }
    });
    let mut entries = results.into_inner().expect("no poisoned lock");
    rank_entries(&mut entries);
    Ok(entries)
}

impl fmt::Display for DrawStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DrawStatus::Ok(_) => f.write_str("ok"),
            DrawStatus::Failed(reason) => write!(f, "failed: {reason}"),
        }
    }
}

/// `draw,val_mape,val_mse,status` in rank order.
pub fn write_ranking_csv(path: &Path, entries: &[SearchEntry]) -> Result<(), TrainError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["draw", "val_mape", "val_mse", "status"])?;
    let fmt_opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.9}"));
    for e in entries {
        w.write_record([
            e.draw.to_string(),
            fmt_opt(e.val_mape()),
            fmt_opt(e.val_mse()),
            e.status.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes `config.json`, `history.csv` and `best.ckpt` into `dir`.
pub fn write_run_dir(dir: &Path, config: &TrainConfig, outcome: &TrainOutcome) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let cfg = dir.join("config.json");
    fs::write(&cfg, config.to_json()).map_err(io_err(&cfg))?;
    write_history_csv(&dir.join("history.csv"), &outcome.history)?;
    let ck = dir.join("best.ckpt");
    outcome.checkpoint.save(&ck).map_err(io_err(&ck))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnreg::build_conv_block_cnn;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize) -> Vec<f32> {
        (0..w * h).map(|i| ((i % w) as f32 * 0.05 + (i / w) as f32 * 0.03) - 0.5).collect()
    }

    #[test]
    fn empty_op_set_is_identity() {
        let img = Image2D::new(8, 6, [1.0, 1.0], View::Frontal, ramp(8, 6)).unwrap();
        assert_eq!(augment(&img, &[], &mut stream(0, 0)), img);
    }

    #[test]
    fn shift_round_trip_away_from_border() {
        let (w, h) = (24, 20);
        let x = ramp(w, h);
        let fwd = Transform {
            shift: [5.0, 0.0],
            ..Default::default()
        };
        let back = Transform {
            shift: [-5.0, 0.0],
            ..Default::default()
        };
        let y = apply_transform(&apply_transform(&x, w, h, &fwd), w, h, &back);
        for r in 0..h {
            for c in 5..w - 5 {
                assert_eq!(y[r * w + c], x[r * w + c], "({c},{r})");
            }
        }
        // The vacated border reads the fill value.
        let shifted = apply_transform(&x, w, h, &fwd);
        assert!(shifted[..5].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn intensity_scale_clamps() {
        let x = vec![-0.9, 0.0, 0.5, 0.95];
        let t = Transform {
            intensity: 0.1,
            ..Default::default()
        };
        let y = apply_transform(&x, 4, 1, &t);
        assert_eq!(y, vec![-0.9f32 * 1.1, 0.0, 0.5 * 1.1, 1.0]);
    }

    #[test]
    fn small_rotation_keeps_center() {
        let (w, h) = (9, 9);
        let x = ramp(w, h);
        let t = Transform {
            rotation_deg: 90.0,
            ..Default::default()
        };
        let y = apply_transform(&x, w, h, &t);
        assert!((y[4 * w + 4] - x[4 * w + 4]).abs() < 1e-6);
    }

    #[test]
    fn config_invariants() {
        let spec = build_conv_block_cnn(View::Frontal, 8, 1, 2, vec![4]).unwrap();
        let mut c = TrainConfig::new(spec, 0);
        assert!(c.validate().is_ok());
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        c.learning_rate = 1e-3;
        c.patience = 300;
        assert!(c.validate().is_err());
        let back = TrainConfig::from_json(&TrainConfig::new(c.model.clone(), 3).to_json()).unwrap();
        assert_eq!(back.seed, 3);
    }

    #[test]
    fn stopping_examples() {
        let decreasing: Vec<f64> = (0..300).map(|i| 100.0 - i as f64).collect();
        assert_eq!(simulate_stopping(&decreasing, 300, 50), (300, 300));
        let mut seq: Vec<f64> = (0..10).map(|i| 10.0 - i as f64).collect();
        seq.extend(std::iter::repeat(5.0).take(290));
        assert_eq!(simulate_stopping(&seq, 300, 50), (60, 10));
    }

    #[test]
    fn trailing_single_case_is_merged() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(batches(&order[..1], 4).len(), 1);
    }

    proptest! {
        #[test]
        fn oversampling_covers_every_case(labels in prop::collection::vec(1.0f64..8.0, 1..80), bins in 1usize..8, seed: u64) {
            let order = epoch_order(&labels, Oversampling::VolumeBins { bins }, &mut stream(seed, 0));
            let mut seen = vec![0usize; labels.len()];
            for &i in &order {
                seen[i] += 1;
            }
            prop_assert!(seen.iter().all(|&c| c >= 1));
        }
    }

    #[test]
    fn ranking_tie_breaks() {
        let spec = build_conv_block_cnn(View::Frontal, 8, 1, 2, vec![4]).unwrap();
        let mut model = Model::<f32>::new(&spec, &ArchitectureRegistry::default(), 0).unwrap();
        let ck = Checkpoint::from_model(&mut model);
        let ok = |draw, mape, mse| SearchEntry {
            draw,
            config: TrainConfig::new(spec.clone(), draw as u64),
            status: DrawStatus::Ok(TrainOutcome {
                checkpoint: ck.clone(),
                history: vec![],
                best_epoch: 1,
                best_val_mse: mse,
                best_val_mape: mape,
            }),
        };
        let mut entries = vec![
            SearchEntry {
                draw: 0,
                config: TrainConfig::new(spec.clone(), 0),
                status: DrawStatus::Failed("boom".into()),
            },
            ok(1, 5.0, 0.2),
            ok(2, 5.0, 0.1),
            ok(3, 4.0, 0.9),
            ok(4, 5.0, 0.1),
        ];
        rank_entries(&mut entries);
        assert_eq!(entries.iter().map(|e| e.draw).collect::<Vec<_>>(), vec![3, 2, 4, 1, 0]);
    }

    #[test]
    fn lr_draws_are_log_uniform() {
        let spec = build_conv_block_cnn(View::Frontal, 8, 1, 2, vec![4]).unwrap();
        let space = HyperDraw::new(TrainConfig::new(spec, 0), 1000, 42);
        let mut u: Vec<f64> = (0..1000)
            .map(|i| (space.sample(i).learning_rate.log10() + 5.0) / 3.0)
            .collect();
        u.sort_by(f64::total_cmp);
        let n = u.len() as f64;
        let ks = u
            .iter()
            .enumerate()
            .map(|(i, &x)| ((i as f64 + 1.0) / n - x).abs().max((x - i as f64 / n).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 0.05, "KS statistic {ks}");
    }
}
