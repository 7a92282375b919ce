//! Declarative experiment runner: config parsing, the training loop, run
//! artifacts and multi-seed comparison tables.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{self, augment_twice, AugmentSpec, Dataset, SyntheticSpec};
use crate::error::{ConrError, Result};
use crate::eval::{
    assign_shots, collapse_rate, metrics, penalty_curve, MetricsReport, PenaltyCurve, ShotFilter,
    ShotMetrics,
};
use crate::label::{
    bin_index, inverse_frequency_weights, lds_weights, DensityTable, Label, SmoothingKernel,
};
use crate::loss::{
    objective, weighted_regression_loss, ConrConfig, LossBreakdown, ObjectiveInputs, Variant,
};
use crate::mlp::{Architecture, Mlp};
use crate::optim::{Adam, AdamConfig};
use crate::pairing::AugmentedBatch;
use crate::tensor::Matrix;

pub const METRICS_FORMAT: &str = "conr-metrics";
pub const METRICS_VERSION: u32 = 1;

// Independent generator streams derived from the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_SPLIT: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvData {
    pub train: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    Synthetic(SyntheticSpec),
    Csv(CsvData),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SyntheticSpec::default())
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            DataConfig::Synthetic(spec) => spec.validate(),
            DataConfig::Csv(_) => Ok(()),
        }
    }

    /// `(train, test)`.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataConfig::Synthetic(spec) => datagen::generate(spec),
            DataConfig::Csv(paths) => {
                let train = datagen::load_csv(&paths.train)?;
                let test = datagen::load_csv(&paths.test)?;
                if train.input_dim() != test.input_dim() {
                    return Err(ConrError::DimensionMismatch {
                        context: "train/test input width",
                        expected: train.input_dim().to_string(),
                        actual: test.input_dim().to_string(),
                    });
                }
                Ok((train, test))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Unweighted regression loss.
    Vanilla,
    /// Regression loss reweighted by inverse label frequency.
    InvFreqWeighted,
    /// Regression loss reweighted by inverse smoothed label density.
    LdsWeighted,
    /// Regression loss plus the contrastive regularizer (`conr.variant`).
    #[default]
    Conr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Multiplier applied to the learning rate at each decay epoch.
    pub decay_factor: f64,
    /// 0-based epochs from which the next decay applies. Defaults to
    /// `round(2E/3)` and `round(8E/9)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay_epochs: Option<Vec<usize>>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            epochs: 30,
            batch_size: 32,
            decay_factor: 0.1,
            decay_epochs: None,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn decay_milestones(&self) -> Vec<usize> {
        self.decay_epochs.clone().unwrap_or_else(|| {
            let e = self.epochs as f64;
            vec![
                (2.0 * e / 3.0).round() as usize,
                (8.0 * e / 9.0).round() as usize,
            ]
        })
    }

    /// Learning rate used during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self
            .decay_milestones()
            .iter()
            .filter(|&&m| epoch >= m)
            .count();
        self.lr * self.decay_factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    /// Label histogram bin width for density weights; defaults to `1/ω`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bin_width: Option<f64>,
    /// Smoothing kernel of the `lds_weighted` baseline.
    pub kernel: SmoothingKernel,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            bin_width: None,
            kernel: SmoothingKernel::Gaussian {
                size: 5,
                sigma: 2.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Bin width for shot counting; defaults to `1/ω`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shot_bin_width: Option<f64>,
    pub collapse_shot: ShotFilter,
    /// Share of each training label bin held out for validation.
    pub val_fraction: f64,
    /// Write the pair sets of the first training batch to `pairs_debug.json`.
    pub pairs_debug: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            shot_bin_width: None,
            collapse_shot: ShotFilter::Few,
            val_fraction: 0.1,
            pairs_debug: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Row name in comparison tables; derived from the method if absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub method: Method,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub augment: AugmentSpec,
    pub model: Architecture,
    pub conr: ConrConfig,
    pub optimizer: OptimizerConfig,
    pub density: DensityConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: None,
            method: Method::Conr,
            seed: 1,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            augment: AugmentSpec {
                gaussian_sigma: 0.15,
                scale_jitter: 0.1,
            },
            model: Architecture::default(),
            conr: ConrConfig::default(),
            optimizer: OptimizerConfig::default(),
            density: DensityConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConrError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ConrError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            ConrError::Config(m) => ConrError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| ConrError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(ConrError::Config(m));
        self.conr.validate()?;
        self.data.validate()?;
        self.augment.validate()?;
        let o = &self.optimizer;
        if o.epochs == 0 {
            return cfg_err("optimizer.epochs must be >= 1".into());
        }
        if o.batch_size == 0 || (self.method == Method::Conr && o.batch_size < 2) {
            return cfg_err("optimizer.batch_size must be >= 2 for conr and >= 1 otherwise".into());
        }
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            return cfg_err(format!("optimizer.lr must be >= 0, got {}", o.lr));
        }
        if !(o.beta1 >= 0.0 && o.beta1 < 1.0 && o.beta2 >= 0.0 && o.beta2 < 1.0) {
            return cfg_err("optimizer betas must be in [0, 1)".into());
        }
        if !(o.eps > 0.0 && o.weight_decay >= 0.0 && o.decay_factor > 0.0) {
            return cfg_err("optimizer eps and decay_factor must be > 0, weight_decay >= 0".into());
        }
        if !(self.eval.val_fraction >= 0.0 && self.eval.val_fraction < 1.0) {
            return cfg_err("eval.val_fraction must be in [0, 1)".into());
        }
        for (name, w) in [
            ("density.bin_width", self.density.bin_width),
            ("eval.shot_bin_width", self.eval.shot_bin_width),
        ] {
            if let Some(w) = w {
                if !(w > 0.0 && w.is_finite()) {
                    return cfg_err(format!("{name} must be > 0, got {w}"));
                }
            }
        }
        if self.method == Method::LdsWeighted {
            self.density.kernel.window()?;
        }
        if self.model.feature_dim == 0 || self.model.hidden.contains(&0) {
            return cfg_err("model widths must be positive".into());
        }
        Ok(())
    }

    pub fn display_name(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        match self.method {
            Method::Vanilla => "Vanilla".into(),
            Method::InvFreqWeighted => "InvFreq".into(),
            Method::LdsWeighted => "LDS".into(),
            Method::Conr => self.conr.variant.table_name().into(),
        }
    }

    pub fn density_bin_width(&self) -> f64 {
        self.density.bin_width.unwrap_or(1.0 / self.conr.omega)
    }

    pub fn shot_bin_width(&self) -> f64 {
        self.eval.shot_bin_width.unwrap_or(1.0 / self.conr.omega)
    }
}

/// Training split with the per-sample weights the objective needs.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub train: Dataset,
    /// Density weight `w` of each training sample, for pushing powers.
    pub density_weights: Vec<f64>,
    /// Per-sample regression weights of the reweighted baselines.
    pub regression_weights: Option<Vec<f64>>,
}

impl TrainingData {
    pub fn new(train: Dataset, cfg: &ExperimentConfig) -> Result<Self> {
        let labels: Vec<Label> = train.labels.iter().map(|&y| Label::Scalar(y)).collect();
        let width = cfg.density_bin_width();
        let inv = inverse_frequency_weights(&labels, width)?;
        let per_sample = |t: &DensityTable| train.labels.iter().map(|&y| t.weight_for(y)).collect();
        let density_weights = per_sample(&inv);
        let regression_weights = match cfg.method {
            Method::InvFreqWeighted => Some(per_sample(&inv)),
            Method::LdsWeighted => Some(per_sample(&lds_weights(
                &labels,
                width,
                &cfg.density.kernel,
            )?)),
            Method::Vanilla | Method::Conr => None,
        };
        Ok(Self {
            train,
            density_weights,
            regression_weights,
        })
    }
}

/// Model, optimizer and the generator streams that advance across epochs.
#[derive(Debug, Clone)]
pub struct TrainingState {
    pub model: Mlp,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    shuffle_rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
}

impl TrainingState {
    pub fn new(input_dim: usize, cfg: &ExperimentConfig) -> Result<Self> {
        let model = Mlp::new(input_dim, &cfg.model, 1, &mut stream(cfg.seed, STREAM_INIT))?;
        let optimizer = Adam::for_parameters(cfg.optimizer.adam(), &model.parameters());
        Ok(Self::from_parts(model, optimizer, cfg.seed))
    }

    pub fn from_parts(model: Mlp, optimizer: Adam, seed: u64) -> Self {
        Self {
            model,
            optimizer,
            epoch: 0,
            shuffle_rng: stream(seed, STREAM_SHUFFLE),
            augment_rng: stream(seed, STREAM_AUGMENT),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub lr: f64,
    pub batches: usize,
    /// Mean over batches of the combined objective.
    pub train_loss: f64,
    pub regression_loss: f64,
    pub conr_loss: f64,
    pub anchors_per_batch: f64,
    pub skipped_empty_positive: usize,
    /// Pair sets of the first batch, when requested.
    #[serde(skip)]
    pub first_batch_pairs: Option<serde_json::Value>,
}

fn scalar_labels(values: &[f64]) -> Vec<Label> {
    values.iter().map(|&v| Label::Scalar(v)).collect()
}

/// Two augmented views of `idx`, stacked as `[view 1 rows; view 2 rows]`.
fn build_views(
    data: &Dataset,
    idx: &[usize],
    spec: &AugmentSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Matrix> {
    let b = idx.len();
    let d = data.input_dim();
    let mut out = Matrix::zeros(2 * b, d);
    for (k, &i) in idx.iter().enumerate() {
        let (v1, v2) = augment_twice(data.inputs.row(i), spec, rng);
        out.row_mut(k).copy_from_slice(&v1);
        out.row_mut(b + k).copy_from_slice(&v2);
    }
    Ok(out)
}

/// One pass over the shuffled training set; every batch is augmented twice,
/// scored by the method's objective and followed by one optimizer step.
pub fn train_epoch(
    state: &mut TrainingState,
    data: &TrainingData,
    cfg: &ExperimentConfig,
) -> Result<TrainStats> {
    let train = &data.train;
    if train.is_empty() {
        return Err(ConrError::invalid("empty training set"));
    }
    if train.input_dim() != state.model.input_dim() {
        return Err(ConrError::DimensionMismatch {
            context: "train_epoch input width",
            expected: state.model.input_dim().to_string(),
            actual: train.input_dim().to_string(),
        });
    }
    let epoch = state.epoch;
    let lr = cfg.optimizer.lr_at(epoch);
    state.optimizer.set_lr(lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut state.shuffle_rng);

    let conr_active = cfg.method == Method::Conr;
    let mut loss_cfg = cfg.conr;
    if !conr_active {
        loss_cfg.beta = 0.0;
    }
    let mut stats = TrainStats {
        lr,
        batches: 0,
        train_loss: 0.0,
        regression_loss: 0.0,
        conr_loss: 0.0,
        anchors_per_batch: 0.0,
        skipped_empty_positive: 0,
        first_batch_pairs: None,
    };

    for (b, idx) in order.chunks(cfg.optimizer.batch_size).enumerate() {
        let x = build_views(train, idx, &cfg.augment, &mut state.augment_rng)?;
        let y: Vec<f64> = idx.iter().chain(idx).map(|&i| train.labels[i]).collect();
        let targets = Matrix::from_vec(y.len(), 1, y.clone())?;
        let view_weights: Vec<f64> = idx
            .iter()
            .chain(idx)
            .map(|&i| data.density_weights[i])
            .collect();
        let reg_weights: Option<Vec<f64>> = data
            .regression_weights
            .as_ref()
            .map(|w| idx.iter().chain(idx).map(|&i| w[i]).collect());

        let out = state.model.forward(&x)?;
        let inputs = ObjectiveInputs {
            predictions: &out.predictions,
            targets: &targets,
            view_weights: &view_weights,
            regression_weights: reg_weights.as_deref(),
        };
        let breakdown = if conr_active {
            let origin: Vec<usize> = (0..idx.len()).chain(0..idx.len()).collect();
            let batch = AugmentedBatch::new(
                out.features.clone(),
                scalar_labels(&y),
                scalar_labels(out.predictions.data()),
                origin,
            )?;
            let (breakdown, pairs) = objective(&batch, &inputs, &loss_cfg)?;
            if b == 0 && epoch == 0 && cfg.eval.pairs_debug {
                stats.first_batch_pairs = Some(pairs.debug_json());
            }
            breakdown
        } else {
            regression_only(&inputs, &loss_cfg, out.features.cols())?
        };

        if !breakdown.total.is_finite() {
            return Err(ConrError::Diverged(format!(
                "non-finite loss at epoch {}, batch {b}",
                epoch + 1
            )));
        }
        let grads =
            state
                .model
                .backward(&out.cache, &breakdown.d_features, &breakdown.d_predictions)?;
        state
            .optimizer
            .step(&mut state.model.parameters_mut(), &grads.as_slices())
            .map_err(|e| match e {
                ConrError::Diverged(m) => {
                    ConrError::Diverged(format!("epoch {}, batch {b}: {m}", epoch + 1))
                }
                other => other,
            })?;

        stats.batches += 1;
        stats.train_loss += breakdown.total;
        stats.regression_loss += breakdown.regression_loss;
        stats.conr_loss += breakdown.conr_loss;
        stats.anchors_per_batch += breakdown.anchors_used as f64;
        stats.skipped_empty_positive += breakdown.skipped_empty_positive;
    }
    let n = stats.batches as f64;
    stats.train_loss /= n;
    stats.regression_loss /= n;
    stats.conr_loss /= n;
    stats.anchors_per_batch /= n;
    state.epoch += 1;
    Ok(stats)
}

/// The objective with the regularizer switched off; the feature gradient is
/// an explicit zero so the update matches a `β = 0` regularized step.
fn regression_only(
    inputs: &ObjectiveInputs<'_>,
    cfg: &ConrConfig,
    feature_dim: usize,
) -> Result<LossBreakdown> {
    let (reg, mut d_pred) = weighted_regression_loss(
        inputs.predictions,
        inputs.targets,
        inputs.regression_weights,
        cfg.regression_kind,
    )?;
    d_pred.scale(cfg.alpha);
    Ok(LossBreakdown {
        regression_loss: reg,
        conr_loss: 0.0,
        total: cfg.alpha * reg,
        per_anchor: Vec::new(),
        anchors_used: 0,
        skipped_empty_positive: 0,
        d_features: Matrix::zeros(inputs.predictions.rows(), feature_dim),
        d_predictions: d_pred,
    })
}

/// Splits off `fraction` of every label bin (rounded) as a validation set.
/// Both index lists are returned in ascending order.
pub fn stratified_split(
    labels: &[f64],
    bin_width: f64,
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = stream(seed, STREAM_SPLIT);
    let mut bins: std::collections::BTreeMap<i64, Vec<usize>> = Default::default();
    for (i, &y) in labels.iter().enumerate() {
        bins.entry(bin_index(y, bin_width)).or_default().push(i);
    }
    let mut train = Vec::with_capacity(labels.len());
    let mut val = Vec::new();
    for (_, mut members) in bins {
        members.shuffle(&mut rng);
        let take = (fraction * members.len() as f64).round() as usize;
        val.extend_from_slice(&members[..take]);
        train.extend_from_slice(&members[take..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub regression_loss: f64,
    pub conr_loss: f64,
    pub anchors_per_batch: f64,
    pub val_loss: Option<f64>,
    pub expected_penalty: Option<f64>,
    pub penalty_support: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub name: String,
    pub method: Method,
    pub variant: Variant,
    pub seed: u64,
    pub epochs: Vec<EpochStats>,
    pub test: MetricsReport,
    pub collapse_rate_initial: f64,
    pub collapse_rate_final: f64,
    /// Validation penalty curve after the last epoch.
    pub penalty_curve: Option<PenaltyCurve>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
    #[serde(skip)]
    pub config_echo: String,
    #[serde(skip)]
    pub model: Option<Mlp>,
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    format: &'static str,
    version: u32,
    #[serde(flatten)]
    run: &'a RunResult,
}

impl RunResult {
    /// Contents of `metrics.json`. Contains no timing, so identical configs
    /// give identical bytes.
    pub fn metrics_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&MetricsFile {
            format: METRICS_FORMAT,
            version: METRICS_VERSION,
            run: self,
        })?)
    }

    pub fn expected_penalty_first(&self) -> Option<f64> {
        self.epochs.first().and_then(|e| e.expected_penalty)
    }

    pub fn expected_penalty_final(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.expected_penalty)
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| ConrError::io(path, e))
}

fn csv_file(path: &Path) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(path).map_err(|e| ConrError::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_epochs_csv(path: &Path, epochs: &[EpochStats]) -> Result<()> {
    let mut w = csv_file(path)?;
    w.write_record([
        "epoch",
        "train_loss",
        "val_loss",
        "expected_penalty",
        "lr",
        "regression_loss",
        "conr_loss",
        "anchors_per_batch",
        "penalty_support",
    ])?;
    for e in epochs {
        w.write_record([
            e.epoch.to_string(),
            e.train_loss.to_string(),
            opt(e.val_loss),
            opt(e.expected_penalty),
            e.lr.to_string(),
            e.regression_loss.to_string(),
            e.conr_loss.to_string(),
            e.anchors_per_batch.to_string(),
            e.penalty_support.to_string(),
        ])?;
    }
    w.flush().map_err(|e| ConrError::io(path, e))
}

fn write_predictions_csv(path: &Path, labels: &[f64], preds: &[f64]) -> Result<()> {
    let mut w = csv_file(path)?;
    w.write_record(["y", "prediction"])?;
    for (y, p) in labels.iter().zip(preds) {
        w.write_record([y.to_string(), p.to_string()])?;
    }
    w.flush().map_err(|e| ConrError::io(path, e))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    run_experiment_with_echo(cfg, None)
}

/// Like [`run_experiment`], with `echo` (the original config text) written as
/// `config.toml` instead of the re-serialized config.
pub fn run_experiment_with_echo(cfg: &ExperimentConfig, echo: Option<&str>) -> Result<RunResult> {
    cfg.validate()?;
    let started = Instant::now();
    let (full_train, test) = cfg.data.load()?;
    if full_train.input_dim() != test.input_dim() {
        return Err(ConrError::DimensionMismatch {
            context: "train/test input width",
            expected: full_train.input_dim().to_string(),
            actual: test.input_dim().to_string(),
        });
    }
    let (train_idx, val_idx) = stratified_split(
        &full_train.labels,
        cfg.shot_bin_width(),
        cfg.eval.val_fraction,
        cfg.seed,
    );
    let train = full_train.subset(&train_idx);
    let val = full_train.subset(&val_idx);
    let partition = assign_shots(&train.labels, cfg.shot_bin_width())?;
    let rule = cfg.conr.rule();
    let data = TrainingData::new(train, cfg)?;
    let mut state = TrainingState::new(data.train.input_dim(), cfg)?;

    let collapse_of = |model: &Mlp| -> Result<f64> {
        let z = model.encode(&test.inputs)?;
        collapse_rate(&z, &test.labels, &rule, &partition, cfg.eval.collapse_shot)
    };
    let collapse_rate_initial = collapse_of(&state.model)?;

    fs::create_dir_all(&cfg.output_dir).map_err(|e| ConrError::io(&cfg.output_dir, e))?;
    let mut epochs = Vec::with_capacity(cfg.optimizer.epochs);
    let mut curve = None;
    for _ in 0..cfg.optimizer.epochs {
        let stats = train_epoch(&mut state, &data, cfg)?;
        if let Some(pairs) = &stats.first_batch_pairs {
            write_file(
                &cfg.output_dir.join("pairs_debug.json"),
                serde_json::to_string_pretty(pairs)?.as_bytes(),
            )?;
        }
        let (val_loss, penalty) = if val.is_empty() {
            (None, None)
        } else {
            let pred = state.model.forward(&val.inputs)?.predictions;
            let (loss, _) = weighted_regression_loss(
                &pred,
                &val.label_matrix(),
                None,
                cfg.conr.regression_kind,
            )?;
            let c = penalty_curve(
                &scalar_labels(pred.data()),
                &scalar_labels(&val.labels),
                &rule,
                cfg.conr.regression_kind,
            )?;
            (Some(loss), Some(c))
        };
        epochs.push(EpochStats {
            epoch: state.epoch,
            lr: stats.lr,
            train_loss: stats.train_loss,
            regression_loss: stats.regression_loss,
            conr_loss: stats.conr_loss,
            anchors_per_batch: stats.anchors_per_batch,
            val_loss,
            expected_penalty: penalty.as_ref().map(|c| c.expected_penalty),
            penalty_support: penalty.as_ref().map_or(0, |c| c.total_support),
        });
        curve = penalty;
    }

    let test_out = state.model.forward(&test.inputs)?;
    let report = metrics(test_out.predictions.data(), &test.labels, &partition)?;
    let collapse_rate_final = collapse_of(&state.model)?;
    let config_echo = match echo {
        Some(text) => text.to_string(),
        None => cfg.to_toml()?,
    };

    let dir = &cfg.output_dir;
    let result = RunResult {
        name: cfg.display_name(),
        method: cfg.method,
        variant: cfg.conr.variant,
        seed: cfg.seed,
        epochs,
        test: report,
        collapse_rate_initial,
        collapse_rate_final,
        penalty_curve: curve,
        wall_clock_secs: 0.0,
        config_echo,
        model: Some(state.model),
    };
    write_file(&dir.join("metrics.json"), result.metrics_json()?.as_bytes())?;
    write_file(&dir.join("config.toml"), result.config_echo.as_bytes())?;
    write_epochs_csv(&dir.join("epochs.csv"), &result.epochs)?;
    write_predictions_csv(
        &dir.join("predictions.csv"),
        &test.labels,
        test_out.predictions.data(),
    )?;
    if let Some(c) = &result.penalty_curve {
        let path = dir.join("penalty.csv");
        let f = fs::File::create(&path).map_err(|e| ConrError::io(&path, e))?;
        c.write_csv(f)?;
    }
    if let Some(m) = &result.model {
        m.save(&dir.join("model.json"))?;
    }
    Ok(RunResult {
        wall_clock_secs: started.elapsed().as_secs_f64(),
        ..result
    })
}

/// Metric columns of comparison tables, in output order.
pub const COMPARISON_COLUMNS: [&str; 11] = [
    "all_mae",
    "many_mae",
    "median_mae",
    "few_mae",
    "all_gm",
    "many_gm",
    "median_gm",
    "few_gm",
    "collapse_rate",
    "penalty_first",
    "penalty_final",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub seed: u64,
    /// Aligned with [`COMPARISON_COLUMNS`].
    pub values: Vec<Option<f64>>,
}

impl ComparisonRow {
    pub fn from_run(run: &RunResult) -> Self {
        let shots = [
            &run.test.all,
            &run.test.many,
            &run.test.median,
            &run.test.few,
        ];
        let field = |f: fn(&ShotMetrics) -> f64| shots.map(|s| s.as_ref().map(f));
        let mut values: Vec<Option<f64>> = Vec::with_capacity(COMPARISON_COLUMNS.len());
        values.extend(field(|m| m.mae));
        values.extend(field(|m| m.gm));
        values.push(Some(run.collapse_rate_final));
        values.push(run.expected_penalty_first());
        values.push(run.expected_penalty_final());
        Self {
            method: run.name.clone(),
            seed: run.seed,
            values,
        }
    }

    pub fn value(&self, column: &str) -> Option<f64> {
        COMPARISON_COLUMNS
            .iter()
            .position(|&c| c == column)
            .and_then(|i| self.values[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    /// `mean`, `std`, or `<method> vs. <baseline>` relative improvement in %.
    pub statistic: String,
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<ComparisonRow>,
    pub summary: Vec<SummaryRow>,
    #[serde(skip)]
    pub runs: Vec<RunResult>,
}

fn mean_std(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let Some(v) = values.iter().copied().collect::<Option<Vec<f64>>>() else {
        return (None, None);
    };
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (Some(mean), Some(std))
}

/// Per-method mean and sample standard deviation over seeds, then one
/// relative-improvement row (`100·(base − m)/base`) per method against the
/// first method.
pub fn summarize(methods: &[String], rows: &[ComparisonRow]) -> Vec<SummaryRow> {
    let mut summary = Vec::new();
    let mut means = Vec::new();
    for m in methods {
        let mine: Vec<&ComparisonRow> = rows.iter().filter(|r| &r.method == m).collect();
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for c in 0..COMPARISON_COLUMNS.len() {
            let col: Vec<Option<f64>> = mine.iter().map(|r| r.values[c]).collect();
            let (a, s) = mean_std(&col);
            mean.push(a);
            std.push(s);
        }
        summary.push(SummaryRow {
            method: m.clone(),
            statistic: "mean".into(),
            values: mean.clone(),
        });
        summary.push(SummaryRow {
            method: m.clone(),
            statistic: "std".into(),
            values: std,
        });
        means.push(mean);
    }
    if let Some((base, base_name)) = means.first().zip(methods.first()) {
        for (m, mean) in methods.iter().zip(&means).skip(1) {
            let values = mean
                .iter()
                .zip(base)
                .map(|(v, b)| match (v, b) {
                    (Some(v), Some(b)) if *b != 0.0 => Some(100.0 * (b - v) / b),
                    (Some(v), Some(b)) if v == b => Some(0.0),
                    _ => None,
                })
                .collect();
            summary.push(SummaryRow {
                method: m.clone(),
                statistic: format!("{m} vs. {base_name}"),
                values,
            });
        }
    }
    summary
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect()
}

/// Unique row names: repeated names get a `#k` suffix.
fn unique_names(configs: &[ExperimentConfig]) -> Vec<String> {
    let mut names: Vec<String> = Vec::with_capacity(configs.len());
    for c in configs {
        let base = c.display_name();
        let mut name = base.clone();
        let mut k = 2;
        while names.contains(&name) {
            name = format!("{base}#{k}");
            k += 1;
        }
        names.push(name);
    }
    names
}

/// Runs every config under every seed (in parallel) and tabulates the test
/// metrics. Each run writes its artifacts under `out_dir/<method>/seed_<s>`.
/// Configs must share one data section.
pub fn compare_methods(
    configs: &[ExperimentConfig],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<Comparison> {
    if configs.is_empty() || seeds.is_empty() {
        return Err(ConrError::Config(
            "compare needs at least one config and one seed".into(),
        ));
    }
    if let Some(i) = configs.iter().position(|c| c.data != configs[0].data) {
        return Err(ConrError::Config(format!(
            "config {} uses a different data section than config 1",
            i + 1
        )));
    }
    let names = unique_names(configs);
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let runs: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let mut cfg = configs[c].clone();
            cfg.seed = seed;
            cfg.name = Some(names[c].clone());
            cfg.output_dir = out_dir.join(slug(&names[c])).join(format!("seed_{seed}"));
            run_experiment(&cfg)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<ComparisonRow> = runs.iter().map(ComparisonRow::from_run).collect();
    let summary = summarize(&names, &rows);
    let comparison = Comparison {
        methods: names,
        seeds: seeds.to_vec(),
        rows,
        summary,
        runs,
    };
    fs::create_dir_all(out_dir).map_err(|e| ConrError::io(out_dir, e))?;
    comparison.write_comparison_csv(&out_dir.join("comparison.csv"))?;
    comparison.write_summary_csv(&out_dir.join("summary.csv"))?;
    Ok(comparison)
}

/// One config per regularizer variant, in ablation-table order.
pub fn ablation_configs(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    Variant::ALL
        .iter()
        .map(|&variant| {
            let mut cfg = base.clone();
            cfg.method = Method::Conr;
            cfg.name = None;
            cfg.conr.variant = variant;
            cfg
        })
        .collect()
}

impl Comparison {
    pub fn write_comparison_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_file(path)?;
        let mut header = vec!["method", "seed"];
        header.extend(COMPARISON_COLUMNS);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.method.clone(), r.seed.to_string()];
            rec.extend(r.values.iter().map(|&v| opt(v)));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| ConrError::io(path, e))
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_file(path)?;
        let mut header = vec!["method", "statistic"];
        header.extend(COMPARISON_COLUMNS);
        w.write_record(&header)?;
        for r in &self.summary {
            let mut rec = vec![r.method.clone(), r.statistic.clone()];
            rec.extend(r.values.iter().map(|&v| opt(v)));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| ConrError::io(path, e))
    }

    /// Ablation layout: one row per method, mean MAE and GM per shot.
    pub fn write_ablation_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_file(path)?;
        let cols = &COMPARISON_COLUMNS[..8];
        let mut header = vec!["method"];
        header.extend(cols);
        w.write_record(&header)?;
        for r in self.summary.iter().filter(|r| r.statistic == "mean") {
            let mut rec = vec![r.method.clone()];
            rec.extend(r.values[..cols.len()].iter().map(|&v| opt(v)));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| ConrError::io(path, e))
    }
}
