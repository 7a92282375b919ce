//! Seeded synthetic imbalanced regression data, two-view augmentation and
//! CSV ingestion.
//!
//! Training labels follow a skewed density profile; test labels are spread
//! uniformly with an identical count in every label bin. Inputs are a fixed
//! function of the label plus Gaussian noise.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ConrError, Result};
use crate::label::bin_index;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<f64>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(ConrError::DimensionMismatch {
                context: "Dataset",
                expected: format!("{} labels", inputs.rows()),
                actual: labels.len().to_string(),
            });
        }
        if labels.iter().any(|y| !y.is_finite()) {
            return Err(ConrError::invalid("non-finite label"));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Labels as an `n × 1` matrix.
    pub fn label_matrix(&self) -> Matrix {
        Matrix::from_vec(self.labels.len(), 1, self.labels.clone()).expect("finite labels")
    }

    /// Writes the `x0,...,x{d-1},y` CSV format.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| ConrError::io(path, e))?;
        self.write_csv_to(BufWriter::new(file))
    }

    pub fn write_csv_to<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.input_dim()).map(|k| format!("x{k}")).collect();
        header.push("y".to_string());
        w.write_record(&header)?;
        for (r, y) in self.labels.iter().enumerate() {
            let mut record: Vec<String> = self.inputs.row(r).iter().map(f64::to_string).collect();
            record.push(y.to_string());
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| ConrError::io("<csv>", e))?;
        Ok(())
    }
}

/// Reads the `x0,...,x{d-1},y` CSV format. Row order is preserved.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| ConrError::io(path, e))?;
    read_csv(file, &path.display().to_string())
}

pub fn read_csv<R: std::io::Read>(reader: R, source: &str) -> Result<Dataset> {
    let parse_err = |line: usize, message: String| ConrError::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols.last() != Some(&"y") {
        return Err(parse_err(1, "header must end with a `y` column".into()));
    }
    let d = cols.len() - 1;
    for (k, name) in cols[..d].iter().enumerate() {
        if *name != format!("x{k}") {
            return Err(parse_err(
                1,
                format!("expected column `x{k}`, found `{name}`"),
            ));
        }
    }
    if d == 0 {
        return Err(parse_err(
            1,
            "at least one input column `x0` is required".into(),
        ));
    }
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != d + 1 {
            return Err(parse_err(
                line,
                format!("expected {} fields, got {}", d + 1, record.len()),
            ));
        }
        for (k, field) in record.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("`{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value `{field}`")));
            }
            if k < d {
                inputs.push(v);
            } else {
                labels.push(v);
            }
        }
    }
    Dataset::new(Matrix::from_vec(labels.len(), d, inputs)?, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensityProfile {
    /// Density `∝ exp(-rate·(y − label_min))`, truncated to the label range.
    Exponential {
        rate: f64,
    },
    /// Two truncated Gaussians; `mix` is the probability of the first.
    Bimodal {
        centers: [f64; 2],
        widths: [f64; 2],
        mix: f64,
    },
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetMap {
    /// Every input channel is `slope·y + intercept`.
    Linear { slope: f64, intercept: f64 },
    /// Multi-scale sin/cos encoding: channel `2m` is `A·sin(2πy/P_m)`, channel
    /// `2m+1` is `A·cos(2πy/P_m)`, with `P_m = period·2^m`.
    Sinusoidal { amplitude: f64, period: f64 },
    /// Every channel is the piecewise-linear interpolant through
    /// `(knots[i], values[i])`, held constant beyond the end knots.
    Piecewise { knots: Vec<f64>, values: Vec<f64> },
}

impl TargetMap {
    fn validate(&self) -> Result<()> {
        match self {
            TargetMap::Linear { slope, intercept }
                if !(slope.is_finite() && intercept.is_finite()) =>
            {
                Err(ConrError::invalid("linear map parameters must be finite"))
            }
            TargetMap::Sinusoidal { amplitude, period }
                if !(*period > 0.0 && amplitude.is_finite()) =>
            {
                Err(ConrError::invalid("sinusoidal map needs a positive period"))
            }
            TargetMap::Piecewise { knots, values } => {
                if knots.len() < 2 || knots.len() != values.len() {
                    return Err(ConrError::invalid(
                        "piecewise map needs >= 2 knots and one value per knot",
                    ));
                }
                if knots.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(ConrError::invalid(
                        "piecewise knots must be strictly increasing",
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Writes the noiseless input for label `y` into `out`.
    pub fn embed(&self, y: f64, out: &mut [f64]) {
        match self {
            TargetMap::Linear { slope, intercept } => out.fill(slope * y + intercept),
            TargetMap::Sinusoidal { amplitude, period } => {
                for (k, v) in out.iter_mut().enumerate() {
                    let p = period * 2f64.powi((k / 2) as i32);
                    let angle = std::f64::consts::TAU * y / p;
                    *v = amplitude * if k % 2 == 0 { angle.sin() } else { angle.cos() };
                }
            }
            TargetMap::Piecewise { knots, values } => {
                let v = interpolate(knots, values, y);
                out.fill(v);
            }
        }
    }
}

fn interpolate(knots: &[f64], values: &[f64], y: f64) -> f64 {
    if y <= knots[0] {
        return values[0];
    }
    let last = knots.len() - 1;
    if y >= knots[last] {
        return values[last];
    }
    let i = knots.partition_point(|&k| k <= y) - 1;
    let t = (y - knots[i]) / (knots[i + 1] - knots[i]);
    values[i] + t * (values[i + 1] - values[i])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub label_min: f64,
    pub label_max: f64,
    pub profile: DensityProfile,
    pub n_train: usize,
    /// Test samples drawn in every test label bin.
    pub test_per_bin: usize,
    pub test_bin_width: f64,
    pub input_dim: usize,
    pub target_map: TargetMap,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            label_min: 0.0,
            label_max: 100.0,
            profile: DensityProfile::Exponential { rate: 0.05 },
            n_train: 5000,
            test_per_bin: 10,
            test_bin_width: 1.0,
            input_dim: 8,
            target_map: TargetMap::Sinusoidal {
                amplitude: 1.0,
                period: 25.0,
            },
            noise_sigma: 0.1,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.label_min < self.label_max)
            || !self.label_min.is_finite()
            || !self.label_max.is_finite()
        {
            return Err(ConrError::invalid("label_min must be < label_max"));
        }
        if self.n_train == 0 || self.input_dim == 0 {
            return Err(ConrError::invalid("n_train and input_dim must be >= 1"));
        }
        if !(self.test_bin_width > 0.0) {
            return Err(ConrError::invalid("test_bin_width must be > 0"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(ConrError::invalid("noise_sigma must be >= 0"));
        }
        match &self.profile {
            DensityProfile::Exponential { rate } if !(*rate > 0.0 && rate.is_finite()) => {
                return Err(ConrError::invalid("exponential rate must be > 0"))
            }
            DensityProfile::Bimodal { widths, mix, .. }
                if !(widths.iter().all(|&w| w > 0.0) && *mix > 0.0 && *mix < 1.0) =>
            {
                return Err(ConrError::invalid(
                    "bimodal profile needs positive widths and 0 < mix < 1",
                ))
            }
            _ => {}
        }
        self.target_map.validate()
    }

    /// Number of test label bins covering `[label_min, label_max)`.
    pub fn test_bins(&self) -> usize {
        ((self.label_max - self.label_min) / self.test_bin_width).ceil() as usize
    }

    fn sample_label<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (lo, hi) = (self.label_min, self.label_max);
        match &self.profile {
            DensityProfile::Uniform => rng.random_range(lo..hi),
            DensityProfile::Exponential { rate } => {
                // Inverse CDF of the truncated exponential.
                let mass = 1.0 - (-rate * (hi - lo)).exp();
                let u: f64 = rng.random();
                let y = lo - (1.0 - u * mass).ln() / rate;
                y.clamp(lo, hi - (hi - lo) * f64::EPSILON)
            }
            DensityProfile::Bimodal {
                centers,
                widths,
                mix,
            } => {
                let c = usize::from(rng.random::<f64>() >= *mix);
                let normal = Normal::new(centers[c], widths[c]).expect("validated width");
                loop {
                    let y = normal.sample(rng);
                    if y >= lo && y < hi {
                        return y;
                    }
                }
            }
        }
    }
}

fn build_inputs<R: Rng + ?Sized>(spec: &SyntheticSpec, labels: &[f64], rng: &mut R) -> Matrix {
    let d = spec.input_dim;
    let mut data = vec![0.0; labels.len() * d];
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("sigma >= 0");
    for (row, &y) in data.chunks_mut(d).zip(labels) {
        spec.target_map.embed(y, row);
        if spec.noise_sigma > 0.0 {
            row.iter_mut().for_each(|v| *v += noise.sample(rng));
        }
    }
    Matrix::from_vec(labels.len(), d, data).expect("finite embedding")
}

/// Generates `(train, test)`. Fully determined by `spec` (including its seed).
pub fn generate(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let train_labels: Vec<f64> = (0..spec.n_train)
        .map(|_| spec.sample_label(&mut rng))
        .collect();
    let train_inputs = build_inputs(spec, &train_labels, &mut rng);

    let mut test_labels = Vec::with_capacity(spec.test_bins() * spec.test_per_bin);
    for b in 0..spec.test_bins() {
        let lo = spec.label_min + b as f64 * spec.test_bin_width;
        let hi = (lo + spec.test_bin_width).min(spec.label_max);
        for _ in 0..spec.test_per_bin {
            test_labels.push(rng.random_range(lo..hi));
        }
    }
    let test_inputs = build_inputs(spec, &test_labels, &mut rng);

    Ok((
        Dataset::new(train_inputs, train_labels)?,
        Dataset::new(test_inputs, test_labels)?,
    ))
}

/// Count of test samples per `test_bin_width` bin, keyed by bin index.
pub fn bin_counts(labels: &[f64], bin_width: f64) -> std::collections::BTreeMap<i64, usize> {
    let mut counts = std::collections::BTreeMap::new();
    for &y in labels {
        *counts.entry(bin_index(y, bin_width)).or_insert(0) += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub gaussian_sigma: f64,
    /// Multiplicative jitter drawn uniformly from `[1 − s, 1 + s]`.
    pub scale_jitter: f64,
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma >= 0.0 && self.gaussian_sigma.is_finite()) {
            return Err(ConrError::invalid("gaussian_sigma must be >= 0"));
        }
        if !(self.scale_jitter >= 0.0 && self.scale_jitter < 1.0) {
            return Err(ConrError::invalid("scale_jitter must be in [0, 1)"));
        }
        Ok(())
    }

    /// One augmented view: `x·s + ε`, `s ~ U[1−j, 1+j]`, `ε ~ N(0, σ²)`.
    pub fn augment<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let scale = if self.scale_jitter > 0.0 {
            rng.random_range(1.0 - self.scale_jitter..=1.0 + self.scale_jitter)
        } else {
            1.0
        };
        let noise = (self.gaussian_sigma > 0.0)
            .then(|| Normal::new(0.0, self.gaussian_sigma).expect("validated sigma"));
        x.iter()
            .map(|&v| {
                let mut out = v * scale;
                if let Some(n) = &noise {
                    out += n.sample(rng);
                }
                out
            })
            .collect()
    }
}

/// Two independent views of `x`. Labels are not involved.
pub fn augment_twice<R: Rng + ?Sized>(
    x: &[f64],
    spec: &AugmentSpec,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let a = spec.augment(x, rng);
    let b = spec.augment(x, rng);
    (a, b)
}

/// Manifest written next to generated CSVs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: SyntheticSpec,
    pub seed: u64,
    pub train_csv: String,
    pub test_csv: String,
    pub n_train: usize,
    pub n_test: usize,
}

/// Generates and writes `train.csv`, `test.csv` and `manifest.json` into
/// `dir`.
pub fn write_generated(spec: &SyntheticSpec, dir: &Path) -> Result<DatasetManifest> {
    let (train, test) = generate(spec)?;
    std::fs::create_dir_all(dir).map_err(|e| ConrError::io(dir, e))?;
    train.write_csv(&dir.join("train.csv"))?;
    test.write_csv(&dir.join("test.csv"))?;
    let manifest = DatasetManifest {
        spec: spec.clone(),
        seed: spec.seed,
        train_csv: "train.csv".into(),
        test_csv: "test.csv".into(),
        n_train: train.len(),
        n_test: test.len(),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| ConrError::io(&path, e))?;
    Ok(manifest)
}
