//! Label similarity, empirical label density and density-derived weights.
//!
//! Two labels are similar when their distance is strictly below `1/ω`.
//! Map-valued labels (e.g. depth maps) are reduced to their mean before any
//! comparison. Density tables bin labels into half-open intervals
//! `[k·width, (k+1)·width)` and derive per-sample weights normalized to
//! mean 1.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{ConrError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Scalar(f64),
    Map(Vec<f64>),
}

impl Label {
    /// Scalar value used for similarity and binning: the value itself, or
    /// the arithmetic mean of a map.
    pub fn reduced(&self) -> f64 {
        match self {
            Label::Scalar(v) => *v,
            Label::Map(values) => values.iter().sum::<f64>() / values.len() as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Label::Scalar(v) if !v.is_finite() => Err(ConrError::invalid("non-finite label")),
            Label::Map(values) if values.is_empty() => Err(ConrError::invalid("empty map label")),
            Label::Map(values) if values.iter().any(|v| !v.is_finite()) => {
                Err(ConrError::invalid("non-finite value in map label"))
            }
            _ => Ok(()),
        }
    }

    fn is_map(&self) -> bool {
        matches!(self, Label::Map(_))
    }
}

impl From<f64> for Label {
    fn from(v: f64) -> Self {
        Label::Scalar(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMetric {
    /// `|a − b|` on scalar labels.
    #[default]
    AbsoluteDifference,
    /// `|mean(a) − mean(b)|`; accepts scalar or map labels of matching kind.
    MeanReducedAbsoluteDifference,
}

pub fn label_distance(a: &Label, b: &Label, metric: LabelMetric) -> Result<f64> {
    if a.is_map() != b.is_map() {
        return Err(ConrError::invalid("cannot compare scalar and map labels"));
    }
    match metric {
        LabelMetric::AbsoluteDifference => match (a, b) {
            (Label::Scalar(x), Label::Scalar(y)) => Ok((x - y).abs()),
            _ => Err(ConrError::invalid(
                "absolute-difference metric needs scalar labels",
            )),
        },
        LabelMetric::MeanReducedAbsoluteDifference => Ok((a.reduced() - b.reduced()).abs()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRule {
    pub omega: f64,
    pub metric: LabelMetric,
}

impl SimilarityRule {
    pub fn new(omega: f64, metric: LabelMetric) -> Result<Self> {
        if !(omega > 0.0 && omega.is_finite()) {
            return Err(ConrError::invalid(format!(
                "omega must be > 0, got {omega}"
            )));
        }
        Ok(Self { omega, metric })
    }

    /// Distance threshold `1/ω`.
    #[inline]
    pub fn threshold(&self) -> f64 {
        1.0 / self.omega
    }

    /// Similarity on already-reduced scalar values.
    #[inline]
    pub fn similar_values(&self, a: f64, b: f64) -> bool {
        (a - b).abs() < self.threshold()
    }
}

pub fn is_similar(a: &Label, b: &Label, rule: &SimilarityRule) -> Result<bool> {
    Ok(label_distance(a, b, rule.metric)? < rule.threshold())
}

/// Half-open bin index of a reduced label value.
#[inline]
pub fn bin_index(value: f64, bin_width: f64) -> i64 {
    (value / bin_width).floor() as i64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SmoothingKernel {
    Gaussian { size: usize, sigma: f64 },
    Triangular { size: usize },
}

impl SmoothingKernel {
    /// Normalized (sum 1), symmetric window of odd length.
    pub fn window(&self) -> Result<Vec<f64>> {
        let size = match *self {
            SmoothingKernel::Gaussian { size, .. } | SmoothingKernel::Triangular { size } => size,
        };
        if size == 0 || size % 2 == 0 {
            return Err(ConrError::invalid(format!(
                "kernel size must be odd, got {size}"
            )));
        }
        let half = (size / 2) as f64;
        let raw: Vec<f64> = match *self {
            SmoothingKernel::Gaussian { sigma, .. } => {
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(ConrError::invalid(format!(
                        "gaussian sigma must be > 0, got {sigma}"
                    )));
                }
                (0..size)
                    .map(|i| {
                        let d = i as f64 - half;
                        (-d * d / (2.0 * sigma * sigma)).exp()
                    })
                    .collect()
            }
            SmoothingKernel::Triangular { .. } => (0..size)
                .map(|i| 1.0 - (i as f64 - half).abs() / (half + 1.0))
                .collect(),
        };
        let total: f64 = raw.iter().sum();
        Ok(raw.into_iter().map(|v| v / total).collect())
    }
}

/// Convolves `counts` with a normalized window. At the edges the window is
/// truncated and renormalized over the bins that exist, so a constant
/// histogram is a fixed point.
pub fn smooth_counts(counts: &[f64], window: &[f64]) -> Vec<f64> {
    let half = window.len() / 2;
    (0..counts.len())
        .map(|i| {
            let mut acc = 0.0;
            let mut mass = 0.0;
            for (k, &w) in window.iter().enumerate() {
                let Some(j) = (i + k).checked_sub(half) else {
                    continue;
                };
                if j < counts.len() {
                    acc += w * counts[j];
                    mass += w;
                }
            }
            acc / mass
        })
        .collect()
}

/// Lower bound applied to smoothed counts before inversion.
pub const MIN_SMOOTHED_COUNT: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityBin {
    pub index: i64,
    pub lower: f64,
    pub count: usize,
    pub smoothed_count: f64,
    /// Weight carried by a sample falling in this bin.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityTable {
    bin_width: f64,
    bins: Vec<DensityBin>,
    weights: Vec<f64>,
}

impl DensityTable {
    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    pub fn bins(&self) -> &[DensityBin] {
        &self.bins
    }

    /// Per-sample weights `w_j`, in input order.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        let mean = self.weights.iter().sum::<f64>() / self.weights.len() as f64;
        (mean - 1.0).abs() <= 1e-9
    }

    pub fn bin(&self, index: i64) -> Option<&DensityBin> {
        self.bins
            .binary_search_by_key(&index, |b| b.index)
            .ok()
            .map(|i| &self.bins[i])
    }

    /// Weight for an arbitrary label value: the weight of its bin, or the
    /// largest weight in the table when the bin lies outside it.
    pub fn weight_for(&self, value: f64) -> f64 {
        match self.bin(bin_index(value, self.bin_width)) {
            Some(b) if b.count > 0 || b.smoothed_count > 0.0 => b.weight,
            _ => self.bins.iter().map(|b| b.weight).fold(0.0, f64::max),
        }
    }

    /// Writes `bin_lower,count,smoothed_count,weight` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["bin_lower", "count", "smoothed_count", "weight"])?;
        for b in &self.bins {
            w.write_record([
                b.lower.to_string(),
                b.count.to_string(),
                b.smoothed_count.to_string(),
                b.weight.to_string(),
            ])?;
        }
        w.flush().map_err(|e| ConrError::io("<csv>", e))?;
        Ok(())
    }

    fn build(
        bin_width: f64,
        sample_bins: &[i64],
        mut bins: Vec<DensityBin>,
        density_of: impl Fn(&DensityBin) -> f64,
    ) -> Self {
        let inv: BTreeMap<i64, f64> = bins
            .iter()
            .map(|b| (b.index, 1.0 / density_of(b)))
            .collect();
        let raw_mean = sample_bins.iter().map(|k| inv[k]).sum::<f64>() / sample_bins.len() as f64;
        for b in &mut bins {
            b.weight = inv[&b.index] / raw_mean;
        }
        let weights = sample_bins.iter().map(|k| inv[k] / raw_mean).collect();
        Self {
            bin_width,
            bins,
            weights,
        }
    }
}

fn validated_bins(labels: &[Label], bin_width: f64) -> Result<(Vec<i64>, BTreeMap<i64, usize>)> {
    if labels.is_empty() {
        return Err(ConrError::invalid(
            "density estimation needs at least one label",
        ));
    }
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(ConrError::invalid(format!(
            "bin width must be > 0, got {bin_width}"
        )));
    }
    let mut counts = BTreeMap::new();
    let mut sample_bins = Vec::with_capacity(labels.len());
    for label in labels {
        label.validate()?;
        let k = bin_index(label.reduced(), bin_width);
        *counts.entry(k).or_insert(0) += 1;
        sample_bins.push(k);
    }
    Ok((sample_bins, counts))
}

/// `w_j ∝ 1 / count(bin(y_j))`, normalized to mean 1. Only occupied bins are
/// listed.
pub fn inverse_frequency_weights(labels: &[Label], bin_width: f64) -> Result<DensityTable> {
    let (sample_bins, counts) = validated_bins(labels, bin_width)?;
    let bins = counts
        .iter()
        .map(|(&index, &count)| DensityBin {
            index,
            lower: index as f64 * bin_width,
            count,
            smoothed_count: count as f64,
            weight: 0.0,
        })
        .collect();
    Ok(DensityTable::build(bin_width, &sample_bins, bins, |b| {
        b.count as f64
    }))
}

/// Label-distribution-smoothing weights: the histogram over the contiguous
/// bin range spanned by the labels is convolved with `kernel`, clamped below
/// by [`MIN_SMOOTHED_COUNT`] and inverted.
pub fn lds_weights(
    labels: &[Label],
    bin_width: f64,
    kernel: &SmoothingKernel,
) -> Result<DensityTable> {
    let window = kernel.window()?;
    let (sample_bins, counts) = validated_bins(labels, bin_width)?;
    let lo = *counts.keys().next().expect("non-empty");
    let hi = *counts.keys().next_back().expect("non-empty");
    let dense: Vec<f64> = (lo..=hi)
        .map(|k| counts.get(&k).copied().unwrap_or(0) as f64)
        .collect();
    let smoothed = smooth_counts(&dense, &window);
    let bins = (lo..=hi)
        .zip(smoothed)
        .map(|(index, s)| DensityBin {
            index,
            lower: index as f64 * bin_width,
            count: counts.get(&index).copied().unwrap_or(0),
            smoothed_count: s.max(MIN_SMOOTHED_COUNT),
            weight: 0.0,
        })
        .collect();
    Ok(DensityTable::build(bin_width, &sample_bins, bins, |b| {
        b.smoothed_count
    }))
}

/// `η_j = eta_scale · w_j`.
pub fn pushing_power(weight: f64, eta_scale: f64) -> Result<f64> {
    if !(weight > 0.0 && weight.is_finite()) {
        return Err(ConrError::invalid(format!(
            "density weight must be > 0, got {weight}"
        )));
    }
    if !(eta_scale > 0.0 && eta_scale.is_finite()) {
        return Err(ConrError::invalid(format!(
            "eta scale must be > 0, got {eta_scale}"
        )));
    }
    Ok(eta_scale * weight)
}

/// `S_{j,q} = η_j · dist(y_j, y_q)`.
pub fn pushing_weight(
    eta: f64,
    anchor: &Label,
    negative: &Label,
    metric: LabelMetric,
) -> Result<f64> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(ConrError::invalid(format!(
            "pushing power must be > 0, got {eta}"
        )));
    }
    Ok(eta * label_distance(anchor, negative, metric)?)
}
