//! Shot-partitioned evaluation, the mislabel penalty curve and a
//! nearest-neighbour feature collapse diagnostic.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{ConrError, Result};
use crate::label::{bin_index, Label, SimilarityRule};
use crate::loss::RegressionKind;
use crate::tensor::{dot, norm, Matrix};

/// Floor applied to absolute errors inside the geometric mean.
pub const GM_EPS: f64 = 1e-10;
/// Ratio threshold of the δ₁ accuracy.
pub const DELTA1_THRESHOLD: f64 = 1.25;
/// Bins with fewer training samples are few-shot.
pub const FEW_MAX: usize = 20;
/// Bins with more training samples are many-shot.
pub const MANY_MIN: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shot {
    Many,
    Median,
    Few,
    Zero,
}

impl Shot {
    pub fn from_count(count: usize) -> Shot {
        match count {
            0 => Shot::Zero,
            c if c > MANY_MIN => Shot::Many,
            c if c >= FEW_MAX => Shot::Median,
            _ => Shot::Few,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotPartition {
    bin_width: f64,
    train_counts: BTreeMap<i64, usize>,
}

impl ShotPartition {
    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    pub fn train_count(&self, bin: i64) -> usize {
        self.train_counts.get(&bin).copied().unwrap_or(0)
    }

    pub fn shot_of_bin(&self, bin: i64) -> Shot {
        Shot::from_count(self.train_count(bin))
    }

    pub fn shot_of(&self, label: f64) -> Shot {
        self.shot_of_bin(bin_index(label, self.bin_width))
    }

    /// Occupied bins with their shot.
    pub fn bins(&self) -> impl Iterator<Item = (i64, usize, Shot)> + '_ {
        self.train_counts
            .iter()
            .map(|(&k, &c)| (k, c, Shot::from_count(c)))
    }
}

pub fn assign_shots(train_labels: &[f64], bin_width: f64) -> Result<ShotPartition> {
    if train_labels.is_empty() {
        return Err(ConrError::invalid("shot assignment needs training labels"));
    }
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(ConrError::invalid("bin width must be > 0"));
    }
    let mut train_counts = BTreeMap::new();
    for &y in train_labels {
        *train_counts.entry(bin_index(y, bin_width)).or_insert(0) += 1;
    }
    Ok(ShotPartition {
        bin_width,
        train_counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotMetrics {
    pub count: usize,
    pub mae: f64,
    pub rmse: f64,
    pub gm: f64,
    /// Only reported when every label and prediction is strictly positive.
    pub delta1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub all: Option<ShotMetrics>,
    pub many: Option<ShotMetrics>,
    pub median: Option<ShotMetrics>,
    pub few: Option<ShotMetrics>,
}

impl MetricsReport {
    pub fn shots(&self) -> [(&'static str, Option<&ShotMetrics>); 4] {
        [
            ("all", self.all.as_ref()),
            ("many", self.many.as_ref()),
            ("median", self.median.as_ref()),
            ("few", self.few.as_ref()),
        ]
    }

    /// `shot,count,mae,rmse,gm,delta1` rows; absent values are empty fields.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["shot", "count", "mae", "rmse", "gm", "delta1"])?;
        for (name, m) in self.shots() {
            match m {
                Some(m) => w.write_record([
                    name.to_string(),
                    m.count.to_string(),
                    m.mae.to_string(),
                    m.rmse.to_string(),
                    m.gm.to_string(),
                    m.delta1.map(|d| d.to_string()).unwrap_or_default(),
                ])?,
                None => w.write_record([name, "0", "", "", "", ""])?,
            }
        }
        w.flush().map_err(|e| ConrError::io("<csv>", e))?;
        Ok(())
    }
}

pub fn geometric_mean_error(abs_errors: &[f64]) -> f64 {
    let log_sum: f64 = abs_errors.iter().map(|e| e.max(GM_EPS).ln()).sum();
    (log_sum / abs_errors.len() as f64).exp()
}

/// Fraction of pairs with `max(d/g, g/d) < 1.25`; `None` unless all values
/// are strictly positive.
pub fn delta1(predictions: &[f64], labels: &[f64]) -> Option<f64> {
    if predictions.is_empty() || predictions.iter().chain(labels).any(|&v| v <= 0.0) {
        return None;
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(&d, &g)| (d / g).max(g / d) < DELTA1_THRESHOLD)
        .count();
    Some(hits as f64 / predictions.len() as f64)
}

fn shot_metrics(pairs: &[(f64, f64)]) -> Option<ShotMetrics> {
    if pairs.is_empty() {
        return None;
    }
    let n = pairs.len() as f64;
    let errors: Vec<f64> = pairs.iter().map(|(p, y)| (p - y).abs()).collect();
    let (preds, labels): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    Some(ShotMetrics {
        count: pairs.len(),
        mae: errors.iter().sum::<f64>() / n,
        rmse: (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        gm: geometric_mean_error(&errors),
        delta1: delta1(&preds, &labels),
    })
}

pub fn metrics(
    predictions: &[f64],
    labels: &[f64],
    partition: &ShotPartition,
) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(ConrError::DimensionMismatch {
            context: "metrics",
            expected: labels.len().to_string(),
            actual: predictions.len().to_string(),
        });
    }
    let mut groups: BTreeMap<Shot, Vec<(f64, f64)>> = BTreeMap::new();
    let mut all = Vec::with_capacity(labels.len());
    for (&p, &y) in predictions.iter().zip(labels) {
        all.push((p, y));
        groups.entry(partition.shot_of(y)).or_default().push((p, y));
    }
    let mut take = |s: Shot| groups.remove(&s).and_then(|g| shot_metrics(&g));
    Ok(MetricsReport {
        all: shot_metrics(&all),
        many: take(Shot::Many),
        median: take(Shot::Median),
        few: take(Shot::Few),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyPoint {
    pub center: f64,
    pub penalty: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyCurve {
    pub bin_width: f64,
    pub points: Vec<PenaltyPoint>,
    /// Support-weighted mean of the penalties; 0 when nothing is supported.
    pub expected_penalty: f64,
    pub total_support: usize,
}

impl PenaltyCurve {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["center", "penalty", "support"])?;
        for p in &self.points {
            w.write_record([
                p.center.to_string(),
                p.penalty.to_string(),
                p.support.to_string(),
            ])?;
        }
        w.flush().map_err(|e| ConrError::io("<csv>", e))?;
        Ok(())
    }
}

/// Per-sample regression error under `kind`, elementwise over map labels.
pub fn sample_error(prediction: &Label, label: &Label, kind: RegressionKind) -> Result<f64> {
    let (p, y): (&[f64], &[f64]) = match (prediction, label) {
        (Label::Scalar(p), Label::Scalar(y)) => (std::slice::from_ref(p), std::slice::from_ref(y)),
        (Label::Map(p), Label::Map(y)) if p.len() == y.len() && !p.is_empty() => (p, y),
        _ => return Err(ConrError::invalid("prediction and label shapes differ")),
    };
    let n = p.len() as f64;
    Ok(match kind {
        RegressionKind::Mae => p.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / n,
        RegressionKind::Rmse => {
            (p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n).sqrt()
        }
    })
}

/// For each prediction-bin center `c` (bins of width `1/ω`), the mean error
/// of samples whose prediction is similar to `c` but whose label is not.
/// Centers are taken over every bin that could hold such a sample.
pub fn penalty_curve(
    predictions: &[Label],
    labels: &[Label],
    rule: &SimilarityRule,
    kind: RegressionKind,
) -> Result<PenaltyCurve> {
    if predictions.len() != labels.len() {
        return Err(ConrError::DimensionMismatch {
            context: "penalty_curve",
            expected: labels.len().to_string(),
            actual: predictions.len().to_string(),
        });
    }
    let width = rule.threshold();
    let reduced: Vec<f64> = predictions.iter().map(Label::reduced).collect();
    let label_reduced: Vec<f64> = labels.iter().map(Label::reduced).collect();
    let errors = predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| sample_error(p, y, kind))
        .collect::<Result<Vec<f64>>>()?;

    // A prediction within 1/ω of a center lies in that center's bin or a
    // direct neighbour, so buckets by own bin and scan ±1.
    let mut by_bin: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &p) in reduced.iter().enumerate() {
        by_bin.entry(bin_index(p, width)).or_default().push(i);
    }
    let mut centers: Vec<i64> = by_bin.keys().flat_map(|&k| [k - 1, k, k + 1]).collect();
    centers.sort_unstable();
    centers.dedup();

    let mut points = Vec::new();
    let mut weighted = 0.0;
    let mut total_support = 0;
    for k in centers {
        let center = (k as f64 + 0.5) * width;
        let mut members: Vec<usize> = [k - 1, k, k + 1]
            .iter()
            .flat_map(|nb| by_bin.get(nb).into_iter().flatten().copied())
            .filter(|&i| {
                rule.similar_values(reduced[i], center)
                    && !rule.similar_values(label_reduced[i], center)
            })
            .collect();
        // Sample order keeps the sums independent of the bucketing.
        members.sort_unstable();
        let sum: f64 = members.iter().map(|&i| errors[i]).sum();
        let support = members.len();
        if support > 0 {
            weighted += sum;
            total_support += support;
            points.push(PenaltyPoint {
                center,
                penalty: sum / support as f64,
                support,
            });
        }
    }
    Ok(PenaltyCurve {
        bin_width: width,
        points,
        expected_penalty: if total_support > 0 {
            weighted / total_support as f64
        } else {
            0.0
        },
        total_support,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotFilter {
    All,
    Many,
    Median,
    #[default]
    Few,
}

impl ShotFilter {
    fn accepts(self, shot: Shot) -> bool {
        match self {
            ShotFilter::All => true,
            ShotFilter::Many => shot == Shot::Many,
            ShotFilter::Median => shot == Shot::Median,
            ShotFilter::Few => shot == Shot::Few,
        }
    }
}

fn cosine(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Among samples selected by `filter`, the fraction whose cosine nearest
/// neighbour (over all other samples) has a dissimilar label. Returns 0 when
/// the filter selects nothing.
pub fn collapse_rate(
    features: &Matrix,
    labels: &[f64],
    rule: &SimilarityRule,
    partition: &ShotPartition,
    filter: ShotFilter,
) -> Result<f64> {
    let n = features.rows();
    if labels.len() != n {
        return Err(ConrError::DimensionMismatch {
            context: "collapse_rate",
            expected: n.to_string(),
            actual: labels.len().to_string(),
        });
    }
    if n < 2 {
        return Err(ConrError::invalid(
            "collapse rate needs at least two samples",
        ));
    }
    let norms: Vec<f64> = (0..n).map(|i| norm(features.row(i))).collect();
    let mut selected = 0usize;
    let mut collapsed = 0usize;
    for i in (0..n).filter(|&i| filter.accepts(partition.shot_of(labels[i]))) {
        selected += 1;
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for j in (0..n).filter(|&j| j != i) {
            let s = cosine(features.row(i), features.row(j), norms[i], norms[j]);
            // NaN similarities still yield a neighbour instead of none.
            if s > best.0 || best.1 == usize::MAX {
                best = (s, j);
            }
        }
        if !rule.similar_values(labels[i], labels[best.1]) {
            collapsed += 1;
        }
    }
    Ok(if selected == 0 {
        0.0
    } else {
        collapsed as f64 / selected as f64
    })
}
