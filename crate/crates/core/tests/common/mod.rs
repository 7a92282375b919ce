//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use conr::label::Label;
use conr::loss::{ConrConfig, Variant};
use conr::pairing::AugmentedBatch;
use conr::tensor::Matrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub struct BrutePairs {
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
    pub anchors: Vec<bool>,
}

/// Direct double loop over ordered pairs; scalar labels.
pub fn brute_pairs(labels: &[f64], preds: &[f64], omega: f64, label_only: bool) -> BrutePairs {
    let n = labels.len();
    let mut positives = vec![Vec::new(); n];
    let mut negatives = vec![Vec::new(); n];
    for j in 0..n {
        for i in 0..n {
            if i == j {
                continue;
            }
            if (labels[j] - labels[i]).abs() < 1.0 / omega {
                positives[j].push(i);
            } else if label_only || (preds[j] - preds[i]).abs() < 1.0 / omega {
                negatives[j].push(i);
            }
        }
    }
    let anchors = negatives.iter().map(|q| !q.is_empty()).collect();
    BrutePairs {
        positives,
        negatives,
        anchors,
    }
}

/// Batch regularizer straight from the definition, with plain `exp`/`ln`.
pub fn brute_conr(z: &Matrix, labels: &[f64], preds: &[f64], w: &[f64], cfg: &ConrConfig) -> f64 {
    let n = z.rows();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            let row = z.row(r).to_vec();
            if cfg.normalize_features {
                let len = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                row.iter().map(|v| v / len).collect()
            } else {
                row
            }
        })
        .collect();
    let sim = |a: usize, b: usize| -> f64 {
        rows[a]
            .iter()
            .zip(&rows[b])
            .map(|(x, y)| x * y)
            .sum::<f64>()
            / cfg.tau
    };
    let label_only = cfg.variant == Variant::ContrastiveOnly;
    let p = brute_pairs(labels, preds, cfg.omega, label_only);
    let mut total = 0.0;
    for j in 0..n {
        if p.negatives[j].is_empty() || p.positives[j].is_empty() {
            continue;
        }
        let num: f64 = p.positives[j].iter().map(|&i| sim(j, i).exp()).sum();
        let mut den = num;
        for &q in &p.negatives[j] {
            let dist = (labels[j] - labels[q]).abs();
            let s = match cfg.variant {
                Variant::Full => cfg.eta_scale * w[j] * dist,
                Variant::NoPushWeight | Variant::ContrastiveOnly => 1.0,
                Variant::NoSimWeight => cfg.eta_scale * w[j],
                Variant::NoEtaWeight => cfg.eta_scale * dist,
            };
            den += s * sim(j, q).exp();
        }
        total += -(num / den).ln();
    }
    total / n as f64
}

pub struct RandomBatch {
    pub batch: AugmentedBatch,
    pub labels: Vec<f64>,
    pub preds: Vec<f64>,
    pub weights: Vec<f64>,
}

/// `sources` examples, two views each (rows `k` and `sources + k`), labels on
/// a coarse grid so that both similar and dissimilar pairs occur, and
/// predictions near the labels so that confusions occur.
pub fn random_batch<R: Rng>(
    rng: &mut R,
    sources: usize,
    dim: usize,
    label_span: f64,
) -> RandomBatch {
    let n = 2 * sources;
    let src_labels: Vec<f64> = (0..sources)
        .map(|_| (rng.random_range(0.0..label_span) * 4.0).round() / 4.0)
        .collect();
    let labels: Vec<f64> = (0..n).map(|i| src_labels[i % sources]).collect();
    let preds: Vec<f64> = labels
        .iter()
        .map(|y| y + rng.random_range(-1.5..1.5))
        .collect();
    let data: Vec<f64> = (0..n * dim).map(|_| StandardNormal.sample(rng)).collect();
    let z = Matrix::from_vec(n, dim, data).unwrap();
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..5.0)).collect();
    let batch = AugmentedBatch::new(
        z,
        labels.iter().map(|&y| Label::Scalar(y)).collect(),
        preds.iter().map(|&p| Label::Scalar(p)).collect(),
        (0..n).map(|i| i % sources).collect(),
    )
    .unwrap();
    RandomBatch {
        batch,
        labels,
        preds,
        weights,
    }
}

/// Central differences of `f` at every entry of `z`.
pub fn finite_difference(z: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut grad = Matrix::zeros(z.rows(), z.cols());
    let mut probe = z.clone();
    for i in 0..z.data().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Penalty curve straight from the definition: every center, every sample.
pub fn brute_penalty(preds: &[f64], labels: &[f64], omega: f64) -> (Vec<(f64, f64, usize)>, f64) {
    let width = 1.0 / omega;
    let lo = preds
        .iter()
        .map(|p| (p / width).floor() as i64)
        .min()
        .unwrap()
        - 1;
    let hi = preds
        .iter()
        .map(|p| (p / width).floor() as i64)
        .max()
        .unwrap()
        + 1;
    let mut points = Vec::new();
    let (mut sum, mut count) = (0.0, 0usize);
    for k in lo..=hi {
        let c = (k as f64 + 0.5) * width;
        let members: Vec<usize> = (0..preds.len())
            .filter(|&i| (preds[i] - c).abs() < width && (labels[i] - c).abs() >= width)
            .collect();
        if members.is_empty() {
            continue;
        }
        let s: f64 = members.iter().map(|&i| (preds[i] - labels[i]).abs()).sum();
        points.push((c, s / members.len() as f64, members.len()));
        sum += s;
        count += members.len();
    }
    (points, if count == 0 { 0.0 } else { sum / count as f64 })
}
