//! The contrastive regularizer with relative pushing, the regression losses
//! and the combined objective, each with exact gradients.
//!
//! For an anchor `j` with positives `P`, negatives `Q` and pushing weights
//! `S_q`, the per-anchor loss is
//!
//! ```text
//! L_j = -log( Σ_p e^{u_j·u_p/τ} / (Σ_p e^{u_j·u_p/τ} + Σ_q S_q e^{u_j·u_q/τ}) )
//! ```
//!
//! where `u` are the (optionally L2-normalized) features. The log is taken
//! once over the summed ratio. The batch value is the sum over anchors
//! divided by the full batch size; non-anchors contribute zero.

use serde::{Deserialize, Serialize};

use crate::error::{ConrError, Result};
use crate::label::{
    label_distance, pushing_power, pushing_weight, Label, LabelMetric, SimilarityRule,
};
use crate::pairing::{select_pairs_with, AugmentedBatch, PairSets, PairingMode};
use crate::tensor::{dot, norm, Matrix};

/// Features with a smaller norm are divided by this instead.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `S = η_j · dist(y_j, y_q)` with `η_j = eta_scale · w_j`.
    #[default]
    Full,
    /// Label-only negatives, `S ≡ 1`.
    ContrastiveOnly,
    /// `S ≡ 1`.
    NoPushWeight,
    /// `S = η_j`; the label-distance factor is dropped.
    NoSimWeight,
    /// `S = eta_scale · dist`; the density weight is dropped.
    NoEtaWeight,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoPushWeight,
        Variant::NoSimWeight,
        Variant::NoEtaWeight,
        Variant::ContrastiveOnly,
    ];

    /// Row name used in ablation tables.
    pub fn table_name(self) -> &'static str {
        match self {
            Variant::Full => "ConR",
            Variant::ContrastiveOnly => "Contrastive-ConR",
            Variant::NoPushWeight => "ConR-S",
            Variant::NoSimWeight => "ConR-Sim",
            Variant::NoEtaWeight => "ConR-eta",
        }
    }

    pub fn pairing_mode(self) -> PairingMode {
        match self {
            Variant::ContrastiveOnly => PairingMode::LabelOnly,
            _ => PairingMode::Confusion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionKind {
    #[default]
    Mae,
    Rmse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConrConfig {
    pub omega: f64,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eta_scale: f64,
    pub variant: Variant,
    pub normalize_features: bool,
    pub regression_kind: RegressionKind,
    pub metric: LabelMetric,
    /// Treat peer features as constants; only the anchor row gets gradient.
    pub stop_peer_gradient: bool,
}

impl Default for ConrConfig {
    fn default() -> Self {
        Self {
            omega: 1.0,
            tau: 0.2,
            alpha: 1.0,
            beta: 4.0,
            eta_scale: 0.01,
            variant: Variant::Full,
            normalize_features: true,
            regression_kind: RegressionKind::Mae,
            metric: LabelMetric::AbsoluteDifference,
            stop_peer_gradient: false,
        }
    }
}

impl ConrConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ConrError::Config(format!(
                    "conr.{name} must be > 0, got {v}"
                )))
            }
        };
        let non_negative = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ConrError::Config(format!(
                    "conr.{name} must be >= 0, got {v}"
                )))
            }
        };
        positive("omega", self.omega)?;
        positive("tau", self.tau)?;
        positive("eta_scale", self.eta_scale)?;
        non_negative("alpha", self.alpha)?;
        non_negative("beta", self.beta)
    }

    pub fn rule(&self) -> SimilarityRule {
        SimilarityRule {
            omega: self.omega,
            metric: self.metric,
        }
    }
}

/// Pushing weights `S_{j,q}` for every `q ∈ K⁻_j`, in the order of
/// `pairs.negatives[j]`. `weights` holds the density weight `w` of each view.
pub fn pushing_weights_for(
    j: usize,
    pairs: &PairSets,
    labels: &[Label],
    weights: &[f64],
    cfg: &ConrConfig,
) -> Result<Vec<f64>> {
    let negatives = &pairs.negatives[j];
    match cfg.variant {
        Variant::NoPushWeight | Variant::ContrastiveOnly => Ok(vec![1.0; negatives.len()]),
        Variant::NoSimWeight => {
            let eta = pushing_power(weights[j], cfg.eta_scale)?;
            Ok(vec![eta; negatives.len()])
        }
        Variant::Full => {
            let eta = pushing_power(weights[j], cfg.eta_scale)?;
            negatives
                .iter()
                .map(|&q| pushing_weight(eta, &labels[j], &labels[q], cfg.metric))
                .collect()
        }
        Variant::NoEtaWeight => negatives
            .iter()
            .map(|&q| Ok(cfg.eta_scale * label_distance(&labels[j], &labels[q], cfg.metric)?))
            .collect(),
    }
}

/// Row-wise L2 normalization; returns the unit rows and the norms used.
pub fn normalize_rows(z: &Matrix) -> (Matrix, Vec<f64>) {
    let mut u = z.clone();
    let mut norms = Vec::with_capacity(z.rows());
    for r in 0..z.rows() {
        let n = norm(z.row(r)).max(NORM_EPS);
        u.row_mut(r).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    (u, norms)
}

/// Pulls a gradient w.r.t. normalized rows back to the raw rows.
fn normalize_backward(u: &Matrix, norms: &[f64], raw: &Matrix, du: &Matrix) -> Matrix {
    let mut dz = du.clone();
    for r in 0..u.rows() {
        let n = norms[r];
        if norm(raw.row(r)) < NORM_EPS {
            // Divisor was the constant epsilon.
            dz.row_mut(r).iter_mut().for_each(|v| *v /= n);
            continue;
        }
        let proj = dot(u.row(r), du.row(r));
        for (d, &uv) in dz.row_mut(r).iter_mut().zip(u.row(r)) {
            *d = (*d - uv * proj) / n;
        }
    }
    dz
}

struct AnchorTerm {
    value: f64,
    /// ∂L_j/∂(u_j·u_p/τ) per positive.
    d_pos: Vec<f64>,
    /// ∂L_j/∂(u_j·u_q/τ) per negative.
    d_neg: Vec<f64>,
}

fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Evaluates one anchor in log-space. `None` when there are no positives.
fn anchor_term(pos_logits: &[f64], neg_logits: &[f64], weights: &[f64]) -> Option<AnchorTerm> {
    if pos_logits.is_empty() {
        return None;
    }
    let weighted_neg = neg_logits
        .iter()
        .zip(weights)
        .filter(|(_, &s)| s > 0.0)
        .map(|(&b, &s)| b + s.ln());
    let log_num = log_sum_exp(pos_logits.iter().copied());
    let log_den = log_sum_exp(pos_logits.iter().copied().chain(weighted_neg));
    let d_pos = pos_logits
        .iter()
        .map(|&a| (a - log_den).exp() - (a - log_num).exp())
        .collect();
    let d_neg = neg_logits
        .iter()
        .zip(weights)
        .map(|(&b, &s)| {
            if s > 0.0 {
                s * (b - log_den).exp()
            } else {
                0.0
            }
        })
        .collect();
    Some(AnchorTerm {
        value: (log_den - log_num).max(0.0),
        d_pos,
        d_neg,
    })
}

fn logits(z: &Matrix, j: usize, peers: &[usize], tau: f64) -> Vec<f64> {
    peers
        .iter()
        .map(|&p| dot(z.row(j), z.row(p)) / tau)
        .collect()
}

/// Per-anchor loss on already-prepared features `z_eff`. Returns `None` for
/// the empty-positive condition, which the batch loss skips.
pub fn per_anchor_loss(
    j: usize,
    z_eff: &Matrix,
    pairs: &PairSets,
    weights: &[f64],
    tau: f64,
) -> Result<Option<f64>> {
    if j >= pairs.len() || z_eff.rows() != pairs.len() {
        return Err(ConrError::invalid(
            "anchor index or feature rows out of range",
        ));
    }
    if !pairs.anchor_mask[j] {
        return Err(ConrError::invalid(format!("example {j} is not an anchor")));
    }
    if weights.len() != pairs.negatives[j].len() {
        return Err(ConrError::DimensionMismatch {
            context: "per_anchor_loss weights",
            expected: pairs.negatives[j].len().to_string(),
            actual: weights.len().to_string(),
        });
    }
    if weights.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
        return Err(ConrError::invalid(
            "pushing weights must be finite and >= 0",
        ));
    }
    if !(tau > 0.0) {
        return Err(ConrError::invalid("temperature must be > 0"));
    }
    let pos = logits(z_eff, j, &pairs.positives[j], tau);
    let neg = logits(z_eff, j, &pairs.negatives[j], tau);
    Ok(anchor_term(&pos, &neg, weights).map(|t| t.value))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConrOutput {
    pub value: f64,
    /// Gradient of the batch regularizer w.r.t. the raw features.
    pub d_features: Matrix,
    pub per_anchor: Vec<(usize, f64)>,
    pub anchors_used: usize,
    pub skipped_empty_positive: usize,
}

/// Batch regularizer and its gradient w.r.t. the raw (pre-normalization)
/// features, flowing through both the anchor and the peer role of each row.
pub fn conr_loss(
    batch: &AugmentedBatch,
    pairs: &PairSets,
    weights: &[f64],
    cfg: &ConrConfig,
) -> Result<ConrOutput> {
    let n = batch.len();
    if pairs.len() != n || weights.len() != n || batch.features.rows() != n {
        return Err(ConrError::DimensionMismatch {
            context: "conr_loss",
            expected: format!("{n} views"),
            actual: format!(
                "pairs {}, weights {}, features {}",
                pairs.len(),
                weights.len(),
                batch.features.rows()
            ),
        });
    }
    cfg.validate()?;
    let (z, norms) = if cfg.normalize_features {
        normalize_rows(&batch.features)
    } else {
        (batch.features.clone(), Vec::new())
    };
    let mut dz = Matrix::zeros(n, z.cols());
    let mut total = 0.0;
    let mut per_anchor = Vec::new();
    let mut skipped = 0;
    let scale = 1.0 / n as f64;
    let tau = cfg.tau;

    for j in (0..n).filter(|&j| pairs.anchor_mask[j]) {
        let s = pushing_weights_for(j, pairs, &batch.labels, weights, cfg)?;
        let pos = &pairs.positives[j];
        let neg = &pairs.negatives[j];
        let Some(term) = anchor_term(&logits(&z, j, pos, tau), &logits(&z, j, neg, tau), &s) else {
            skipped += 1;
            continue;
        };
        total += term.value;
        per_anchor.push((j, term.value));

        let peers = pos
            .iter()
            .zip(&term.d_pos)
            .chain(neg.iter().zip(&term.d_neg));
        for (&p, &g) in peers {
            let g = g * scale / tau;
            if g == 0.0 {
                continue;
            }
            for c in 0..z.cols() {
                let zj = z.get(j, c);
                let zp = z.get(p, c);
                dz.data_mut()[j * z.cols() + c] += g * zp;
                if !cfg.stop_peer_gradient {
                    dz.data_mut()[p * z.cols() + c] += g * zj;
                }
            }
        }
    }

    let d_features = if cfg.normalize_features {
        normalize_backward(&z, &norms, &batch.features, &dz)
    } else {
        dz
    };
    Ok(ConrOutput {
        value: total * scale,
        d_features,
        anchors_used: per_anchor.len(),
        per_anchor,
        skipped_empty_positive: skipped,
    })
}

/// Regression loss and its gradient w.r.t. `predictions`.
pub fn regression_loss(
    predictions: &Matrix,
    targets: &Matrix,
    kind: RegressionKind,
) -> Result<(f64, Matrix)> {
    weighted_regression_loss(predictions, targets, None, kind)
}

/// Per-sample weighted regression loss. With `weights = None` every row has
/// weight 1. MAE uses the subgradient 0 at zero residual.
pub fn weighted_regression_loss(
    predictions: &Matrix,
    targets: &Matrix,
    weights: Option<&[f64]>,
    kind: RegressionKind,
) -> Result<(f64, Matrix)> {
    if predictions.shape() != targets.shape() {
        return Err(ConrError::DimensionMismatch {
            context: "regression_loss",
            expected: format!("{:?}", targets.shape()),
            actual: format!("{:?}", predictions.shape()),
        });
    }
    let (rows, cols) = predictions.shape();
    if rows == 0 || cols == 0 {
        return Err(ConrError::invalid("regression loss on empty input"));
    }
    if let Some(w) = weights {
        if w.len() != rows {
            return Err(ConrError::DimensionMismatch {
                context: "regression_loss weights",
                expected: rows.to_string(),
                actual: w.len().to_string(),
            });
        }
    }
    let weight = |r: usize| weights.map_or(1.0, |w| w[r]);
    let count = (rows * cols) as f64;
    let mut grad = Matrix::zeros(rows, cols);
    let value = match kind {
        RegressionKind::Mae => {
            let mut acc = 0.0;
            for r in 0..rows {
                let w = weight(r);
                for c in 0..cols {
                    let e = predictions.get(r, c) - targets.get(r, c);
                    acc += w * e.abs();
                    let sign = if e > 0.0 {
                        1.0
                    } else if e < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    grad.set(r, c, w * sign / count);
                }
            }
            acc / count
        }
        RegressionKind::Rmse => {
            let mut acc = 0.0;
            for r in 0..rows {
                for c in 0..cols {
                    let e = predictions.get(r, c) - targets.get(r, c);
                    acc += weight(r) * e * e;
                }
            }
            let rmse = (acc / count).sqrt();
            if rmse > 0.0 {
                for r in 0..rows {
                    let w = weight(r);
                    for c in 0..cols {
                        let e = predictions.get(r, c) - targets.get(r, c);
                        grad.set(r, c, w * e / (count * rmse));
                    }
                }
            }
            rmse
        }
    };
    Ok((value, grad))
}

/// `α·L_R + β·L_ConR`.
#[inline]
pub fn total_loss(regression: f64, conr: f64, alpha: f64, beta: f64) -> f64 {
    alpha * regression + beta * conr
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub regression_loss: f64,
    pub conr_loss: f64,
    pub total: f64,
    pub per_anchor: Vec<(usize, f64)>,
    pub anchors_used: usize,
    pub skipped_empty_positive: usize,
    /// Gradient of `β·L_ConR` w.r.t. the raw features.
    pub d_features: Matrix,
    /// Gradient of `α·L_R` w.r.t. the predictions.
    pub d_predictions: Matrix,
}

/// Inputs of [`objective`] beyond the batch itself.
pub struct ObjectiveInputs<'a> {
    pub predictions: &'a Matrix,
    pub targets: &'a Matrix,
    /// Density weight `w` of each view, used for pushing powers.
    pub view_weights: &'a [f64],
    /// Optional per-view weights on the regression term.
    pub regression_weights: Option<&'a [f64]>,
}

/// Pairs the batch, evaluates both terms and combines them.
pub fn objective(
    batch: &AugmentedBatch,
    inputs: &ObjectiveInputs<'_>,
    cfg: &ConrConfig,
) -> Result<(LossBreakdown, PairSets)> {
    let pairs = select_pairs_with(
        &batch.labels,
        &batch.predictions,
        &cfg.rule(),
        cfg.variant.pairing_mode(),
    )?;
    let conr = conr_loss(batch, &pairs, inputs.view_weights, cfg)?;
    let (reg, mut d_pred) = weighted_regression_loss(
        inputs.predictions,
        inputs.targets,
        inputs.regression_weights,
        cfg.regression_kind,
    )?;
    d_pred.scale(cfg.alpha);
    let mut d_features = conr.d_features;
    d_features.scale(cfg.beta);
    let breakdown = LossBreakdown {
        regression_loss: reg,
        conr_loss: conr.value,
        total: total_loss(reg, conr.value, cfg.alpha, cfg.beta),
        per_anchor: conr.per_anchor,
        anchors_used: conr.anchors_used,
        skipped_empty_positive: conr.skipped_empty_positive,
        d_features,
        d_predictions: d_pred,
    };
    Ok((breakdown, pairs))
}
