//! Positive/negative pair selection and anchor selection over an augmented
//! batch.
//!
//! For `i ≠ j`: similar labels make a positive pair; dissimilar labels with
//! similar predictions make a negative pair; anything else is unpaired. An
//! example with at least one negative is an anchor.

use serde::{Deserialize, Serialize};

use crate::error::{ConrError, Result};
use crate::label::{label_distance, Label, SimilarityRule};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingMode {
    /// Negatives need dissimilar labels and similar predictions.
    #[default]
    Confusion,
    /// Negatives are all label-dissimilar examples; predictions are ignored.
    LabelOnly,
}

/// Two augmented views per source example, with features and predictions
/// from the same forward pass.
#[derive(Debug, Clone)]
pub struct AugmentedBatch {
    pub features: Matrix,
    pub labels: Vec<Label>,
    pub predictions: Vec<Label>,
    /// Source example of each view.
    pub origin: Vec<usize>,
}

impl AugmentedBatch {
    pub fn new(
        features: Matrix,
        labels: Vec<Label>,
        predictions: Vec<Label>,
        origin: Vec<usize>,
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n || predictions.len() != n || origin.len() != n {
            return Err(ConrError::DimensionMismatch {
                context: "AugmentedBatch lengths",
                expected: n.to_string(),
                actual: format!(
                    "labels {}, predictions {}, origin {}",
                    labels.len(),
                    predictions.len(),
                    origin.len()
                ),
            });
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if origin[i] == origin[j] && labels[i] != labels[j] {
                    return Err(ConrError::invalid(format!(
                        "views {i} and {j} share source {} but carry different labels",
                        origin[i]
                    )));
                }
            }
        }
        Ok(Self {
            features,
            labels,
            predictions,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSets {
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
    pub anchor_mask: Vec<bool>,
}

impl PairSets {
    pub fn len(&self) -> usize {
        self.anchor_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor_mask.is_empty()
    }

    pub fn anchor_count(&self) -> usize {
        self.anchor_mask.iter().filter(|&&a| a).count()
    }

    /// Per-anchor adjacency lists for fixtures and debugging.
    pub fn debug_json(&self) -> serde_json::Value {
        let anchors: Vec<_> = (0..self.len())
            .filter(|&j| self.anchor_mask[j])
            .map(|j| {
                serde_json::json!({
                    "index": j,
                    "positives": self.positives[j],
                    "negatives": self.negatives[j],
                })
            })
            .collect();
        serde_json::json!({ "size": self.len(), "anchors": anchors })
    }
}

pub fn anchor_count(pairs: &PairSets) -> usize {
    pairs.anchor_count()
}

pub fn select_pairs(
    labels: &[Label],
    predictions: &[Label],
    rule: &SimilarityRule,
) -> Result<PairSets> {
    select_pairs_with(labels, predictions, rule, PairingMode::Confusion)
}

pub fn select_pairs_with(
    labels: &[Label],
    predictions: &[Label],
    rule: &SimilarityRule,
    mode: PairingMode,
) -> Result<PairSets> {
    let n = labels.len();
    if predictions.len() != n {
        return Err(ConrError::DimensionMismatch {
            context: "select_pairs",
            expected: format!("{n} predictions"),
            actual: predictions.len().to_string(),
        });
    }
    if n == 0 {
        return Err(ConrError::invalid(
            "select_pairs needs at least one example",
        ));
    }
    let threshold = rule.threshold();
    let mut positives = vec![Vec::new(); n];
    let mut negatives = vec![Vec::new(); n];
    // Both relations are symmetric, so each unordered pair is decided once.
    for i in 0..n {
        for j in (i + 1)..n {
            let label_close = label_distance(&labels[i], &labels[j], rule.metric)? < threshold;
            let relation = if label_close {
                &mut positives
            } else {
                let pred_close = match mode {
                    PairingMode::Confusion => {
                        label_distance(&predictions[i], &predictions[j], rule.metric)? < threshold
                    }
                    PairingMode::LabelOnly => true,
                };
                if !pred_close {
                    continue;
                }
                &mut negatives
            };
            relation[i].push(j);
            relation[j].push(i);
        }
    }
    // j-ordered pushes leave every list sorted except entries < i appended
    // after entries > i; restore index order.
    for list in positives.iter_mut().chain(negatives.iter_mut()) {
        list.sort_unstable();
    }
    let anchor_mask = negatives.iter().map(|q| !q.is_empty()).collect();
    Ok(PairSets {
        positives,
        negatives,
        anchor_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::LabelMetric;

    fn scalars(values: &[f64]) -> Vec<Label> {
        values.iter().map(|&v| Label::Scalar(v)).collect()
    }

    fn rule(omega: f64) -> SimilarityRule {
        SimilarityRule::new(omega, LabelMetric::AbsoluteDifference).unwrap()
    }

    #[test]
    fn four_example_enumeration() {
        let p = select_pairs(
            &scalars(&[20.0, 20.0, 21.0, 80.0]),
            &scalars(&[20.0, 21.0, 21.0, 20.0]),
            &rule(1.0),
        )
        .unwrap();
        assert_eq!(p.positives[0], vec![1]);
        assert_eq!(p.negatives[0], vec![3]);
        assert!(!p.positives[0].contains(&2) && !p.negatives[0].contains(&2));
        // Views 1 and 2 differ by exactly 1/ω in label but share a prediction.
        assert_eq!(p.negatives[1], vec![2]);
        assert_eq!(p.anchor_mask, vec![true, true, true, true]);
        assert_eq!(anchor_count(&p), 4);
    }

    #[test]
    fn all_similar_labels_give_no_anchors() {
        let p = select_pairs(
            &scalars(&[5.0, 5.2, 5.4, 5.6]),
            &scalars(&[0.0, 50.0, 0.0, 50.0]),
            &rule(1.0),
        )
        .unwrap();
        for j in 0..4 {
            assert_eq!(p.positives[j].len(), 3);
            assert!(p.negatives[j].is_empty());
        }
        assert_eq!(p.anchor_count(), 0);
    }

    #[test]
    fn exact_predictions_give_no_negatives() {
        let y = scalars(&[1.0, 4.0, 9.0, 9.5, 30.0]);
        let p = select_pairs(&y, &y, &rule(1.0)).unwrap();
        assert!(p.negatives.iter().all(Vec::is_empty));
    }

    #[test]
    fn all_confused_gives_every_anchor() {
        let p = select_pairs(
            &scalars(&[0.0, 10.0, 20.0, 30.0]),
            &scalars(&[5.0; 4]),
            &rule(1.0),
        )
        .unwrap();
        assert_eq!(p.anchor_count(), 4);
    }

    #[test]
    fn label_only_mode_ignores_predictions() {
        let p = select_pairs_with(
            &scalars(&[0.0, 10.0]),
            &scalars(&[0.0, 10.0]),
            &rule(1.0),
            PairingMode::LabelOnly,
        )
        .unwrap();
        assert_eq!(p.negatives, vec![vec![1], vec![0]]);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(select_pairs(&scalars(&[1.0, 2.0]), &scalars(&[1.0]), &rule(1.0)).is_err());
    }

    #[test]
    fn batch_rejects_views_with_different_labels() {
        let r = AugmentedBatch::new(
            Matrix::zeros(2, 1),
            scalars(&[1.0, 2.0]),
            scalars(&[1.0, 2.0]),
            vec![0, 0],
        );
        assert!(r.is_err());
    }

    #[test]
    fn debug_dump_lists_anchors_only() {
        let p = select_pairs(
            &scalars(&[20.0, 20.0, 21.0, 80.0]),
            &scalars(&[20.0, 21.0, 21.0, 20.0]),
            &rule(1.0),
        )
        .unwrap();
        let v = p.debug_json();
        assert_eq!(v["anchors"].as_array().unwrap().len(), 4);
        assert_eq!(v["anchors"][0]["negatives"], serde_json::json!([3]));
    }
}
