//! Per-path relation scores, max pooling over paths, thresholding and the bag loss.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, ParamStore, Tape, Var};
use crate::corpus::RelationVocabulary;
use crate::nn::Linear;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    /// Positive scores enter the second term negated, so training lifts them above θ.
    #[default]
    Threshold,
    /// Both terms sum `exp(score)`.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub theta: f64,
    pub loss: LossVariant,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { theta: 0.0, loss: LossVariant::Threshold }
    }
}

/// Two affine layers with a ReLU between, `d → d → |R|`.
#[derive(Debug, Clone, Copy)]
pub struct Classifier {
    pub hidden: Linear,
    pub output: Linear,
}

impl Classifier {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, dim: usize, relations: usize) -> Self {
        Classifier {
            hidden: Linear::new(store, rng, "classifier.hidden", dim, dim),
            output: Linear::new(store, rng, "classifier.output", dim, relations),
        }
    }

    /// `paths × |R|` scores.
    pub fn forward(&self, t: &mut Tape, reps: Var) -> Var {
        let h = self.hidden.forward(t, reps);
        let h = t.relu(h);
        self.output.forward(t, h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagScores {
    pub bag_id: String,
    pub per_path: Vec<Vec<f64>>,
    pub pooled: Vec<f64>,
    /// Empty means NA.
    pub predicted: BTreeSet<String>,
    /// Digest of the informative contexts these scores were computed from.
    pub input_digest: String,
}

pub fn max_pool(per_path: &[Vec<f64>]) -> Vec<f64> {
    let width = per_path.first().map_or(0, Vec::len);
    (0..width).map(|r| per_path.iter().map(|row| row[r]).fold(f64::NEG_INFINITY, f64::max)).collect()
}

pub fn predict(pooled: &[f64], theta: f64, vocab: &RelationVocabulary) -> BTreeSet<String> {
    pooled.iter().enumerate().filter(|(_, s)| **s > theta).map(|(r, _)| vocab.label(r).to_string()).collect()
}

pub fn score_bag(
    bag_id: &str,
    per_path: Vec<Vec<f64>>,
    theta: f64,
    vocab: &RelationVocabulary,
    input_digest: String,
) -> BagScores {
    let pooled = max_pool(&per_path);
    let predicted = predict(&pooled, theta, vocab);
    BagScores { bag_id: bag_id.to_string(), per_path, pooled, predicted, input_digest }
}

/// `ln Σ exp(x)` and the softmax weights of its terms.
fn log_sum_exp(xs: &[f64]) -> (f64, Vec<f64>) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    (m + s.ln(), e.into_iter().map(|x| x / s).collect())
}

/// Bag loss and its gradient with respect to `pooled`. `gold[r]` marks positive classes.
pub fn bag_loss_with_grad(pooled: &[f64], gold: &[bool], theta: f64, variant: LossVariant) -> (f64, Vec<f64>) {
    debug_assert_eq!(pooled.len(), gold.len());
    let mut grad = vec![0.0; pooled.len()];

    let neg: Vec<usize> = (0..pooled.len()).filter(|&r| !gold[r]).collect();
    let mut terms = vec![theta];
    terms.extend(neg.iter().map(|&r| pooled[r]));
    let (first, w) = log_sum_exp(&terms);
    for (k, &r) in neg.iter().enumerate() {
        grad[r] += w[k + 1];
    }

    let pos: Vec<usize> = (0..pooled.len()).filter(|&r| gold[r]).collect();
    let sign = match variant {
        LossVariant::Threshold => -1.0,
        LossVariant::Literal => 1.0,
    };
    let mut terms = vec![-theta];
    terms.extend(pos.iter().map(|&r| sign * pooled[r]));
    let (second, w) = log_sum_exp(&terms);
    for (k, &r) in pos.iter().enumerate() {
        grad[r] += sign * w[k + 1];
    }
    (first + second, grad)
}

pub fn bag_loss(pooled: &[f64], gold: &[bool], theta: f64, variant: LossVariant) -> f64 {
    bag_loss_with_grad(pooled, gold, theta, variant).0
}

/// Bag loss recorded on the tape; `pooled` is `1×|R|`.
pub fn loss_on_tape(t: &mut Tape, pooled: Var, gold: &[bool], theta: f64, variant: LossVariant) -> Var {
    let values = t.value(pooled).row(0).to_vec();
    let (loss, grad) = bag_loss_with_grad(&values, gold, theta, variant);
    let dx = Mat::from_shape_vec((1, grad.len()), grad).expect("row vector");
    t.scalar(pooled, loss, dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_case() {
        let l = bag_loss(&[0.0, 0.0], &[true, false], 0.0, LossVariant::Threshold);
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn na_bag_reduces() {
        let y = [0.3, -1.2, 2.0];
        let l = bag_loss(&y, &[false; 3], 0.5, LossVariant::Threshold);
        let want = (0.5f64.exp() + y.iter().map(|v| v.exp()).sum::<f64>()).ln() - 0.5;
        assert!((l - want).abs() < 1e-12);
    }

    #[test]
    fn large_scores_stay_finite() {
        let (l, g) = bag_loss_with_grad(&[900.0, -900.0], &[false, true], 0.0, LossVariant::Threshold);
        assert!((l - 1800.0).abs() < 1e-9);
        assert!(g.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn sign_convention() {
        let gold = [true, false];
        let base = bag_loss(&[0.1, 0.1], &gold, 0.0, LossVariant::Threshold);
        assert!(bag_loss(&[0.5, 0.1], &gold, 0.0, LossVariant::Threshold) < base);
        assert!(bag_loss(&[0.1, 0.5], &gold, 0.0, LossVariant::Threshold) > base);
        assert!(bag_loss(&[0.5, 0.1], &gold, 0.0, LossVariant::Literal) > base);
    }

    #[test]
    fn pooling_and_threshold() {
        let vocab = RelationVocabulary::new(vec!["a".into(), "b".into()]).unwrap();
        let s = score_bag("x", vec![vec![-1.0, 0.2], vec![0.5, -3.0]], 0.0, &vocab, String::new());
        assert_eq!(s.pooled, vec![0.5, 0.2]);
        assert_eq!(s.predicted.len(), 2);
        let s = score_bag("x", vec![vec![-1.0, 0.0]], 0.0, &vocab, String::new());
        assert!(s.predicted.is_empty());
    }
}
