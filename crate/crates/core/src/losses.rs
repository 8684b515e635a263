//! Scalar objectives for the augmentor and the classifier, plus their
//! derivatives with respect to the quantities the trainer backpropagates.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// A length-`K` probability vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilities(pub Vec<f64>);

impl ClassProbabilities {
    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the bounded term in the augmentor loss.
    pub lambda: f64,
    /// Weight of the feature-consistency term in the classifier loss.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            gamma: 10.0,
        }
    }
}

/// Batch-mean loss terms for one training step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Cross entropy on the original sample.
    pub loss_p: f64,
    /// Cross entropy on the augmented sample.
    pub loss_p_prime: f64,
    pub rho: f64,
    /// Augmentation magnitude `L(P') - L(P)`.
    pub xi: f64,
    /// Upper bound `(rho - 1) L(P)`.
    pub xi_upper: f64,
    pub augmentor_loss: f64,
    pub classifier_loss: f64,
    pub feature_gap: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.loss_p,
            self.loss_p_prime,
            self.rho,
            self.xi,
            self.xi_upper,
            self.augmentor_loss,
            self.classifier_loss,
            self.feature_gap,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> ClassProbabilities {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ClassProbabilities(exps.into_iter().map(|e| e / sum).collect())
}

/// `-log(max(p_label, PROB_FLOOR))`.
pub fn cross_entropy(probs: &ClassProbabilities, label: usize) -> f64 {
    -probs.get(label).max(PROB_FLOOR).ln()
}

/// Cross entropy from logits together with its gradient. The gradient is
/// zero where the probability floor is active.
pub fn cross_entropy_with_grad(
    logits: ArrayView1<'_, f64>,
    label: usize,
) -> (f64, ClassProbabilities, Array1<f64>) {
    // ln_1p over the non-maximal terms keeps small losses accurate
    let (arg, max) =
        logits
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, z)| {
                if z > best.1 {
                    (i, z)
                } else {
                    best
                }
            });
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, &z)| (z - max).exp())
        .sum();
    let lse = max + rest.ln_1p();
    let log_p = logits[label] - lse;
    let probs = ClassProbabilities(logits.iter().map(|&z| (z - lse).exp()).collect());
    let floor = PROB_FLOOR.ln();
    if log_p < floor {
        return (-floor, probs, Array1::zeros(logits.len()));
    }
    let mut grad = Array1::from(probs.0.clone());
    grad[label] -= 1.0;
    (-log_p, probs, grad)
}

/// `exp(-(L(P') - L(P)))`.
pub fn naive_augmentor_loss(loss_p_prime: f64, loss_p: f64) -> f64 {
    (-(loss_p_prime - loss_p)).exp()
}

/// Derivative of [`naive_augmentor_loss`] with respect to `L(P')`.
pub fn naive_augmentor_loss_grad(loss_p_prime: f64, loss_p: f64) -> f64 {
    -naive_augmentor_loss(loss_p_prime, loss_p)
}

/// `max(1, exp(p_label))`, computed from the classifier's probabilities on
/// the original sample.
pub fn dynamic_rho(probs_on_p: &ClassProbabilities, label: usize) -> f64 {
    probs_on_p.get(label).exp().max(1.0)
}

/// `L(P') + lambda * |1 - exp(L(P') - rho * L(P))|`.
pub fn augmentor_loss(loss_p_prime: f64, loss_p: f64, rho: f64, weights: &LossWeights) -> f64 {
    loss_p_prime + weights.lambda * bounded_penalty(loss_p_prime, loss_p, rho)
}

/// The bounded term `|1 - exp(L(P') - rho * L(P))|` alone.
pub fn bounded_penalty(loss_p_prime: f64, loss_p: f64, rho: f64) -> f64 {
    (1.0 - (loss_p_prime - rho * loss_p).exp()).abs()
}

/// Derivative of [`augmentor_loss`] with respect to `L(P')`, holding `rho`
/// and `L(P)` constant. The kink at `L(P') = rho L(P)` takes subgradient 0
/// for the absolute-value term.
pub fn augmentor_loss_grad(loss_p_prime: f64, loss_p: f64, rho: f64, weights: &LossWeights) -> f64 {
    let u = loss_p_prime - rho * loss_p;
    let sign = if u > 0.0 {
        1.0
    } else if u < 0.0 {
        -1.0
    } else {
        0.0
    };
    1.0 + weights.lambda * sign * u.exp()
}

/// `L(P') + L(P) + gamma * ||F_g - F_g'||`.
pub fn classifier_loss(
    loss_p_prime: f64,
    loss_p: f64,
    feature_gap: f64,
    weights: &LossWeights,
) -> f64 {
    loss_p_prime + loss_p + weights.gamma * feature_gap
}

/// Euclidean distance between two feature vectors and its gradient with
/// respect to `a` (the gradient with respect to `b` is the negation). The
/// gradient at zero distance is zero.
pub fn feature_gap(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> (f64, Array1<f64>) {
    let diff = &a - &b;
    let norm = diff.dot(&diff).sqrt();
    if norm > 0.0 {
        (norm, diff / norm)
    } else {
        (0.0, Array1::zeros(a.len()))
    }
}

#[cfg(test)]
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0, 0.0]).0, vec![0.5, 0.5]);
        let p = softmax(&[1f64.ln(), 3f64.ln()]);
        assert_abs_diff_eq!(p.0[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(p.0[1], 0.75, epsilon = 1e-15);
        let a = softmax(&[0.3, -1.2, 2.5]);
        let b = softmax(&[100.3, 98.8, 102.5]);
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_extreme_logits_sum_to_one() {
        let p = softmax(&[700.0, -700.0, 0.0, 699.0]);
        assert!((p.0.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }

    #[test]
    fn cross_entropy_cases() {
        assert_eq!(cross_entropy(&ClassProbabilities(vec![1.0, 0.0]), 0), 0.0);
        assert_abs_diff_eq!(
            cross_entropy(&ClassProbabilities(vec![0.5, 0.5]), 1),
            0.693147,
            epsilon = 1e-6
        );
        assert_abs_diff_eq!(
            cross_entropy(&ClassProbabilities(vec![0.2, 0.3, 0.5]), 0),
            1.609438,
            epsilon = 1e-6
        );
        let floored = cross_entropy(&ClassProbabilities(vec![0.0, 1.0]), 0);
        assert_abs_diff_eq!(floored, -(1e-12f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_from_logits_agrees() {
        let z = array![0.4, -1.0, 2.0];
        let (l, p, g) = cross_entropy_with_grad(z.view(), 2);
        assert_abs_diff_eq!(l, cross_entropy(&softmax(&z.to_vec()), 2), epsilon = 1e-12);
        assert_abs_diff_eq!(p.0.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.sum(), 0.0, epsilon = 1e-12);
        let (l, _, g) = cross_entropy_with_grad(array![0.0, 80.0].view(), 0);
        assert_abs_diff_eq!(l, -(1e-12f64).ln(), epsilon = 1e-12);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn naive_loss_cases() {
        assert_eq!(naive_augmentor_loss(0.7, 0.7), 1.0);
        assert_abs_diff_eq!(
            naive_augmentor_loss(0.2 + 2f64.ln(), 0.2),
            0.5,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            naive_augmentor_loss(0.2 - 2f64.ln(), 0.2),
            2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn rho_cases() {
        let l = 0;
        assert_eq!(dynamic_rho(&ClassProbabilities(vec![0.0, 1.0]), l), 1.0);
        assert_abs_diff_eq!(
            dynamic_rho(&ClassProbabilities(vec![1.0, 0.0]), l),
            2.718282,
            epsilon = 1e-6
        );
        assert_abs_diff_eq!(
            dynamic_rho(&ClassProbabilities(vec![0.5, 0.5]), l),
            1.648721,
            epsilon = 1e-6
        );
    }

    #[test]
    fn augmentor_loss_cases() {
        let w = LossWeights::default();
        assert_eq!(augmentor_loss(1.5, 1.0, 1.5, &w), 1.5);
        // 1 + |1 - e^(1 - 0.5 * 1.648721)|, evaluated by hand: e^0.1756395 = 1.1920082
        assert_abs_diff_eq!(
            augmentor_loss(1.0, 0.5, 1.648721, &w),
            1.1920083,
            epsilon = 1e-6
        );
        let off = LossWeights { lambda: 0.0, ..w };
        assert_eq!(augmentor_loss(0.9, 0.1, 2.0, &off), 0.9);
    }

    #[test]
    fn augmentor_grad_subgradient_at_kink() {
        let w = LossWeights::default();
        assert_eq!(augmentor_loss_grad(1.5, 1.0, 1.5, &w), 1.0);
        let h = 1e-6;
        for &lp in &[0.3, 2.0] {
            let fd = (augmentor_loss(lp + h, 0.5, 1.2, &w) - augmentor_loss(lp - h, 0.5, 1.2, &w))
                / (2.0 * h);
            assert_abs_diff_eq!(fd, augmentor_loss_grad(lp, 0.5, 1.2, &w), epsilon = 1e-6);
        }
    }

    #[test]
    fn classifier_loss_cases() {
        let w = LossWeights::default();
        assert_eq!(classifier_loss(1.0, 0.5, 0.0, &w), 1.5);
        assert_abs_diff_eq!(classifier_loss(1.0, 0.5, 0.1, &w), 2.5, epsilon = 1e-12);
        let off = LossWeights { gamma: 0.0, ..w };
        assert_eq!(classifier_loss(1.0, 0.5, 3.0, &off), 1.5);
    }

    #[test]
    fn feature_gap_cases() {
        let (g, d) = feature_gap(array![3.0, 0.0].view(), array![0.0, 4.0].view());
        assert_eq!(g, 5.0);
        assert_eq!(d.to_vec(), vec![0.6, -0.8]);
        let (g, d) = feature_gap(array![1.0].view(), array![1.0].view());
        assert_eq!((g, d[0]), (0.0, 0.0));
    }
}
