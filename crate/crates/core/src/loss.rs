//! Classification losses and the dynamic multi-loss combination.
//!
//! Three per-sample losses over a C-class head output:
//! cross-entropy and the Cauchy-Schwarz divergence act on softmax
//! probabilities; the squared hinge acts on raw outputs with +-1 targets and
//! margin 1/2. The combined objective weights the three losses with one
//! dominant coefficient (0.98) that rotates across training trials while the
//! others regularize at 0.02. All gradients here are exact analytic
//! derivatives (finite-difference checked), taken with respect to the raw
//! head outputs.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Smallest probability fed to a logarithm.
const PROB_FLOOR: f64 = 1e-38;

/// Loss coefficients (ce, hinge, csd), one per head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub hinge: f64,
    pub csd: f64,
}

/// Identity of a single loss / head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    SquaredHinge,
    Csd,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "ce",
            LossKind::SquaredHinge => "hinge",
            LossKind::Csd => "csd",
        }
    }
}

const DOMINANT: f64 = 0.98;
const REGULARIZER: f64 = 0.02;

impl LossWeights {
    /// Coefficients for a trial: period-3 rotation of the dominant loss in
    /// head order (ce, hinge, csd), starting from ce.
    pub fn for_trial(trial_index: usize) -> LossWeights {
        match trial_index % 3 {
            0 => LossWeights { ce: DOMINANT, hinge: REGULARIZER, csd: REGULARIZER },
            1 => LossWeights { ce: REGULARIZER, hinge: DOMINANT, csd: REGULARIZER },
            _ => LossWeights { ce: REGULARIZER, hinge: REGULARIZER, csd: DOMINANT },
        }
    }

    /// Indicator weights selecting a single loss (used for single-loss
    /// baselines and reduction tests).
    pub fn indicator(kind: LossKind) -> LossWeights {
        match kind {
            LossKind::CrossEntropy => LossWeights { ce: 1.0, hinge: 0.0, csd: 0.0 },
            LossKind::SquaredHinge => LossWeights { ce: 0.0, hinge: 1.0, csd: 0.0 },
            LossKind::Csd => LossWeights { ce: 0.0, hinge: 0.0, csd: 1.0 },
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.ce, self.hinge, self.csd]
    }

    /// The loss with the largest coefficient (lowest head index on ties).
    pub fn dominant(&self) -> LossKind {
        let a = self.as_array();
        let mut best = 0;
        for i in 1..3 {
            if a[i] > a[best] {
                best = i;
            }
        }
        [LossKind::CrossEntropy, LossKind::SquaredHinge, LossKind::Csd][best]
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [("ce", self.ce), ("hinge", self.hinge), ("csd", self.csd)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Parameter(format!("loss weight {name}={v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Dominant loss for a given trial index.
pub fn dominant_loss_for_trial(trial_index: usize) -> LossKind {
    LossWeights::for_trial(trial_index).dominant()
}

/// Numerically stable softmax (max subtraction).
pub fn softmax<T: Real>(o: &[T]) -> Vec<T> {
    let max = o.iter().cloned().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = o.iter().map(|v| (*v - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |a, b| a + *b);
    exps.into_iter().map(|e| e / sum).collect()
}

fn clamped_ln<T: Real>(p: T) -> T {
    p.max(T::from_f64(PROB_FLOOR)).ln()
}

/// Cross-entropy of softmax probabilities against a one-hot target.
/// Returns the loss and its gradient with respect to the raw head output
/// (p - y).
pub fn cross_entropy<T: Real>(target: usize, p: &[T]) -> (T, Vec<T>) {
    let loss = -clamped_ln(p[target]);
    let grad = p
        .iter()
        .enumerate()
        .map(|(j, pj)| if j == target { *pj - T::one() } else { *pj })
        .collect();
    (loss, grad)
}

/// Squared hinge on raw outputs with signed targets (+1 at the true class,
/// -1 elsewhere) and margin 1/2:
/// loss = sum_j max(0, 1/2 - y_j o_j)^2, d/do_j = -2 y_j max(0, 1/2 - y_j o_j).
pub fn squared_hinge<T: Real>(target: usize, o: &[T]) -> (T, Vec<T>) {
    let half = T::from_f64(0.5);
    let two = T::from_f64(2.0);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(o.len());
    for (j, oj) in o.iter().enumerate() {
        let y = if j == target { T::one() } else { -T::one() };
        let violation = (half - y * *oj).max(T::zero());
        loss = loss + violation * violation;
        grad.push(-two * y * violation);
    }
    (loss, grad)
}

/// Cauchy-Schwarz divergence: cross-entropy plus log of the L2 norm of the
/// probability vector; equals -log cos(y, p) for one-hot y.
pub fn csd<T: Real>(target: usize, p: &[T]) -> (T, Vec<T>) {
    let (ce_loss, _) = cross_entropy(target, p);
    let norm_sq = p.iter().fold(T::zero(), |a, pj| a + *pj * *pj);
    let loss = ce_loss + T::from_f64(0.5) * norm_sq.ln();
    // d(log ||p||_2)/d o_j = p_j (p_j - ||p||_2^2) / ||p||_2^2
    let grad = p
        .iter()
        .enumerate()
        .map(|(j, pj)| {
            let y = if j == target { T::one() } else { T::zero() };
            (*pj - y) + *pj * (*pj - norm_sq) / norm_sq
        })
        .collect();
    (loss, grad)
}

/// Dynamic multi-loss over the three head outputs (ce-head, hinge-head,
/// csd-head). Each head receives only its own loss gradient, scaled by its
/// coefficient; the shared trunk sees all three through backprop.
pub fn dml<T: Real>(
    target: usize,
    heads: [&[T]; 3],
    weights: &LossWeights,
) -> Result<(T, [Vec<T>; 3])> {
    weights.validate()?;
    let p_ce = softmax(heads[0]);
    let p_csd = softmax(heads[2]);

    let (ce_loss, ce_grad) = cross_entropy(target, &p_ce);
    let (hinge_loss, hinge_grad) = squared_hinge(target, heads[1]);
    let (csd_loss, csd_grad) = csd(target, &p_csd);

    let [w1, w2, w3] = weights.as_array().map(T::from_f64);
    let loss = w1 * ce_loss + w2 * hinge_loss + w3 * csd_loss;
    let scale = |g: Vec<T>, w: T| -> Vec<T> { g.into_iter().map(|v| v * w).collect() };
    Ok((loss, [scale(ce_grad, w1), scale(hinge_grad, w2), scale(csd_grad, w3)]))
}

/// Batch-mean DML over (batch, classes) head outputs. Returns the mean loss
/// and per-head gradient tensors already scaled by 1/batch, ready for
/// backprop of the mean objective.
pub fn dml_batch<T: Real>(
    targets: &[usize],
    heads: [&Tensor<T>; 3],
    weights: &LossWeights,
) -> Result<(T, [Tensor<T>; 3])> {
    let classes = heads[0].shape()[1];
    let batch = targets.len();
    for (h, t) in heads.iter().enumerate() {
        if t.shape() != [batch, classes] {
            return Err(Error::Dimension(format!(
                "head {h} output shape {:?}, expected [{batch}, {classes}]",
                t.shape()
            )));
        }
    }
    for &t in targets {
        if t >= classes {
            return Err(Error::Data(format!("class index {t} out of range for {classes} classes")));
        }
    }

    let inv_batch = T::from_f64(1.0 / batch as f64);
    let mut total = T::zero();
    let mut grads =
        [Tensor::zeros(&[batch, classes]), Tensor::zeros(&[batch, classes]), Tensor::zeros(&[batch, classes])];
    for (bi, &target) in targets.iter().enumerate() {
        let rows: [&[T]; 3] = [
            &heads[0].data()[bi * classes..(bi + 1) * classes],
            &heads[1].data()[bi * classes..(bi + 1) * classes],
            &heads[2].data()[bi * classes..(bi + 1) * classes],
        ];
        let (loss, sample_grads) = dml(target, rows, weights)?;
        total = total + loss;
        for (h, g) in sample_grads.into_iter().enumerate() {
            let dst = &mut grads[h].data_mut()[bi * classes..(bi + 1) * classes];
            for (d, v) in dst.iter_mut().zip(g) {
                *d = v * inv_batch;
            }
        }
    }
    Ok((total * inv_batch, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_grad(loss_at: impl Fn(&[f64]) -> f64, o: &[f64], h: f64) -> Vec<f64> {
        (0..o.len())
            .map(|j| {
                let mut up = o.to_vec();
                up[j] += h;
                let mut down = o.to_vec();
                down[j] -= h;
                (loss_at(&up) - loss_at(&down)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            let rel = (x - y).abs() / f64::max(1.0, x.abs());
            assert!(rel < tol, "{x} vs {y} (rel {rel})");
        }
    }

    #[test]
    fn softmax_symmetry_and_ln2() {
        let p = softmax(&[0.0f64, 0.0, 0.0]);
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let p = softmax(&[2.0f64.ln(), 0.0, 0.0]);
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[1] - 0.25).abs() < 1e-12);
        assert!((p[2] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let p = softmax(&[1000.0f32, 999.0, -1000.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        let sum: f32 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_known_values() {
        let (loss, _) = cross_entropy(0, &[1.0f64, 0.0, 0.0]);
        assert!(loss.abs() < 1e-12);
        let (loss, _) = cross_entropy(2, &[0.25f64; 4]);
        assert!((loss - 4.0f64.ln()) < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let o = [0.3f64, -1.2, 0.7, 0.05];
        let target = 2;
        let (_, grad) = cross_entropy(target, &softmax(&o));
        let numeric = fd_grad(|o| cross_entropy(target, &softmax(o)).0, &o, 1e-6);
        assert_close(&grad, &numeric, 1e-4);
    }

    #[test]
    fn squared_hinge_cases_from_direct_evaluation() {
        // Margin satisfied: y=+1, o=0.7 contributes nothing.
        let (loss, grad) = squared_hinge(0, &[0.7f64]);
        assert_eq!(loss, 0.0);
        assert_eq!(grad[0], 0.0);
        // y=+1, o=0: max(0, 1/2)^2 = 0.25.
        let (loss, _) = squared_hinge(0, &[0.0f64]);
        assert!((loss - 0.25).abs() < 1e-12);
        // y=-1, o=0.5: (1/2 + 0.5)^2 = 1, gradient +2.
        let (loss, grad) = squared_hinge(0, &[5.0f64, 0.5]);
        assert!((loss - 1.0).abs() < 1e-12);
        assert!((grad[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn squared_hinge_gradient_matches_finite_differences() {
        let o = [0.3f64, -0.2, 0.45, 0.9];
        let (_, grad) = squared_hinge(1, &o);
        let numeric = fd_grad(|o| squared_hinge(1, o).0, &o, 1e-6);
        assert_close(&grad, &numeric, 1e-4);
    }

    #[test]
    fn csd_uniform_case_equals_ln2_via_both_forms() {
        // C=4 uniform: CE = ln 4, ||p||_2 = 1/2, so loss = ln 4 - ln 2 = ln 2.
        // Geometric form: -log(cos(y,p)) = -log((1/4)/(1 * 1/2)) = ln 2.
        let p = [0.25f64; 4];
        let (loss, _) = csd(1, &p);
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);

        let norm: f64 = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cosine = p[1] / norm; // |y|=1 for one-hot y
        assert!((loss - (-cosine.ln())).abs() < 1e-12);
    }

    #[test]
    fn csd_perfect_prediction_is_zero() {
        let (loss, _) = csd(0, &[1.0f64, 0.0, 0.0]);
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn csd_gradient_matches_finite_differences() {
        let o = [0.9f64, -0.4, 0.1, 1.3, -2.0];
        let target = 3;
        let (_, grad) = csd(target, &softmax(&o));
        let numeric = fd_grad(|o| csd(target, &softmax(o)).0, &o, 1e-6);
        assert_close(&grad, &numeric, 1e-4);
    }

    #[test]
    fn dml_indicator_reduces_to_each_single_loss() {
        let o1 = [0.2f64, -0.3, 0.8];
        let o2 = [0.6f64, 0.1, -0.9];
        let o3 = [-0.1f64, 0.4, 0.2];
        let heads = [&o1[..], &o2[..], &o3[..]];

        let (l, g) = dml(1, heads, &LossWeights::indicator(LossKind::CrossEntropy)).unwrap();
        assert_eq!(l, cross_entropy(1, &softmax(&o1)).0);
        assert!(g[1].iter().all(|v| *v == 0.0));
        assert!(g[2].iter().all(|v| *v == 0.0));

        let (l, g) = dml(1, heads, &LossWeights::indicator(LossKind::SquaredHinge)).unwrap();
        assert_eq!(l, squared_hinge(1, &o2).0);
        assert!(g[0].iter().all(|v| *v == 0.0));

        let (l, _) = dml(1, heads, &LossWeights::indicator(LossKind::Csd)).unwrap();
        assert_eq!(l, csd(1, &softmax(&o3)).0);
    }

    #[test]
    fn dml_equals_weighted_sum_bit_for_bit() {
        let o1 = [0.2f64, -0.3, 0.8];
        let o2 = [0.6f64, 0.1, -0.9];
        let o3 = [-0.1f64, 0.4, 0.2];
        let w = LossWeights::for_trial(0);
        let (loss, _) = dml(2, [&o1, &o2, &o3], &w).unwrap();
        let expected = w.ce * cross_entropy(2, &softmax(&o1)).0
            + w.hinge * squared_hinge(2, &o2).0
            + w.csd * csd(2, &softmax(&o3)).0;
        assert_eq!(loss, expected);
    }

    #[test]
    fn dml_rejects_invalid_weights() {
        let o = [0.0f64, 1.0];
        let bad = LossWeights { ce: -0.5, hinge: 0.0, csd: 0.0 };
        assert!(dml(0, [&o, &o, &o], &bad).is_err());
        let nan = LossWeights { ce: f64::NAN, hinge: 0.0, csd: 0.0 };
        assert!(dml(0, [&o, &o, &o], &nan).is_err());
    }

    #[test]
    fn trial_rotation_has_period_three() {
        assert_eq!(
            LossWeights::for_trial(0),
            LossWeights { ce: 0.98, hinge: 0.02, csd: 0.02 }
        );
        assert_eq!(
            LossWeights::for_trial(2),
            LossWeights { ce: 0.02, hinge: 0.02, csd: 0.98 }
        );
        assert_eq!(LossWeights::for_trial(5), LossWeights::for_trial(2));
        assert_eq!(dominant_loss_for_trial(1), LossKind::SquaredHinge);
        assert_eq!(dominant_loss_for_trial(3), LossKind::CrossEntropy);
    }

    #[test]
    fn dml_batch_rejects_out_of_range_class() {
        let h = Tensor::from_vec(&[1, 2], vec![0.0f64, 0.0]);
        let err = dml_batch(&[5], [&h, &h, &h], &LossWeights::for_trial(0)).unwrap_err();
        assert!(matches!(err, crate::error::Error::Data(_)));
    }

    #[test]
    fn dml_batch_is_mean_of_per_sample_losses() {
        let h1 = Tensor::from_vec(&[2, 2], vec![0.5f64, -0.5, 1.0, 0.0]);
        let h2 = Tensor::from_vec(&[2, 2], vec![0.1f64, 0.2, -0.3, 0.4]);
        let h3 = Tensor::from_vec(&[2, 2], vec![0.0f64, 0.0, 0.7, -0.7]);
        let w = LossWeights::for_trial(1);
        let (mean, grads) = dml_batch(&[0, 1], [&h1, &h2, &h3], &w).unwrap();
        let (l0, _) = dml(0, [&h1.data()[..2], &h2.data()[..2], &h3.data()[..2]], &w).unwrap();
        let (l1, _) = dml(1, [&h1.data()[2..], &h2.data()[2..], &h3.data()[2..]], &w).unwrap();
        assert!((mean - (l0 + l1) / 2.0).abs() < 1e-15);
        assert_eq!(grads[0].shape(), &[2, 2]);
    }
}
