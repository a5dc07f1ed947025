//! Loss heads over the final layer's M outputs.
//!
//! Three heads: softmax negative log-likelihood for single-label training,
//! sigmoid cross-entropy against length-M probability vectors for the weak
//! multi-label regime, and the carving loss which is the same cross-entropy
//! evaluated against generated pseudo-label vectors. All losses are batch
//! means, so gradient magnitudes do not depend on batch size.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A length-M vector of per-class target probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelProbVector {
    probs: Vec<f64>,
}

impl LabelProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        for &p in &probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::TargetOutOfRange { value: p });
            }
        }
        Ok(LabelProbVector { probs })
    }

    /// Weakly supervised initialization: `positive` for the observed class,
    /// `negative` everywhere else (defaults 0.95 / 0.05).
    pub fn weak(classes: usize, observed: usize, positive: f64, negative: f64) -> Result<Self> {
        if observed >= classes {
            return Err(Error::LabelOutOfRange {
                label: observed,
                classes,
            });
        }
        let mut probs = vec![negative; classes];
        probs[observed] = positive;
        LabelProbVector::new(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Stacks target vectors into a [B, M] tensor for the loss functions.
pub fn stack_targets(targets: &[LabelProbVector]) -> Result<Tensor> {
    if targets.is_empty() {
        return Err(Error::InvalidInput("empty target batch".into()));
    }
    let m = targets[0].len();
    let mut data = Vec::with_capacity(targets.len() * m);
    for t in targets {
        if t.len() != m {
            return Err(Error::ShapeMismatch {
                op: "stack_targets",
                lhs: vec![m],
                rhs: vec![t.len()],
            });
        }
        data.extend_from_slice(t.probs());
    }
    Tensor::from_vec(&[targets.len(), m], data)
}

fn expect_2d(logits: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if logits.rank() != 2 {
        return Err(Error::BadShape {
            op,
            expected: "a [batch, classes] tensor",
            shape: logits.shape().to_vec(),
        });
    }
    Ok((logits.shape()[0], logits.shape()[1]))
}

/// Row-wise softmax with max-subtraction, so huge logits cannot overflow.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (b, m) = expect_2d(logits, "softmax")?;
    let mut out = vec![0.0; b * m];
    for r in 0..b {
        let row = &logits.data()[r * m..(r + 1) * m];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &l) in row.iter().enumerate() {
            let e = (l - max).exp();
            out[r * m + j] = e;
            sum += e;
        }
        for v in &mut out[r * m..(r + 1) * m] {
            *v /= sum;
        }
    }
    let t = Tensor::from_vec(&[b, m], out)?;
    t.debug_check_finite("softmax");
    Ok(t)
}

/// Negative log-likelihood of the observed class under the softmax.
///
/// Loss is the batch mean of -log p(y_r); the returned gradient with respect
/// to the logits is (softmax - onehot) / B.
pub fn softmax_nll(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, m) = expect_2d(logits, "softmax_nll")?;
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            op: "softmax_nll",
            lhs: vec![b],
            rhs: vec![labels.len()],
        });
    }
    for &y in labels {
        if y >= m {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: m,
            });
        }
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; b * m];
    let inv_b = 1.0 / b as f64;
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits.data()[r * m..(r + 1) * m];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &l in row {
            sum += (l - max).exp();
        }
        let log_sum = sum.ln() + max;
        loss -= row[y] - log_sum;
        for (j, &l) in row.iter().enumerate() {
            let p = (l - log_sum).exp();
            grad[r * m + j] = (p - if j == y { 1.0 } else { 0.0 }) * inv_b;
        }
    }
    let grad = Tensor::from_vec(&[b, m], grad)?;
    grad.debug_check_finite("softmax_nll");
    Ok((loss * inv_b, grad))
}

#[inline]
fn sigmoid(l: f64) -> f64 {
    if l >= 0.0 {
        1.0 / (1.0 + (-l).exp())
    } else {
        let e = l.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid cross-entropy against per-class target probabilities.
///
/// Per element the numerically stable form max(l,0) - l*p + ln(1 + e^-|l|)
/// is used; the loss sums over classes and averages over the batch. The
/// gradient with respect to the logits is (sigmoid(l) - p) / B.
pub fn sigmoid_ce(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    let (b, m) = expect_2d(logits, "sigmoid_ce")?;
    if targets.shape() != logits.shape() {
        return Err(Error::ShapeMismatch {
            op: "sigmoid_ce",
            lhs: logits.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; b * m];
    let inv_b = 1.0 / b as f64;
    for (i, (&l, &p)) in logits.data().iter().zip(targets.data().iter()).enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::TargetOutOfRange { value: p });
        }
        loss += l.max(0.0) - l * p + (-l.abs()).exp().ln_1p();
        grad[i] = (sigmoid(l) - p) * inv_b;
    }
    let grad = Tensor::from_vec(&[b, m], grad)?;
    grad.debug_check_finite("sigmoid_ce");
    Ok((loss * inv_b, grad))
}

/// The deep-carving objective: sigmoid cross-entropy where the targets are
/// the pseudo-label probability vectors of the current carving iteration.
/// Functionally identical to [`sigmoid_ce`], by construction.
pub fn carving_loss(logits: &Tensor, pseudo: &Tensor) -> Result<(f64, Tensor)> {
    sigmoid_ce(logits, pseudo)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn logits(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let s = softmax(&logits(&[1, 2], vec![0.0, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax(&logits(&[1, 2], vec![1000.0, 1000.0])).unwrap();
        assert!(s.is_finite());
        assert!((s.at(&[0, 0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_hand_value() {
        // [ln 2, ln 1] -> [2/3, 1/3]
        let s = softmax(&logits(&[1, 2], vec![LN2, 0.0])).unwrap();
        assert!((s.at(&[0, 0]) - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.at(&[0, 1]) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn nll_uniform_case() {
        let (loss, grad) = softmax_nll(&logits(&[1, 2], vec![0.0, 0.0]), &[0]).unwrap();
        assert!((loss - LN2).abs() < 1e-12);
        assert!((grad.at(&[0, 0]) - (0.5 - 1.0)).abs() < 1e-12);
        assert!((grad.at(&[0, 1]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn nll_confident_case() {
        // -ln(e^20 / (e^20 + 1)) = ln(1 + e^-20) ~= 2.061e-9
        let (loss, _) = softmax_nll(&logits(&[1, 2], vec![20.0, 0.0]), &[0]).unwrap();
        let expected = (1.0 + (-20.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-15);
        assert!((loss - 2.061e-9).abs() < 1e-11);
    }

    #[test]
    fn nll_batch_mean_of_identical_rows() {
        let one = softmax_nll(&logits(&[1, 3], vec![0.3, -0.2, 1.1]), &[2]).unwrap();
        let two = softmax_nll(
            &logits(&[2, 3], vec![0.3, -0.2, 1.1, 0.3, -0.2, 1.1]),
            &[2, 2],
        )
        .unwrap();
        assert!((one.0 - two.0).abs() < 1e-12);
    }

    #[test]
    fn nll_rejects_out_of_range_label() {
        assert!(matches!(
            softmax_nll(&logits(&[1, 2], vec![0.0, 0.0]), &[2]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn sigmoid_ce_maximum_entropy_point() {
        let t = logits(&[1, 1], vec![0.5]);
        let (loss, _) = sigmoid_ce(&logits(&[1, 1], vec![0.0]), &t).unwrap();
        assert!((loss - LN2).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_ce_weak_target_at_zero_logit() {
        // -(0.95 ln 0.5 + 0.05 ln 0.5) = ln 2, gradient 0.5 - 0.95 = -0.45
        let t = logits(&[1, 1], vec![0.95]);
        let (loss, grad) = sigmoid_ce(&logits(&[1, 1], vec![0.0]), &t).unwrap();
        assert!((loss - LN2).abs() < 1e-12);
        assert!((grad.at(&[0, 0]) + 0.45).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_ce_sums_over_classes() {
        // all-0.5 targets at zero logits: ln 2 per class
        let m = 4;
        let t = Tensor::fill(&[1, m], 0.5).unwrap();
        let (loss, _) = sigmoid_ce(&Tensor::zeros(&[1, m]).unwrap(), &t).unwrap();
        assert!((loss - m as f64 * LN2).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_ce_rejects_bad_target() {
        let t = logits(&[1, 1], vec![1.2]);
        assert!(matches!(
            sigmoid_ce(&logits(&[1, 1], vec![0.0]), &t),
            Err(Error::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn carving_loss_is_sigmoid_ce() {
        let l = logits(&[2, 3], vec![0.3, -1.2, 0.8, 2.0, 0.0, -0.5]);
        let p = logits(&[2, 3], vec![0.95, 0.05, 0.7, 0.05, 0.95, 1.0]);
        let a = carving_loss(&l, &p).unwrap();
        let b = sigmoid_ce(&l, &p).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn weak_vector_layout() {
        let v = LabelProbVector::weak(4, 2, 0.95, 0.05).unwrap();
        assert_eq!(v.probs(), &[0.05, 0.05, 0.95, 0.05]);
        assert!(LabelProbVector::weak(4, 4, 0.95, 0.05).is_err());
    }

    #[test]
    fn losses_match_finite_differences() {
        // spot FD check here; the exhaustive sweep lives in the acceptance suite
        let mut rng = crate::rng::Rng::from_seed(17);
        let l = Tensor::randn(&[5, 4], 1.0, &mut rng).unwrap();
        let t = Tensor::from_vec(
            &[5, 4],
            (0..20).map(|_| rng.next_f64()).collect::<Vec<_>>(),
        )
        .unwrap();
        let labels: Vec<usize> = (0..5).map(|_| rng.below(4)).collect();
        let h = 1e-6;

        let (_, g) = sigmoid_ce(&l, &t).unwrap();
        for i in 0..l.len() {
            let mut up = l.data().to_vec();
            let mut dn = up.clone();
            up[i] += h;
            dn[i] -= h;
            let lp = sigmoid_ce(&Tensor::from_vec(&[5, 4], up).unwrap(), &t).unwrap().0;
            let lm = sigmoid_ce(&Tensor::from_vec(&[5, 4], dn).unwrap(), &t).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }

        let (_, g) = softmax_nll(&l, &labels).unwrap();
        for i in 0..l.len() {
            let mut up = l.data().to_vec();
            let mut dn = up.clone();
            up[i] += h;
            dn[i] -= h;
            let lp = softmax_nll(&Tensor::from_vec(&[5, 4], up).unwrap(), &labels)
                .unwrap()
                .0;
            let lm = softmax_nll(&Tensor::from_vec(&[5, 4], dn).unwrap(), &labels)
                .unwrap()
                .0;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }
}
