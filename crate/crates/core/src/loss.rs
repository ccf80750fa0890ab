//! Loss terms: class-weighted softmax cross entropy over probability maps,
//! the combined two-round loss, and class-weight computation.
//!
//! Both rounds are weighted with the same class weights.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, TensorId};

/// Per-class positive multipliers for the cross-entropy loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    w: Vec<f64>,
}

impl ClassWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::data("class weights must not be empty"));
        }
        if let Some(bad) = w.iter().find(|v| !v.is_finite() || **v <= 0.0) {
            return Err(Error::data(format!(
                "class weights must be finite and > 0, got {bad}"
            )));
        }
        Ok(ClassWeights { w })
    }

    pub fn uniform(c: usize) -> Self {
        ClassWeights { w: vec![1.0; c] }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.w
    }

    pub fn as_reals<R: Real>(&self) -> Vec<R> {
        self.w.iter().map(|&v| R::from_f64(v)).collect()
    }
}

/// Inverse-frequency class weights, mean-normalized so perfectly balanced
/// data yields all ones: w[c] = T / (C * n_c) with T total pixels and n_c
/// the pixel count of class c over the whole training label set.
pub fn compute_class_weights<'a, I>(labels: I, classes: usize) -> Result<ClassWeights>
where
    I: IntoIterator<Item = &'a [u8]>,
{
    let mut counts = vec![0u64; classes];
    let mut total = 0u64;
    for map in labels {
        for &l in map {
            let l = l as usize;
            if l >= classes {
                return Err(Error::data(format!(
                    "label {l} out of range for {classes} classes"
                )));
            }
            counts[l] += 1;
            total += 1;
        }
    }
    if let Some(absent) = counts.iter().position(|&c| c == 0) {
        return Err(Error::data(format!(
            "class {absent} absent from training labels"
        )));
    }
    let w = counts
        .iter()
        .map(|&n| total as f64 / (classes as f64 * n as f64))
        .collect();
    ClassWeights::new(w)
}

/// Class-weighted softmax cross entropy of a probability map against
/// per-pixel labels: -(1/N) * sum_px w[label] * ln(p[label] + 1e-8).
pub fn weighted_cross_entropy<R: Real>(
    tape: &mut Tape<R>,
    probs: TensorId,
    labels: &[u8],
    weights: &ClassWeights,
) -> Result<TensorId> {
    tape.weighted_cross_entropy(probs, labels, &weights.as_reals::<R>())
}

/// Combined two-round loss: lambda * l_first + l_second.
pub fn feedback_loss<R: Real>(
    tape: &mut Tape<R>,
    l_first: TensorId,
    l_second: TensorId,
    lambda: f64,
) -> Result<TensorId> {
    let scaled = tape.scale(l_first, R::from_f64(lambda));
    tape.add(scaled, l_second)
}

/// Weight of the first-round loss in the combined objective.
pub const DEFAULT_LAMBDA: f64 = 0.5;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, TensorBuf};

    #[test]
    fn feedback_loss_arithmetic() {
        let mut t = Tape::<f64>::new();
        let a = t.input_owned(Shape::scalar(), vec![2.0]).unwrap();
        let b = t.input_owned(Shape::scalar(), vec![1.0]).unwrap();
        let l = feedback_loss(&mut t, a, b, 0.5).unwrap();
        assert_eq!(t.scalar(l).unwrap(), 2.0);
        let l0 = feedback_loss(&mut t, a, b, 0.0).unwrap();
        assert_eq!(t.scalar(l0).unwrap(), 1.0);
    }

    #[test]
    fn feedback_loss_is_linear_in_both_arguments() {
        let eval = |l1: f64, l2: f64, lam: f64| {
            let mut t = Tape::<f64>::new();
            let a = t.input_owned(Shape::scalar(), vec![l1]).unwrap();
            let b = t.input_owned(Shape::scalar(), vec![l2]).unwrap();
            let l = feedback_loss(&mut t, a, b, lam).unwrap();
            t.scalar(l).unwrap()
        };
        let (x1, x2, y1, y2, lam) = (1.5, -0.25, 3.0, 0.75, 0.6);
        assert!(
            (eval(x1 + x2, y1 + y2, lam) - (eval(x1, y1, lam) + eval(x2, y2, lam))).abs() < 1e-12
        );
        assert!((eval(2.0 * x1, 2.0 * y1, lam) - 2.0 * eval(x1, y1, lam)).abs() < 1e-12);
    }

    #[test]
    fn class_weights_balanced_gives_ones() {
        let labels = vec![0u8, 1, 2, 3, 0, 1, 2, 3];
        let w = compute_class_weights([labels.as_slice()], 4).unwrap();
        for &v in w.values() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn class_weights_80_20_split() {
        // C=2, 80%/20% -> (0.625, 2.5).
        let mut labels = vec![0u8; 80];
        labels.extend(vec![1u8; 20]);
        let w = compute_class_weights([labels.as_slice()], 2).unwrap();
        assert!((w.values()[0] - 0.625).abs() < 1e-12);
        assert!((w.values()[1] - 2.5).abs() < 1e-12);
        // Algebraic identity: sum_c w[c] * n_c = T.
        let t: f64 = w.values()[0] * 80.0 + w.values()[1] * 20.0;
        assert!((t - 100.0).abs() < 1e-9);
    }

    #[test]
    fn class_weights_reject_absent_class() {
        let labels = vec![0u8, 0, 2, 2];
        let err = compute_class_weights([labels.as_slice()], 3).unwrap_err();
        assert!(err.to_string().contains("class 1"), "{err}");
    }

    #[test]
    fn cross_entropy_nonnegative_on_random_probs() {
        let mut t = Tape::<f64>::new();
        let probs = TensorBuf::new(
            Shape::new(1, 2, 1, 3).unwrap(),
            vec![0.9, 0.2, 0.5, 0.1, 0.8, 0.5],
        )
        .unwrap();
        let p = t.input(&probs);
        let l = weighted_cross_entropy(&mut t, p, &[0, 0, 1], &ClassWeights::uniform(2)).unwrap();
        assert!(t.scalar(l).unwrap() >= 0.0);
    }
}
