use serde::{Deserialize, Serialize};

use super::{ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};

/// Form of the weight penalty added to the cross-entropy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum L2Mode {
    /// `lambda * ||theta||_2`.
    #[default]
    Norm,
    /// `lambda * ||theta||_2^2`, ordinary weight decay.
    Squared,
}

impl L2Mode {
    pub fn penalty(self, norm: f64, lambda: f64) -> f64 {
        match self {
            L2Mode::Norm => lambda * norm,
            L2Mode::Squared => lambda * norm * norm,
        }
    }

    /// Multiplier `k` such that the penalty gradient is `k * theta`.
    pub fn grad_scale(self, norm: f64, lambda: f64) -> f64 {
        match self {
            L2Mode::Norm if norm > 0.0 => lambda / norm,
            L2Mode::Norm => 0.0,
            L2Mode::Squared => 2.0 * lambda,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub loss: f64,
    pub cross_entropy: f64,
    pub penalty: f64,
    /// `(softmax - Y) / batch`, shape `batch x classes`.
    pub dlogits: Tensor<T>,
}

/// Numerically stable softmax of one row, computed in `f64`.
pub fn softmax<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row
        .iter()
        .map(|v| v.to_f64_lossy())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v.to_f64_lossy() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::NotOneHot(i));
        }
        t.data_mut()[i * classes + l] = T::one();
    }
    Ok(t)
}

/// Mean softmax cross-entropy over the batch plus the weight penalty.
/// The penalty's parameter gradient is added separately by
/// [`add_penalty_grad`].
pub fn softmax_ce_l2_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &Tensor<T>,
    params: &ParamSet<T>,
    lambda: f64,
    mode: L2Mode,
) -> Result<LossOutput<T>> {
    let (batch, classes) = match *logits.shape() {
        [b, c] => (b, c),
        ref s => return Err(Error::shape("softmax_ce", format!("logits shape {s:?} is not 2-d"))),
    };
    if labels.shape() != logits.shape() {
        return Err(Error::shape(
            "softmax_ce",
            format!("labels {:?} vs logits {:?}", labels.shape(), logits.shape()),
        ));
    }
    if batch == 0 {
        return Err(Error::EmptySplit);
    }
    let mut dlogits = Tensor::zeros(logits.shape());
    let mut ce = 0.0;
    for i in 0..batch {
        let y = &labels.data()[i * classes..(i + 1) * classes];
        let ones = y.iter().filter(|&&v| v == T::one()).count();
        let zeros = y.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != classes - 1 {
            return Err(Error::NotOneHot(i));
        }
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let max = row
            .iter()
            .map(|v| v.to_f64_lossy())
            .fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row
            .iter()
            .map(|v| (v.to_f64_lossy() - max).exp())
            .sum::<f64>()
            .ln();
        let p = softmax(row);
        for (j, (&yj, pj)) in y.iter().zip(&p).enumerate() {
            if yj == T::one() {
                ce -= row[j].to_f64_lossy() - max - log_sum;
            }
            dlogits.data_mut()[i * classes + j] =
                T::from_f64_lossy((pj - yj.to_f64_lossy()) / batch as f64);
        }
    }
    ce /= batch as f64;
    let penalty = if lambda > 0.0 {
        mode.penalty(params.l2_norm(), lambda)
    } else {
        0.0
    };
    Ok(LossOutput {
        loss: ce + penalty,
        cross_entropy: ce,
        penalty,
        dlogits,
    })
}

/// Adds the penalty gradient into the stored parameter gradients.
pub fn add_penalty_grad<T: Scalar>(params: &mut ParamSet<T>, lambda: f64, mode: L2Mode) {
    if lambda <= 0.0 {
        return;
    }
    let k = mode.grad_scale(params.l2_norm(), lambda);
    for p in params.iter_mut() {
        for (g, w) in p.grad.data_mut().iter_mut().zip(p.value.data()) {
            *g += T::from_f64_lossy(k * w.to_f64_lossy());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_params() -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.add("a", Tensor::from_vec(&[2], vec![0.3, -0.4]).unwrap());
        p.add("b", Tensor::from_vec(&[1], vec![1.2]).unwrap());
        p
    }

    #[test]
    fn uniform_logits_give_ln8() {
        let logits = Tensor::<f64>::from_vec(&[3, 8], vec![0.7; 24]).unwrap();
        let labels = one_hot(&[0, 5, 7], 8).unwrap();
        let out = softmax_ce_l2_loss(&logits, &labels, &ParamSet::new(), 0.0, L2Mode::Norm).unwrap();
        assert!((out.loss - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn huge_margin_drives_loss_to_zero() {
        let mut row = vec![0.0; 8];
        row[2] = 1e4;
        let logits = Tensor::<f64>::from_vec(&[1, 8], row).unwrap();
        let out = softmax_ce_l2_loss(&logits, &one_hot(&[2], 8).unwrap(), &ParamSet::new(), 0.0, L2Mode::Norm)
            .unwrap();
        assert!(out.loss < 1e-12);
    }

    #[test]
    fn penalty_is_lambda_times_norm() {
        let params = small_params();
        let norm = (0.09f64 + 0.16 + 1.44).sqrt();
        let logits = Tensor::<f64>::zeros(&[1, 8]);
        let labels = one_hot(&[1], 8).unwrap();
        let base = softmax_ce_l2_loss(&logits, &labels, &params, 0.0, L2Mode::Norm).unwrap();
        let reg = softmax_ce_l2_loss(&logits, &labels, &params, 0.01, L2Mode::Norm).unwrap();
        assert!((reg.loss - base.loss - 0.01 * norm).abs() < 1e-12);
        let sq = softmax_ce_l2_loss(&logits, &labels, &params, 0.01, L2Mode::Squared).unwrap();
        assert!((sq.penalty - 0.01 * norm * norm).abs() < 1e-12);
    }

    #[test]
    fn penalty_grad_is_scaled_theta() {
        let mut params = small_params();
        let norm = params.l2_norm();
        add_penalty_grad(&mut params, 0.5, L2Mode::Norm);
        let g: Vec<f64> = params.iter().flat_map(|p| p.grad.data().to_vec()).collect();
        let expected = [0.3 * 0.5 / norm, -0.4 * 0.5 / norm, 1.2 * 0.5 / norm];
        for (a, b) in g.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_one_hot() {
        let logits = Tensor::<f64>::zeros(&[2, 8]);
        let mut labels = one_hot::<f64>(&[0, 1], 8).unwrap();
        labels.data_mut()[9] = 0.5;
        assert!(matches!(
            softmax_ce_l2_loss(&logits, &labels, &ParamSet::new(), 0.0, L2Mode::Norm),
            Err(Error::NotOneHot(1))
        ));
        assert!(one_hot::<f64>(&[8], 8).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_and_gradients(
            row in proptest::collection::vec(-20.0f64..20.0, 8),
            shift in -50.0f64..50.0,
            label in 0usize..8,
        ) {
            let p = softmax(&row);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
            let q = softmax(&shifted);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-6);
            }
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
            prop_assert_eq!(argmax(&p), argmax(&row));
            let logits = Tensor::from_vec(&[1, 8], row).unwrap();
            let out = softmax_ce_l2_loss(&logits, &one_hot(&[label], 8).unwrap(), &ParamSet::new(), 0.0, L2Mode::Norm).unwrap();
            prop_assert!(out.dlogits.data().iter().sum::<f64>().abs() < 1e-6);
        }
    }
}
