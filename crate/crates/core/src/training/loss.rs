use crate::error::{invalid, Result};
use crate::numerics::{Matrix, Real};

/// Loss value and its unweighted components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub mel_mae: f64,
    pub dur_mse: f64,
}

/// `λ_mel · MAE(mel) + λ_dur · MSE(log durations)` for one utterance.
pub fn compute_loss<T: Real>(
    pred_mel: &Matrix<T>,
    target_mel: &Matrix<T>,
    pred_log_dur: &[T],
    target_log_dur: &[T],
    lambda_mel: f64,
    lambda_dur: f64,
) -> Result<LossBreakdown> {
    let mut acc = LossSums::default();
    acc.add(pred_mel, target_mel, pred_log_dur, target_log_dur)?;
    Ok(acc.breakdown(lambda_mel, lambda_dur))
}

/// Error sums pooled over every real frame and phoneme of a batch.
///
/// Pooling the sums before dividing is the same as padding every item to
/// the batch maximum and masking the padded positions out of both the
/// numerator and the denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossSums {
    pub abs_mel: f64,
    pub mel_entries: usize,
    pub sq_dur: f64,
    pub phonemes: usize,
}

impl LossSums {
    pub fn add<T: Real>(
        &mut self,
        pred_mel: &Matrix<T>,
        target_mel: &Matrix<T>,
        pred_log_dur: &[T],
        target_log_dur: &[T],
    ) -> Result<()> {
        if pred_mel.rows() != target_mel.rows() || pred_mel.cols() != target_mel.cols() {
            return Err(invalid(format!(
                "predicted mel is {}x{}, target is {}x{}",
                pred_mel.rows(),
                pred_mel.cols(),
                target_mel.rows(),
                target_mel.cols()
            )));
        }
        if pred_log_dur.len() != target_log_dur.len() {
            return Err(invalid(format!(
                "{} predicted durations for {} targets",
                pred_log_dur.len(),
                target_log_dur.len()
            )));
        }
        self.abs_mel += pred_mel
            .data()
            .iter()
            .zip(target_mel.data())
            .map(|(&p, &t)| (p - t).as_f64().abs())
            .sum::<f64>();
        self.mel_entries += pred_mel.data().len();
        self.sq_dur += pred_log_dur
            .iter()
            .zip(target_log_dur)
            .map(|(&p, &t)| (p - t).as_f64().powi(2))
            .sum::<f64>();
        self.phonemes += pred_log_dur.len();
        Ok(())
    }

    pub fn merge(&mut self, other: &LossSums) {
        self.abs_mel += other.abs_mel;
        self.mel_entries += other.mel_entries;
        self.sq_dur += other.sq_dur;
        self.phonemes += other.phonemes;
    }

    pub fn breakdown(&self, lambda_mel: f64, lambda_dur: f64) -> LossBreakdown {
        let mel_mae = if self.mel_entries == 0 {
            0.0
        } else {
            self.abs_mel / self.mel_entries as f64
        };
        let dur_mse = if self.phonemes == 0 {
            0.0
        } else {
            self.sq_dur / self.phonemes as f64
        };
        let mel_term = if lambda_mel == 0.0 {
            0.0
        } else {
            lambda_mel * mel_mae
        };
        let dur_term = if lambda_dur == 0.0 {
            0.0
        } else {
            lambda_dur * dur_mse
        };
        LossBreakdown {
            total: mel_term + dur_term,
            mel_mae,
            dur_mse,
        }
    }
}

/// Gradients of the pooled loss for one item of a batch whose totals are
/// `mel_entries` and `phonemes`. The MAE subgradient at zero error is 0.
pub fn loss_gradients<T: Real>(
    pred_mel: &Matrix<T>,
    target_mel: &Matrix<T>,
    pred_log_dur: &[T],
    target_log_dur: &[T],
    lambda_mel: f64,
    lambda_dur: f64,
    mel_entries: usize,
    phonemes: usize,
) -> (Matrix<T>, Vec<T>) {
    let k_mel = T::lit(lambda_mel / mel_entries.max(1) as f64);
    let d_mel = Matrix::from_vec(
        pred_mel.rows(),
        pred_mel.cols(),
        pred_mel
            .data()
            .iter()
            .zip(target_mel.data())
            .map(|(&p, &t)| {
                let e = p - t;
                if e > T::zero() {
                    k_mel
                } else if e < T::zero() {
                    -k_mel
                } else {
                    T::zero()
                }
            })
            .collect(),
    );
    let k_dur = T::lit(2.0 * lambda_dur / phonemes.max(1) as f64);
    let d_dur = pred_log_dur
        .iter()
        .zip(target_log_dur)
        .map(|(&p, &t)| k_dur * (p - t))
        .collect();
    (d_mel, d_dur)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_zero() {
        let m = Matrix::from_rows(&[vec![1.0f64, 2.0], vec![3.0, 4.0]]);
        let l = compute_loss(&m, &m, &[0.5], &[0.5], 1.0, 1.0).unwrap();
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn single_bin_absolute_error() {
        let p = Matrix::from_rows(&[vec![2.0f64]]);
        let t = Matrix::from_rows(&[vec![3.0f64]]);
        let l = compute_loss(&p, &t, &[0.0], &[5.0], 1.0, 0.0).unwrap();
        assert_eq!(l.total, 1.0);
        assert_eq!(l.dur_mse, 25.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = Matrix::<f64>::zeros(2, 3);
        let t = Matrix::<f64>::zeros(3, 3);
        assert!(compute_loss(&p, &t, &[], &[], 1.0, 1.0).is_err());
    }
}
