use crate::acoustic::MelSpectrogram;
use crate::error::{invalid, Error, Result};

/// Mean absolute difference over all `T x M` entries.
///
/// A shape mismatch means the synthesis was not driven by the target's own
/// durations, which the protocol forbids, so it is a protocol error.
pub fn mel_mae(pred: &MelSpectrogram, target: &MelSpectrogram) -> Result<f64> {
    if pred.len() != target.len() || pred.bins() != target.bins() {
        return Err(Error::Protocol(format!(
            "mel shapes differ ({}x{} vs {}x{}); comparisons need teacher-forced durations",
            pred.len(),
            pred.bins(),
            target.len(),
            target.bins()
        )));
    }
    let sum: f64 = pred
        .frames
        .data()
        .iter()
        .zip(target.frames.data())
        .map(|(&p, &t)| (p as f64 - t as f64).abs())
        .sum();
    Ok(sum / pred.frames.data().len() as f64)
}

/// Sum of squared frame errors, for pooling across utterances.
pub fn duration_sq_error(pred: &[u32], target: &[u32]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(invalid(format!(
            "{} predicted durations for {} targets",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| (p as f64 - t as f64).powi(2))
        .sum())
}

/// Root mean square duration error in milliseconds.
pub fn duration_rmse_ms(pred: &[u32], target: &[u32], hop_seconds: f64) -> Result<f64> {
    let sq = duration_sq_error(pred, target)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok((sq / pred.len() as f64).sqrt() * hop_seconds * 1000.0)
}

/// Phonemes per second: `P / (Σ d · hop)`.
pub fn speaking_rate(durations: &[u32], hop_seconds: f64) -> Result<f64> {
    let total: u64 = durations.iter().map(|&d| d as u64).sum();
    if total == 0 {
        return Err(invalid(
            "speaking rate of an utterance with zero total duration",
        ));
    }
    if !(hop_seconds > 0.0) {
        return Err(invalid("hop must be positive"));
    }
    Ok(durations.len() as f64 / (total as f64 * hop_seconds))
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
