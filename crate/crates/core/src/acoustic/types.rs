use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::{decode_feature_file, encode_feature_file, RepresentationStack, StackSource};
use crate::numerics::{Matrix, Real};

/// Per-phoneme linguistic vectors plus optional ground-truth durations.
#[derive(Clone, Debug, PartialEq)]
pub struct PhonemeSequence {
    pub id: String,
    pub linguistic: Matrix<f32>,
    pub durations: Option<Vec<u32>>,
}

impl PhonemeSequence {
    pub fn new(
        id: impl Into<String>,
        linguistic: Matrix<f32>,
        durations: Option<Vec<u32>>,
    ) -> Result<Self> {
        if linguistic.rows() == 0 {
            return Err(invalid("phoneme sequence is empty"));
        }
        if let Some(d) = &durations {
            if d.len() != linguistic.rows() {
                return Err(invalid(format!(
                    "{} durations for {} phonemes",
                    d.len(),
                    linguistic.rows()
                )));
            }
            if d.iter().map(|&x| x as u64).sum::<u64>() == 0 {
                return Err(Error::DegenerateDuration(
                    "ground-truth durations sum to zero".into(),
                ));
            }
        }
        Ok(Self {
            id: id.into(),
            linguistic,
            durations,
        })
    }

    /// Linguistic features from phoneme ids: a one-hot over the inventory
    /// followed by the relative position `p / (P - 1)` (0 for a single
    /// phoneme).
    pub fn from_ids(
        id: impl Into<String>,
        ids: &[u16],
        inventory: usize,
        durations: Option<Vec<u32>>,
    ) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&p| p as usize >= inventory) {
            return Err(invalid(format!(
                "phoneme id {bad} outside inventory of {inventory}"
            )));
        }
        let width = linguistic_width(inventory);
        let denom = (ids.len().max(2) - 1) as f32;
        let mut m = Matrix::zeros(ids.len(), width);
        for (p, &ph) in ids.iter().enumerate() {
            m.set(p, ph as usize, 1.0);
            m.set(p, inventory, p as f32 / denom);
        }
        Self::new(id, m, durations)
    }

    pub fn len(&self) -> usize {
        self.linguistic.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn linguistic_width(inventory: usize) -> usize {
    inventory + 1
}

/// Log-amplitude mel frames `[T][M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Matrix<f32>,
    pub hop_seconds: f64,
}

impl MelSpectrogram {
    pub fn new(frames: Matrix<f32>, hop_seconds: f64) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(invalid("mel spectrogram has no frames"));
        }
        if !frames.all_finite() {
            return Err(Error::Data(
                "mel spectrogram contains non-finite values".into(),
            ));
        }
        Ok(Self {
            frames,
            hop_seconds,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bins(&self) -> usize {
        self.frames.cols()
    }

    /// Mel files reuse the feature container with one layer and `M` dims.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let stack = RepresentationStack::new(
            1,
            self.len(),
            self.bins(),
            self.frames.data().to_vec(),
            self.hop_seconds,
            StackSource::External,
        )?;
        encode_feature_file(&stack)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let stack = decode_feature_file(&bytes, path)?;
        if stack.layers() != 1 {
            return Err(Error::format(
                path,
                format!("mel file has {} layers, expected 1", stack.layers()),
            ));
        }
        let frames = Matrix::from_vec(stack.frames(), stack.dims(), stack.layer(0).to_vec());
        Self::new(frames, stack.hop_seconds).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditioningMode {
    Common,
    Separate,
}

impl std::str::FromStr for ConditioningMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "common" => Ok(Self::Common),
            "separate" => Ok(Self::Separate),
            other => Err(invalid(format!(
                "unknown conditioning mode `{other}` (expected common or separate)"
            ))),
        }
    }
}

impl std::fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Common => "common",
            Self::Separate => "separate",
        })
    }
}

/// Log-duration prediction to integer frames: `max(0, round(exp(x) - 1))`,
/// rounding half away from zero.
/// Evaluated in double precision whatever the model precision.
pub fn to_frames<T: Real>(log_durations: &[T]) -> Vec<u32> {
    log_durations
        .iter()
        .map(|&x| {
            let v = (x.as_f64().exp() - 1.0).round();
            if v.is_nan() || v <= 0.0 {
                0
            } else {
                v.min(u32::MAX as f64) as u32
            }
        })
        .collect()
}

/// Training target for the duration predictor.
pub fn log_duration_target(frames: u32) -> f32 {
    ((frames as f64) + 1.0).ln() as f32
}

/// Repeats row `p` of `hidden` `durations[p]` times.
pub fn length_regulate<T: Real>(hidden: &Matrix<T>, durations: &[u32]) -> Result<Matrix<T>> {
    if durations.len() != hidden.rows() {
        return Err(invalid(format!(
            "{} durations for {} hidden vectors",
            durations.len(),
            hidden.rows()
        )));
    }
    let total: usize = durations.iter().map(|&d| d as usize).sum();
    if total == 0 {
        return Err(Error::DegenerateDuration("all durations are zero".into()));
    }
    let mut out = Vec::with_capacity(total * hidden.cols());
    for (p, &d) in durations.iter().enumerate() {
        for _ in 0..d {
            out.extend_from_slice(hidden.row(p));
        }
    }
    Ok(Matrix::from_vec(total, hidden.cols(), out))
}

/// Adjoint of [`length_regulate`]: sums frame gradients back per phoneme.
pub fn length_regulate_backward<T: Real>(d_frames: &Matrix<T>, durations: &[u32]) -> Matrix<T> {
    let mut out = Matrix::zeros(durations.len(), d_frames.cols());
    let mut t = 0;
    for (p, &d) in durations.iter().enumerate() {
        let row = out.row_mut(p);
        for _ in 0..d {
            for (o, &g) in row.iter_mut().zip(d_frames.row(t)) {
                *o += g;
            }
            t += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hidden3() -> Matrix<f64> {
        Matrix::from_rows(&[vec![1.0, 1.5], vec![2.0, 2.5], vec![3.0, 3.5]])
    }

    #[test]
    fn regulate_pattern() {
        let out = length_regulate(&hidden3(), &[2, 1, 3]).unwrap();
        let firsts: Vec<f64> = out.iter_rows().map(|r| r[0]).collect();
        assert_eq!(firsts, vec![1.0, 1.0, 2.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn unit_durations_are_identity() {
        let h = hidden3();
        assert_eq!(length_regulate(&h, &[1, 1, 1]).unwrap(), h);
    }

    #[test]
    fn zero_duration_drops_phoneme() {
        let out = length_regulate(&hidden3(), &[2, 0, 3]).unwrap();
        assert_eq!(out.rows(), 5);
        assert!(out.iter_rows().all(|r| r[0] != 2.0));
    }

    #[test]
    fn all_zero_is_degenerate() {
        assert!(matches!(
            length_regulate(&hidden3(), &[0, 0, 0]),
            Err(Error::DegenerateDuration(_))
        ));
    }

    #[test]
    fn frames_rounding() {
        assert_eq!(to_frames(&[0.0f64]), vec![0]);
        assert_eq!(to_frames(&[6f64.ln()]), vec![5]);
        // exp(ln 5.5) - 1 = 4.5 rounds away from zero
        assert_eq!(to_frames(&[5.5f64.ln()]), vec![5]);
        assert_eq!(to_frames(&[-3.0f64]), vec![0]);
    }

    #[test]
    fn from_ids_layout() {
        let ph = PhonemeSequence::from_ids("u", &[2, 0, 1], 3, Some(vec![1, 2, 3])).unwrap();
        assert_eq!(ph.linguistic.row(0), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(ph.linguistic.row(2), &[0.0, 1.0, 0.0, 1.0]);
        assert!(PhonemeSequence::from_ids("u", &[5], 3, None).is_err());
        assert!(PhonemeSequence::from_ids("u", &[0, 1], 3, Some(vec![0, 0])).is_err());
    }

    #[test]
    fn mel_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mel");
        let mel = MelSpectrogram::new(Matrix::from_rows(&[vec![0.25, -1.0], vec![3.5, 0.0]]), 0.01)
            .unwrap();
        mel.write(&path).unwrap();
        assert_eq!(MelSpectrogram::read(&path).unwrap(), mel);
    }
}
