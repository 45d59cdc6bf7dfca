use std::path::Path;

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid("waveform is empty"));
        }
        if sample_rate == 0 {
            return Err(invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !(-1.0..=1.0).contains(s)) {
            return Err(invalid(format!("sample {i} outside [-1, 1]")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Writes 16-bit PCM mono WAV.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let wrap = |e: hound::Error| match e {
            hound::Error::IoError(io) => Error::io(path, io),
            other => Error::format(path, other.to_string()),
        };
        let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
        for &s in &self.samples {
            w.write_sample((s * i16::MAX as f32).round() as i16)
                .map_err(wrap)?;
        }
        w.finalize().map_err(wrap)
    }

    pub fn read_wav(path: &Path) -> Result<Self> {
        let wrap = |e: hound::Error| match e {
            hound::Error::IoError(io) => Error::io(path, io),
            other => Error::format(path, other.to_string()),
        };
        let mut r = hound::WavReader::open(path).map_err(wrap)?;
        let spec = r.spec();
        if spec.channels != 1 {
            return Err(Error::format(path, "only mono WAV is supported"));
        }
        let samples: Vec<f32> = match spec.sample_format {
            hound::SampleFormat::Int => {
                let scale = (1i64 << (spec.bits_per_sample - 1)) as f32 - 1.0;
                r.samples::<i32>()
                    .map(|s| s.map(|v| (v as f32 / scale).clamp(-1.0, 1.0)))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(wrap)?
            }
            hound::SampleFormat::Float => r
                .samples::<f32>()
                .map(|s| s.map(|v| v.clamp(-1.0, 1.0)))
                .collect::<std::result::Result<_, _>>()
                .map_err(wrap)?,
        };
        Self::new(samples, spec.sample_rate).map_err(|e| Error::format(path, e.to_string()))
    }
}
