//! Frozen stand-in for a self-supervised speech encoder.
//!
//! Layer 0 is a strided convolution over raw samples: each output channel is
//! the log magnitude of a Hann-windowed quadrature filter pair at a fixed
//! random centre frequency, plus a fixed bias. Blocks `1..=L` each
//! low-pass the previous layer over time (`(h[t] + h[t-1]) / 2`), apply a
//! frozen random linear mix with `tanh`, add the residual and, when
//! `block_norm` is set, normalize every frame to zero mean and unit variance.
//! Each block also adds the frame novelty, the root-mean-square change
//! `h[t] - h[t-1]` across dimensions, along a fixed random direction scaled
//! by `novelty_gain`. Deeper layers therefore see longer temporal context,
//! accumulate more transition-rate information and progressively lose
//! absolute spectral level.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stack::{RepresentationStack, StackSource};
use super::waveform::Waveform;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub sample_rate: u32,
    /// Frontend window in samples.
    pub window: usize,
    /// Frontend stride in samples.
    pub stride: usize,
    /// Number of blocks `L`; the stack has `L + 1` layers.
    pub blocks: usize,
    /// Per-layer dimensionality `D_l`.
    pub dims: usize,
    pub min_freq_hz: f64,
    pub max_freq_hz: f64,
    /// Added to filter magnitudes before the log; damps beating between harmonics.
    pub log_floor: f64,
    /// Scale of the frozen block mixing matrices relative to `1/sqrt(D_l)`.
    pub block_gain: f64,
    /// Weight of the frame-novelty input to each block; 0 disables it.
    pub novelty_gain: f64,
    pub block_norm: bool,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window: 400,
            stride: 320,
            blocks: 6,
            dims: 64,
            min_freq_hz: 60.0,
            max_freq_hz: 7_600.0,
            log_floor: 0.01,
            block_gain: 1.5,
            novelty_gain: 4.0,
            block_norm: true,
            seed: 0x5EED_55D1,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 || self.dims == 0 || self.sample_rate == 0 {
            return Err(Error::Config(
                "extractor window, stride, dims and sample_rate must be positive".into(),
            ));
        }
        if !(self.min_freq_hz > 0.0 && self.min_freq_hz < self.max_freq_hz) {
            return Err(Error::Config("extractor frequency range is empty".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("extractor log_floor must be positive".into()));
        }
        if !(self.novelty_gain >= 0.0 && self.novelty_gain.is_finite())
            || !(self.block_gain >= 0.0 && self.block_gain.is_finite())
        {
            return Err(Error::Config(
                "extractor novelty_gain and block_gain must be finite and nonnegative".into(),
            ));
        }
        if self.max_freq_hz > self.sample_rate as f64 / 2.0 {
            return Err(Error::Config(
                "extractor max_freq_hz exceeds Nyquist".into(),
            ));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.blocks + 1
    }

    pub fn hop_seconds(&self) -> f64 {
        self.stride as f64 / self.sample_rate as f64
    }

    /// Frames produced for a waveform of `len` samples, if any.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        (len >= self.window).then(|| (len - self.window) / self.stride + 1)
    }
}

#[derive(Clone, Debug)]
struct Block {
    /// `[dims][dims]`
    mix: Vec<f32>,
    /// `[dims]`, applied to the frame novelty.
    novelty: Vec<f32>,
    bias: Vec<f32>,
}

/// Immutable after construction.
#[derive(Clone, Debug)]
pub struct PseudoSsl {
    cfg: ExtractorConfig,
    /// `[dims][window]` cosine and sine kernels.
    cos_kernels: Vec<f32>,
    sin_kernels: Vec<f32>,
    frontend_bias: Vec<f32>,
    blocks: Vec<Block>,
}

impl PseudoSsl {
    pub fn new(cfg: ExtractorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (d, w) = (cfg.dims, cfg.window);
        let hann: Vec<f64> = (0..w)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / (w as f64 - 1.0).max(1.0)).cos())
            .collect();
        let norm = 2.0 / hann.iter().sum::<f64>();
        let (lo, hi) = (cfg.min_freq_hz.ln(), cfg.max_freq_hz.ln());
        let mut freqs: Vec<f64> = (0..d).map(|_| rng.gen_range(lo..hi).exp()).collect();
        freqs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut cos_kernels = Vec::with_capacity(d * w);
        let mut sin_kernels = Vec::with_capacity(d * w);
        for &f in &freqs {
            let omega = 2.0 * PI * f / cfg.sample_rate as f64;
            for (n, &h) in hann.iter().enumerate() {
                cos_kernels.push((norm * h * (omega * n as f64).cos()) as f32);
                sin_kernels.push((norm * h * (omega * n as f64).sin()) as f32);
            }
        }
        let frontend_bias = (0..d).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let bound = cfg.block_gain * (3.0 / d as f64).sqrt();
        let blocks = (0..cfg.blocks)
            .map(|_| Block {
                mix: (0..d * d)
                    .map(|_| rng.gen_range(-bound..bound) as f32)
                    .collect(),
                novelty: (0..d)
                    .map(|_| (cfg.novelty_gain * rng.gen_range(-1.0..1.0)) as f32)
                    .collect(),
                bias: (0..d).map(|_| rng.gen_range(-0.1..0.1) as f32).collect(),
            })
            .collect();
        Ok(Self {
            cfg,
            cos_kernels,
            sin_kernels,
            frontend_bias,
            blocks,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.cfg
    }

    pub fn extract(&self, wave: &Waveform) -> Result<RepresentationStack> {
        let cfg = &self.cfg;
        if wave.sample_rate != cfg.sample_rate {
            return Err(invalid(format!(
                "waveform sample rate {} does not match extractor rate {}",
                wave.sample_rate, cfg.sample_rate
            )));
        }
        let frames = cfg.frame_count(wave.samples.len()).ok_or_else(|| {
            invalid(format!(
                "waveform has {} samples; at least {} are needed for one frame",
                wave.samples.len(),
                cfg.window
            ))
        })?;
        let (d, w) = (cfg.dims, cfg.window);
        let mut data = Vec::with_capacity(cfg.layers() * frames * d);

        for t in 0..frames {
            let seg = &wave.samples[t * cfg.stride..t * cfg.stride + w];
            for c in 0..d {
                let kc = &self.cos_kernels[c * w..(c + 1) * w];
                let ks = &self.sin_kernels[c * w..(c + 1) * w];
                let (mut re, mut im) = (0.0f32, 0.0f32);
                for n in 0..w {
                    re += kc[n] * seg[n];
                    im += ks[n] * seg[n];
                }
                let mag = ((re * re + im * im) as f64).sqrt();
                data.push(((mag + cfg.log_floor).ln() as f32) + self.frontend_bias[c]);
            }
        }

        let mut mixed = vec![0.0f32; d];
        let mut out = vec![0.0f32; d];
        for block in &self.blocks {
            let prev_start = data.len() - frames * d;
            for t in 0..frames {
                let cur = prev_start + t * d;
                let before = if t == 0 { cur } else { cur - d };
                for k in 0..d {
                    mixed[k] = 0.5 * (data[cur + k] + data[before + k]);
                }
                let novelty = (data[cur..cur + d]
                    .iter()
                    .zip(&data[before..before + d])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f32>()
                    / d as f32)
                    .sqrt();
                for k in 0..d {
                    let row = &block.mix[k * d..(k + 1) * d];
                    let z: f32 =
                        block.bias[k] + row.iter().zip(&mixed).map(|(a, b)| a * b).sum::<f32>();
                    out[k] = mixed[k] + z.tanh() + block.novelty[k] * novelty;
                }
                if cfg.block_norm {
                    let mean = out.iter().sum::<f32>() / d as f32;
                    let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
                    let inv = 1.0 / (var + 1e-5).sqrt();
                    out.iter_mut().for_each(|v| *v = (*v - mean) * inv);
                }
                data.extend_from_slice(&out);
            }
        }
        RepresentationStack::new(
            cfg.layers(),
            frames,
            d,
            data,
            cfg.hop_seconds(),
            StackSource::Pseudo,
        )
    }
}
