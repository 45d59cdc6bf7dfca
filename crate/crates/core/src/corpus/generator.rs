//! Synthetic multi-speaker corpus with independent timbre and rhythm.
//!
//! Every speaker draws its timbre (a low-rank latent mapped through shared
//! per-class spectral bases, a spectral tilt and an f0) and its rhythm (a
//! speaking-rate multiplier and a duration jitter scale) from separate
//! random streams. Utterances draw phoneme strings, durations
//! `round(exp(N(class_mean + ln r, jitter)))`, small per-utterance timbre
//! perturbations and frame noise from a stream keyed by
//! `(seed, speaker, utterance)`, so generation order never matters.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::acoustic::MelSpectrogram;
use crate::error::{Error, Result};
use crate::features::{ExtractorConfig, Waveform};
use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    pub phoneme_inventory: usize,
    pub phoneme_classes: usize,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    pub mel_bins: usize,
    pub hop_seconds: f64,
    pub sample_rate: u32,
    pub rate_min: f64,
    pub rate_max: f64,
    /// Mean phoneme length in frames of the shortest and longest class at rate 1.
    pub base_frames_min: f64,
    pub base_frames_max: f64,
    /// Range of the per-speaker log-duration standard deviation.
    pub jitter_min: f64,
    pub jitter_max: f64,
    pub timbre_rank: usize,
    pub timbre_scale: f64,
    pub tilt_range: f64,
    pub f0_min_hz: f64,
    pub f0_max_hz: f64,
    pub utterance_gain_jitter: f64,
    pub utterance_tilt_jitter: f64,
    pub mel_noise: f64,
    pub write_waveforms: bool,
    pub extract_features: bool,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            speakers: 32,
            utterances_per_speaker: 20,
            phoneme_inventory: 20,
            phoneme_classes: 4,
            min_phonemes: 8,
            max_phonemes: 16,
            mel_bins: 20,
            hop_seconds: 0.01,
            sample_rate: 16_000,
            rate_min: 0.6,
            rate_max: 1.6,
            base_frames_min: 4.0,
            base_frames_max: 9.0,
            jitter_min: 0.08,
            jitter_max: 0.16,
            timbre_rank: 4,
            timbre_scale: 0.5,
            tilt_range: 1.0,
            f0_min_hz: 90.0,
            f0_max_hz: 240.0,
            utterance_gain_jitter: 0.15,
            utterance_tilt_jitter: 0.15,
            mel_noise: 0.05,
            write_waveforms: true,
            extract_features: true,
            split_train: 0.8,
            split_val: 0.1,
            split_test: 0.1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("speakers", self.speakers),
            ("utterances_per_speaker", self.utterances_per_speaker),
            ("phoneme_inventory", self.phoneme_inventory),
            ("phoneme_classes", self.phoneme_classes),
            ("min_phonemes", self.min_phonemes),
            ("mel_bins", self.mel_bins),
            ("timbre_rank", self.timbre_rank),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("corpus.{name} must be positive")));
            }
        }
        if self.phoneme_inventory > u16::MAX as usize {
            return Err(Error::Config(
                "corpus.phoneme_inventory is too large".into(),
            ));
        }
        if self.max_phonemes < self.min_phonemes {
            return Err(Error::Config(
                "corpus.max_phonemes is below corpus.min_phonemes".into(),
            ));
        }
        if !(self.rate_min > 0.0 && self.rate_max >= self.rate_min) {
            return Err(Error::Config(
                "corpus.rate_min/rate_max must satisfy 0 < min <= max".into(),
            ));
        }
        if !(self.base_frames_min > 0.0 && self.base_frames_max >= self.base_frames_min) {
            return Err(Error::Config(
                "corpus.base_frames_min/max must satisfy 0 < min <= max".into(),
            ));
        }
        if !(self.jitter_min >= 0.0 && self.jitter_max >= self.jitter_min) {
            return Err(Error::Config(
                "corpus.jitter_min/max must satisfy 0 <= min <= max".into(),
            ));
        }
        if !(self.f0_min_hz > 0.0 && self.f0_max_hz >= self.f0_min_hz) {
            return Err(Error::Config(
                "corpus.f0_min_hz/f0_max_hz must satisfy 0 < min <= max".into(),
            ));
        }
        let hop = self.hop_seconds * self.sample_rate as f64;
        if !(hop >= 1.0) || (hop - hop.round()).abs() > 1e-9 {
            return Err(Error::Config(
                "corpus.hop_seconds times corpus.sample_rate must be a whole number of samples"
                    .into(),
            ));
        }
        for (name, v) in [
            ("timbre_scale", self.timbre_scale),
            ("tilt_range", self.tilt_range),
            ("utterance_gain_jitter", self.utterance_gain_jitter),
            ("utterance_tilt_jitter", self.utterance_tilt_jitter),
            ("mel_noise", self.mel_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "corpus.{name} must be finite and nonnegative"
                )));
            }
        }
        let ratios = [
            ("split_train", self.split_train),
            ("split_val", self.split_val),
            ("split_test", self.split_test),
        ];
        for (name, v) in ratios {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "corpus.{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        let sum: f64 = ratios.iter().map(|r| r.1).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "corpus.split_train + corpus.split_val + corpus.split_test must be 1, got {sum}"
            )));
        }
        Ok(())
    }

    pub fn samples_per_frame(&self) -> usize {
        (self.hop_seconds * self.sample_rate as f64).round() as usize
    }

    pub fn split_ratios(&self) -> [f64; 3] {
        [self.split_train, self.split_val, self.split_test]
    }

    /// Extractor settings consistent with this corpus's sample rate.
    pub fn check_extractor(&self, ex: &ExtractorConfig) -> Result<()> {
        if ex.sample_rate != self.sample_rate {
            return Err(Error::Config(format!(
                "extractor.sample_rate {} differs from corpus.sample_rate {}",
                ex.sample_rate, self.sample_rate
            )));
        }
        Ok(())
    }
}

/// Generative parameters of one synthetic speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerProfile {
    pub id: String,
    pub index: u64,
    // rhythm
    pub rate: f64,
    pub jitter: f64,
    // timbre
    pub tilt: f64,
    pub f0_hz: f64,
    pub latent: Vec<f64>,
}

/// One rendered utterance before it is written to disk.
#[derive(Clone, Debug)]
pub struct GeneratedUtterance {
    pub id: String,
    pub speaker: String,
    pub phonemes: Vec<u16>,
    pub durations: Vec<u32>,
    pub mel: MelSpectrogram,
    pub waveform: Option<Waveform>,
}

// Random stream tags.
const GLOBAL: u64 = 0;
const TIMBRE: u64 = 1;
const RHYTHM: u64 = 2;
const UTTERANCE: u64 = 3;

fn stream(seed: u64, tag: u64, speaker: u64, utterance: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // 2^64 streams: pack the tag into the top bits.
    rng.set_stream((tag << 60) ^ (speaker << 24) ^ utterance);
    rng
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

/// Sum of Gaussian bumps over mel bins.
fn bumps(rng: &mut impl Rng, bins: usize, count: usize, scale: f64) -> Vec<f64> {
    let mut v = vec![0.0; bins];
    for _ in 0..count {
        let centre = rng.gen_range(0.0..bins as f64);
        let width = rng.gen_range(0.8..2.5);
        let amp = rng.gen_range(-scale..scale);
        for (m, x) in v.iter_mut().enumerate() {
            let z = (m as f64 - centre) / width;
            *x += amp * (-0.5 * z * z).exp();
        }
    }
    v
}

/// Corpus-wide tables shared by all speakers plus per-speaker sampling.
pub struct CorpusGenerator {
    cfg: CorpusConfig,
    seed: u64,
    phoneme_class: Vec<usize>,
    phoneme_shape: Vec<Vec<f64>>,
    class_base: Vec<Vec<f64>>,
    /// `[class][bin][rank]`
    timbre_basis: Vec<Vec<Vec<f64>>>,
    class_log_frames: Vec<f64>,
    bin_centres_hz: Vec<f64>,
}

impl CorpusGenerator {
    pub fn new(cfg: CorpusConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, GLOBAL, 0, 0);
        let (m, c, k) = (cfg.mel_bins, cfg.phoneme_classes, cfg.timbre_rank);
        let phoneme_class = (0..cfg.phoneme_inventory).map(|p| p % c).collect();
        let phoneme_shape = (0..cfg.phoneme_inventory)
            .map(|_| bumps(&mut rng, m, 2, 1.0))
            .collect();
        let class_base = (0..c).map(|_| bumps(&mut rng, m, 3, 0.8)).collect();
        let timbre_basis = (0..c)
            .map(|_| {
                let cols: Vec<Vec<f64>> = (0..k).map(|_| bumps(&mut rng, m, 2, 1.0)).collect();
                (0..m)
                    .map(|b| cols.iter().map(|col| col[b]).collect())
                    .collect()
            })
            .collect();
        let class_log_frames = (0..c)
            .map(|i| {
                let t = if c == 1 {
                    0.0
                } else {
                    i as f64 / (c - 1) as f64
                };
                (cfg.base_frames_min + t * (cfg.base_frames_max - cfg.base_frames_min)).ln()
            })
            .collect();
        let (lo, hi) = (hz_to_mel(60.0), hz_to_mel(cfg.sample_rate as f64 * 0.475));
        let bin_centres_hz = (0..m)
            .map(|b| {
                let mel = lo + (hi - lo) * (b as f64 + 0.5) / m as f64;
                700.0 * (10f64.powf(mel / 2595.0) - 1.0)
            })
            .collect();
        Ok(Self {
            cfg,
            seed,
            phoneme_class,
            phoneme_shape,
            class_base,
            timbre_basis,
            class_log_frames,
            bin_centres_hz,
        })
    }

    pub fn config(&self) -> &CorpusConfig {
        &self.cfg
    }

    /// Speaker `index`, with timbre and rhythm drawn from independent streams.
    pub fn speaker(&self, index: u64) -> SpeakerProfile {
        let cfg = &self.cfg;
        let mut t = stream(self.seed, TIMBRE, index, 0);
        let latent = (0..cfg.timbre_rank)
            .map(|_| t.gen_range(-1.0..1.0))
            .collect();
        let tilt = t.gen_range(-cfg.tilt_range..=cfg.tilt_range);
        let f0_hz = t.gen_range(cfg.f0_min_hz..=cfg.f0_max_hz);
        let mut r = stream(self.seed, RHYTHM, index, 0);
        let rate = r.gen_range(cfg.rate_min..=cfg.rate_max);
        let jitter = r.gen_range(cfg.jitter_min..=cfg.jitter_max);
        SpeakerProfile {
            id: format!("spk{index:03}"),
            index,
            rate,
            jitter,
            tilt,
            f0_hz,
            latent,
        }
    }

    /// Noise-free log-mel template of phoneme `p` for a speaker.
    fn template(&self, spk: &SpeakerProfile, p: usize, gain: f64, tilt: f64) -> Vec<f64> {
        let c = self.phoneme_class[p];
        let m = self.cfg.mel_bins;
        (0..m)
            .map(|b| {
                let timbre: f64 = self.timbre_basis[c][b]
                    .iter()
                    .zip(&spk.latent)
                    .map(|(w, z)| w * z)
                    .sum();
                let pos = if m == 1 {
                    0.0
                } else {
                    b as f64 / (m - 1) as f64 - 0.5
                };
                self.class_base[c][b]
                    + self.phoneme_shape[p][b]
                    + self.cfg.timbre_scale * timbre
                    + tilt * pos
                    + gain
            })
            .collect()
    }

    /// Renders utterance `u` of `spk`.
    pub fn utterance(&self, spk: &SpeakerProfile, u: u64) -> Result<GeneratedUtterance> {
        let cfg = &self.cfg;
        let mut rng = stream(self.seed, UTTERANCE, spk.index, u);
        let p_len = rng.gen_range(cfg.min_phonemes..=cfg.max_phonemes);
        let phonemes: Vec<u16> = (0..p_len)
            .map(|_| rng.gen_range(0..cfg.phoneme_inventory) as u16)
            .collect();
        let jitter = Normal::new(0.0, spk.jitter.max(1e-12)).expect("finite std");
        let mut durations: Vec<u32> = phonemes
            .iter()
            .map(|&p| {
                let mean = self.class_log_frames[self.phoneme_class[p as usize]] + spk.rate.ln();
                (mean + jitter.sample(&mut rng)).exp().round() as u32
            })
            .collect();
        if durations.iter().all(|&d| d == 0) {
            durations[0] = 1;
        }
        let gain = rng.gen_range(-1.0..=1.0) * cfg.utterance_gain_jitter;
        let tilt = spk.tilt + rng.gen_range(-1.0..=1.0) * cfg.utterance_tilt_jitter;
        let f0 = spk.f0_hz * (1.0 + rng.gen_range(-0.03..=0.03));
        let noise = Normal::new(0.0, cfg.mel_noise.max(1e-12)).expect("finite std");

        let total: usize = durations.iter().map(|&d| d as usize).sum();
        let mut mel = Matrix::<f32>::zeros(total, cfg.mel_bins);
        let mut clean = Vec::with_capacity(total);
        let mut t = 0;
        for (&p, &d) in phonemes.iter().zip(&durations) {
            let tpl = self.template(spk, p as usize, gain, tilt);
            for _ in 0..d {
                for (o, &v) in mel.row_mut(t).iter_mut().zip(&tpl) {
                    *o = (v + noise.sample(&mut rng)) as f32;
                }
                clean.push(tpl.clone());
                t += 1;
            }
        }
        let waveform = if cfg.write_waveforms || cfg.extract_features {
            Some(self.render_waveform(&clean, f0, &mut rng)?)
        } else {
            None
        };
        Ok(GeneratedUtterance {
            id: format!("{}_{u:03}", spk.id),
            speaker: spk.id.clone(),
            phonemes,
            durations,
            mel: MelSpectrogram::new(mel, cfg.hop_seconds)?,
            waveform,
        })
    }

    /// Harmonic tone per frame with amplitudes read off the log-mel
    /// envelope at each harmonic's frequency; phases run continuously.
    fn render_waveform(
        &self,
        frames: &[Vec<f64>],
        f0: f64,
        rng: &mut impl Rng,
    ) -> Result<Waveform> {
        let sr = self.cfg.sample_rate as f64;
        let hop = self.cfg.samples_per_frame();
        let nyquist = self.bin_centres_hz[self.bin_centres_hz.len() - 1];
        let harmonics = ((nyquist / f0).floor() as usize).max(1);
        let mut phase: Vec<f64> = (0..harmonics)
            .map(|_| rng.gen_range(0.0..2.0 * PI))
            .collect();
        let mut out = Vec::with_capacity(frames.len() * hop);
        let mut amps = vec![0.0; harmonics];
        for env in frames {
            for (k, a) in amps.iter_mut().enumerate() {
                *a = 0.01 * self.envelope_at(env, f0 * (k + 1) as f64).exp();
            }
            for _ in 0..hop {
                let mut s = 0.0;
                for (k, (ph, &a)) in phase.iter_mut().zip(&amps).enumerate() {
                    s += a * ph.sin();
                    *ph += 2.0 * PI * f0 * (k + 1) as f64 / sr;
                    if *ph > 2.0 * PI {
                        *ph -= 2.0 * PI;
                    }
                }
                out.push(s);
            }
        }
        let peak = out.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        let scale = if peak > 0.95 { 0.95 / peak } else { 1.0 };
        Waveform::new(
            out.into_iter().map(|s| (s * scale) as f32).collect(),
            self.cfg.sample_rate,
        )
    }

    /// Linear interpolation of a per-bin envelope at frequency `f`.
    fn envelope_at(&self, env: &[f64], f: f64) -> f64 {
        let c = &self.bin_centres_hz;
        if f <= c[0] {
            return env[0] - 4.0;
        }
        if f >= c[c.len() - 1] {
            return env[env.len() - 1] - 4.0;
        }
        let i = c.partition_point(|&x| x <= f) - 1;
        let w = (f - c[i]) / (c[i + 1] - c[i]);
        env[i] * (1.0 - w) + env[i + 1] * w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            speakers: 4,
            utterances_per_speaker: 3,
            write_waveforms: false,
            extract_features: false,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn mel_length_is_duration_sum() {
        let g = CorpusGenerator::new(small(), 1).unwrap();
        for s in 0..4 {
            let spk = g.speaker(s);
            for u in 0..3 {
                let utt = g.utterance(&spk, u).unwrap();
                assert_eq!(utt.mel.len() as u32, utt.durations.iter().sum::<u32>());
                assert_eq!(utt.phonemes.len(), utt.durations.len());
            }
        }
    }

    #[test]
    fn same_seed_same_utterance() {
        let a = CorpusGenerator::new(small(), 5).unwrap();
        let b = CorpusGenerator::new(small(), 5).unwrap();
        let (ua, ub) = (
            a.utterance(&a.speaker(2), 1).unwrap(),
            b.utterance(&b.speaker(2), 1).unwrap(),
        );
        assert_eq!(ua.mel, ub.mel);
        assert_eq!(ua.durations, ub.durations);
    }

    #[test]
    fn zero_counts_are_config_errors() {
        for cfg in [
            CorpusConfig {
                phoneme_inventory: 0,
                ..small()
            },
            CorpusConfig {
                speakers: 0,
                ..small()
            },
            CorpusConfig {
                split_val: 0.3,
                ..small()
            },
        ] {
            assert!(matches!(
                CorpusGenerator::new(cfg, 0),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn waveform_is_in_range_and_frame_aligned() {
        let cfg = CorpusConfig {
            write_waveforms: true,
            ..small()
        };
        let g = CorpusGenerator::new(cfg.clone(), 3).unwrap();
        let utt = g.utterance(&g.speaker(0), 0).unwrap();
        let w = utt.waveform.unwrap();
        assert_eq!(w.samples.len(), utt.mel.len() * cfg.samples_per_frame());
        assert!(w.samples.iter().any(|s| s.abs() > 0.01));
    }
}
