#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zstts_core::acoustic::{ConditioningMode, ModelConfig, PhonemeSequence, TtsModel};
use zstts_core::embedding::AggregatorKind;
use zstts_core::features::{RepresentationStack, StackSource};
use zstts_core::numerics::{grad_check, GradCheckReport, HasParams, Matrix};

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn random_stack(
    rng: &mut impl Rng,
    layers: usize,
    frames: usize,
    dims: usize,
) -> RepresentationStack {
    let data = (0..layers * frames * dims)
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();
    RepresentationStack::new(layers, frames, dims, data, 0.02, StackSource::Pseudo).unwrap()
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
}

pub fn tiny_config(mode: ConditioningMode, aggregator: AggregatorKind, seed: u64) -> ModelConfig {
    ModelConfig {
        mode,
        aggregator,
        phoneme_inventory: 4,
        hidden: 5,
        kernel: 3,
        encoder_blocks: 1,
        duration_blocks: 1,
        decoder_blocks: 1,
        embed_dim: 3,
        attention_hidden: 3,
        mel_bins: 2,
        hop_seconds: 0.01,
        ssl_layers: 3,
        ssl_dims: 4,
        init_seed: seed,
    }
}

/// A tiny model plus a random smooth readout of its training outputs.
pub struct ModelProbe {
    pub model: TtsModel<f64>,
    pub phonemes: PhonemeSequence,
    pub stacks: Vec<RepresentationStack>,
    pub durations: Vec<u32>,
    pub mel_readout: Matrix<f64>,
    pub dur_readout: Vec<f64>,
}

impl ModelProbe {
    pub fn new(mode: ConditioningMode, aggregator: AggregatorKind, seed: u64) -> Self {
        let model = TtsModel::<f64>::new(tiny_config(mode, aggregator, seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let p = rng.gen_range(2..5);
        let ids: Vec<u16> = (0..p).map(|_| rng.gen_range(0..4)).collect();
        let durations: Vec<u32> = (0..p)
            .map(|i| if i == 1 { 0 } else { rng.gen_range(1..4) })
            .collect();
        let phonemes =
            PhonemeSequence::from_ids("probe", &ids, 4, Some(durations.clone())).unwrap();
        let stacks = (0..model.embeddings.len())
            .map(|_| {
                let f = rng.gen_range(2..5);
                random_stack(&mut rng, 3, f, 4)
            })
            .collect();
        let t: usize = durations.iter().map(|&d| d as usize).sum();
        Self {
            model,
            phonemes,
            stacks,
            mel_readout: random_matrix(&mut rng, t, 2),
            dur_readout: (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            durations,
        }
    }

    pub fn loss(&self, m: &TtsModel<f64>) -> f64 {
        let refs: Vec<&RepresentationStack> = self.stacks.iter().collect();
        let (out, _) = m
            .forward_train(&self.phonemes, &refs, &self.durations)
            .unwrap();
        let mel: f64 = out
            .mel
            .data()
            .iter()
            .zip(self.mel_readout.data())
            .map(|(a, b)| a * b)
            .sum();
        let dur: f64 = out
            .log_durations
            .iter()
            .zip(&self.dur_readout)
            .map(|(a, b)| a * b)
            .sum();
        mel + dur
    }

    pub fn backward(&self, m: &mut TtsModel<f64>) {
        let refs: Vec<&RepresentationStack> = self.stacks.iter().collect();
        let (_, cache) = m
            .forward_train(&self.phonemes, &refs, &self.durations)
            .unwrap();
        m.backward_train(
            &self.phonemes,
            &refs,
            &cache,
            &self.mel_readout,
            &self.dur_readout,
        );
    }

    pub fn check(mut self) -> GradCheckReport {
        let mut model = self.model.clone();
        let probe = &mut self;
        let report = grad_check(
            &mut model,
            |m| probe.loss(m),
            |m| probe.backward(m),
            EPS,
            TOL,
        )
        .unwrap();
        probe.model = model;
        report
    }
}

/// Worst relative error over parameters whose name starts with `prefix`.
pub fn block_error(report: &GradCheckReport, prefix: &str) -> Option<f64> {
    report
        .params
        .iter()
        .filter(|p| p.name.starts_with(prefix))
        .map(|p| p.max_rel_error)
        .reduce(f64::max)
}

pub fn count_params<M: HasParams<f64>>(m: &M) -> usize {
    m.param_count()
}
