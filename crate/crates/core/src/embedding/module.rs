use rand::Rng;
use serde::{Deserialize, Serialize};

use super::aggregate::{AggregateCache, Aggregator, AggregatorKind};
use super::weights::LayerWeights;
use crate::error::{invalid, Result};
use crate::features::RepresentationStack;
use crate::numerics::{HasParams, Linear, Matrix, Parameter, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingRole {
    Shared,
    Acoustic,
    Duration,
}

impl EmbeddingRole {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingRole::Shared => "shared",
            EmbeddingRole::Acoustic => "acoustic",
            EmbeddingRole::Duration => "duration",
        }
    }
}

impl std::fmt::Display for EmbeddingRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding<T> {
    pub vector: Vec<T>,
    pub role: EmbeddingRole,
}

/// Layer weighted-sum followed by an aggregator.
#[derive(Clone, Debug)]
pub struct EmbeddingModule<T> {
    pub role: EmbeddingRole,
    pub layer_weights: LayerWeights<T>,
    pub aggregator: Aggregator<T>,
}

pub struct EmbeddingCache<T> {
    frames: Matrix<T>,
    aggregate: AggregateCache<T>,
}

impl<T: Real> EmbeddingCache<T> {
    pub fn attention(&self) -> Option<&[T]> {
        self.aggregate.attention()
    }
}

impl<T: Real> EmbeddingModule<T> {
    pub fn new(
        role: EmbeddingRole,
        kind: AggregatorKind,
        layers: usize,
        dims: usize,
        hidden: usize,
        embed: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let name = format!("embed.{role}");
        Self {
            role,
            layer_weights: LayerWeights::uniform(&name, layers),
            aggregator: Aggregator::new(kind, &name, dims, hidden, embed, rng),
        }
    }

    pub fn forward(
        &self,
        stack: &RepresentationStack,
    ) -> Result<(SpeakerEmbedding<T>, EmbeddingCache<T>)> {
        let frames = self.layer_weights.weighted_sum(stack)?;
        let (vector, aggregate) = self.aggregator.forward(&frames)?;
        Ok((
            SpeakerEmbedding {
                vector,
                role: self.role,
            },
            EmbeddingCache { frames, aggregate },
        ))
    }

    pub fn embed(&self, stack: &RepresentationStack) -> Result<SpeakerEmbedding<T>> {
        Ok(self.forward(stack)?.0)
    }

    pub fn backward(
        &mut self,
        stack: &RepresentationStack,
        cache: &EmbeddingCache<T>,
        d_embed: &[T],
    ) {
        let d_frames = self
            .aggregator
            .backward(&cache.frames, &cache.aggregate, d_embed);
        self.layer_weights.backward(stack, &d_frames);
    }
}

impl<T: Real> HasParams<T> for EmbeddingModule<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.layer_weights.visit(f);
        self.aggregator.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.layer_weights.visit_mut(f);
        self.aggregator.visit_mut(f);
    }
}

/// Statistics-pooling baseline: per-bin mean and population standard
/// deviation of a log-mel spectrogram over time, concatenated
/// (`[means..., stds...]`) and linearly projected.
#[derive(Clone, Debug)]
pub struct StatsEmbedder<T> {
    pub proj: Linear<T>,
}

impl<T: Real> StatsEmbedder<T> {
    pub fn new(bins: usize, embed: usize, rng: &mut impl Rng) -> Self {
        Self {
            proj: Linear::new("embed.stats.proj", 2 * bins, embed, rng),
        }
    }

    /// Mean and population standard deviation per bin.
    pub fn statistics(mel: &Matrix<T>) -> Result<Vec<T>> {
        let t_len = mel.rows();
        if t_len < 2 {
            return Err(invalid(format!(
                "statistics pooling needs at least 2 frames, got {t_len}"
            )));
        }
        let n = T::lit(t_len as f64);
        let mean: Vec<T> = mel.col_sums().into_iter().map(|s| s / n).collect();
        let mut var = vec![T::zero(); mel.cols()];
        for row in mel.iter_rows() {
            for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt());
        Ok(mean.iter().copied().chain(std).collect())
    }

    pub fn embed(&self, mel: &Matrix<T>) -> Result<SpeakerEmbedding<T>> {
        let stats = Self::statistics(mel)?;
        if stats.len() != self.proj.inputs() {
            return Err(invalid(format!(
                "mel has {} bins, embedder expects {}",
                mel.cols(),
                self.proj.inputs() / 2
            )));
        }
        Ok(SpeakerEmbedding {
            vector: self.proj.forward_vec(&stats),
            role: EmbeddingRole::Shared,
        })
    }

    pub fn backward(&mut self, mel: &Matrix<T>, d_embed: &[T]) -> Result<()> {
        let stats = Self::statistics(mel)?;
        self.proj.backward_vec(&stats, d_embed);
        Ok(())
    }
}

impl<T: Real> HasParams<T> for StatsEmbedder<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.proj.visit(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.proj.visit_mut(f)
    }
}
