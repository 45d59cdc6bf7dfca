//! Non-autoregressive acoustic model with embedding conditioning.
//!
//! ```text
//!   phonemes ──input──encoder──► core ─┬─ + enc_cond(e_dur) + dur_cond(e_dur) ─► duration stack ─► log durations
//!                                      └─ + enc_cond(e_ac) ─► length regulator ─► + dec_cond(e_ac) ─► decoder ─► mel
//! ```
//!
//! In common mode `e_dur` and `e_ac` are the same shared embedding. In
//! separate mode they come from two embedding modules with their own layer
//! weights, and there is no dataflow from the acoustic reference into the
//! duration branch or from the duration reference into the mel branch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::types::{
    length_regulate, length_regulate_backward, linguistic_width, to_frames, ConditioningMode,
    MelSpectrogram, PhonemeSequence,
};
use crate::embedding::{
    AggregatorKind, EmbeddingCache, EmbeddingModule, EmbeddingRole, SpeakerEmbedding,
};
use crate::error::{invalid, Error, Result};
use crate::features::RepresentationStack;
use crate::numerics::layers::ConvStackCache;
use crate::numerics::{ConvStack, HasParams, Linear, Matrix, Parameter, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mode: ConditioningMode,
    pub aggregator: AggregatorKind,
    pub phoneme_inventory: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub encoder_blocks: usize,
    pub duration_blocks: usize,
    pub decoder_blocks: usize,
    pub embed_dim: usize,
    /// LSTM width of the attentive aggregator.
    pub attention_hidden: usize,
    pub mel_bins: usize,
    pub hop_seconds: f64,
    /// Layer count of the representation stacks, including layer 0.
    pub ssl_layers: usize,
    pub ssl_dims: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: ConditioningMode::Separate,
            aggregator: AggregatorKind::Attentive,
            phoneme_inventory: 20,
            hidden: 48,
            kernel: 3,
            encoder_blocks: 2,
            duration_blocks: 2,
            decoder_blocks: 2,
            embed_dim: 32,
            attention_hidden: 32,
            mel_bins: 20,
            hop_seconds: 0.01,
            ssl_layers: 7,
            ssl_dims: 64,
            init_seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("phoneme_inventory", self.phoneme_inventory),
            ("hidden", self.hidden),
            ("kernel", self.kernel),
            ("embed_dim", self.embed_dim),
            ("attention_hidden", self.attention_hidden),
            ("mel_bins", self.mel_bins),
            ("ssl_layers", self.ssl_layers),
            ("ssl_dims", self.ssl_dims),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config("model.kernel must be odd".into()));
        }
        if !(self.hop_seconds > 0.0) {
            return Err(Error::Config("model.hop_seconds must be positive".into()));
        }
        Ok(())
    }

    pub fn linguistic_dims(&self) -> usize {
        linguistic_width(self.phoneme_inventory)
    }

    pub fn roles(&self) -> &'static [EmbeddingRole] {
        match self.mode {
            ConditioningMode::Common => &[EmbeddingRole::Shared],
            ConditioningMode::Separate => &[EmbeddingRole::Acoustic, EmbeddingRole::Duration],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisResult {
    pub mel: MelSpectrogram,
    pub predicted_durations: Vec<u32>,
    /// Durations that drove the length regulator (teacher or predicted).
    pub durations: Vec<u32>,
    pub embeddings: Vec<SpeakerEmbedding<f32>>,
}

#[derive(Clone, Debug)]
pub struct TtsModel<T> {
    cfg: ModelConfig,
    pub embeddings: Vec<EmbeddingModule<T>>,
    pub input: Linear<T>,
    pub encoder: ConvStack<T>,
    pub enc_cond: Linear<T>,
    pub dur_cond: Linear<T>,
    pub duration: ConvStack<T>,
    pub dur_out: Linear<T>,
    pub dec_cond: Linear<T>,
    pub decoder: ConvStack<T>,
    pub mel_out: Linear<T>,
}

/// Everything the backward pass needs from one teacher-forced forward pass.
pub struct ForwardCache<T> {
    embed_caches: Vec<EmbeddingCache<T>>,
    embeds: Vec<Vec<T>>,
    enc_cache: ConvStackCache<T>,
    dur_cache: ConvStackCache<T>,
    dur_hidden: Matrix<T>,
    dec_cache: ConvStackCache<T>,
    dec_hidden: Matrix<T>,
    durations: Vec<u32>,
}

pub struct ForwardOutput<T> {
    pub mel: Matrix<T>,
    pub log_durations: Vec<T>,
}

impl<T: Real> TtsModel<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let h = cfg.hidden;
        let embeddings = cfg
            .roles()
            .iter()
            .map(|&role| {
                EmbeddingModule::new(
                    role,
                    cfg.aggregator,
                    cfg.ssl_layers,
                    cfg.ssl_dims,
                    cfg.attention_hidden,
                    cfg.embed_dim,
                    &mut rng,
                )
            })
            .collect();
        Ok(Self {
            embeddings,
            input: Linear::new("encoder.input", cfg.linguistic_dims(), h, &mut rng),
            encoder: ConvStack::new("encoder.block", cfg.encoder_blocks, h, cfg.kernel, &mut rng)?,
            enc_cond: Linear::new("encoder.cond", cfg.embed_dim, h, &mut rng),
            dur_cond: Linear::new("duration.cond", cfg.embed_dim, h, &mut rng),
            duration: ConvStack::new(
                "duration.block",
                cfg.duration_blocks,
                h,
                cfg.kernel,
                &mut rng,
            )?,
            dur_out: Linear::new("duration.out", h, 1, &mut rng),
            dec_cond: Linear::new("decoder.cond", cfg.embed_dim, h, &mut rng),
            decoder: ConvStack::new("decoder.block", cfg.decoder_blocks, h, cfg.kernel, &mut rng)?,
            mel_out: Linear::new("decoder.out", h, cfg.mel_bins, &mut rng),
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn mode(&self) -> ConditioningMode {
        self.cfg.mode
    }

    pub fn embedding_module(&self, role: EmbeddingRole) -> Option<&EmbeddingModule<T>> {
        self.embeddings.iter().find(|m| m.role == role)
    }

    fn acoustic_index(&self) -> usize {
        0
    }

    fn duration_index(&self) -> usize {
        match self.cfg.mode {
            ConditioningMode::Common => 0,
            ConditioningMode::Separate => 1,
        }
    }

    /// Role that conditions the duration predictor.
    pub fn duration_role(&self) -> EmbeddingRole {
        self.embeddings[self.duration_index()].role
    }

    /// Role that conditions the encoder output feeding the decoder and the decoder.
    pub fn acoustic_role(&self) -> EmbeddingRole {
        self.embeddings[self.acoustic_index()].role
    }

    fn check_embedding(&self, e: &SpeakerEmbedding<T>) -> Result<()> {
        if e.vector.len() != self.cfg.embed_dim {
            return Err(invalid(format!(
                "embedding has {} dims, model expects {}",
                e.vector.len(),
                self.cfg.embed_dim
            )));
        }
        Ok(())
    }

    fn check_phonemes(&self, ph: &PhonemeSequence) -> Result<()> {
        if ph.linguistic.cols() != self.cfg.linguistic_dims() {
            return Err(Error::Config(format!(
                "linguistic vectors have width {}, model expects {}",
                ph.linguistic.cols(),
                self.cfg.linguistic_dims()
            )));
        }
        Ok(())
    }

    fn encoder_core(&self, ph: &PhonemeSequence) -> (Matrix<T>, ConvStackCache<T>, Matrix<T>) {
        let x: Matrix<T> = ph.linguistic.cast();
        let (core, cache) = self.encoder.forward(&self.input.forward(&x));
        (x, cache, core)
    }

    /// Encoder output with the projected embedding added at every position.
    pub fn encode(&self, ph: &PhonemeSequence, e: &SpeakerEmbedding<T>) -> Result<Matrix<T>> {
        self.check_phonemes(ph)?;
        self.check_embedding(e)?;
        let (_, _, mut core) = self.encoder_core(ph);
        core.add_row_broadcast(&self.enc_cond.forward_vec(&e.vector));
        Ok(core)
    }

    /// Log-scale (`ln(frames + 1)`) duration per phoneme.
    pub fn predict_duration(
        &self,
        hidden: &Matrix<T>,
        e_dur: &SpeakerEmbedding<T>,
    ) -> Result<Vec<T>> {
        if hidden.rows() == 0 || hidden.cols() != self.cfg.hidden {
            return Err(invalid(
                "duration predictor needs a nonempty [P][hidden] input",
            ));
        }
        self.check_embedding(e_dur)?;
        let mut x = hidden.clone();
        x.add_row_broadcast(&self.dur_cond.forward_vec(&e_dur.vector));
        let (h, _) = self.duration.forward(&x);
        Ok(self.dur_out.forward(&h).into_vec())
    }

    pub fn decode(&self, frames: &Matrix<T>, e_ac: &SpeakerEmbedding<T>) -> Result<Matrix<T>> {
        if frames.rows() == 0 || frames.cols() != self.cfg.hidden {
            return Err(invalid("decoder needs a nonempty [T][hidden] input"));
        }
        self.check_embedding(e_ac)?;
        let mut x = frames.clone();
        x.add_row_broadcast(&self.dec_cond.forward_vec(&e_ac.vector));
        let (h, _) = self.decoder.forward(&x);
        Ok(self.mel_out.forward(&h))
    }

    pub fn embed(
        &self,
        role: EmbeddingRole,
        stack: &RepresentationStack,
    ) -> Result<SpeakerEmbedding<T>> {
        self.embedding_module(role)
            .ok_or_else(|| invalid(format!("model has no `{role}` embedding module")))?
            .embed(stack)
    }

    /// Embeddings for (acoustic path, duration path) from reference stacks.
    ///
    /// Common mode rejects a duration reference that differs from the
    /// acoustic one; separate mode defaults it to the acoustic reference.
    pub fn reference_embeddings(
        &self,
        ref_acoustic: &RepresentationStack,
        ref_duration: Option<&RepresentationStack>,
    ) -> Result<(SpeakerEmbedding<T>, SpeakerEmbedding<T>)> {
        match self.cfg.mode {
            ConditioningMode::Common => {
                if let Some(d) = ref_duration {
                    if !d.same_contents(ref_acoustic) {
                        return Err(invalid(
                            "common conditioning has a single embedding; a distinct duration reference \
                             (rhythm transfer) needs a separate-mode model",
                        ));
                    }
                }
                let e = self.embed(EmbeddingRole::Shared, ref_acoustic)?;
                Ok((e.clone(), e))
            }
            ConditioningMode::Separate => {
                let e_ac = self.embed(EmbeddingRole::Acoustic, ref_acoustic)?;
                let e_dur = self.embed(
                    EmbeddingRole::Duration,
                    ref_duration.unwrap_or(ref_acoustic),
                )?;
                Ok((e_ac, e_dur))
            }
        }
    }

    /// Inference from precomputed embeddings.
    pub fn synthesize_with(
        &self,
        ph: &PhonemeSequence,
        e_ac: &SpeakerEmbedding<T>,
        e_dur: &SpeakerEmbedding<T>,
        teacher_durations: Option<&[u32]>,
    ) -> Result<SynthesisResult> {
        let hidden_dur = self.encode(ph, e_dur)?;
        let predicted = to_frames(&self.predict_duration(&hidden_dur, e_dur)?);
        let durations = match teacher_durations {
            Some(d) => {
                if d.len() != ph.len() {
                    return Err(invalid(format!(
                        "{} teacher durations for {} phonemes",
                        d.len(),
                        ph.len()
                    )));
                }
                d.to_vec()
            }
            None => predicted.clone(),
        };
        let hidden_ac = if self.cfg.mode == ConditioningMode::Common {
            hidden_dur
        } else {
            self.encode(ph, e_ac)?
        };
        let frames = length_regulate(&hidden_ac, &durations)?;
        let mel = self.decode(&frames, e_ac)?;
        let mut embeddings = vec![to_f32(e_ac)];
        if self.cfg.mode == ConditioningMode::Separate {
            embeddings.push(to_f32(e_dur));
        }
        Ok(SynthesisResult {
            mel: MelSpectrogram::new(mel.cast(), self.cfg.hop_seconds)?,
            predicted_durations: predicted,
            durations,
            embeddings,
        })
    }

    pub fn synthesize(
        &self,
        ph: &PhonemeSequence,
        ref_acoustic: &RepresentationStack,
        ref_duration: Option<&RepresentationStack>,
        teacher_durations: Option<&[u32]>,
    ) -> Result<SynthesisResult> {
        let (e_ac, e_dur) = self.reference_embeddings(ref_acoustic, ref_duration)?;
        self.synthesize_with(ph, &e_ac, &e_dur, teacher_durations)
    }

    /// Teacher-forced forward pass used for training. `stacks[i]` feeds
    /// embedding module `i` (one stack in common mode, acoustic then
    /// duration reference in separate mode).
    pub fn forward_train(
        &self,
        ph: &PhonemeSequence,
        stacks: &[&RepresentationStack],
        durations: &[u32],
    ) -> Result<(ForwardOutput<T>, ForwardCache<T>)> {
        self.check_phonemes(ph)?;
        if stacks.len() != self.embeddings.len() {
            return Err(invalid(format!(
                "{} reference stacks for {} embedding modules",
                stacks.len(),
                self.embeddings.len()
            )));
        }
        let mut embed_caches = Vec::with_capacity(stacks.len());
        let mut embeds = Vec::with_capacity(stacks.len());
        for (m, s) in self.embeddings.iter().zip(stacks) {
            let (e, c) = m.forward(s)?;
            embeds.push(e.vector);
            embed_caches.push(c);
        }
        let (e_ac, e_dur) = (
            &embeds[self.acoustic_index()],
            &embeds[self.duration_index()],
        );

        let (_, enc_cache, core) = self.encoder_core(ph);

        let mut dur_in = core.clone();
        dur_in.add_row_broadcast(&self.enc_cond.forward_vec(e_dur));
        dur_in.add_row_broadcast(&self.dur_cond.forward_vec(e_dur));
        let (dur_hidden, dur_cache) = self.duration.forward(&dur_in);
        let log_durations = self.dur_out.forward(&dur_hidden).into_vec();

        let mut hidden_ac = core;
        hidden_ac.add_row_broadcast(&self.enc_cond.forward_vec(e_ac));
        let mut dec_in = length_regulate(&hidden_ac, durations)?;
        dec_in.add_row_broadcast(&self.dec_cond.forward_vec(e_ac));
        let (dec_hidden, dec_cache) = self.decoder.forward(&dec_in);
        let mel = self.mel_out.forward(&dec_hidden);

        Ok((
            ForwardOutput { mel, log_durations },
            ForwardCache {
                embed_caches,
                embeds,
                enc_cache,
                dur_cache,
                dur_hidden,
                dec_cache,
                dec_hidden,
                durations: durations.to_vec(),
            },
        ))
    }

    /// Accumulates parameter gradients for loss gradients `d_mel` and
    /// `d_log_durations` from the forward pass that produced `cache`.
    pub fn backward_train(
        &mut self,
        ph: &PhonemeSequence,
        stacks: &[&RepresentationStack],
        cache: &ForwardCache<T>,
        d_mel: &Matrix<T>,
        d_log_durations: &[T],
    ) {
        let (ai, di) = (self.acoustic_index(), self.duration_index());
        let mut d_embeds: Vec<Vec<T>> = cache
            .embeds
            .iter()
            .map(|e| vec![T::zero(); e.len()])
            .collect();
        let add = |acc: &mut Vec<T>, d: Vec<T>| acc.iter_mut().zip(d).for_each(|(a, b)| *a += b);

        // mel branch
        let d_dec_hidden = self.mel_out.backward(&cache.dec_hidden, d_mel);
        let d_dec_in = self.decoder.backward(&cache.dec_cache, &d_dec_hidden);
        add(
            &mut d_embeds[ai],
            self.dec_cond
                .backward_vec(&cache.embeds[ai], &d_dec_in.col_sums()),
        );
        let d_hidden_ac = length_regulate_backward(&d_dec_in, &cache.durations);
        add(
            &mut d_embeds[ai],
            self.enc_cond
                .backward_vec(&cache.embeds[ai], &d_hidden_ac.col_sums()),
        );
        let mut d_core = d_hidden_ac;

        // duration branch
        let d_out = Matrix::from_vec(d_log_durations.len(), 1, d_log_durations.to_vec());
        let d_dur_hidden = self.dur_out.backward(&cache.dur_hidden, &d_out);
        let d_dur_in = self.duration.backward(&cache.dur_cache, &d_dur_hidden);
        let d_cols = d_dur_in.col_sums();
        add(
            &mut d_embeds[di],
            self.dur_cond.backward_vec(&cache.embeds[di], &d_cols),
        );
        add(
            &mut d_embeds[di],
            self.enc_cond.backward_vec(&cache.embeds[di], &d_cols),
        );
        d_core.add_assign(&d_dur_in);

        let d_input_out = self.encoder.backward(&cache.enc_cache, &d_core);
        let x: Matrix<T> = ph.linguistic.cast();
        self.input.backward(&x, &d_input_out);

        for (i, m) in self.embeddings.iter_mut().enumerate() {
            m.backward(stacks[i], &cache.embed_caches[i], &d_embeds[i]);
        }
    }

    /// Softmax layer weights per embedding role.
    pub fn layer_weight_rows(&self) -> Vec<(EmbeddingRole, Vec<f64>)> {
        self.embeddings
            .iter()
            .map(|m| {
                (
                    m.role,
                    m.layer_weights
                        .weights()
                        .iter()
                        .map(|w| w.as_f64())
                        .collect(),
                )
            })
            .collect()
    }
}

fn to_f32<T: Real>(e: &SpeakerEmbedding<T>) -> SpeakerEmbedding<f32> {
    SpeakerEmbedding {
        vector: e.vector.iter().map(|v| v.as_f32()).collect(),
        role: e.role,
    }
}

impl<T: Real> HasParams<T> for TtsModel<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.embeddings.visit(f);
        self.input.visit(f);
        self.encoder.visit(f);
        self.enc_cond.visit(f);
        self.dur_cond.visit(f);
        self.duration.visit(f);
        self.dur_out.visit(f);
        self.dec_cond.visit(f);
        self.decoder.visit(f);
        self.mel_out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.embeddings.visit_mut(f);
        self.input.visit_mut(f);
        self.encoder.visit_mut(f);
        self.enc_cond.visit_mut(f);
        self.dur_cond.visit_mut(f);
        self.duration.visit_mut(f);
        self.dur_out.visit_mut(f);
        self.dec_cond.visit_mut(f);
        self.decoder.visit_mut(f);
        self.mel_out.visit_mut(f);
    }
}

/// Names of the parameters owned by the duration predictor proper.
pub fn is_duration_predictor_param(name: &str) -> bool {
    name.starts_with("duration.")
}
