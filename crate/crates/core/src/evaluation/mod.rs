//! Objective evaluation on unseen speakers, rhythm-transfer measurement and
//! layer-weight export.

mod metrics;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{duration_rmse_ms, duration_sq_error, mean_std, mel_mae, speaking_rate};

use crate::acoustic::{ConditioningMode, PhonemeSequence, TtsModel};
use crate::corpus::{Manifest, UtteranceRecord};
use crate::embedding::EmbeddingRole;
use crate::error::{invalid, Error, Result};
use crate::features::RepresentationStack;
use crate::training::LoadedModel;

/// Reference selection for the objective protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    /// The evaluated utterance is its own reference.
    Parallel,
    /// One seeded-random utterance per speaker serves every item of that speaker.
    NonParallel,
}

impl std::str::FromStr for Condition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Self::Parallel),
            "non-parallel" | "nonparallel" => Ok(Self::NonParallel),
            other => Err(invalid(format!(
                "unknown condition `{other}` (expected parallel or non-parallel)"
            ))),
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Parallel => "parallel",
            Self::NonParallel => "non-parallel",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub utterance: String,
    pub speaker: String,
    pub reference: String,
    pub phonemes: usize,
    pub mel_mae: f64,
    pub duration_rmse_ms: f64,
    /// Sum of squared frame errors, kept so the pooled RMSE can be recomputed.
    pub duration_sq_frames: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub condition: Condition,
    pub seed: u64,
    pub hop_seconds: f64,
    /// Mean of the per-utterance values.
    pub mel_mae: f64,
    /// Pooled over every phoneme of every utterance.
    pub duration_rmse_ms: f64,
    pub utterances: Vec<UtteranceScore>,
}

impl EvalReport {
    fn assemble(
        model: String,
        condition: Condition,
        seed: u64,
        hop_seconds: f64,
        mut rows: Vec<UtteranceScore>,
    ) -> Self {
        rows.sort_by(|a, b| a.utterance.cmp(&b.utterance));
        let n = rows.len().max(1) as f64;
        let mel_mae = rows.iter().map(|r| r.mel_mae).sum::<f64>() / n;
        let phonemes: usize = rows.iter().map(|r| r.phonemes).sum();
        let sq: f64 = rows.iter().map(|r| r.duration_sq_frames).sum();
        let duration_rmse_ms = if phonemes == 0 {
            0.0
        } else {
            (sq / phonemes as f64).sqrt() * hop_seconds * 1000.0
        };
        Self {
            model,
            condition,
            seed,
            hop_seconds,
            mel_mae,
            duration_rmse_ms,
            utterances: rows,
        }
    }

    /// Per-utterance rows followed by an aggregate row, with the spectral
    /// and duration columns side by side.
    pub fn to_tsv(&self) -> String {
        let mut out =
            String::from("utterance\tspeaker\treference\tcondition\tspec_mel_mae\tdur_rmse_ms\n");
        for r in &self.utterances {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\n",
                r.utterance, r.speaker, r.reference, self.condition, r.mel_mae, r.duration_rmse_ms
            ));
        }
        out.push_str(&format!(
            "ALL\t-\t-\t{}\t{:.6}\t{:.6}\n",
            self.condition, self.mel_mae, self.duration_rmse_ms
        ));
        out
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({
            "model": self.model,
            "condition": self.condition,
            "seed": self.seed,
            "utterances": self.utterances.len(),
            "mel_mae": self.mel_mae,
            "duration_rmse_ms": self.duration_rmse_ms,
        }))
        .expect("summary is always serializable")
    }
}

/// Rejects test speakers that the checkpoint was trained on.
pub fn check_unseen(loaded: &LoadedModel, test: &Manifest) -> Result<()> {
    let trained: BTreeSet<&String> = loaded.meta.train_speakers.iter().collect();
    let overlap: Vec<String> = test
        .speakers()
        .into_iter()
        .filter(|s| trained.contains(s))
        .collect();
    if !overlap.is_empty() {
        return Err(Error::Protocol(format!(
            "test speakers also appear in training: {}",
            overlap.join(", ")
        )));
    }
    Ok(())
}

/// Reference utterance id for every record under `condition`.
pub fn assign_references(
    test: &Manifest,
    condition: Condition,
    seed: u64,
) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    match condition {
        Condition::Parallel => {
            for r in &test.records {
                out.insert(r.id.clone(), r.id.clone());
            }
        }
        Condition::NonParallel => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for spk in test.speakers() {
                let mut ids: Vec<&String> = test.for_speaker(&spk).map(|r| &r.id).collect();
                ids.sort();
                let pick = ids[rng.gen_range(0..ids.len())].clone();
                for id in ids {
                    out.insert(id.clone(), pick.clone());
                }
            }
        }
    }
    out
}

/// Teacher-forced spectral error and predicted-duration error per test
/// utterance of unseen speakers.
pub fn run_objective_eval(
    loaded: &LoadedModel,
    model_id: &str,
    test: &Manifest,
    condition: Condition,
    seed: u64,
) -> Result<EvalReport> {
    check_unseen(loaded, test)?;
    let model = &loaded.model;
    let refs = assign_references(test, condition, seed);
    let ref_ids: BTreeSet<&String> = refs.values().collect();
    let stacks: BTreeMap<String, RepresentationStack> = ref_ids
        .into_par_iter()
        .map(|id| {
            let r = test.find(id).expect("reference comes from the manifest");
            Ok((id.clone(), r.load_features()?))
        })
        .collect::<Result<_>>()?;
    let rows = test
        .records
        .par_iter()
        .map(|r| {
            let reference = &refs[&r.id];
            let stack = &stacks[reference];
            score_utterance(model, r, reference, stack)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::assemble(
        model_id.to_string(),
        condition,
        seed,
        model.config().hop_seconds,
        rows,
    ))
}

fn score_utterance(
    model: &TtsModel<f32>,
    r: &UtteranceRecord,
    reference: &str,
    stack: &RepresentationStack,
) -> Result<UtteranceScore> {
    let ph = r.phoneme_sequence(model.config().phoneme_inventory)?;
    let target = r.load_mel()?;
    let out = model.synthesize(&ph, stack, None, Some(&r.durations))?;
    let sq = duration_sq_error(&out.predicted_durations, &r.durations)?;
    Ok(UtteranceScore {
        utterance: r.id.clone(),
        speaker: r.speaker.clone(),
        reference: reference.to_string(),
        phonemes: r.durations.len(),
        mel_mae: mel_mae(&out.mel, &target)?,
        duration_rmse_ms: duration_rmse_ms(
            &out.predicted_durations,
            &r.durations,
            model.config().hop_seconds,
        )?,
        duration_sq_frames: sq,
    })
}

/// Summary of a rate distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateStats {
    pub mean: f64,
    pub std: f64,
}

impl RateStats {
    pub fn of(v: &[f64]) -> Self {
        let (mean, std) = mean_std(v);
        Self { mean, std }
    }
}

/// A speaker taking part in rhythm transfer: its reference features and
/// the durations of its recorded utterances.
pub struct TransferSpeaker {
    pub id: String,
    pub reference_id: String,
    pub reference: RepresentationStack,
    pub original_durations: Vec<Vec<u32>>,
}

impl TransferSpeaker {
    /// Uses a seeded-random utterance of `records` as the reference.
    pub fn from_records(records: &[&UtteranceRecord], seed: u64) -> Result<Self> {
        if records.is_empty() {
            return Err(invalid("rhythm transfer speaker has no utterances"));
        }
        let mut sorted: Vec<&&UtteranceRecord> = records.iter().collect();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        let pick = sorted[ChaCha8Rng::seed_from_u64(seed).gen_range(0..sorted.len())];
        Ok(Self {
            id: pick.speaker.clone(),
            reference_id: pick.id.clone(),
            reference: pick.load_features()?,
            original_durations: sorted.iter().map(|r| r.durations.clone()).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextRates {
    pub text: String,
    /// Plain synthesis of each speaker.
    pub a_plain: f64,
    pub b_plain: f64,
    /// Acoustic reference A with B's rhythm, and B with A's rhythm.
    pub a_with_b_rhythm: f64,
    pub b_with_a_rhythm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhythmReport {
    pub speaker_a: String,
    pub speaker_b: String,
    pub reference_a: String,
    pub reference_b: String,
    pub original_a: RateStats,
    pub original_b: RateStats,
    pub plain_a: RateStats,
    pub plain_b: RateStats,
    pub a_with_b_rhythm: RateStats,
    pub b_with_a_rhythm: RateStats,
    pub texts: Vec<TextRates>,
}

impl RhythmReport {
    /// Texts where the transferred rate is strictly closer to the
    /// duration-reference speaker's original mean rate, per direction.
    pub fn tracking_counts(&self) -> (usize, usize) {
        let (ra, rb) = (self.original_a.mean, self.original_b.mean);
        let a_b = self
            .texts
            .iter()
            .filter(|t| (t.a_with_b_rhythm - rb).abs() < (t.a_with_b_rhythm - ra).abs())
            .count();
        let b_a = self
            .texts
            .iter()
            .filter(|t| (t.b_with_a_rhythm - ra).abs() < (t.b_with_a_rhythm - rb).abs())
            .count();
        (a_b, b_a)
    }

    /// Speaking-rate table: one row per (acoustic, rhythm) pairing with
    /// the original rates of both speakers alongside.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("acoustic\trhythm\toriginal_mean\toriginal_std\treference_mean\treference_std\tgenerated_mean\tgenerated_std\n");
        let rows = [
            (
                &self.speaker_a,
                &self.speaker_a,
                self.original_a,
                self.original_a,
                self.plain_a,
            ),
            (
                &self.speaker_b,
                &self.speaker_b,
                self.original_b,
                self.original_b,
                self.plain_b,
            ),
            (
                &self.speaker_a,
                &self.speaker_b,
                self.original_a,
                self.original_b,
                self.a_with_b_rhythm,
            ),
            (
                &self.speaker_b,
                &self.speaker_a,
                self.original_b,
                self.original_a,
                self.b_with_a_rhythm,
            ),
        ];
        for (ac, rh, orig, reference, gen) in rows {
            out.push_str(&format!(
                "{ac}\t{rh}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
                orig.mean, orig.std, reference.mean, reference.std, gen.mean, gen.std
            ));
        }
        out
    }
}

/// Swaps the rhythm of two unseen speakers over `texts`.
pub fn run_rhythm_transfer_eval(
    loaded: &LoadedModel,
    a: &TransferSpeaker,
    b: &TransferSpeaker,
    texts: &[PhonemeSequence],
) -> Result<RhythmReport> {
    let model = &loaded.model;
    if model.mode() != ConditioningMode::Separate {
        return Err(Error::Protocol(
            "rhythm transfer needs a separate-conditioning checkpoint; common mode has one embedding".into(),
        ));
    }
    let trained: BTreeSet<&String> = loaded.meta.train_speakers.iter().collect();
    for s in [&a.id, &b.id] {
        if trained.contains(s) {
            return Err(Error::Protocol(format!("speaker {s} was seen in training")));
        }
    }
    let hop = model.config().hop_seconds;
    let (a_ac, a_dur) = model.reference_embeddings(&a.reference, None)?;
    let (b_ac, b_dur) = model.reference_embeddings(&b.reference, None)?;
    let rate = |ph: &PhonemeSequence, ac, dur| -> Result<f64> {
        let r = model.synthesize_with(ph, ac, dur, None)?;
        speaking_rate(&r.durations, hop)
    };
    let texts_out = texts
        .par_iter()
        .map(|ph| {
            Ok(TextRates {
                text: ph.id.clone(),
                a_plain: rate(ph, &a_ac, &a_dur)?,
                b_plain: rate(ph, &b_ac, &b_dur)?,
                a_with_b_rhythm: rate(ph, &a_ac, &b_dur)?,
                b_with_a_rhythm: rate(ph, &b_ac, &a_dur)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let originals = |s: &TransferSpeaker| -> Result<RateStats> {
        let v = s
            .original_durations
            .iter()
            .map(|d| speaking_rate(d, hop))
            .collect::<Result<Vec<_>>>()?;
        Ok(RateStats::of(&v))
    };
    let col =
        |f: fn(&TextRates) -> f64| RateStats::of(&texts_out.iter().map(f).collect::<Vec<_>>());
    Ok(RhythmReport {
        speaker_a: a.id.clone(),
        speaker_b: b.id.clone(),
        reference_a: a.reference_id.clone(),
        reference_b: b.reference_id.clone(),
        original_a: originals(a)?,
        original_b: originals(b)?,
        plain_a: col(|t| t.a_plain),
        plain_b: col(|t| t.b_plain),
        a_with_b_rhythm: col(|t| t.a_with_b_rhythm),
        b_with_a_rhythm: col(|t| t.b_with_a_rhythm),
        texts: texts_out,
    })
}

/// Softmax layer weights, one row per embedding role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeightTable {
    pub rows: Vec<(EmbeddingRole, Vec<f64>)>,
}

impl LayerWeightTable {
    pub fn row(&self, role: EmbeddingRole) -> Option<&[f64]> {
        self.rows
            .iter()
            .find(|(r, _)| *r == role)
            .map(|(_, w)| w.as_slice())
    }

    pub fn to_tsv(&self) -> String {
        let layers = self.rows.first().map_or(0, |r| r.1.len());
        let mut out = String::from("role");
        for l in 0..layers {
            out.push_str(&format!("\tlayer{l}"));
        }
        out.push('\n');
        for (role, w) in &self.rows {
            out.push_str(role.as_str());
            for x in w {
                out.push_str(&format!("\t{x:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn export_layer_weights(loaded: &LoadedModel) -> LayerWeightTable {
    LayerWeightTable {
        rows: loaded.model.layer_weight_rows(),
    }
}

/// Total variation distance between two distributions.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Weight mass on layers `l >= L / 2`, where `L = w.len() - 1` is the
/// number of blocks above layer 0.
pub fn deep_mass(w: &[f64]) -> f64 {
    let blocks = w.len().saturating_sub(1);
    w[blocks.div_ceil(2)..].iter().sum()
}
