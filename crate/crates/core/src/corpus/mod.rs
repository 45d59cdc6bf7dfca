//! Synthetic corpus generation, manifests and speaker-disjoint splits.

mod generator;
mod manifest;

use std::path::Path;

use rayon::prelude::*;

pub use generator::{CorpusConfig, CorpusGenerator, GeneratedUtterance, SpeakerProfile};
pub use manifest::{load_manifest, Manifest, UtteranceRecord, MANIFEST_HEADER};

use crate::error::{Error, Result};
use crate::features::{save_external, ExtractorConfig, PseudoSsl};

/// Speaker factor table written next to the manifests.
pub const SPEAKERS_FILE: &str = "speakers.tsv";

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Renders `utterances` utterances of each profile into `out_dir`.
///
/// Files land in `mel/`, `wav/` and `feat/`; records come back in
/// (speaker, utterance) order whatever the thread count.
pub fn write_speakers(
    generator: &CorpusGenerator,
    profiles: &[SpeakerProfile],
    utterances: usize,
    extractor: Option<&PseudoSsl>,
    out_dir: &Path,
) -> Result<Manifest> {
    let cfg = generator.config();
    for sub in ["mel", "wav", "feat"] {
        create_dir(&out_dir.join(sub))?;
    }
    let jobs: Vec<(&SpeakerProfile, u64)> = profiles
        .iter()
        .flat_map(|p| (0..utterances as u64).map(move |u| (p, u)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(spk, u)| {
            let utt = generator.utterance(spk, u)?;
            let mel = out_dir.join("mel").join(format!("{}.mel", utt.id));
            utt.mel.write(&mel)?;
            let wav = match (&utt.waveform, cfg.write_waveforms) {
                (Some(w), true) => {
                    let p = out_dir.join("wav").join(format!("{}.wav", utt.id));
                    w.write_wav(&p)?;
                    Some(p)
                }
                _ => None,
            };
            let features = match (&utt.waveform, extractor) {
                (Some(w), Some(ex)) => {
                    let p = out_dir.join("feat").join(format!("{}.feat", utt.id));
                    save_external(&ex.extract(w)?, &p)?;
                    Some(p)
                }
                _ => None,
            };
            Ok(UtteranceRecord {
                id: utt.id,
                speaker: utt.speaker,
                phonemes: utt.phonemes,
                durations: utt.durations,
                mel,
                wav,
                features,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Manifest::new(records))
}

pub fn speakers_table(profiles: &[SpeakerProfile]) -> String {
    let mut out = String::from("speaker\trate\tjitter\ttilt\tf0_hz\n");
    for p in profiles {
        out.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.3}\n",
            p.id, p.rate, p.jitter, p.tilt, p.f0_hz
        ));
    }
    out
}

/// Paths of the manifests written by [`generate_corpus`].
pub struct CorpusLayout {
    pub all: std::path::PathBuf,
    pub train: std::path::PathBuf,
    pub val: std::path::PathBuf,
    pub test: std::path::PathBuf,
}

impl CorpusLayout {
    pub fn new(dir: &Path) -> Self {
        Self {
            all: dir.join("corpus.tsv"),
            train: dir.join("train.tsv"),
            val: dir.join("val.tsv"),
            test: dir.join("test.tsv"),
        }
    }
}

/// Generates the full corpus, its split and the speaker table under `out_dir`.
pub fn generate_corpus(
    cfg: &CorpusConfig,
    extractor: &ExtractorConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<(Manifest, [Manifest; 3])> {
    cfg.validate()?;
    let generator = CorpusGenerator::new(cfg.clone(), seed)?;
    let ssl = if cfg.extract_features {
        cfg.check_extractor(extractor)?;
        Some(PseudoSsl::new(extractor.clone())?)
    } else {
        None
    };
    create_dir(out_dir)?;
    let profiles: Vec<SpeakerProfile> = (0..cfg.speakers as u64)
        .map(|i| generator.speaker(i))
        .collect();
    let manifest = write_speakers(
        &generator,
        &profiles,
        cfg.utterances_per_speaker,
        ssl.as_ref(),
        out_dir,
    )?;
    let parts = manifest.split(cfg.split_ratios(), seed)?;
    let layout = CorpusLayout::new(out_dir);
    manifest.write(&layout.all)?;
    for (m, p) in parts.iter().zip([&layout.train, &layout.val, &layout.test]) {
        m.write(p)?;
    }
    let table = out_dir.join(SPEAKERS_FILE);
    std::fs::write(&table, speakers_table(&profiles)).map_err(|e| Error::io(&table, e))?;
    Ok((manifest, parts))
}
