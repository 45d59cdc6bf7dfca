//! Tab-separated utterance manifests.
//!
//! One header line followed by one record per line with the columns
//!
//! ```text
//! utterance  speaker  phonemes  durations  mel  wav  features
//! ```
//!
//! `phonemes` and `durations` are comma-separated integers. File columns
//! are paths relative to the manifest's directory, or `-` when absent.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::acoustic::{MelSpectrogram, PhonemeSequence};
use crate::error::{Error, Result};
use crate::features::{load_external, RepresentationStack};

pub const MANIFEST_HEADER: &str = "utterance\tspeaker\tphonemes\tdurations\tmel\twav\tfeatures";

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub speaker: String,
    pub phonemes: Vec<u16>,
    pub durations: Vec<u32>,
    /// Absolute or caller-relative paths; written relative to the manifest.
    pub mel: PathBuf,
    pub wav: Option<PathBuf>,
    pub features: Option<PathBuf>,
}

impl UtteranceRecord {
    pub fn total_frames(&self) -> u32 {
        self.durations.iter().sum()
    }

    pub fn phoneme_sequence(&self, inventory: usize) -> Result<PhonemeSequence> {
        PhonemeSequence::from_ids(
            self.id.clone(),
            &self.phonemes,
            inventory,
            Some(self.durations.clone()),
        )
    }

    pub fn load_mel(&self) -> Result<MelSpectrogram> {
        MelSpectrogram::read(&self.mel)
    }

    pub fn load_features(&self) -> Result<RepresentationStack> {
        match &self.features {
            Some(p) => load_external(p),
            None => Err(Error::ManifestValidation {
                record: self.id.clone(),
                reason: "record has no feature file".into(),
            }),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
}

fn join_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn relative(path: &Path, base: &Path) -> String {
    path.strip_prefix(base)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

impl Manifest {
    pub fn new(records: Vec<UtteranceRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct speaker ids in sorted order.
    pub fn speakers(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.speaker.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn for_speaker<'a>(
        &'a self,
        speaker: &'a str,
    ) -> impl Iterator<Item = &'a UtteranceRecord> + 'a {
        self.records.iter().filter(move |r| r.speaker == speaker)
    }

    pub fn find(&self, id: &str) -> Option<&UtteranceRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn to_tsv(&self, base: &Path) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        let opt = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or_else(|| "-".to_string(), |p| relative(p, base))
        };
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.id,
                r.speaker,
                join_list(&r.phonemes),
                join_list(&r.durations),
                relative(&r.mel, base),
                opt(&r.wav),
                opt(&r.features),
            ));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        std::fs::write(path, self.to_tsv(base)).map_err(|e| Error::io(path, e))
    }

    /// Parses without touching the referenced files.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || (n == 0 && line == MANIFEST_HEADER) {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let id = cols.first().copied().unwrap_or("").to_string();
            let bad = |reason: String| Error::ManifestValidation {
                record: if id.is_empty() {
                    format!("line {}", n + 1)
                } else {
                    id.clone()
                },
                reason,
            };
            if cols.len() != 7 {
                return Err(bad(format!(
                    "expected 7 tab-separated columns, found {}",
                    cols.len()
                )));
            }
            let phonemes = parse_list::<u16>(cols[2]).map_err(|e| bad(format!("phonemes: {e}")))?;
            let durations =
                parse_list::<u32>(cols[3]).map_err(|e| bad(format!("durations: {e}")))?;
            let path = |s: &str| (s != "-").then(|| base.join(s));
            records.push(UtteranceRecord {
                id: id.clone(),
                speaker: cols[1].to_string(),
                phonemes,
                durations,
                mel: base.join(cols[4]),
                wav: path(cols[5]),
                features: path(cols[6]),
            });
        }
        Ok(Self { records })
    }

    /// Checks every record: nonempty, consistent lengths, files present,
    /// and mel length equal to the duration sum.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            let bad = |reason: String| Error::ManifestValidation {
                record: r.id.clone(),
                reason,
            };
            if !seen.insert(r.id.as_str()) {
                return Err(bad("duplicate utterance id".into()));
            }
            if r.phonemes.is_empty() {
                return Err(bad("no phonemes".into()));
            }
            if r.phonemes.len() != r.durations.len() {
                return Err(bad(format!(
                    "{} phonemes but {} durations",
                    r.phonemes.len(),
                    r.durations.len()
                )));
            }
            if r.total_frames() == 0 {
                return Err(bad("durations sum to zero".into()));
            }
            let mel = MelSpectrogram::read(&r.mel).map_err(|e| bad(e.to_string()))?;
            if mel.len() as u32 != r.total_frames() {
                return Err(bad(format!(
                    "mel has {} frames but durations sum to {}",
                    mel.len(),
                    r.total_frames()
                )));
            }
            if let Some(w) = &r.wav {
                if !w.is_file() {
                    return Err(bad(format!("missing waveform {}", w.display())));
                }
            }
            if let Some(f) = &r.features {
                load_external(f).map_err(|e| bad(e.to_string()))?;
            }
        }
        Ok(())
    }

    /// Speaker-disjoint train/validation/test partition.
    ///
    /// Validation and test receive `floor(n * ratio)` speakers each and
    /// training keeps the remainder; every part must be nonempty.
    pub fn split(&self, ratios: [f64; 3], seed: u64) -> Result<[Manifest; 3]> {
        let sum: f64 = ratios.iter().sum();
        if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios {ratios:?} must be in [0, 1] and sum to 1"
            )));
        }
        let mut speakers = self.speakers();
        let n = speakers.len();
        let n_val = (n as f64 * ratios[1] + 1e-9).floor() as usize;
        let n_test = (n as f64 * ratios[2] + 1e-9).floor() as usize;
        if n_val == 0 || n_test == 0 || n_val + n_test >= n {
            return Err(Error::Config(format!(
                "{n} speakers cannot be split into three nonempty groups with ratios {ratios:?}"
            )));
        }
        speakers.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let val: BTreeSet<&String> = speakers[..n_val].iter().collect();
        let test: BTreeSet<&String> = speakers[n_val..n_val + n_test].iter().collect();
        let mut parts: [Vec<UtteranceRecord>; 3] = Default::default();
        for r in &self.records {
            let i = if val.contains(&r.speaker) {
                1
            } else if test.contains(&r.speaker) {
                2
            } else {
                0
            };
            parts[i].push(r.clone());
        }
        Ok(parts.map(Manifest::new))
    }
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<T>()
                .map_err(|_| format!("`{x}` is not a valid number"))
        })
        .collect()
}

/// Reads and validates a manifest. An empty manifest loads with a warning.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let m = Manifest::parse(&text, base)?;
    if m.is_empty() {
        log::warn!("manifest {} has no records", path.display());
    }
    m.validate()?;
    Ok(m)
}
