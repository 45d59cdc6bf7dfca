//! Run configuration: one TOML file with `[corpus]`, `[extractor]`,
//! `[model]` and `[train]` tables plus top-level `seed` and `corpus_dir`.
//! Every key is optional; missing keys take their defaults and the fully
//! resolved document is written next to each run's outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use zstts_core::acoustic::ModelConfig;
use zstts_core::corpus::CorpusConfig;
use zstts_core::features::ExtractorConfig;
use zstts_core::training::TrainConfig;
use zstts_core::{Error, Result};

pub const RESOLVED_CONFIG: &str = "resolved-config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Governs corpus generation, model initialization and batch order.
    pub seed: u64,
    pub corpus_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub extractor: ExtractorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            corpus_dir: PathBuf::from("corpus"),
            corpus: CorpusConfig::default(),
            extractor: ExtractorConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))
            }
        }
    }

    /// Propagates the top-level seed and checks cross-section consistency.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.model.init_seed = self.seed;
        self.corpus.validate()?;
        self.extractor.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let checks: [(&str, bool); 5] = [
            (
                "model.phoneme_inventory",
                self.model.phoneme_inventory == self.corpus.phoneme_inventory,
            ),
            (
                "model.mel_bins",
                self.model.mel_bins == self.corpus.mel_bins,
            ),
            (
                "model.hop_seconds",
                self.model.hop_seconds == self.corpus.hop_seconds,
            ),
            (
                "model.ssl_layers",
                self.model.ssl_layers == self.extractor.blocks + 1,
            ),
            ("model.ssl_dims", self.model.ssl_dims == self.extractor.dims),
        ];
        if let Some((field, _)) = checks.iter().find(|c| !c.1) {
            return Err(Error::Config(format!(
                "{field} is inconsistent with the corpus/extractor sections"
            )));
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self)
            .map_err(|e| Error::Config(format!("cannot encode configuration: {e}")))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))
    }
}
