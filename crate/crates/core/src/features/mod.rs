//! Per-layer speech representations: the frozen pseudo-SSL extractor and
//! the feature-file container for externally computed features.

mod pseudo;
mod stack;
mod waveform;

pub use pseudo::{ExtractorConfig, PseudoSsl};
pub use stack::{
    decode_feature_file, encode_feature_file, load_external, save_external, RepresentationStack,
    StackSource, FEATURE_HEADER_BYTES, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use waveform::Waveform;
