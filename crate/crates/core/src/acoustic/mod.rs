//! Duration-driven acoustic model and its data types.

mod model;
mod types;

pub use model::{
    is_duration_predictor_param, ForwardCache, ForwardOutput, ModelConfig, SynthesisResult,
    TtsModel,
};
pub use types::{
    length_regulate, length_regulate_backward, linguistic_width, log_duration_target, to_frames,
    ConditioningMode, MelSpectrogram, PhonemeSequence,
};
