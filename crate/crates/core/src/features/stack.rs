use std::fs;
use std::path::Path;

use crate::error::{invalid, Error, Result};

/// Where a representation stack came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StackSource {
    Pseudo,
    External,
}

/// Per-utterance layer outputs `[layers][frames][dims]`, layer-major.
///
/// Layer 0 is the convolutional frontend; layers `1..` are block outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationStack {
    layers: usize,
    frames: usize,
    dims: usize,
    data: Vec<f32>,
    pub hop_seconds: f64,
    pub source: StackSource,
}

impl RepresentationStack {
    pub fn new(
        layers: usize,
        frames: usize,
        dims: usize,
        data: Vec<f32>,
        hop_seconds: f64,
        source: StackSource,
    ) -> Result<Self> {
        if layers == 0 || dims == 0 {
            return Err(invalid(
                "representation stack needs at least one layer and one dim",
            ));
        }
        if data.len() != layers * frames * dims {
            return Err(invalid(format!(
                "stack data has {} entries, expected {layers}x{frames}x{dims}",
                data.len()
            )));
        }
        if !(hop_seconds > 0.0 && hop_seconds.is_finite()) {
            return Err(invalid(format!(
                "hop_seconds must be positive, got {hop_seconds}"
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite stack entry at flat index {i}"
            )));
        }
        Ok(Self {
            layers,
            frames,
            dims,
            data,
            hop_seconds,
            source,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.layers, self.frames, self.dims]
    }

    pub fn layer(&self, l: usize) -> &[f32] {
        let n = self.frames * self.dims;
        &self.data[l * n..(l + 1) * n]
    }

    pub fn frame(&self, l: usize, f: usize) -> &[f32] {
        let start = (l * self.frames + f) * self.dims;
        &self.data[start..start + self.dims]
    }

    /// Same shape, hop and values; ignores `source`.
    pub fn same_contents(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self.hop_seconds.to_bits() == other.hop_seconds.to_bits()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Frame order reversed in every layer.
    pub fn time_reversed(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for l in 0..self.layers {
            for f in (0..self.frames).rev() {
                data.extend_from_slice(self.frame(l, f));
            }
        }
        Self {
            data,
            ..self.clone()
        }
    }
}

pub const FEATURE_MAGIC: &[u8; 8] = b"ZSTTFEAT";
pub const FEATURE_VERSION: u32 = 1;
/// magic + version + layers + frames + dims + hop (f64).
pub const FEATURE_HEADER_BYTES: usize = 8 + 4 + 4 + 4 + 4 + 8;

/// Serializes a stack into the feature-file container:
///
/// ```text
/// magic "ZSTTFEAT" | version u32 | layers u32 | frames u32 | dims u32 |
/// hop_seconds f64 | f32 data, layer-major then frame-major
/// ```
///
/// All fields little-endian.
pub fn encode_feature_file(stack: &RepresentationStack) -> Result<Vec<u8>> {
    if stack.frames == 0 {
        return Err(invalid("refusing to write a stack with zero frames"));
    }
    let mut out = Vec::with_capacity(FEATURE_HEADER_BYTES + 4 * stack.data.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    for d in [stack.layers, stack.frames, stack.dims] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&stack.hop_seconds.to_le_bytes());
    for v in &stack.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_feature_file(bytes: &[u8], path: &Path) -> Result<RepresentationStack> {
    if bytes.len() < FEATURE_HEADER_BYTES {
        return Err(Error::format(path, "file shorter than the feature header"));
    }
    if &bytes[..8] != FEATURE_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != FEATURE_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}"),
        ));
    }
    let (layers, frames, dims) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let hop_seconds = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
    let payload = &bytes[FEATURE_HEADER_BYTES..];
    let per_layer = frames * dims * 4;
    let expected = layers * per_layer;
    if payload.len() != expected {
        let full_layers = payload.len().checked_div(per_layer).unwrap_or(0);
        return Err(Error::format(
            path,
            format!(
                "payload has {} bytes but header declares {layers} layers x {frames} frames x {dims} dims \
                 ({expected} bytes); layer {full_layers} is inconsistent with the declared frame count",
                payload.len()
            ),
        ));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "{}: non-finite entry at flat index {i}",
            path.display()
        )));
    }
    RepresentationStack::new(
        layers,
        frames,
        dims,
        data,
        hop_seconds,
        StackSource::External,
    )
    .map_err(|e| match e {
        Error::InvalidArgument(m) => Error::format(path, m),
        other => other,
    })
}

pub fn save_external(stack: &RepresentationStack, path: &Path) -> Result<()> {
    let bytes = encode_feature_file(stack)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_external(path: &Path) -> Result<RepresentationStack> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_file(&bytes, path)
}
