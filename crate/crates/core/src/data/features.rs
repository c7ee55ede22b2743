//! Feature matrices and their on-disk format.
//!
//! File layout (little-endian): magic `FTFE`, `u32` version (1), `u32`
//! num_frames, `u32` dim, `f32` frame_period_ms, then `num_frames * dim` `f32`
//! values in row-major order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::nnkit::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"FTFE";
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_HEADER_LEN: usize = 20;
pub const DEFAULT_FRAME_PERIOD_MS: f32 = 10.0;

/// `num_frames x dim` acoustic feature sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    num_frames: usize,
    dim: usize,
    frame_period_ms: f32,
    values: Vec<f32>,
}

/// Header fields of a feature file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureHeader {
    pub num_frames: usize,
    pub dim: usize,
    pub frame_period_ms: f32,
}

impl FeatureMatrix {
    pub fn new(dim: usize, frame_period_ms: f32, values: Vec<f32>) -> Result<Self, DataError> {
        if dim == 0 {
            return Err(DataError::Features("feature dim must be positive".into()));
        }
        if values.len() % dim != 0 {
            return Err(DataError::Features(format!(
                "{} values are not a whole number of {dim}-dim frames",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::Features(format!("non-finite value at index {i}")));
        }
        if !(frame_period_ms.is_finite() && frame_period_ms > 0.0) {
            return Err(DataError::Features(format!("bad frame period {frame_period_ms}")));
        }
        Ok(Self {
            num_frames: values.len() / dim,
            dim,
            frame_period_ms,
            values,
        })
    }

    pub fn empty(dim: usize, frame_period_ms: f32) -> Self {
        Self {
            num_frames: 0,
            dim,
            frame_period_ms,
            values: Vec::new(),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_period_ms(&self) -> f32 {
        self.frame_period_ms
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn duration_ms(&self) -> f64 {
        self.num_frames as f64 * self.frame_period_ms as f64
    }

    /// Frames `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> FeatureMatrix {
        let end = end.min(self.num_frames);
        let start = start.min(end);
        FeatureMatrix {
            num_frames: end - start,
            dim: self.dim,
            frame_period_ms: self.frame_period_ms,
            values: self.values[start * self.dim..end * self.dim].to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(
            self.num_frames,
            self.dim,
            self.values.iter().map(|v| *v as f64).collect(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + self.values.len() * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&self.frame_period_ms.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let header = parse_header(bytes)?;
        let payload = &bytes[FEATURE_HEADER_LEN..];
        let expected = header.num_frames * header.dim * 4;
        if payload.len() < expected {
            return Err(DataError::Truncated {
                expected_frames: header.num_frames,
                found_bytes: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(DataError::DimMismatch(format!(
                "header declares {} x {} values but payload holds {} bytes",
                header.num_frames,
                header.dim,
                payload.len()
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        FeatureMatrix::new(header.dim, header.frame_period_ms, values)
    }
}

fn parse_header(bytes: &[u8]) -> Result<FeatureHeader, DataError> {
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(DataError::Features("file shorter than header".into()));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(DataError::BadMagic);
    }
    let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = u(4);
    if version != FEATURE_VERSION {
        return Err(DataError::Features(format!("unsupported feature version {version}")));
    }
    let dim = u(12) as usize;
    if dim == 0 {
        return Err(DataError::DimMismatch("header declares dim 0".into()));
    }
    Ok(FeatureHeader {
        num_frames: u(8) as usize,
        dim,
        frame_period_ms: f32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes")),
    })
}

pub fn write_features(path: &Path, features: &FeatureMatrix) -> Result<(), DataError> {
    std::fs::write(path, features.to_bytes()).map_err(|e| DataError::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    FeatureMatrix::from_bytes(&bytes)
}

/// Reads a feature file and checks it against the corpus dimension.
pub fn read_features_with_dim(path: &Path, dim: usize) -> Result<FeatureMatrix, DataError> {
    let f = read_features(path)?;
    if f.dim() != dim {
        return Err(DataError::DimMismatch(format!(
            "{} has dim {}, corpus dim is {dim}",
            path.display(),
            f.dim()
        )));
    }
    Ok(f)
}

/// Reads only the header, validating that the payload length agrees.
pub fn read_feature_header(path: &Path) -> Result<FeatureHeader, DataError> {
    use std::io::Read;
    let mut file = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut head = [0u8; FEATURE_HEADER_LEN];
    file.read_exact(&mut head).map_err(|e| DataError::io(path, e))?;
    let header = parse_header(&head)?;
    let len = file.metadata().map_err(|e| DataError::io(path, e))?.len() as usize;
    let payload = len.saturating_sub(FEATURE_HEADER_LEN);
    let expected = header.num_frames * header.dim * 4;
    if payload < expected {
        return Err(DataError::Truncated {
            expected_frames: header.num_frames,
            found_bytes: payload,
        });
    }
    if payload > expected {
        return Err(DataError::DimMismatch(format!(
            "{}: payload of {payload} bytes for {} x {} header",
            path.display(),
            header.num_frames,
            header.dim
        )));
    }
    Ok(header)
}
