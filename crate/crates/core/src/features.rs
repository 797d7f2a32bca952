//! THGF feature files and the linear projections into the shared embedding
//! width.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "THGF" | version u16 = 1 | modality u8 | flags u8 (bit0 encoder-shaped)
//! num_segments u32 | dim u32
//! num_segments x (start_ms u32, end_ms u32)
//! num_segments x dim f32, row-major
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"THGF";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 1 + 4 + 4;
const FLAG_ENCODER_SHAPED: u8 = 1;

/// Width of VGGish-style audio embeddings.
pub const ENCODER_AUDIO_DIM: usize = 128;
/// Width of S3D-style video embeddings.
pub const ENCODER_VIDEO_DIM: usize = 1024;
pub const DEFAULT_AUDIO_SEGMENT_MS: u32 = 960;
pub const DEFAULT_VIDEO_SEGMENT_MS: u32 = 250;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Video,
}

impl Modality {
    pub fn tag(self) -> u8 {
        match self {
            Modality::Audio => 0,
            Modality::Video => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Modality::Audio),
            1 => Some(Modality::Video),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
        }
    }

    pub fn encoder_dim(self) -> usize {
        match self {
            Modality::Audio => ENCODER_AUDIO_DIM,
            Modality::Video => ENCODER_VIDEO_DIM,
        }
    }
}

/// Half-open time span `[start_ms, end_ms)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Interval {
    pub start_ms: u32,
    pub end_ms: u32,
}

impl Interval {
    pub fn new(start_ms: u32, end_ms: u32) -> Self {
        Interval { start_ms, end_ms }
    }

    pub fn len_ms(&self) -> u32 {
        self.end_ms.saturating_sub(self.start_ms)
    }

    /// Length of the intersection with `other`, zero when disjoint.
    pub fn overlap_ms(&self, other: &Interval) -> u32 {
        let lo = self.start_ms.max(other.start_ms);
        let hi = self.end_ms.min(other.end_ms);
        hi.saturating_sub(lo)
    }

    /// Twice the midpoint, kept integral.
    pub fn center_x2(&self) -> u64 {
        self.start_ms as u64 + self.end_ms as u64
    }

    /// Back-to-back intervals of fixed length covering `[0, count * len_ms)`.
    pub fn uniform(count: usize, len_ms: u32) -> Vec<Interval> {
        (0..count as u32)
            .map(|k| Interval::new(k * len_ms, (k + 1) * len_ms))
            .collect()
    }
}

/// One modality's segment embeddings for a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub modality: Modality,
    pub encoder_shaped: bool,
    pub dim: usize,
    pub intervals: Vec<Interval>,
    /// `intervals.len() x dim`, row-major.
    pub values: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(
        modality: Modality,
        encoder_shaped: bool,
        dim: usize,
        intervals: Vec<Interval>,
        values: Vec<f32>,
    ) -> Result<Self, FormatError> {
        let seq = FeatureSequence {
            modality,
            encoder_shaped,
            dim,
            intervals,
            values,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn num_segments(&self) -> usize {
        self.intervals.len()
    }

    /// Latest segment end.
    pub fn end_ms(&self) -> u32 {
        self.intervals.iter().map(|iv| iv.end_ms).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        if self.intervals.is_empty() {
            return Err(FormatError::EmptySequence);
        }
        if self.encoder_shaped && self.dim != self.modality.encoder_dim() {
            return Err(FormatError::EncoderWidth {
                modality: self.modality.name(),
                expected: self.modality.encoder_dim(),
                found: self.dim,
            });
        }
        if self.values.len() != self.intervals.len() * self.dim {
            return Err(FormatError::ValueCount {
                segments: self.intervals.len(),
                dim: self.dim,
                found: self.values.len(),
            });
        }
        for (index, iv) in self.intervals.iter().enumerate() {
            if iv.end_ms <= iv.start_ms {
                return Err(FormatError::EmptyInterval {
                    index,
                    start_ms: iv.start_ms,
                    end_ms: iv.end_ms,
                });
            }
            if index > 0 && iv.start_ms < self.intervals[index - 1].end_ms {
                return Err(FormatError::UnsortedIntervals { index });
            }
        }
        Ok(())
    }

    /// Values as a `segments x dim` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(
            self.num_segments(),
            self.dim,
            self.values.iter().map(|&v| v as f64).collect(),
        )
        .expect("validated sequence")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.num_segments();
        let mut out = Vec::with_capacity(HEADER_LEN + n * 8 + self.values.len() * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.modality.tag());
        out.push(if self.encoder_shaped { FLAG_ENCODER_SHAPED } else { 0 });
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for iv in &self.intervals {
            out.extend_from_slice(&iv.start_ms.to_le_bytes());
            out.extend_from_slice(&iv.end_ms.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 4 && bytes[..4] != MAGIC {
                return Err(FormatError::BadMagic(bytes[..4].try_into().unwrap()));
            }
            return Err(FormatError::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let modality = Modality::from_tag(bytes[6]).ok_or(FormatError::BadModality(bytes[6]))?;
        let encoder_shaped = bytes[7] & FLAG_ENCODER_SHAPED != 0;
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if n == 0 {
            return Err(FormatError::EmptySequence);
        }
        let expected = n
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(n * 8 + HEADER_LEN))
            .unwrap_or(usize::MAX);
        if bytes.len() < expected {
            return Err(FormatError::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(FormatError::TrailingBytes(bytes.len() - expected));
        }
        let mut cursor = HEADER_LEN;
        let mut next_u32 = || {
            let v = u32::from_le_bytes(bytes[cursor..cursor + 4].try_into().unwrap());
            cursor += 4;
            v
        };
        let intervals: Vec<Interval> = (0..n)
            .map(|_| {
                let start = next_u32();
                let end = next_u32();
                Interval::new(start, end)
            })
            .collect();
        let values: Vec<f32> = (0..n * dim).map(|_| f32::from_bits(next_u32())).collect();
        FeatureSequence::new(modality, encoder_shaped, dim, intervals, values)
    }
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureSequence::from_bytes(&bytes).map_err(|kind| Error::Format {
        path: path.to_path_buf(),
        kind,
    })
}

pub fn write_feature_file(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    seq.validate().map_err(|kind| Error::Format {
        path: path.to_path_buf(),
        kind,
    })?;
    fs::write(path, seq.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Tape handles for one modality's projection.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub weight: Var,
    pub bias: Var,
}

/// Projects a sequence to `segments x d`: each row is `values[i] W + b`.
pub fn project(tape: &mut Tape, seq: &FeatureSequence, proj: Projection) -> Result<Var> {
    let width = tape.value(proj.weight).rows();
    if seq.dim != width {
        return Err(Error::shape(
            "project",
            &[seq.num_segments(), seq.dim],
            tape.value(proj.weight).shape(),
        ));
    }
    let x = tape.constant(seq.to_tensor());
    let xw = tape.matmul(x, proj.weight)?;
    tape.add(xw, proj.bias)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn audio(n: usize, dim: usize) -> FeatureSequence {
        FeatureSequence::new(
            Modality::Audio,
            false,
            dim,
            Interval::uniform(n, 960),
            (0..n * dim).map(|i| i as f32 * 0.5 - 3.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn read_rejects_bad_magic_and_version() {
        let mut bytes = audio(2, 3).to_bytes();
        bytes[4] = 9;
        assert_eq!(
            FeatureSequence::from_bytes(&bytes),
            Err(FormatError::UnsupportedVersion(9))
        );
        bytes[0] = b'X';
        assert!(matches!(
            FeatureSequence::from_bytes(&bytes),
            Err(FormatError::BadMagic(_))
        ));
    }

    #[test]
    fn read_rejects_truncation() {
        let bytes = audio(2, 3).to_bytes();
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(
            FeatureSequence::from_bytes(cut),
            Err(FormatError::Truncated { .. })
        ));
    }

    #[test]
    fn empty_sequence_rejected() {
        let mut bytes = audio(1, 2).to_bytes();
        bytes[8..12].copy_from_slice(&0u32.to_le_bytes());
        bytes.truncate(HEADER_LEN);
        assert_eq!(
            FeatureSequence::from_bytes(&bytes),
            Err(FormatError::EmptySequence)
        );
    }

    #[test]
    fn zero_length_interval_rejected() {
        let mut seq = audio(2, 1);
        seq.intervals[1].end_ms = seq.intervals[1].start_ms;
        assert!(matches!(
            FeatureSequence::from_bytes(&seq.to_bytes()),
            Err(FormatError::EmptyInterval { index: 1, .. })
        ));
    }

    #[test]
    fn overlapping_interval_rejected() {
        let mut seq = audio(2, 1);
        seq.intervals[1].start_ms = 500;
        assert_eq!(
            seq.validate(),
            Err(FormatError::UnsortedIntervals { index: 1 })
        );
    }

    #[test]
    fn encoder_shape_enforced() {
        let r = FeatureSequence::new(
            Modality::Video,
            true,
            128,
            Interval::uniform(1, 250),
            vec![0.0; 128],
        );
        assert!(matches!(r, Err(FormatError::EncoderWidth { .. })));
    }

    #[test]
    fn overlap_and_centers() {
        let a = Interval::new(0, 960);
        assert_eq!(a.overlap_ms(&Interval::new(750, 1000)), 210);
        assert_eq!(a.overlap_ms(&Interval::new(960, 1000)), 0);
        assert_eq!(a.center_x2(), 960);
    }
}
