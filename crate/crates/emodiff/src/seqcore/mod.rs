//! Blendshape sequence data model: domain types, the face-region split, and
//! sequence validation. File formats live in [`io`], the synthetic dataset
//! generator in [`synth`].

pub mod io;
pub mod names;
pub mod synth;

use ndarray::Array2;

pub use names::{
    coeff_index, EmotionLabel, FacePartition, ALL_EMOTIONS, COEFF_NAMES, NUM_COEFFS, NUM_EMOTIONS,
};

use crate::error::{Error, Result};

pub const DEFAULT_FPS: u16 = 25;

/// One animation clip: `L×51` blendshape coefficients at a fixed frame rate,
/// tagged with an emotion category. Stored at the on-disk precision so that
/// save/load round-trips are bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendshapeSequence {
    pub frames: Array2<f32>,
    pub fps: u16,
    pub emotion: EmotionLabel,
    pub id: String,
}

impl BlendshapeSequence {
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    /// Frames widened to f64 for model arithmetic.
    pub fn frames_f64(&self) -> Array2<f64> {
        self.frames.mapv(f64::from)
    }
}

/// Per-frame audio descriptors paired with a sequence: 8 articulation
/// envelopes followed by 8 emotion-indicative channels.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureTrack {
    pub features: Array2<f32>,
    pub fps: u16,
    pub emotion: EmotionLabel,
}

pub const AUDIO_CHANNELS: usize = 16;
pub const ARTICULATION_CHANNELS: usize = 8;

impl AudioFeatureTrack {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }

    /// The articulation half of the channels.
    pub fn articulation(&self) -> Array2<f32> {
        self.features
            .slice(ndarray::s![.., 0..ARTICULATION_CHANNELS])
            .to_owned()
    }
}

/// A single invariant violation found by [`validate_sequence`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Shape { expected: String, got: String },
    NonFinite { frame: usize, coeff: usize },
    Range { frame: usize, coeff: usize, value: f32 },
    Fps { fps: u16 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Shape { expected, got } => {
                write!(f, "shape violation: expected {expected}, got {got}")
            }
            Violation::NonFinite { frame, coeff } => {
                write!(f, "non-finite value at frame {frame}, coefficient {coeff}")
            }
            Violation::Range { frame, coeff, value } => write!(
                f,
                "value {value} outside [0,1] at frame {frame}, coefficient {coeff}"
            ),
            Violation::Fps { fps } => write!(f, "fps must be positive, got {fps}"),
        }
    }
}

/// Collect every invariant violation in a sequence: column count, minimum
/// length, frame-rate positivity, finiteness, and the [0,1] storage range.
pub fn validate_sequence(seq: &BlendshapeSequence) -> Vec<Violation> {
    let mut out = Vec::new();
    if seq.frames.ncols() != NUM_COEFFS {
        out.push(Violation::Shape {
            expected: format!("{NUM_COEFFS} columns"),
            got: format!("{} columns", seq.frames.ncols()),
        });
    }
    if seq.frames.nrows() < 2 {
        out.push(Violation::Shape {
            expected: "at least 2 frames".into(),
            got: format!("{} frames", seq.frames.nrows()),
        });
    }
    if seq.fps == 0 {
        out.push(Violation::Fps { fps: seq.fps });
    }
    for ((r, c), &v) in seq.frames.indexed_iter() {
        if !v.is_finite() {
            out.push(Violation::NonFinite { frame: r, coeff: c });
        } else if !(0.0..=1.0).contains(&v) {
            out.push(Violation::Range {
                frame: r,
                coeff: c,
                value: v,
            });
        }
    }
    out
}

/// Select the two region column sets out of a full sequence. Column order
/// follows the partition's index lists; values are untouched.
pub fn partition_face(
    seq: &BlendshapeSequence,
    part: &FacePartition,
) -> Result<(Array2<f32>, Array2<f32>)> {
    part.validate()?;
    if seq.frames.ncols() != NUM_COEFFS {
        return Err(Error::Shape(format!(
            "sequence has {} columns, expected {NUM_COEFFS}",
            seq.frames.ncols()
        )));
    }
    let select = |idx: &[usize]| {
        Array2::from_shape_fn((seq.frames.nrows(), idx.len()), |(r, c)| {
            seq.frames[(r, idx[c])]
        })
    };
    Ok((select(&part.upper_idx), select(&part.mouth_idx)))
}

/// Reassemble full 51-column frames from the two region matrices; the exact
/// inverse of [`partition_face`].
pub fn merge_regions(
    upper: &Array2<f32>,
    mouth: &Array2<f32>,
    part: &FacePartition,
) -> Result<Array2<f32>> {
    part.validate()?;
    if upper.nrows() != mouth.nrows() {
        return Err(Error::Shape(format!(
            "region length mismatch: upper {} frames, mouth {} frames",
            upper.nrows(),
            mouth.nrows()
        )));
    }
    if upper.ncols() != part.upper_idx.len() || mouth.ncols() != part.mouth_idx.len() {
        return Err(Error::Shape(format!(
            "region widths ({}, {}) do not match partition ({}, {})",
            upper.ncols(),
            mouth.ncols(),
            part.upper_idx.len(),
            part.mouth_idx.len()
        )));
    }
    let mut frames = Array2::zeros((upper.nrows(), NUM_COEFFS));
    for (local, &global) in part.upper_idx.iter().enumerate() {
        frames.column_mut(global).assign(&upper.column(local));
    }
    for (local, &global) in part.mouth_idx.iter().enumerate() {
        frames.column_mut(global).assign(&mouth.column(local));
    }
    Ok(frames)
}
