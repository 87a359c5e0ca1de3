//! Image transformations for domain randomization.
//!
//! A [`TransformSet`] lists basic transforms, each with a grid of magnitude
//! levels. Sampling draws `n` entries independently: first a kind uniformly
//! over the set's members, then a level uniformly over that kind's grid. The
//! resulting [`ComposedTransform`] is applied entry by entry, clamping to
//! `[0, 255]` after each step.

pub mod kernels;
mod sets;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::par;
use crate::rng::{sub_stream, Rng as StreamRng};

pub use kernels::EnhanceKind;
pub use sets::{build_set, KindSpec, SetSpec, TransformTable};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("unknown transform set {0:?}")]
    UnknownSet(String),
    #[error("transform set {0:?} has no members")]
    EmptySet(String),
    #[error("{what} {value} out of range")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("invalid transform table: {0}")]
    Invalid(String),
    #[error("image: {0}")]
    Image(String),
}

/// Interleaved (`HWC`) image with real pixel values in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, TransformError> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(TransformError::Image(format!("bad geometry {height}x{width}x{channels}")));
        }
        if data.len() != height * width * channels {
            return Err(TransformError::Image(format!(
                "{} values for {height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=255.0).contains(v)) {
            return Err(TransformError::Image("pixel outside [0, 255]".into()));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, px: &[u8]) -> Self {
        assert_eq!(px.len(), height * width * channels);
        Self { height, width, channels, data: px.iter().map(|&v| f64::from(v)).collect() }
    }

    /// Rounds to the nearest integer level.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { data: self.data.iter().map(|&v| f(v).clamp(0.0, 255.0)).collect(), ..*self }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Brightness,
    Color,
    Contrast,
    RgbRand,
    Solarize,
    Grayscale,
    Invert,
    Rotate,
    GaussianNoise,
    Blur,
}

impl TransformKind {
    pub const ALL: [TransformKind; 10] = [
        Self::Brightness,
        Self::Color,
        Self::Contrast,
        Self::RgbRand,
        Self::Solarize,
        Self::Grayscale,
        Self::Invert,
        Self::Rotate,
        Self::GaussianNoise,
        Self::Blur,
    ];

    /// Whether applying the kind draws random numbers.
    pub fn uses_rng(self) -> bool {
        matches!(self, Self::RgbRand | Self::GaussianNoise)
    }

    /// Whether the kind ignores its level.
    pub fn is_levelless(self) -> bool {
        matches!(self, Self::Grayscale | Self::Invert | Self::Blur)
    }

    /// Admissible level values for sets built from tables.
    pub fn level_bounds(self) -> (f64, f64) {
        match self {
            Self::Brightness | Self::Color | Self::Contrast => kernels::ENHANCE_RANGE,
            Self::RgbRand => (0.0, 255.0),
            Self::Solarize => (0.0, 256.0),
            Self::Rotate => (-360.0, 360.0),
            Self::GaussianNoise => (0.0, 255.0),
            Self::Grayscale | Self::Invert | Self::Blur => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Brightness => "brightness",
            Self::Color => "color",
            Self::Contrast => "contrast",
            Self::RgbRand => "rgb_rand",
            Self::Solarize => "solarize",
            Self::Grayscale => "grayscale",
            Self::Invert => "invert",
            Self::Rotate => "rotate",
            Self::GaussianNoise => "gaussian_noise",
            Self::Blur => "blur",
        }
    }
}

/// One basic transform with its magnitude grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasicTransform {
    pub kind: TransformKind,
    pub levels: Vec<f64>,
}

impl BasicTransform {
    /// `count` evenly spaced levels from `start` to `end` inclusive. The
    /// endpoints are reproduced exactly.
    pub fn with_grid(kind: TransformKind, start: f64, end: f64, count: usize) -> Self {
        let levels = match count {
            0 => Vec::new(),
            1 => vec![start],
            _ => (0..count)
                .map(|i| {
                    let t = i as f64 / (count - 1) as f64;
                    start * (1.0 - t) + end * t
                })
                .collect(),
        };
        Self { kind, levels }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSet {
    pub id: String,
    pub members: Vec<BasicTransform>,
    /// Number of basic transforms composed per sample.
    pub n: usize,
}

impl TransformSet {
    pub fn new(id: impl Into<String>, members: Vec<BasicTransform>, n: usize) -> Result<Self, TransformError> {
        let id = id.into();
        if members.is_empty() || n == 0 {
            return Err(TransformError::EmptySet(id));
        }
        for m in &members {
            if m.levels.is_empty() {
                return Err(TransformError::Invalid(format!("{} has no levels", m.kind.name())));
            }
            let (lo, hi) = m.kind.level_bounds();
            if let Some(&bad) = m.levels.iter().find(|v| !v.is_finite() || **v < lo || **v > hi) {
                return Err(TransformError::OutOfRange { what: m.kind.name(), value: bad });
            }
        }
        Ok(Self { id, members, n })
    }

    pub fn kinds(&self) -> Vec<TransformKind> {
        self.members.iter().map(|m| m.kind).collect()
    }

    /// Single-member set whose only element is the neutral brightness factor.
    pub fn identity() -> Self {
        Self::new("identity", vec![BasicTransform { kind: TransformKind::Brightness, levels: vec![1.0] }], 1)
            .expect("valid")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformEntry {
    pub kind: TransformKind,
    pub level: f64,
    /// Seed of the stream used by random kinds; drawn for every entry so the
    /// sampling stream advances identically regardless of kind.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComposedTransform {
    pub entries: Vec<TransformEntry>,
}

pub fn sample_transform(set: &TransformSet, rng: &mut impl Rng) -> Result<ComposedTransform, TransformError> {
    if set.members.is_empty() {
        return Err(TransformError::EmptySet(set.id.clone()));
    }
    let entries = (0..set.n)
        .map(|_| {
            let m = &set.members[rng.random_range(0..set.members.len())];
            let level = m.levels[rng.random_range(0..m.levels.len())];
            TransformEntry { kind: m.kind, level, seed: rng.random() }
        })
        .collect();
    Ok(ComposedTransform { entries })
}

fn apply_entry(e: &TransformEntry, img: &Image, index: u64) -> Result<Image, TransformError> {
    use kernels::*;
    let stream = || -> StreamRng { sub_stream(e.seed, index) };
    Ok(match e.kind {
        TransformKind::Brightness => apply_enhance(EnhanceKind::Brightness, e.level, img)?,
        TransformKind::Color => apply_enhance(EnhanceKind::Color, e.level, img)?,
        TransformKind::Contrast => apply_enhance(EnhanceKind::Contrast, e.level, img)?,
        TransformKind::RgbRand => apply_rgb_rand(e.level, img, &mut stream()),
        TransformKind::Solarize => apply_solarize(e.level, img),
        TransformKind::Grayscale => apply_grayscale(img),
        TransformKind::Invert => apply_invert(img),
        TransformKind::Rotate => apply_rotate(e.level, img),
        TransformKind::GaussianNoise => apply_gaussian_noise(e.level, img, &mut stream()),
        TransformKind::Blur => apply_blur(img),
    })
}

/// Applies the entries in order.
pub fn apply(t: &ComposedTransform, img: &Image) -> Result<Image, TransformError> {
    apply_indexed(t, img, 0)
}

/// [`apply`] for the `index`-th image of a batch sharing one transform: random
/// kinds draw from a stream derived from the entry seed and `index`, so images
/// get independent noise.
pub fn apply_indexed(t: &ComposedTransform, img: &Image, index: u64) -> Result<Image, TransformError> {
    let mut cur = img.clone();
    for e in &t.entries {
        cur = apply_entry(e, &cur, index)?;
    }
    Ok(cur)
}

/// Applies one transform to every image of a batch.
pub fn apply_batch(t: &ComposedTransform, images: &[Image]) -> Result<Vec<Image>, TransformError> {
    par::map_indexed(images.len(), |i| apply_indexed(t, &images[i], i as u64)).into_iter().collect()
}

/// Gives every image its own independently sampled transform. One value is
/// drawn from `rng`; image `i` then uses a stream derived from it and `i`.
pub fn randomize_batch(set: &TransformSet, images: &[Image], rng: &mut impl Rng) -> Result<Vec<Image>, TransformError> {
    let base: u64 = rng.random();
    par::map_indexed(images.len(), |i| {
        let mut r = sub_stream(base, i as u64);
        let t = sample_transform(set, &mut r)?;
        apply(&t, &images[i])
    })
    .into_iter()
    .collect()
}
