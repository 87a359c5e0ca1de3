//! Datasets, domain construction and protocol sequencing.
//!
//! Images are stored as interleaved `u8` pixels. A [`Protocol`] lists the
//! domains of a continual run; each domain comes from IDX files, from the
//! synthetic glyph renderer, or from a shift recipe applied to an earlier
//! domain, and is split into train/val/test parts.

mod idx;
mod synth;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::gradcore::Array;
use crate::rng::{stream, stream_seed};
use crate::xforms::Image;

pub use idx::{load_idx, write_idx, IMAGES_MAGIC, LABELS_MAGIC, RGB_IMAGES_MAGIC};
pub use synth::{derive_domain, synth_digits, Recipe, INVERT_NOISE_SIGMA};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: bad magic {found:#010x}")]
    BadMagic { path: String, found: u32 },
    #[error("{0}: truncated file")]
    Truncated(String),
    #[error("count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("{0}")]
    Config(String),
}

/// Immutable labelled image collection.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    name: String,
    shape: [usize; 3],
    classes: usize,
    pixels: Vec<u8>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    /// `shape` is `(channels, height, width)`; `pixels` holds the images one
    /// after another, each interleaved `HWC`.
    pub fn new(name: String, shape: [usize; 3], classes: usize, pixels: Vec<u8>, labels: Vec<usize>) -> Result<Self, DomainError> {
        let [c, h, w] = shape;
        if !(c == 1 || c == 3) || h == 0 || w == 0 {
            return Err(DomainError::Config(format!("{name}: bad image shape {shape:?}")));
        }
        if pixels.len() != labels.len() * c * h * w {
            return Err(DomainError::CountMismatch { images: pixels.len() / (c * h * w), labels: labels.len() });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(DomainError::Label { label, classes });
        }
        Ok(Self { name, shape, classes, pixels, labels })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn image(&self, i: usize) -> Image {
        let [c, h, w] = self.shape;
        Image::from_u8(h, w, c, self.image_bytes(i))
    }

    pub fn subset(&self, indices: &[usize], name: String) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image_bytes(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self { name, shape: self.shape, classes: self.classes, pixels, labels }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// The selected images as a `[B, C, H, W]` batch.
    pub fn gather(&self, indices: &[usize]) -> Array<f32> {
        let [c, h, w] = self.shape;
        let hw = h * w;
        let mut out = vec![0f32; indices.len() * c * hw];
        for (b, &i) in indices.iter().enumerate() {
            let src = self.image_bytes(i);
            let dst = &mut out[b * c * hw..(b + 1) * c * hw];
            for p in 0..hw {
                for k in 0..c {
                    dst[k * hw + p] = f32::from(src[p * c + k]);
                }
            }
        }
        Array::new(vec![indices.len(), c, h, w], out).expect("consistent shape")
    }

    pub fn gather_images(&self, indices: &[usize]) -> Vec<Image> {
        indices.iter().map(|&i| self.image(i)).collect()
    }

    pub fn gather_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Stacks images of equal geometry into a `[B, C, H, W]` batch.
pub fn images_to_array(images: &[Image]) -> Array<f32> {
    let (h, w, c) = images.first().map_or((0, 0, 0), |i| (i.height, i.width, i.channels));
    let hw = h * w;
    let mut out = vec![0f32; images.len() * c * hw];
    for (b, img) in images.iter().enumerate() {
        assert_eq!((img.height, img.width, img.channels), (h, w, c), "mixed image geometry");
        let dst = &mut out[b * c * hw..(b + 1) * c * hw];
        for p in 0..hw {
            for k in 0..c {
                dst[k * hw + p] = img.data[p * c + k] as f32;
            }
        }
    }
    Array::new(vec![images.len(), c, h, w], out).expect("consistent shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

/// Seeded shuffle, then consecutive train/val/test parts.
pub fn split(ds: &LabeledDataset, fractions: [f64; 3], seed: u64) -> Result<Splits, DomainError> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DomainError::Config(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let m = ds.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut stream(seed, "split"));
    let n_train = ((fractions[0] * m as f64).round() as usize).min(m);
    let n_val = ((fractions[1] * m as f64).round() as usize).min(m - n_train);
    let name = ds.name();
    Ok(Splits {
        train: ds.subset(&order[..n_train], format!("{name}/train")),
        val: ds.subset(&order[n_train..n_train + n_val], format!("{name}/val")),
        test: ds.subset(&order[n_train + n_val..], format!("{name}/test")),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

/// `steps` batches drawn uniformly with replacement.
pub fn batches<'a, R: Rng>(ds: &'a LabeledDataset, batch: usize, steps: usize, rng: &'a mut R) -> impl Iterator<Item = Batch> + 'a {
    assert!(!ds.is_empty() && batch > 0, "batches need a nonempty dataset and batch size");
    (0..steps).map(move |_| {
        let indices: Vec<usize> = (0..batch).map(|_| rng.random_range(0..ds.len())).collect();
        let labels = ds.gather_labels(&indices);
        Batch { indices, labels }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Source {
    Idx { images: PathBuf, labels: PathBuf },
    Synthetic { seed: u64, count: usize },
    Derived { base: String, recipe: Recipe, seed: u64 },
}

fn default_split() -> [f64; 3] {
    [0.7, 0.15, 0.15]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub source: Source,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

fn default_cap() -> usize {
    10_000
}

fn default_classes() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub domains: Vec<DomainSpec>,
    /// Maximum number of training images kept per domain.
    #[serde(default = "default_cap")]
    pub cap: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    pub seed: u64,
}

/// One materialized protocol domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    pub name: String,
    pub splits: Splits,
}

impl Protocol {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.domains.len() < 2 {
            return Err(DomainError::Config("a protocol needs at least 2 domains".into()));
        }
        if self.cap == 0 {
            return Err(DomainError::Config("cap must be positive".into()));
        }
        let mut seen = HashSet::new();
        for d in &self.domains {
            if !seen.insert(d.name.as_str()) {
                return Err(DomainError::Config(format!("duplicate domain name {:?}", d.name)));
            }
            if let Source::Derived { base, .. } = &d.source {
                if base == &d.name || !seen.contains(base.as_str()) {
                    return Err(DomainError::Config(format!("domain {:?} derives from unknown earlier domain {base:?}", d.name)));
                }
            }
        }
        Ok(())
    }

    /// Loads or generates every domain; relative IDX paths resolve against
    /// `base_dir`.
    pub fn materialize(&self, base_dir: &Path) -> Result<Vec<Domain>, DomainError> {
        self.validate()?;
        let mut full: Vec<(String, LabeledDataset)> = Vec::new();
        let mut out = Vec::new();
        for spec in &self.domains {
            let ds = match &spec.source {
                Source::Idx { images, labels } => load_idx(&base_dir.join(images), &base_dir.join(labels), self.classes, true)?,
                Source::Synthetic { seed, count } => synth_digits(*seed, *count)?,
                Source::Derived { base, recipe, seed } => {
                    let base = &full.iter().find(|(n, _)| n == base).expect("validated").1;
                    derive_domain(base, recipe, *seed, &spec.name)?
                }
            }
            .with_name(spec.name.clone());
            if ds.classes() != self.classes {
                return Err(DomainError::Config(format!("domain {:?} has {} classes, protocol {}", spec.name, ds.classes(), self.classes)));
            }
            if let Some((_, first)) = full.first() {
                if first.shape() != ds.shape() {
                    return Err(DomainError::Config(format!(
                        "domain {:?} has image shape {:?}, expected {:?}",
                        spec.name,
                        ds.shape(),
                        first.shape()
                    )));
                }
            }
            let mut splits = split(&ds, spec.split, stream_seed(self.seed, &spec.name))?;
            if splits.train.len() > self.cap {
                let keep: Vec<usize> = (0..self.cap).collect();
                splits.train = splits.train.subset(&keep, splits.train.name().to_string());
            }
            if splits.train.is_empty() || splits.test.is_empty() {
                return Err(DomainError::Config(format!("domain {:?} has an empty train or test split", spec.name)));
            }
            out.push(Domain { name: spec.name.clone(), splits });
            full.push((spec.name.clone(), ds));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize) -> LabeledDataset {
        let pixels = (0..n * 12).map(|i| (i % 256) as u8).collect();
        LabeledDataset::new("tiny".into(), [3, 2, 2], 10, pixels, (0..n).map(|i| i % 10).collect()).unwrap()
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = tiny(100);
        let s = split(&ds, [0.7, 0.15, 0.15], 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
        let mut all: Vec<Vec<u8>> = [&s.train, &s.val, &s.test]
            .iter()
            .flat_map(|d| (0..d.len()).map(|i| d.image_bytes(i).to_vec()).collect::<Vec<_>>())
            .collect();
        let mut orig: Vec<Vec<u8>> = (0..100).map(|i| ds.image_bytes(i).to_vec()).collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
        assert_eq!(split(&ds, [0.7, 0.15, 0.15], 3).unwrap(), s);
        assert!(split(&ds, [0.7, 0.2, 0.2], 3).is_err());
    }

    #[test]
    fn batches_are_seeded_with_replacement() {
        let ds = tiny(5);
        let a: Vec<Batch> = batches(&ds, 64, 30, &mut stream(1, "b")).collect();
        let b: Vec<Batch> = batches(&ds, 64, 30, &mut stream(1, "b")).collect();
        assert_eq!(a.len(), 30);
        assert!(a.iter().all(|x| x.indices.len() == 64 && x.labels.len() == 64));
        assert_eq!(a, b);
        assert_eq!(batches(&ds, 64, 3000, &mut stream(2, "b")).count(), 3000);
    }

    #[test]
    fn gather_is_channel_major() {
        let ds = tiny(2);
        let a = ds.gather(&[1]);
        assert_eq!(a.shape(), &[1, 3, 2, 2]);
        let src = ds.image_bytes(1);
        assert_eq!(a.data()[..4], [src[0], src[3], src[6], src[9]].map(f32::from));
        assert_eq!(images_to_array(&ds.gather_images(&[1])), a);
    }

    #[test]
    fn synthetic_digits_are_balanced_and_reproducible() {
        let a = synth_digits(4, 1000).unwrap();
        let b = synth_digits(4, 1000).unwrap();
        assert_eq!(a, b);
        for c in 0..10 {
            assert_eq!(a.labels().iter().filter(|&&l| l == c).count(), 100);
        }
        assert_ne!(a.pixels(), synth_digits(5, 1000).unwrap().pixels());
        assert!(synth_digits(1, 9).is_err());
    }

    #[test]
    fn derived_domains() {
        let base = synth_digits(1, 50).unwrap();
        let same = derive_domain(&base, &Recipe::Cast { offset: [0.0; 3] }, 0, "x").unwrap();
        assert_eq!(same.pixels(), base.pixels());
        let a = derive_domain(&base, &Recipe::InvertNoise, 9, "n").unwrap();
        assert_eq!(a, derive_domain(&base, &Recipe::InvertNoise, 9, "n").unwrap());
        let col = derive_domain(&base, &Recipe::Colorize, 2, "c").unwrap();
        assert_eq!(col.labels(), base.labels());
        let diff = col.pixels().iter().zip(base.pixels()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum::<f64>()
            / base.pixels().len() as f64;
        assert!(diff > 10.0, "{diff}");
        let r = serde_json::from_str::<Recipe>(r#""sharpen""#);
        assert!(r.is_err());
    }

    #[test]
    fn protocol_validation() {
        let p: Protocol = serde_json::from_str(
            r#"{"seed":1,"cap":40,"domains":[
                {"name":"a","source":{"synthetic":{"seed":1,"count":100}}},
                {"name":"b","source":{"derived":{"base":"a","recipe":{"rotate_fixed":{"degrees":30}},"seed":2}}}]}"#,
        )
        .unwrap();
        let d = p.materialize(Path::new(".")).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].splits.train.len(), 40);
        assert_eq!(d[1].splits.test.len(), 15);
        let mut bad = p.clone();
        bad.domains.truncate(1);
        assert!(bad.validate().is_err());
        let mut bad = p.clone();
        bad.domains[1].name = "a".into();
        assert!(bad.validate().is_err());
        let mut bad = p;
        bad.domains.swap(0, 1);
        assert!(bad.validate().is_err());
    }
}
