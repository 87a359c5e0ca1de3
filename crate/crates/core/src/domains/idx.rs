//! IDX (MNIST-style) files: a big-endian header `0x0000_08NN` where `NN` is
//! the number of dimensions, then one big-endian `u32` per dimension, then
//! unsigned bytes.
//!
//! Image files have three dimensions (`count, rows, cols`, grayscale) or four
//! with a trailing 3 (`count, rows, cols, 3`, interleaved RGB). Label files
//! have one.

use std::path::Path;

use super::{DomainError, LabeledDataset};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const RGB_IMAGES_MAGIC: u32 = 0x0000_0804;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn io_err(path: &Path, e: std::io::Error) -> DomainError {
    DomainError::Io { path: path.display().to_string(), message: e.to_string() }
}

fn read(path: &Path) -> Result<Vec<u8>, DomainError> {
    std::fs::read(path).map_err(|e| io_err(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, DomainError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DomainError::Truncated(path.display().to_string()))
}

/// Returns the dimensions and the payload.
fn parse(bytes: &[u8], path: &Path, allowed: &[u32]) -> Result<(Vec<usize>, Vec<u8>), DomainError> {
    let magic = be_u32(bytes, 0, path)?;
    if !allowed.contains(&magic) {
        return Err(DomainError::BadMagic { path: path.display().to_string(), found: magic });
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims).map(|i| be_u32(bytes, 4 + 4 * i, path).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
    let start = 4 + 4 * ndims;
    let len: usize = dims.iter().product();
    let payload = bytes.get(start..start + len).ok_or_else(|| DomainError::Truncated(path.display().to_string()))?;
    Ok((dims, payload.to_vec()))
}

/// Loads an image/label file pair. Grayscale images are replicated to three
/// channels when `rgb` is set.
pub fn load_idx(images: &Path, labels: &Path, classes: usize, rgb: bool) -> Result<LabeledDataset, DomainError> {
    let (idims, mut pixels) = parse(&read(images)?, images, &[IMAGES_MAGIC, RGB_IMAGES_MAGIC])?;
    let (ldims, raw_labels) = parse(&read(labels)?, labels, &[LABELS_MAGIC])?;
    let mut channels = 1;
    if idims.len() == 4 {
        if idims[3] != 3 {
            return Err(DomainError::Config(format!("{}: trailing dimension must be 3", images.display())));
        }
        channels = 3;
    }
    if idims[0] != ldims[0] {
        return Err(DomainError::CountMismatch { images: idims[0], labels: ldims[0] });
    }
    if rgb && channels == 1 {
        pixels = pixels.iter().flat_map(|&v| [v, v, v]).collect();
        channels = 3;
    }
    let name = images.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    LabeledDataset::new(name, [channels, idims[1], idims[2]], classes, pixels, raw_labels.into_iter().map(usize::from).collect())
}

/// Writes `ds` as an IDX pair (four-dimensional image file when RGB).
pub fn write_idx(ds: &LabeledDataset, images: &Path, labels: &Path) -> Result<(), DomainError> {
    if ds.classes() > 256 {
        return Err(DomainError::Config("IDX labels hold at most 256 classes".into()));
    }
    let [c, h, w] = ds.shape();
    let mut out = Vec::with_capacity(20 + ds.pixels().len());
    let mut dims = vec![ds.len(), h, w];
    if c == 3 {
        dims.push(3);
    }
    out.extend_from_slice(&(0x0800 | dims.len() as u32).to_be_bytes());
    for d in &dims {
        out.extend_from_slice(&(*d as u32).to_be_bytes());
    }
    out.extend_from_slice(ds.pixels());
    std::fs::write(images, out).map_err(|e| io_err(images, e))?;
    let mut out = Vec::with_capacity(8 + ds.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    out.extend(ds.labels().iter().map(|&l| l as u8));
    std::fs::write(labels, out).map_err(|e| io_err(labels, e))
}
