//! Per-image pixel kernels. All arithmetic is f64 and every kernel clamps its
//! output to `[0, 255]`.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Image, TransformError};

/// ITU-R 601 luma weights, as used by PIL's `L` conversion.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[inline]
fn clamp(v: f64) -> f64 {
    v.clamp(0.0, 255.0)
}

fn luma_at(img: &Image, p: usize) -> f64 {
    let c = img.channels;
    if c == 1 {
        img.data[p]
    } else {
        let px = &img.data[p * c..p * c + 3];
        if px[0] == px[1] && px[1] == px[2] {
            // exact for gray pixels, which keeps grayscale idempotent
            return px[0];
        }
        LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnhanceKind {
    Brightness,
    Color,
    Contrast,
}

pub const ENHANCE_RANGE: (f64, f64) = (0.2, 1.8);

/// Linear blend `degenerate * (1 - factor) + image * factor`, where the
/// degenerate image is black (brightness), the per-pixel luma (color) or the
/// mean luma of the whole image (contrast).
pub fn apply_enhance(kind: EnhanceKind, factor: f64, img: &Image) -> Result<Image, TransformError> {
    if !(ENHANCE_RANGE.0..=ENHANCE_RANGE.1).contains(&factor) {
        return Err(TransformError::OutOfRange { what: "enhance factor", value: factor });
    }
    let c = img.channels;
    let pixels = img.height * img.width;
    let mut out = img.clone();
    match kind {
        EnhanceKind::Brightness => {
            out.data.iter_mut().for_each(|v| *v = clamp(*v * factor));
        }
        EnhanceKind::Color => {
            for p in 0..pixels {
                let l = luma_at(img, p);
                for v in &mut out.data[p * c..(p + 1) * c] {
                    *v = clamp(l * (1.0 - factor) + *v * factor);
                }
            }
        }
        EnhanceKind::Contrast => {
            let mean = (0..pixels).map(|p| luma_at(img, p)).sum::<f64>() / pixels as f64;
            out.data.iter_mut().for_each(|v| *v = clamp(mean * (1.0 - factor) + *v * factor));
        }
    }
    Ok(out)
}

/// Pixels `>= threshold` become `255 - value`.
pub fn apply_solarize(threshold: f64, img: &Image) -> Image {
    img.map(|v| if v >= threshold { 255.0 - v } else { v })
}

pub fn apply_invert(img: &Image) -> Image {
    img.map(|v| 255.0 - v)
}

/// Luma replicated to every channel; single-channel images are unchanged.
pub fn apply_grayscale(img: &Image) -> Image {
    let c = img.channels;
    let mut out = img.clone();
    if c == 1 {
        return out;
    }
    for p in 0..img.height * img.width {
        let l = clamp(luma_at(img, p));
        out.data[p * c..(p + 1) * c].iter_mut().for_each(|v| *v = l);
    }
    out
}

/// Counter-clockwise rotation about the image centre with nearest-neighbour
/// sampling; pixels mapped from outside the source are 0.
pub fn apply_rotate(degrees: f64, img: &Image) -> Image {
    let (h, w, c) = (img.height, img.width, img.channels);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut out = Image::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = (cos * dx - sin * dy + cx).round();
            let sy = (sin * dx + cos * dy + cy).round();
            if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            let src = (sy as usize * w + sx as usize) * c;
            let dst = (y * w + x) * c;
            out.data[dst..dst + c].copy_from_slice(&img.data[src..src + c]);
        }
    }
    out
}

/// Adds independent `N(0, sigma^2)` noise to every sample.
pub fn apply_gaussian_noise(sigma: f64, img: &Image, rng: &mut impl Rng) -> Image {
    let mut out = img.clone();
    for v in &mut out.data {
        let z: f64 = rng.sample(StandardNormal);
        *v = clamp(*v + sigma * z);
    }
    out
}

/// Draws one offset per channel from `U[-level, level]` and adds it to the
/// whole image.
pub fn apply_rgb_rand(level: f64, img: &Image, rng: &mut impl Rng) -> Image {
    let level = level.abs();
    let mut offsets = [0.0; 3];
    for o in &mut offsets {
        *o = if level > 0.0 { rng.random_range(-level..=level) } else { 0.0 };
    }
    apply_rgb_offsets(offsets, img)
}

/// [`apply_rgb_rand`] with the per-channel offsets given.
pub fn apply_rgb_offsets(offsets: [f64; 3], img: &Image) -> Image {
    let c = img.channels;
    let mut out = img.clone();
    for px in out.data.chunks_mut(c) {
        for (v, o) in px.iter_mut().zip(offsets) {
            *v = clamp(*v + o);
        }
    }
    out
}

/// 3x3 box filter with edge replication.
pub fn apply_blur(img: &Image) -> Image {
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for dy in [-1isize, 0, 1] {
                    for dx in [-1isize, 0, 1] {
                        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        acc += img.data[(yy * w + xx) * c + ch];
                    }
                }
                out.data[(y * w + x) * c + ch] = clamp(acc / 9.0);
            }
        }
    }
    out
}
