//! Procedurally rendered digit glyphs and the shift recipes that derive new
//! domains from a base dataset.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DomainError, LabeledDataset};
use crate::par;
use crate::rng::sub_stream;
use crate::xforms::{kernels, Image};

pub const SIDE: usize = 28;

/// Standard deviation of the noise added by [`Recipe::InvertNoise`].
pub const INVERT_NOISE_SIGMA: f64 = 20.0;

type Stroke = &'static [(f64, f64)];

/// Strokes of each digit in a unit box (x right, y down).
const GLYPHS: [&[Stroke]; 10] = [
    &[&[
        (0.5, 0.08),
        (0.73, 0.17),
        (0.8, 0.5),
        (0.73, 0.83),
        (0.5, 0.92),
        (0.27, 0.83),
        (0.2, 0.5),
        (0.27, 0.17),
        (0.5, 0.08),
    ]],
    &[&[(0.33, 0.26), (0.55, 0.08), (0.55, 0.92)]],
    &[&[(0.2, 0.26), (0.36, 0.1), (0.64, 0.1), (0.8, 0.28), (0.7, 0.5), (0.2, 0.92), (0.82, 0.92)]],
    &[&[(0.2, 0.12), (0.76, 0.12), (0.45, 0.45), (0.76, 0.6), (0.76, 0.8), (0.55, 0.92), (0.2, 0.88)]],
    &[&[(0.66, 0.92), (0.66, 0.08), (0.15, 0.65), (0.86, 0.65)]],
    &[&[(0.78, 0.1), (0.26, 0.1), (0.22, 0.46), (0.6, 0.42), (0.8, 0.62), (0.7, 0.88), (0.2, 0.9)]],
    &[&[(0.7, 0.1), (0.36, 0.34), (0.22, 0.7), (0.4, 0.92), (0.7, 0.88), (0.78, 0.66), (0.55, 0.5), (0.25, 0.6)]],
    &[&[(0.18, 0.1), (0.82, 0.1), (0.4, 0.92)]],
    &[
        &[(0.5, 0.1), (0.7, 0.17), (0.7, 0.36), (0.5, 0.47), (0.3, 0.36), (0.3, 0.17), (0.5, 0.1)],
        &[(0.5, 0.47), (0.76, 0.58), (0.76, 0.82), (0.5, 0.92), (0.24, 0.82), (0.24, 0.58), (0.5, 0.47)],
    ],
    &[&[(0.76, 0.4), (0.5, 0.5), (0.25, 0.36), (0.34, 0.12), (0.64, 0.1), (0.76, 0.4), (0.6, 0.92)]],
];

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Renders one jittered glyph as white-on-black interleaved RGB, with a few
/// faint clutter strokes.
fn render(digit: usize, rng: &mut impl Rng) -> Vec<u8> {
    let jitter = Normal::new(0.0, 0.035).expect("valid");
    let size = rng.random_range(14.0..22.0);
    let angle = rng.random_range(-18f64..18.0).to_radians();
    let shear = rng.random_range(-0.25..0.25);
    let (cx, cy) = (13.5 + rng.random_range(-2.0..2.0), 13.5 + rng.random_range(-2.0..2.0));
    let half_width = rng.random_range(0.7..1.5);
    let ink = rng.random_range(170.0..=255.0);
    let (sin, cos) = angle.sin_cos();
    let place = |(u, v): (f64, f64)| {
        let (x, y) = ((u - 0.5) * size * 0.8, (v - 0.5) * size);
        let x = x + shear * y;
        (cos * x - sin * y + cx, sin * x + cos * y + cy)
    };
    let mut strokes: Vec<(f64, Vec<(f64, f64)>)> = GLYPHS[digit]
        .iter()
        .map(|s| (ink, s.iter().map(|&(u, v)| place((u + jitter.sample(rng), v + jitter.sample(rng)))).collect()))
        .collect();
    for _ in 0..rng.random_range(0..=2) {
        let a = (rng.random_range(0.0..28.0), rng.random_range(0.0..28.0));
        let len = rng.random_range(3.0..8.0);
        let dir = rng.random_range(0.0..std::f64::consts::TAU);
        let b = (a.0 + len * dir.cos(), a.1 + len * dir.sin());
        strokes.push((rng.random_range(60.0..140.0), vec![a, b]));
    }
    let mut out = vec![0u8; SIDE * SIDE * 3];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let p = (x as f64, y as f64);
            let v = strokes
                .iter()
                .flat_map(|(ink, s)| {
                    s.windows(2).map(move |w| ink * (half_width + 0.5 - segment_distance(p, w[0], w[1])).clamp(0.0, 1.0))
                })
                .fold(0.0, f64::max);
            out[(y * SIDE + x) * 3..][..3].fill(v.round() as u8);
        }
    }
    out
}

/// `count` glyph images, `28x28x3`, labels `i % 10` for image `i`.
pub fn synth_digits(seed: u64, count: usize) -> Result<LabeledDataset, DomainError> {
    if count < 10 {
        return Err(DomainError::Config(format!("synthetic domains need at least 10 images, got {count}")));
    }
    let images = par::map_indexed(count, |i| render(i % 10, &mut sub_stream(seed, i as u64)));
    LabeledDataset::new(
        format!("synth-{seed}"),
        [3, SIDE, SIDE],
        10,
        images.concat(),
        (0..count).map(|i| i % 10).collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Recipe {
    /// `|background - x|` against a random smooth colour texture.
    Colorize,
    /// `255 - x` plus Gaussian noise.
    InvertNoise,
    RotateFixed { degrees: f64 },
    Cast { offset: [f64; 3] },
}

/// Smooth random colour field: a base colour plus a few random gratings.
fn background(h: usize, w: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = vec![0.0; h * w * 3];
    for c in 0..3 {
        let base: f64 = rng.random_range(40.0..215.0);
        let waves: Vec<[f64; 4]> = (0..3)
            .map(|_| {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let freq = rng.random_range(0.1..0.6);
                [freq * theta.cos(), freq * theta.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(10.0..40.0)]
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let v: f64 = waves.iter().map(|[fx, fy, ph, amp]| amp * (fx * x as f64 + fy * y as f64 + ph).sin()).sum();
                let grain: f64 = rng.sample::<f64, _>(StandardNormal) * 6.0;
                out[(y * w + x) * 3 + c] = (base + v + grain).clamp(0.0, 255.0);
            }
        }
    }
    out
}

fn shift(recipe: &Recipe, img: &Image, rng: &mut impl Rng) -> Image {
    match recipe {
        Recipe::Colorize => {
            let bg = background(img.height, img.width, rng);
            let mut out = img.clone();
            let c = img.channels;
            for p in 0..img.height * img.width {
                for k in 0..c {
                    out.data[p * c + k] = (bg[p * 3 + k] - img.data[p * c + k]).abs();
                }
            }
            out
        }
        Recipe::InvertNoise => kernels::apply_gaussian_noise(INVERT_NOISE_SIGMA, &kernels::apply_invert(img), rng),
        Recipe::RotateFixed { degrees } => kernels::apply_rotate(*degrees, img),
        Recipe::Cast { offset } => kernels::apply_rgb_offsets(*offset, img),
    }
}

/// Shifted copy of `base`; image `i` uses the `i`-th sub-stream of `seed`.
pub fn derive_domain(base: &LabeledDataset, recipe: &Recipe, seed: u64, name: &str) -> Result<LabeledDataset, DomainError> {
    let [c, h, w] = base.shape();
    let images = par::map_indexed(base.len(), |i| shift(recipe, &base.image(i), &mut sub_stream(seed, i as u64)).to_u8());
    LabeledDataset::new(name.to_string(), [c, h, w], base.classes(), images.concat(), base.labels().to_vec())
}
