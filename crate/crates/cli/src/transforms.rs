//! Inspection of a transform set on one image.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use image::{ImageBuffer, Luma, Rgb};
use metadr_core::rng::stream;
use metadr_core::xforms::{apply, build_set, sample_transform, Image, TransformEntry};
use serde::Serialize;

use crate::Failure;

#[derive(Args)]
pub struct TransformArgs {
    /// Set id (`psi1`..`psi4`).
    set: String,
    /// PNG, PPM or PGM input.
    image: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value = "transforms-out")]
    out: PathBuf,
}

#[derive(Serialize)]
struct Sample {
    file: String,
    transforms: Vec<TransformEntry>,
}

#[derive(Serialize)]
struct Manifest {
    set: String,
    n: usize,
    seed: u64,
    input: String,
    samples: Vec<Sample>,
}

fn load(path: &Path) -> Result<Image, Failure> {
    let img = image::open(path).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(if img.color().has_color() {
        Image::from_u8(h, w, 3, img.to_rgb8().as_raw())
    } else {
        Image::from_u8(h, w, 1, img.to_luma8().as_raw())
    })
}

fn save(img: &Image, path: &Path) -> Result<(), Failure> {
    let (w, h) = (img.width as u32, img.height as u32);
    let px = img.to_u8();
    let res = if img.channels == 3 {
        ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, px).expect("size").save(path)
    } else {
        ImageBuffer::<Luma<u8>, _>::from_raw(w, h, px).expect("size").save(path)
    };
    res.map_err(|e| Failure::io(path, e))
}

pub fn cmd_transforms(a: TransformArgs) -> Result<(), Failure> {
    let set = build_set(&a.set).map_err(|e| Failure::invalid(e.to_string()))?;
    if a.samples == 0 {
        return Err(Failure::invalid("samples: must be >= 1"));
    }
    let img = load(&a.image)?;
    fs::create_dir_all(&a.out).map_err(|e| Failure::io(&a.out, e))?;
    let mut rng = stream(a.seed, "transforms");
    let mut samples = Vec::with_capacity(a.samples);
    for i in 0..a.samples {
        let t = sample_transform(&set, &mut rng).map_err(|e| Failure::invalid(e.to_string()))?;
        let out = apply(&t, &img).map_err(|e| Failure::invalid(e.to_string()))?;
        let file = format!("sample-{i:03}.png");
        save(&out, &a.out.join(&file))?;
        samples.push(Sample { file, transforms: t.entries });
    }
    let manifest = Manifest {
        set: set.id.clone(),
        n: set.n,
        seed: a.seed,
        input: a.image.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        samples,
    };
    let path = a.out.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Failure::io(&path, e))?;
    println!("wrote {} samples and {}", a.samples, path.display());
    Ok(())
}
