//! Generated stand-in dataset: six visually separable "room" classes, each a
//! distinct base colour and texture, with per-image jitter. Used for
//! end-to-end tests and demos where real listing photos are unavailable.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{seeded_rng, write_manifest, DatasetManifest, ImageRecord, TagMap};
use crate::error::{Error, Result};
use crate::label::{ClassLabel, NUM_CLASSES};

#[derive(Debug, Clone, Copy)]
enum Texture {
    HorizontalStripes,
    Checkerboard,
    Blobs,
    VerticalStripes,
    DiagonalStripes,
    Noise,
}

struct Style {
    base: [f32; 3],
    accent: [f32; 3],
    texture: Texture,
}

fn style(label: ClassLabel) -> Style {
    match label {
        ClassLabel::Balcony => Style {
            base: [40.0, 90.0, 230.0],
            accent: [235.0, 240.0, 250.0],
            texture: Texture::HorizontalStripes,
        },
        ClassLabel::Bathroom => Style {
            base: [225.0, 240.0, 240.0],
            accent: [60.0, 150.0, 160.0],
            texture: Texture::Checkerboard,
        },
        ClassLabel::Bedroom => Style {
            base: [200.0, 50.0, 60.0],
            accent: [120.0, 20.0, 40.0],
            texture: Texture::Blobs,
        },
        ClassLabel::Hall => Style {
            base: [235.0, 205.0, 60.0],
            accent: [120.0, 80.0, 30.0],
            texture: Texture::VerticalStripes,
        },
        ClassLabel::Kitchen => Style {
            base: [50.0, 170.0, 60.0],
            accent: [10.0, 40.0, 15.0],
            texture: Texture::DiagonalStripes,
        },
        ClassLabel::Others => Style {
            base: [128.0, 128.0, 128.0],
            accent: [40.0, 40.0, 40.0],
            texture: Texture::Noise,
        },
    }
}

/// Parameters drawn per image.
struct Jitter {
    width: u32,
    height: u32,
    shift: [f32; 3],
    period: f32,
    phase: f32,
    noise: f32,
}

impl Jitter {
    fn none() -> Self {
        Jitter {
            width: 96,
            height: 96,
            shift: [0.0; 3],
            period: 12.0,
            phase: 0.0,
            noise: 0.0,
        }
    }

    fn random(rng: &mut ChaCha8Rng) -> Self {
        Jitter {
            width: rng.random_range(64..=128),
            height: rng.random_range(64..=128),
            shift: [0; 3].map(|_| rng.random_range(-20.0..20.0)),
            period: rng.random_range(8.0..18.0),
            phase: rng.random_range(0.0..18.0),
            noise: 12.0,
        }
    }
}

fn render(label: ClassLabel, j: &Jitter, rng: &mut ChaCha8Rng) -> RgbImage {
    let s = style(label);
    let mix = |t: f32| -> [f32; 3] { [0, 1, 2].map(|c| s.base[c] * (1.0 - t) + s.accent[c] * t + j.shift[c]) };
    let band = |v: f32| -> f32 {
        if ((v + j.phase) / j.period).floor() as i64 % 2 == 0 {
            0.0
        } else {
            0.6
        }
    };
    ImageBuffer::from_fn(j.width, j.height, |x, y| {
        let (xf, yf) = (x as f32, y as f32);
        let t = match s.texture {
            Texture::HorizontalStripes => band(yf),
            Texture::VerticalStripes => band(xf),
            Texture::DiagonalStripes => band(xf + yf),
            Texture::Checkerboard => {
                let a = ((xf + j.phase) / j.period).floor() as i64;
                let b = ((yf + j.phase) / j.period).floor() as i64;
                if (a + b) % 2 == 0 { 0.0 } else { 0.6 }
            }
            Texture::Blobs => {
                let u = (xf + j.phase) / (2.0 * j.period);
                let v = (yf + j.phase) / (2.0 * j.period);
                0.3 + 0.3 * (u * std::f32::consts::TAU).sin() * (v * std::f32::consts::TAU).cos()
            }
            Texture::Noise => rng.random_range(0.0..0.8),
        };
        let px = mix(t).map(|v| {
            let n = if j.noise > 0.0 { rng.random_range(-j.noise..j.noise) } else { 0.0 };
            (v + n).clamp(0.0, 255.0) as u8
        });
        Rgb(px)
    })
}

/// A random image of `label`'s pattern.
pub fn generate_image(label: ClassLabel, rng: &mut ChaCha8Rng) -> RgbImage {
    let j = Jitter::random(rng);
    render(label, &j, rng)
}

/// The un-jittered 96x96 pattern image of a class.
pub fn canonical_image(label: ClassLabel) -> RgbImage {
    render(label, &Jitter::none(), &mut seeded_rng(0))
}

/// Raw annotation tags written to generated manifests; hall and others use
/// several source tags so the tag mapping is exercised.
fn raw_tags(label: ClassLabel) -> &'static [&'static str] {
    match label {
        ClassLabel::Hall => &["living_room", "dining_room", "living", "dining"],
        ClassLabel::Others => &["swimming_pool", "exterior", "floor_plan"],
        ClassLabel::Balcony => &["balcony"],
        ClassLabel::Bathroom => &["bathroom"],
        ClassLabel::Bedroom => &["bedroom"],
        ClassLabel::Kitchen => &["kitchen"],
    }
}

/// Writes `counts[c]` PNG images per class under `dir/<class>/` and a
/// `dir/manifest.csv`. Returns the manifest path and the loaded manifest.
pub fn write_dataset(dir: impl AsRef<Path>, counts: [usize; NUM_CLASSES], seed: u64) -> Result<(PathBuf, DatasetManifest)> {
    let dir = dir.as_ref();
    let mut rng = seeded_rng(seed);
    let tags = TagMap::default();
    let mut records = Vec::new();
    for (label, n) in ClassLabel::ALL.into_iter().zip(counts) {
        let class_dir = dir.join(label.name());
        std::fs::create_dir_all(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
        let raw = raw_tags(label);
        for i in 0..n {
            let path = class_dir.join(format!("{i:04}.png"));
            generate_image(label, &mut rng)
                .save(&path)
                .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
            records.push(ImageRecord::new(path, raw[i % raw.len()], &tags));
        }
    }
    let manifest = DatasetManifest::new(records)?;
    let manifest_path = dir.join("manifest.csv");
    write_manifest(&manifest, &manifest_path)?;
    Ok((manifest_path, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_manifest_counts_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let (path, m) = write_dataset(dir.path(), [3, 2, 1, 4, 1, 2], 5).unwrap();
        assert_eq!(m.counts().as_array(), [3, 2, 1, 4, 1, 2]);
        assert_eq!(crate::dataset::load_manifest(&path).unwrap(), m);
        assert!(m.records().iter().any(|r| r.raw_tag == "dining_room" && r.label == ClassLabel::Hall));
        for r in m.records() {
            assert!(r.path.is_file());
        }
    }

    #[test]
    fn class_means_are_distinct() {
        let means: Vec<[f32; 3]> = ClassLabel::ALL
            .iter()
            .map(|&l| {
                let img = canonical_image(l);
                let mut sum = [0f32; 3];
                for p in img.pixels() {
                    for c in 0..3 {
                        sum[c] += p.0[c] as f32;
                    }
                }
                sum.map(|s| s / (img.width() * img.height()) as f32)
            })
            .collect();
        for i in 0..NUM_CLASSES {
            for j in i + 1..NUM_CLASSES {
                let d: f32 = (0..3).map(|c| (means[i][c] - means[j][c]).powi(2)).sum::<f32>().sqrt();
                assert!(d > 80.0, "{:?} vs {:?}: {d}", ClassLabel::ALL[i], ClassLabel::ALL[j]);
            }
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate_image(ClassLabel::Kitchen, &mut seeded_rng(3));
        let b = generate_image(ClassLabel::Kitchen, &mut seeded_rng(3));
        assert_eq!(a, b);
    }
}
