//! Tenfold training-set amplification: every image plus nine deterministic
//! variants, with boxes carried through the geometric ones.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::dataset::{AnnotatedImage, Annotation, BoundingBox, DatasetManifest};
use crate::error::{Error, Result};
use crate::image::{read_ppm, write_ppm, RasterImage};
use crate::rng::{derive_seed, SplitMix64};

pub const NOISE_SIGMA: f64 = 10.0;
pub const CONTRAST_UP: f64 = 1.25;
pub const CONTRAST_DOWN: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugKind {
    VFlip,
    HFlip,
    Rot90,
    Rot180,
    Rot270,
    GaussNoise,
    GaussBlur,
    ContrastUp,
    ContrastDown,
}

impl AugKind {
    pub const ALL: [AugKind; 9] = [
        AugKind::VFlip,
        AugKind::HFlip,
        AugKind::Rot90,
        AugKind::Rot180,
        AugKind::Rot270,
        AugKind::GaussNoise,
        AugKind::GaussBlur,
        AugKind::ContrastUp,
        AugKind::ContrastDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugKind::VFlip => "vflip",
            AugKind::HFlip => "hflip",
            AugKind::Rot90 => "rot90",
            AugKind::Rot180 => "rot180",
            AugKind::Rot270 => "rot270",
            AugKind::GaussNoise => "gauss_noise",
            AugKind::GaussBlur => "gauss_blur",
            AugKind::ContrastUp => "contrast_up",
            AugKind::ContrastDown => "contrast_down",
        }
    }

    pub fn is_geometric(self) -> bool {
        matches!(
            self,
            AugKind::VFlip | AugKind::HFlip | AugKind::Rot90 | AugKind::Rot180 | AugKind::Rot270
        )
    }
}

impl fmt::Display for AugKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown augmentation `{s}`")))
    }
}

/// Applies one augmentation to an image and its boxes.
///
/// Rotations are clockwise. `seed` only matters for [`AugKind::GaussNoise`].
pub fn apply(image: &RasterImage, boxes: &[BoundingBox], kind: AugKind, seed: u64) -> (RasterImage, Vec<BoundingBox>) {
    let (w, h) = (image.width(), image.height());
    match kind {
        AugKind::VFlip => (
            RasterImage::from_fn(w, h, |x, y| image.get(x, h - 1 - y)),
            map_boxes(boxes, |b| BoundingBox::new(b.x_min, h - b.y_max, b.x_max, h - b.y_min)),
        ),
        AugKind::HFlip => (
            RasterImage::from_fn(w, h, |x, y| image.get(w - 1 - x, y)),
            map_boxes(boxes, |b| BoundingBox::new(w - b.x_max, b.y_min, w - b.x_min, b.y_max)),
        ),
        AugKind::Rot90 => (
            RasterImage::from_fn(h, w, |x, y| image.get(y, h - 1 - x)),
            map_boxes(boxes, |b| BoundingBox::new(h - b.y_max, b.x_min, h - b.y_min, b.x_max)),
        ),
        AugKind::Rot180 => (
            RasterImage::from_fn(w, h, |x, y| image.get(w - 1 - x, h - 1 - y)),
            map_boxes(boxes, |b| {
                BoundingBox::new(w - b.x_max, h - b.y_max, w - b.x_min, h - b.y_min)
            }),
        ),
        AugKind::Rot270 => (
            RasterImage::from_fn(h, w, |x, y| image.get(w - 1 - y, x)),
            map_boxes(boxes, |b| BoundingBox::new(b.y_min, w - b.x_max, b.y_max, w - b.x_min)),
        ),
        AugKind::GaussNoise => (gaussian_noise(image, NOISE_SIGMA, seed), boxes.to_vec()),
        AugKind::GaussBlur => (gaussian_blur(image), boxes.to_vec()),
        AugKind::ContrastUp => (contrast(image, CONTRAST_UP), boxes.to_vec()),
        AugKind::ContrastDown => (contrast(image, CONTRAST_DOWN), boxes.to_vec()),
    }
}

fn map_boxes(boxes: &[BoundingBox], f: impl Fn(&BoundingBox) -> BoundingBox) -> Vec<BoundingBox> {
    boxes.iter().map(f).collect()
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Independent N(0, sigma^2) noise on every sample, clamped to 0..=255.
pub fn gaussian_noise(image: &RasterImage, sigma: f64, seed: u64) -> RasterImage {
    let mut rng = SplitMix64::new(seed);
    let mut out = image.clone();
    for p in out.pixels_mut() {
        *p = to_u8(*p as f64 + sigma * rng.normal());
    }
    out
}

/// 3x3 binomial blur, weights (1,2,1) x (1,2,1) / 16, edges replicated.
pub fn gaussian_blur(image: &RasterImage) -> RasterImage {
    const K: [u32; 3] = [1, 2, 1];
    let (w, h) = (image.width() as i64, image.height() as i64);
    RasterImage::from_fn(image.width(), image.height(), |x, y| {
        let mut acc = [0u32; 3];
        for (dy, ky) in (-1i64..=1).zip(K) {
            let sy = (y as i64 + dy).clamp(0, h - 1) as u32;
            for (dx, kx) in (-1i64..=1).zip(K) {
                let sx = (x as i64 + dx).clamp(0, w - 1) as u32;
                let p = image.get(sx, sy);
                for c in 0..3 {
                    acc[c] += ky * kx * p[c] as u32;
                }
            }
        }
        acc.map(|a| ((a + 8) / 16) as u8)
    })
}

/// `p' = clamp(128 + factor * (p - 128))`.
pub fn contrast(image: &RasterImage, factor: f64) -> RasterImage {
    let mut out = image.clone();
    for p in out.pixels_mut() {
        *p = to_u8(128.0 + factor * (*p as f64 - 128.0));
    }
    out
}

fn file_stem(image_id: &str) -> String {
    image_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn amplify_record(
    record: &AnnotatedImage,
    image_root: &Path,
    output_dir: &Path,
    seed: u64,
) -> Result<Vec<AnnotatedImage>> {
    let image = read_ppm(image_root.join(&record.path)).map_err(|e| Error::ImageRead {
        image_id: record.image_id.clone(),
        reason: e.to_string(),
    })?;
    if (image.width(), image.height()) != (record.width, record.height) {
        return Err(Error::ImageRead {
            image_id: record.image_id.clone(),
            reason: format!(
                "file is {}x{}, record says {}x{}",
                image.width(),
                image.height(),
                record.width,
                record.height
            ),
        });
    }
    let record_seed = derive_seed(seed, &record.image_id);
    let boxes: Vec<BoundingBox> = record.boxes.iter().map(|a| a.bbox).collect();

    let mut out = Vec::with_capacity(10);
    let emit = |image_id: String, img: &RasterImage, bxs: &[BoundingBox]| -> Result<AnnotatedImage> {
        let path = format!("{}.ppm", file_stem(&image_id));
        write_ppm(img, output_dir.join(&path))?;
        Ok(AnnotatedImage {
            image_id,
            path,
            kind: record.kind,
            width: img.width(),
            height: img.height(),
            boxes: record
                .boxes
                .iter()
                .zip(bxs)
                .map(|(a, b)| Annotation::new(a.species.clone(), *b))
                .collect(),
            species: None,
        })
    };
    out.push(emit(record.image_id.clone(), &image, &boxes)?);
    for kind in AugKind::ALL {
        let (img, bxs) = apply(&image, &boxes, kind, record_seed);
        out.push(emit(format!("{}__{}", record.image_id, kind), &img, &bxs)?);
    }
    Ok(out)
}

/// Writes each record's image and its nine variants under `output_dir` and
/// returns the tenfold manifest, sorted by image id. Paths in the result are
/// relative to `output_dir`.
///
/// Variant content depends only on `seed` and the record's image id, so
/// `threads` changes speed but never output.
pub fn amplify(
    manifest: &DatasetManifest,
    image_root: &Path,
    output_dir: &Path,
    seed: u64,
    threads: usize,
) -> Result<DatasetManifest> {
    fs::create_dir_all(output_dir).map_err(|source| Error::Write {
        path: output_dir.to_path_buf(),
        source,
    })?;
    let run = |r: &AnnotatedImage| amplify_record(r, image_root, output_dir, seed);
    let nested: Vec<Vec<AnnotatedImage>> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| manifest.records.par_iter().map(run).collect::<Result<_>>())?
    } else {
        manifest.records.iter().map(run).collect::<Result<_>>()?
    };
    let mut records: Vec<AnnotatedImage> = nested.into_iter().flatten().collect();
    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let mut out = DatasetManifest::new(manifest.label.clone(), records);
    out.seed = seed;
    out.provenance = manifest.provenance.clone();
    out.provenance.push(format!(
        "amplify x10 seed={seed}: original + {}",
        AugKind::ALL.map(|k| k.name()).join(",")
    ));
    Ok(out)
}
