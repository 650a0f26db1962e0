//! Synthetic blob scenes for smoke runs and tests.
//!
//! Each species is a saturated colour; an object is a filled ellipse of that
//! colour with mild per-pixel jitter, drawn on a grey textured background.

use std::path::Path;

use crate::dataset::{AnnotatedImage, Annotation, BoundingBox, DatasetManifest};
use crate::error::{Error, Result};
use crate::image::{write_ppm, RasterImage};
use crate::rng::{derive_seed, SplitMix64};

const PALETTE: [[u8; 3]; 6] = [
    [220, 40, 40],
    [40, 190, 60],
    [50, 80, 230],
    [230, 200, 30],
    [200, 50, 210],
    [30, 200, 210],
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub species: usize,
    pub images: usize,
    pub size: u32,
    /// Object box side range in pixels.
    pub min_side: u32,
    pub max_side: u32,
    /// Probability that a scene holds two objects instead of one.
    pub two_object_rate: f64,
    /// Prefix of generated image ids.
    pub prefix: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            species: 3,
            images: 100,
            size: 128,
            min_side: 28,
            max_side: 56,
            two_object_rate: 0.3,
            prefix: "img".into(),
            seed: 0,
        }
    }
}

pub fn species_name(k: usize) -> String {
    format!("blob_{k}")
}

fn jitter(c: u8, rng: &mut SplitMix64, amount: i64) -> u8 {
    (c as i64 + rng.below(2 * amount as u64 + 1) as i64 - amount).clamp(0, 255) as u8
}

fn background(size: u32, rng: &mut SplitMix64) -> RasterImage {
    let fx = rng.uniform(0.05, 0.3);
    let fy = rng.uniform(0.05, 0.3);
    let phase = rng.uniform(0.0, std::f64::consts::TAU);
    let base = rng.uniform(90.0, 160.0);
    let tint = [
        rng.uniform(-10.0, 10.0),
        rng.uniform(-10.0, 10.0),
        rng.uniform(-10.0, 10.0),
    ];
    RasterImage::from_fn(size, size, |x, y| {
        let wave = 25.0 * (x as f64 * fx + y as f64 * fy + phase).sin();
        let noise = rng.uniform(-18.0, 18.0);
        let v = base + wave + noise;
        [
            (v + tint[0]).round().clamp(0.0, 255.0) as u8,
            (v + tint[1]).round().clamp(0.0, 255.0) as u8,
            (v + tint[2]).round().clamp(0.0, 255.0) as u8,
        ]
    })
}

fn draw_blob(image: &mut RasterImage, b: &BoundingBox, colour: [u8; 3], rng: &mut SplitMix64) {
    let cx = (b.x_min + b.x_max) as f64 / 2.0;
    let cy = (b.y_min + b.y_max) as f64 / 2.0;
    let rx = b.width() as f64 / 2.0;
    let ry = b.height() as f64 / 2.0;
    for y in b.y_min..b.y_max {
        for x in b.x_min..b.x_max {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                let px = colour.map(|c| jitter(c, rng, 12));
                image.put(x, y, px);
            }
        }
    }
}

/// Tight box of the ellipse inscribed in `b`: the drawn pixels touch every
/// side, so the annotation is exact.
fn random_box(size: u32, lo: u32, hi: u32, rng: &mut SplitMix64) -> BoundingBox {
    let w = lo + rng.below((hi - lo + 1) as u64) as u32;
    let h = lo + rng.below((hi - lo + 1) as u64) as u32;
    let x = rng.below((size - w + 1) as u64) as u32;
    let y = rng.below((size - h + 1) as u64) as u32;
    BoundingBox::new(x, y, x + w, y + h)
}

fn separated(a: &BoundingBox, b: &BoundingBox, gap: u32) -> bool {
    a.x_max + gap <= b.x_min || b.x_max + gap <= a.x_min || a.y_max + gap <= b.y_min || b.y_max + gap <= a.y_min
}

/// Renders one scene and its annotations.
pub fn render_scene(config: &SynthConfig, index: usize) -> (RasterImage, Vec<Annotation>) {
    let mut rng = SplitMix64::new(derive_seed(config.seed, &format!("{}{index}", config.prefix)));
    let mut image = background(config.size, &mut rng);
    let count = if rng.next_f64() < config.two_object_rate { 2 } else { 1 };
    let mut boxes: Vec<BoundingBox> = Vec::new();
    while boxes.len() < count {
        let b = random_box(config.size, config.min_side, config.max_side, &mut rng);
        if boxes.iter().all(|o| separated(o, &b, 6)) {
            boxes.push(b);
        }
    }
    let mut annotations = Vec::new();
    for b in boxes {
        // Cycle through species by index so every class is well represented.
        let k = if annotations.is_empty() {
            index % config.species
        } else {
            rng.below(config.species as u64) as usize
        };
        draw_blob(&mut image, &b, PALETTE[k % PALETTE.len()], &mut rng);
        annotations.push(Annotation::new(species_name(k), b));
    }
    (image, annotations)
}

/// Writes `config.images` scenes as PPM files into `dir` and returns their
/// ecological manifest with paths relative to `dir`.
pub fn generate(config: &SynthConfig, dir: &Path) -> Result<DatasetManifest> {
    if config.species == 0 || config.species > PALETTE.len() {
        return Err(Error::Config(format!("species must be in 1..={}", PALETTE.len())));
    }
    if config.min_side < 4 || config.min_side > config.max_side || config.max_side * 2 + 6 > config.size {
        return Err(Error::Config("object sides do not fit the image".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(config.images);
    for i in 0..config.images {
        let (image, boxes) = render_scene(config, i);
        let image_id = format!("{}{i:04}", config.prefix);
        let file = format!("{image_id}.ppm");
        write_ppm(&image, dir.join(&file))?;
        records.push(AnnotatedImage::ecological(
            image_id,
            file,
            config.size,
            config.size,
            boxes,
        ));
    }
    let mut manifest = DatasetManifest::new("synthetic", records);
    manifest.seed = config.seed;
    Ok(manifest)
}
