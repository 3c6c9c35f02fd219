//! Procedural defect images.
//!
//! Background: `base_intensity` plus uniform noise of `texture_amplitude` and a
//! faint periodic stripe imitating scan tracks. Defects are painted on top:
//!
//! * crack: thin dark polyline (1–2 px wide, 4–6 segments)
//! * pinhole: small dark disk, radius in `pinhole_radius`
//! * hole: larger dark disk, radius in `hole_radius`
//! * spatter: 3–7 bright blobs scattered in a small neighbourhood
//!
//! The annotation bbox is the tight bound of painted defect pixels.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::augment::{augment_sample, Augmentation};
use super::{Annotation, BBox, DataError, DefectClass, GrayImage, Sample, SampleSet};
use crate::rng::{child_rng, derive_seed};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub height: usize,
    pub width: usize,
    pub base_intensity: u8,
    pub texture_amplitude: u8,
    pub stripe_amplitude: f64,
    pub dark_intensity: u8,
    pub bright_intensity: u8,
    pub defect_jitter: u8,
    pub pinhole_radius: (u32, u32),
    pub hole_radius: (u32, u32),
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            height: super::CANONICAL_HEIGHT,
            width: super::CANONICAL_WIDTH,
            base_intensity: 140,
            texture_amplitude: 14,
            stripe_amplitude: 5.0,
            dark_intensity: 45,
            bright_intensity: 235,
            defect_jitter: 8,
            pinhole_radius: (2, 3),
            hole_radius: (5, 10),
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<(), DataError> {
        if self.height < 32 || self.width < 32 {
            return Err(DataError::InvalidArgument(format!(
                "image {}x{} too small for defect synthesis (min 32x32)",
                self.height, self.width
            )));
        }
        let (plo, phi) = self.pinhole_radius;
        let (hlo, hhi) = self.hole_radius;
        if plo == 0 || plo > phi || phi > 3 {
            return Err(DataError::InvalidArgument("pinhole radius must lie in 1..=3".into()));
        }
        if hlo < 4 || hlo > hhi || hhi > 10 {
            return Err(DataError::InvalidArgument("hole radius must lie in 4..=10".into()));
        }
        Ok(())
    }
}

struct Canvas {
    img: GrayImage,
    bounds: Option<(usize, usize, usize, usize)>,
}

impl Canvas {
    fn paint(&mut self, x: i64, y: i64, v: u8) {
        if x < 0 || y < 0 || x as usize >= self.img.width() || y as usize >= self.img.height() {
            return;
        }
        let (x, y) = (x as usize, y as usize);
        self.img.set(x, y, v);
        self.bounds = Some(match self.bounds {
            None => (x, y, x, y),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        });
    }

    fn disk(&mut self, cx: i64, cy: i64, r: i64, level: u8, jitter: u8, rng: &mut ChaCha8Rng) {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    let v = jittered(level, jitter, rng);
                    self.paint(cx + dx, cy + dy, v);
                }
            }
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), thick: bool, p: &SynthParams, rng: &mut ChaCha8Rng) {
        // Bresenham; consecutive pixels are 8-connected
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        let steep = dy.abs() > dx;
        loop {
            let v = jittered(p.dark_intensity, p.defect_jitter, rng);
            self.paint(x, y, v);
            if thick {
                let v = jittered(p.dark_intensity, p.defect_jitter, rng);
                if steep {
                    self.paint(x + 1, y, v);
                } else {
                    self.paint(x, y + 1, v);
                }
            }
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
}

fn jittered(level: u8, jitter: u8, rng: &mut ChaCha8Rng) -> u8 {
    let j = jitter as i32;
    (level as i32 + rng.random_range(-j..=j)).clamp(0, 255) as u8
}

fn background(p: &SynthParams, rng: &mut ChaCha8Rng) -> GrayImage {
    let phase = rng.random_range(0.0..2.0 * PI);
    let period = rng.random_range(5.0..9.0);
    let amp = p.texture_amplitude as i32;
    let mut img = GrayImage::filled(p.height, p.width, p.base_intensity);
    for y in 0..p.height {
        for x in 0..p.width {
            let stripe = p.stripe_amplitude * (2.0 * PI * x as f64 / period + phase).sin();
            let noise = rng.random_range(-amp..=amp) as f64;
            let v = (p.base_intensity as f64 + stripe + noise).round().clamp(0.0, 255.0);
            img.set(x, y, v as u8);
        }
    }
    img
}

/// Renders one defect image of `class_id` with its annotation.
///
/// Deterministic in `(class_id, seed, params)`.
pub fn synth_image(class_id: u8, seed: u64, params: &SynthParams) -> Result<(GrayImage, Annotation), DataError> {
    let class = DefectClass::from_id(class_id)?;
    params.validate()?;
    let mut rng = child_rng(seed, 0x5EED_0001, class_id as u64);
    let img = background(params, &mut rng);
    let mut canvas = Canvas { img, bounds: None };
    let (w, h) = (params.width as i64, params.height as i64);
    let margin = 12;
    let cx = rng.random_range(margin..w - margin);
    let cy = rng.random_range(margin..h - margin);

    match class {
        DefectClass::Crack => {
            let segments = rng.random_range(4..=6);
            let mut angle: f64 = rng.random_range(0.0..2.0 * PI);
            let mut pt = (cx, cy);
            let thick = rng.random_bool(0.5);
            for _ in 0..segments {
                angle += rng.random_range(-PI / 4.0..PI / 4.0);
                let len = rng.random_range(5.0..10.0);
                let nx = (pt.0 as f64 + len * angle.cos()).round() as i64;
                let ny = (pt.1 as f64 + len * angle.sin()).round() as i64;
                let next = (nx.clamp(2, w - 3), ny.clamp(2, h - 3));
                canvas.line(pt, next, thick, params, &mut rng);
                pt = next;
            }
        }
        DefectClass::Pinhole | DefectClass::Hole => {
            let (lo, hi) = if class == DefectClass::Pinhole {
                params.pinhole_radius
            } else {
                params.hole_radius
            };
            let r = rng.random_range(lo..=hi) as i64;
            canvas.disk(cx, cy, r, params.dark_intensity, params.defect_jitter, &mut rng);
        }
        DefectClass::Spatter => {
            let blobs = rng.random_range(3..=7);
            for _ in 0..blobs {
                let bx = cx + rng.random_range(-10..=10);
                let by = cy + rng.random_range(-10..=10);
                let r = rng.random_range(1..=2);
                canvas.disk(bx, by, r, params.bright_intensity, params.defect_jitter, &mut rng);
            }
        }
    }

    let (x0, y0, x1, y1) = canvas.bounds.expect("every class paints at least one pixel");
    let annotation = Annotation {
        class,
        bbox: BBox {
            xmin: x0 as u32,
            ymin: y0 as u32,
            xmax: x1 as u32 + 1,
            ymax: y1 as u32 + 1,
        },
        image_width: params.width as u32,
        image_height: params.height as u32,
    };
    Ok((canvas.img, annotation))
}

/// Orientation-preserving augmentations used when building datasets.
const DATASET_AUGMENTATIONS: usize = 6;

fn dataset_augmentation(rng: &mut ChaCha8Rng) -> Option<Augmentation> {
    match rng.random_range(0..DATASET_AUGMENTATIONS) {
        0 => None,
        1 => Some(Augmentation::FlipH),
        2 => Some(Augmentation::FlipV),
        3 => Some(Augmentation::Rot180),
        4 => Some(Augmentation::Brightness(rng.random_range(-40..=40))),
        _ => Some(Augmentation::GaussNoise(rng.random_range(2.0..8.0))),
    }
}

/// Balanced set of `n_samples` images; sample `i` has class `i % 4`.
///
/// With `augment`, each sample additionally receives one seeded augmentation
/// that keeps the canonical orientation (flips, 180° rotation, brightness, noise).
pub fn generate_set(n_samples: usize, seed: u64, params: &SynthParams, augment: bool) -> Result<SampleSet, DataError> {
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let class_id = (i % super::CLASS_COUNT) as u8;
        let sample_seed = derive_seed(seed, 0xDA7A, i as u64);
        let (mut image, mut annotation) = synth_image(class_id, sample_seed, params)?;
        if augment {
            let mut rng = child_rng(sample_seed, 0xA06, 0);
            if let Some(aug) = dataset_augmentation(&mut rng) {
                let aug_seed = derive_seed(sample_seed, 0xA06, 1);
                (image, annotation) = augment_sample(&image, &annotation, aug, aug_seed)?;
            }
        }
        samples.push(Sample { image, annotation });
    }
    Ok(SampleSet::new(samples, seed))
}
