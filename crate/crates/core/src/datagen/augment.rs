use rand_distr::{Distribution, Normal};

use super::{Annotation, BBox, DataError, GrayImage};
use crate::rng::rng_from;

/// One augmentation step. Rotations are clockwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Augmentation {
    FlipH,
    FlipV,
    Rot90,
    Rot180,
    Rot270,
    /// Additive offset in `[-64, 64]`, saturating at 0 and 255.
    Brightness(i32),
    /// Zero-mean Gaussian noise with standard deviation in `(0, 32]`.
    GaussNoise(f64),
}

impl Augmentation {
    pub fn validate(&self) -> Result<(), DataError> {
        match *self {
            Augmentation::Brightness(d) if !(-64..=64).contains(&d) => {
                Err(DataError::InvalidArgument(format!("brightness delta {d} outside [-64, 64]")))
            }
            Augmentation::GaussNoise(s) if !(s > 0.0 && s <= 32.0) => {
                Err(DataError::InvalidArgument(format!("noise sigma {s} outside (0, 32]")))
            }
            _ => Ok(()),
        }
    }

    /// True for the augmentations that only move pixels around.
    pub fn is_permutation(&self) -> bool {
        !matches!(self, Augmentation::Brightness(_) | Augmentation::GaussNoise(_))
    }
}

fn permute(image: &GrayImage, out_h: usize, out_w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> GrayImage {
    let mut out = GrayImage::filled(out_h, out_w, 0);
    for y in 0..out_h {
        for x in 0..out_w {
            let (sx, sy) = src(x, y);
            out.set(x, y, image.get(sx, sy));
        }
    }
    out
}

pub fn augment(image: &GrayImage, spec: Augmentation, seed: u64) -> Result<GrayImage, DataError> {
    spec.validate()?;
    let (h, w) = (image.height(), image.width());
    Ok(match spec {
        Augmentation::FlipH => permute(image, h, w, |x, y| (w - 1 - x, y)),
        Augmentation::FlipV => permute(image, h, w, |x, y| (x, h - 1 - y)),
        Augmentation::Rot180 => permute(image, h, w, |x, y| (w - 1 - x, h - 1 - y)),
        // clockwise: source row h-1-x lands in output column x
        Augmentation::Rot90 => permute(image, w, h, |x, y| (y, h - 1 - x)),
        Augmentation::Rot270 => permute(image, w, h, |x, y| (w - 1 - y, x)),
        Augmentation::Brightness(delta) => {
            let mut out = image.clone();
            for p in out.pixels_mut() {
                *p = (*p as i32 + delta).clamp(0, 255) as u8;
            }
            out
        }
        Augmentation::GaussNoise(sigma) => {
            let normal = Normal::new(0.0, sigma).expect("validated sigma");
            let mut rng = rng_from(seed);
            let mut out = image.clone();
            for p in out.pixels_mut() {
                let v = *p as f64 + normal.sample(&mut rng);
                *p = v.round().clamp(0.0, 255.0) as u8;
            }
            out
        }
    })
}

fn transform_bbox(ann: &Annotation, spec: Augmentation) -> Annotation {
    let (w, h) = (ann.image_width, ann.image_height);
    let b = ann.bbox;
    let (bbox, image_width, image_height) = match spec {
        Augmentation::FlipH => (BBox { xmin: w - b.xmax, xmax: w - b.xmin, ..b }, w, h),
        Augmentation::FlipV => (BBox { ymin: h - b.ymax, ymax: h - b.ymin, ..b }, w, h),
        Augmentation::Rot180 => (
            BBox {
                xmin: w - b.xmax,
                xmax: w - b.xmin,
                ymin: h - b.ymax,
                ymax: h - b.ymin,
            },
            w,
            h,
        ),
        Augmentation::Rot90 => (
            BBox {
                xmin: h - b.ymax,
                xmax: h - b.ymin,
                ymin: b.xmin,
                ymax: b.xmax,
            },
            h,
            w,
        ),
        Augmentation::Rot270 => (
            BBox {
                xmin: b.ymin,
                xmax: b.ymax,
                ymin: w - b.xmax,
                ymax: w - b.xmin,
            },
            h,
            w,
        ),
        Augmentation::Brightness(_) | Augmentation::GaussNoise(_) => (b, w, h),
    };
    Annotation {
        class: ann.class,
        bbox,
        image_width,
        image_height,
    }
}

/// Augments an image and moves its annotation box along with the pixels.
pub fn augment_sample(
    image: &GrayImage,
    annotation: &Annotation,
    spec: Augmentation,
    seed: u64,
) -> Result<(GrayImage, Annotation), DataError> {
    Ok((augment(image, spec, seed)?, transform_bbox(annotation, spec)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{synth_image, DefectClass, SynthParams};
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> GrayImage {
        GrayImage::new(h, w, (0..h * w).map(|i| (i * 7 % 251) as u8).collect()).unwrap()
    }

    #[test]
    fn flip_h_is_involution() {
        let img = ramp(80, 120);
        let once = augment(&img, Augmentation::FlipH, 0).unwrap();
        assert_ne!(once, img);
        assert_eq!(augment(&once, Augmentation::FlipH, 0).unwrap(), img);
    }

    #[test]
    fn brightness_saturates() {
        let img = GrayImage::filled(4, 4, 250);
        let out = augment(&img, Augmentation::Brightness(10), 0).unwrap();
        assert!(out.pixels().iter().all(|&p| p == 255));
        let out = augment(&GrayImage::filled(2, 2, 3), Augmentation::Brightness(-64), 0).unwrap();
        assert!(out.pixels().iter().all(|&p| p == 0));
    }

    #[test]
    fn rot90_group() {
        let img = ramp(80, 120);
        let mut r = augment(&img, Augmentation::Rot90, 0).unwrap();
        assert_eq!((r.height(), r.width()), (120, 80));
        for _ in 0..3 {
            r = augment(&r, Augmentation::Rot90, 0).unwrap();
        }
        assert_eq!(r, img);
        let r270 = augment(&img, Augmentation::Rot270, 0).unwrap();
        let mut r3 = img.clone();
        for _ in 0..3 {
            r3 = augment(&r3, Augmentation::Rot90, 0).unwrap();
        }
        assert_eq!(r270, r3);
        let r180 = augment(&img, Augmentation::Rot180, 0).unwrap();
        let twice = augment(&augment(&img, Augmentation::Rot90, 0).unwrap(), Augmentation::Rot90, 0).unwrap();
        assert_eq!(r180, twice);
    }

    #[test]
    fn rot90_is_clockwise() {
        // top-left pixel moves to top-right
        let img = GrayImage::new(2, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let r = augment(&img, Augmentation::Rot90, 0).unwrap();
        assert_eq!(r.pixels(), &[4, 1, 5, 2, 6, 3]);
    }

    #[test]
    fn argument_bounds() {
        let img = GrayImage::filled(2, 2, 0);
        assert!(augment(&img, Augmentation::Brightness(65), 0).is_err());
        assert!(augment(&img, Augmentation::GaussNoise(0.0), 0).is_err());
        assert!(augment(&img, Augmentation::GaussNoise(32.5), 0).is_err());
        assert!(augment(&img, Augmentation::GaussNoise(32.0), 0).is_ok());
    }

    #[test]
    fn noise_is_seeded() {
        let img = GrayImage::filled(10, 10, 128);
        let a = augment(&img, Augmentation::GaussNoise(5.0), 3).unwrap();
        let b = augment(&img, Augmentation::GaussNoise(5.0), 3).unwrap();
        let c = augment(&img, Augmentation::GaussNoise(5.0), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    fn perm_spec() -> impl Strategy<Value = Augmentation> {
        prop_oneof![
            Just(Augmentation::FlipH),
            Just(Augmentation::FlipV),
            Just(Augmentation::Rot90),
            Just(Augmentation::Rot180),
            Just(Augmentation::Rot270),
        ]
    }

    proptest! {
        #[test]
        fn permutations_keep_pixel_multiset(seed in 0u64..1000, spec in perm_spec(), class in 0u8..4) {
            let (img, ann) = synth_image(class, seed, &SynthParams::default()).unwrap();
            let (out, out_ann) = augment_sample(&img, &ann, spec, seed).unwrap();
            let mut a = img.pixels().to_vec();
            let mut b = out.pixels().to_vec();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
            out_ann.validate().unwrap();
            prop_assert_eq!(out_ann.class, ann.class);
            prop_assert_eq!(out_ann.image_width as usize, out.width());
            prop_assert_eq!(out_ann.image_height as usize, out.height());
            prop_assert_eq!(out_ann.bbox.area(), ann.bbox.area());
            // painted defect pixels travel with the box
            if class != DefectClass::Spatter.id() {
                for y in 0..out.height() {
                    for x in 0..out.width() {
                        if out.get(x, y) <= 80 {
                            prop_assert!(out_ann.bbox.contains(x, y));
                        }
                    }
                }
            }
        }
    }
}
