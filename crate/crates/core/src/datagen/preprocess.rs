//! Noise reduction, contrast enhancement and resizing ahead of the classifier.

use super::{DataError, GrayImage};
use crate::tensor::{Real, Tensor};

/// Single-channel floating point image used between preprocessing stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn from_image(image: &GrayImage) -> Self {
        Self {
            height: image.height(),
            width: image.width(),
            data: image.pixels().iter().map(|&p| p as f64).collect(),
        }
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// 3×3 mean filter; at the border only in-bounds neighbours are averaged.
pub fn box_blur3(plane: &Plane) -> Plane {
    let (h, w) = (plane.height, plane.width);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let mut sum = 0.0;
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    sum += plane.at(xx, yy);
                }
            }
            out[y * w + x] = sum / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
        }
    }
    Plane { height: h, width: w, data: out }
}

/// Linear min-max stretch onto `[0, 255]`. A flat plane is returned unchanged.
pub fn contrast_stretch(plane: &Plane) -> Plane {
    let (lo, hi) = plane.min_max();
    if !(hi > lo) {
        return plane.clone();
    }
    let range = hi - lo;
    Plane {
        height: plane.height,
        width: plane.width,
        data: plane.data.iter().map(|&v| (v - lo) * 255.0 / range).collect(),
    }
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(plane: &Plane, target_h: usize, target_w: usize) -> Plane {
    let (h, w) = (plane.height, plane.width);
    let sy = h as f64 / target_h as f64;
    let sx = w as f64 / target_w as f64;
    let mut out = Vec::with_capacity(target_h * target_w);
    for ty in 0..target_h {
        let fy = ((ty as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for tx in 0..target_w {
            let fx = ((tx as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let top = plane.at(x0, y0) * (1.0 - wx) + plane.at(x1, y0) * wx;
            let bottom = plane.at(x0, y1) * (1.0 - wx) + plane.at(x1, y1) * wx;
            out.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    Plane {
        height: target_h,
        width: target_w,
        data: out,
    }
}

/// Blur, stretch, resize, then scale to `[0, 1]`. Output shape is `(1, target_h, target_w)`.
pub fn preprocess<T: Real>(image: &GrayImage, target_h: usize, target_w: usize) -> Result<Tensor<T>, DataError> {
    if image.is_empty() {
        return Err(DataError::InvalidArgument("zero-area image".into()));
    }
    if target_h < 8 || target_w < 8 {
        return Err(DataError::InvalidArgument(format!(
            "target {target_h}x{target_w} below the 8x8 minimum"
        )));
    }
    let plane = resize_bilinear(
        &contrast_stretch(&box_blur3(&Plane::from_image(image))),
        target_h,
        target_w,
    );
    let data = plane
        .data
        .iter()
        .map(|&v| T::from_f64((v / 255.0).clamp(0.0, 1.0)))
        .collect();
    Ok(Tensor::from_parts(vec![1, target_h, target_w], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_image_is_flat() {
        let t = preprocess::<f64>(&GrayImage::filled(80, 120, 128), 80, 120).unwrap();
        assert_eq!(t.shape(), &[1, 80, 120]);
        assert!(t.data().iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-15));
    }

    #[test]
    fn stretch_hits_full_range() {
        let p = Plane {
            height: 1,
            width: 3,
            data: vec![10.0, 110.0, 210.0],
        };
        let s = contrast_stretch(&p);
        assert_eq!(s.min_max(), (0.0, 255.0));
        assert!((s.data[1] - 127.5).abs() < 1e-12);
    }

    #[test]
    fn downscale_to_canonical() {
        let img = GrayImage::new(160, 240, (0..160 * 240).map(|i| (i % 256) as u8).collect()).unwrap();
        let t = preprocess::<f32>(&img, 80, 120).unwrap();
        assert_eq!(t.shape(), &[1, 80, 120]);
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn same_size_resize_is_identity() {
        let p = Plane {
            height: 3,
            width: 4,
            data: (0..12).map(|v| v as f64).collect(),
        };
        assert_eq!(resize_bilinear(&p, 3, 4), p);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let empty = GrayImage::new(0, 0, vec![]).unwrap();
        assert!(preprocess::<f32>(&empty, 80, 120).is_err());
        assert!(preprocess::<f32>(&GrayImage::filled(10, 10, 1), 7, 120).is_err());
    }

    proptest! {
        #[test]
        fn output_in_unit_range(h in 1usize..40, w in 1usize..40, th in 8usize..30, tw in 8usize..30, seed in any::<u64>()) {
            let mut s = seed;
            let px = (0..h * w).map(|_| { s = crate::rng::mix64(s); (s >> 56) as u8 }).collect();
            let img = GrayImage::new(h, w, px).unwrap();
            let t = preprocess::<f64>(&img, th, tw).unwrap();
            prop_assert_eq!(t.shape(), &[1, th, tw]);
            prop_assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
