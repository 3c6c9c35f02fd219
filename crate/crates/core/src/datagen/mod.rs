//! Synthetic defect imagery: generation, preprocessing, augmentation,
//! annotation files and dataset splitting.
//!
//! Images are 8-bit grayscale, canonically 80 rows by 120 columns.

mod annotation;
mod augment;
mod image;
mod preprocess;
mod split;
mod synth;

use std::fmt;

pub use annotation::{emit_annotation, parse_annotation};
pub use augment::{augment, augment_sample, Augmentation};
pub use image::{decode_pgm, encode_pgm, read_pgm, write_pgm, GrayImage};
pub use preprocess::{box_blur3, contrast_stretch, preprocess, resize_bilinear, Plane};
pub use split::{split_counts, split_dataset, SplitRatio};
pub use synth::{generate_set, synth_image, SynthParams};

pub const CANONICAL_HEIGHT: usize = 80;
pub const CANONICAL_WIDTH: usize = 120;
pub const CLASS_COUNT: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("annotation parse error in <{element}>: {reason}")]
    Parse { element: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The four surface defect classes, numbered as in the evaluation tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum DefectClass {
    Crack = 0,
    Pinhole = 1,
    Hole = 2,
    Spatter = 3,
}

impl DefectClass {
    pub const ALL: [DefectClass; 4] = [
        DefectClass::Crack,
        DefectClass::Pinhole,
        DefectClass::Hole,
        DefectClass::Spatter,
    ];

    pub fn from_id(id: u8) -> Result<Self, DataError> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| DataError::InvalidArgument(format!("unknown class id {id}")))
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Lower-case name used in annotation files.
    pub fn name(self) -> &'static str {
        match self {
            DefectClass::Crack => "crack",
            DefectClass::Pinhole => "pinhole",
            DefectClass::Hole => "hole",
            DefectClass::Spatter => "spatter",
        }
    }

    /// Capitalised label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            DefectClass::Crack => "Crack",
            DefectClass::Pinhole => "Pinhole",
            DefectClass::Hole => "Hole",
            DefectClass::Spatter => "Spatter",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl fmt::Display for DefectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Axis-aligned box in pixel coordinates; `xmax`/`ymax` are exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub xmin: u32,
    pub ymin: u32,
    pub xmax: u32,
    pub ymax: u32,
}

impl BBox {
    pub fn width(&self) -> u32 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> u32 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> u32 {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (x as u32) >= self.xmin && (x as u32) < self.xmax && (y as u32) >= self.ymin && (y as u32) < self.ymax
    }
}

/// One labelled bounding box on one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Annotation {
    pub class: DefectClass,
    pub bbox: BBox,
    pub image_width: u32,
    pub image_height: u32,
}

impl Annotation {
    /// Checks `0 <= xmin < xmax <= width` and the same for y.
    pub fn validate(&self) -> Result<(), DataError> {
        let b = &self.bbox;
        if b.xmin >= b.xmax || b.ymin >= b.ymax {
            return Err(DataError::InvalidArgument(format!("inverted bbox {b:?}")));
        }
        if b.xmax > self.image_width || b.ymax > self.image_height {
            return Err(DataError::InvalidArgument(format!(
                "bbox {b:?} outside {}x{} image",
                self.image_width, self.image_height
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub annotation: Annotation,
}

/// A labelled image collection with per-class tallies.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
    pub seed: u64,
    pub class_counts: [usize; CLASS_COUNT],
}

impl SampleSet {
    pub fn new(samples: Vec<Sample>, seed: u64) -> Self {
        let mut class_counts = [0; CLASS_COUNT];
        for s in &samples {
            class_counts[s.annotation.class.index()] += 1;
        }
        Self {
            samples,
            seed,
            class_counts,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
