use std::fs;
use std::path::Path;

use super::DataError;

/// 8-bit grayscale image, row-major with the origin at the top-left.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self, DataError> {
        if pixels.len() != height * width {
            return Err(DataError::InvalidArgument(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.pixels.is_empty() {
            return 0.0;
        }
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

/// Binary PGM: `P5\n<width> <height>\n255\n` followed by the raw bytes.
pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, DataError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(DataError::Format("not a binary PGM (magic must be P5)".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        // whitespace and comment lines between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::Format(format!("missing {name} in PGM header")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        fields[i] = text
            .parse()
            .map_err(|_| DataError::Format(format!("{name} {text} out of range")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(DataError::Format("header must end with one whitespace byte".into())),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(DataError::Format(format!("maxval {maxval} unsupported, expected 255")));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| DataError::Format("image dimensions overflow".into()))?;
    let payload = &bytes[pos..];
    if payload.len() < n {
        return Err(DataError::Format(format!(
            "truncated payload: {} of {n} pixel bytes",
            payload.len()
        )));
    }
    GrayImage::new(height, width, payload[..n].to_vec())
}

pub fn write_pgm(image: &GrayImage, path: impl AsRef<Path>) -> Result<(), DataError> {
    fs::write(path, encode_pgm(image))?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage, DataError> {
    decode_pgm(&fs::read(path)?)
}
