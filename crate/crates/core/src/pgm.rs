//! Binary greyscale PGM (P5) with maxval 255.

use std::fs;
use std::io;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum PgmError {
    #[error("pgm io: {0}")]
    Io(#[from] io::Error),
    #[error("not a binary PGM (expected magic P5)")]
    BadMagic,
    #[error("malformed PGM header: {0}")]
    Header(String),
    #[error("unsupported maxval {0}: only 255 is accepted")]
    Maxval(u32),
    #[error("PGM pixel data has {got} bytes, expected {expected}")]
    Length { expected: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major.
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel count must equal width * height");
        GrayImage { width, height, pixels }
    }

    /// Quantize `[0, 1]` intensities: `round(255 * clamp(v, 0, 1))`.
    pub fn from_unit(width: usize, height: usize, values: impl IntoIterator<Item = f64>) -> Self {
        let pixels = values
            .into_iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::new(width, height, pixels)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PgmError> {
        if bytes.len() < 2 || &bytes[..2] != b"P5" {
            return Err(PgmError::BadMagic);
        }
        let mut pos = 2;
        let mut fields = [0u32; 3];
        for (i, field) in fields.iter_mut().enumerate() {
            // Whitespace and '#' comments may separate header fields.
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
            while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
                pos += 1;
            }
            if start == pos {
                return Err(PgmError::Header(format!("missing field {}", i + 1)));
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .expect("ascii digits")
                .parse()
                .map_err(|_| PgmError::Header(format!("field {} out of range", i + 1)))?;
        }
        if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
            return Err(PgmError::Header("no whitespace after maxval".into()));
        }
        pos += 1;
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(PgmError::Maxval(maxval));
        }
        if width == 0 || height == 0 {
            return Err(PgmError::Header(format!("empty image {width}x{height}")));
        }
        let expected = width as usize * height as usize;
        let data = &bytes[pos..];
        if data.len() != expected {
            return Err(PgmError::Length { expected, got: data.len() });
        }
        Ok(GrayImage::new(width as usize, height as usize, data.to_vec()))
    }

    pub fn write(&self, path: &Path) -> Result<(), PgmError> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, PgmError> {
        Self::decode(&fs::read(path)?)
    }

    /// Pixels mapped to `[0, 1]` by `/ 255`.
    pub fn to_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 255.0).collect()
    }
}

/// Lay equally sized images out on a grid with `gap` pixels of white
/// between cells.
pub fn tile(images: &[GrayImage], columns: usize, gap: usize) -> GrayImage {
    assert!(!images.is_empty() && columns > 0);
    let (w, h) = (images[0].width, images[0].height);
    let cols = columns.min(images.len());
    let rows = images.len().div_ceil(cols);
    let tw = cols * w + (cols - 1) * gap;
    let th = rows * h + (rows - 1) * gap;
    let mut pixels = vec![255u8; tw * th];
    for (k, img) in images.iter().enumerate() {
        assert_eq!((img.width, img.height), (w, h), "tiles must share a size");
        let (r, c) = (k / cols, k % cols);
        let (y0, x0) = (r * (h + gap), c * (w + gap));
        for y in 0..h {
            let dst = (y0 + y) * tw + x0;
            pixels[dst..dst + w].copy_from_slice(&img.pixels[y * w..(y + 1) * w]);
        }
    }
    GrayImage::new(tw, th, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_other_maxvals_and_formats() {
        assert!(matches!(GrayImage::decode(b"P5\n2 1\n15\n\x01\x02"), Err(PgmError::Maxval(15))));
        assert!(matches!(GrayImage::decode(b"P2\n2 1\n255\n1 2"), Err(PgmError::BadMagic)));
        assert!(matches!(
            GrayImage::decode(b"P5\n2 2\n255\n\x01\x02"),
            Err(PgmError::Length { expected: 4, got: 2 })
        ));
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = GrayImage::decode(b"P5 # made by hand\n3 1\n255\n\x00\x80\xff").unwrap();
        assert_eq!(img.pixels, vec![0, 128, 255]);
        assert_eq!(img.to_unit()[2], 1.0);
    }

    #[test]
    fn tile_places_cells() {
        let a = GrayImage::new(2, 1, vec![0, 0]);
        let b = GrayImage::new(2, 1, vec![9, 9]);
        let t = tile(&[a, b.clone(), b], 2, 1);
        assert_eq!((t.width, t.height), (5, 3));
        assert_eq!(t.pixels, vec![0, 0, 255, 9, 9, 255, 255, 255, 255, 255, 9, 9, 255, 255, 255]);
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
            let pixels: Vec<u8> = (0..w * h).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
            let img = GrayImage::new(w, h, pixels);
            prop_assert_eq!(GrayImage::decode(&img.encode()).unwrap(), img);
        }
    }
}
