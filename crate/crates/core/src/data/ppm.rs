//! Binary PPM (P6, maxval 255) codec.

use crate::error::{Error, Result};

/// 8-bit RGB image, pixels interleaved row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("image dimensions must be positive, got {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Image { offset: self.pos, reason: reason.into() }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Image { offset: start, reason: format!("{what} out of range") })
    }
}

/// Decodes a P6 file. Bytes after the raster are ignored.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut h = Header { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(h.err("missing P6 magic"));
    }
    h.pos = 2;
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(h.err(format!("zero image dimension {width}x{height}")));
    }
    if maxval != 255 {
        return Err(h.err(format!("unsupported maxval {maxval}, only 255 is accepted")));
    }
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(h.err("expected a single whitespace byte before the raster")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| h.err("image dimensions overflow"))?;
    let available = bytes.len() - h.pos;
    if available < need {
        return Err(Error::Image {
            offset: bytes.len(),
            reason: format!("truncated raster: expected {need} bytes, found {available}"),
        });
    }
    Ok(RgbImage { width, height, data: bytes[h.pos..h.pos + need].to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_white_pixel() {
        let bytes = b"P6\n1 1\n255\n\xff\xff\xff";
        assert_eq!(bytes.len(), 14);
        let img = decode_ppm(bytes).unwrap();
        assert_eq!(img, RgbImage::filled(1, 1, [255, 255, 255]));
        // A trailing newline after the raster is tolerated.
        let padded = b"P6\n1 1\n255\n\xff\xff\xff\n";
        assert_eq!(decode_ppm(padded).unwrap(), img);
        assert_eq!(encode_ppm(&img), bytes.to_vec());
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = decode_ppm(b"P6 # made by hand\n2 1 # dims\n255\n\x01\x02\x03\x04\x05\x06").unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.data, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn rejects_bad_input_with_offset() {
        match decode_ppm(b"P3\n1 1\n255\n000") {
            Err(Error::Image { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"), Err(Error::Image { .. })));
        match decode_ppm(b"P6\n2 2\n255\n\0\0\0") {
            Err(Error::Image { offset, reason }) => {
                assert_eq!(offset, 14);
                assert!(reason.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }
        assert!(decode_ppm(b"P6\n1").is_err());
    }

    proptest! {
        #[test]
        fn round_trip(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let data: Vec<u8> = (0..w * h * 3).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
            let img = RgbImage::new(w, h, data).unwrap();
            prop_assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
        }
    }
}
