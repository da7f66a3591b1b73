//! 8-bit binary PGM (P5) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, Dims, ProbabilityMap, ClassId};

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub dims: Dims,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(dims: Dims, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != dims.area() {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for {}x{}",
                pixels.len(),
                dims.height,
                dims.width
            )));
        }
        Ok(GrayImage { dims, pixels })
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        GrayImage {
            dims: mask.dims(),
            pixels: mask.as_slice().iter().map(|&v| if v != 0 { 255 } else { 0 }).collect(),
        }
    }

    /// One class of a probability map quantized to `round(255 p)`.
    pub fn from_probabilities(p: &ProbabilityMap, class: ClassId) -> Self {
        GrayImage {
            dims: p.dims(),
            pixels: p
                .channel(class)
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect(),
        }
    }

    pub fn to_mask(&self) -> BinaryMask {
        BinaryMask::from_bytes(self.dims, &self.pixels).expect("dims checked at construction")
    }
}

pub fn encode(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.dims.width, img.dims.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Parse a P5 file with maxval 255. Header comments (`#`) are allowed.
pub fn decode(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let mut pos = 0usize;
    let err = |pos: usize, msg: &str| Error::parse(path, format!("byte {pos}"), msg);

    let token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(err(start, "unexpected end of header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    let magic = token(&mut pos)?;
    if magic != "P5" {
        return Err(err(0, &format!("expected magic P5, found {magic:?}")));
    }
    let number = |pos: &mut usize, what: &str| -> Result<usize> {
        let at = *pos;
        let t = token(pos)?;
        t.parse::<usize>()
            .map_err(|_| err(at, &format!("invalid {what} {t:?}")))
    };
    let width = number(&mut pos, "width")?;
    let height = number(&mut pos, "height")?;
    let maxval = number(&mut pos, "maxval")?;
    if maxval != 255 {
        return Err(err(pos, &format!("only maxval 255 is supported, found {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err(pos, "missing whitespace after header"));
    }
    pos += 1;
    let need = width * height;
    let raster = &bytes[pos..];
    if raster.len() != need {
        return Err(err(
            pos,
            &format!("expected {need} raster bytes, found {}", raster.len()),
        ));
    }
    GrayImage::new(Dims::new(height, width), raster.to_vec())
}

pub fn write(path: &Path, img: &GrayImage) -> Result<()> {
    fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let img = GrayImage::new(Dims::new(2, 3), vec![0, 1, 2, 253, 254, 255]).unwrap();
        let bytes = encode(&img);
        assert_eq!(decode(&bytes, Path::new("x.pgm")).unwrap(), img);
    }

    #[test]
    fn comments_in_header() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 9]);
        let img = decode(&bytes, Path::new("c.pgm")).unwrap();
        assert_eq!(img.pixels, vec![7, 9]);
        assert_eq!(img.dims, Dims::new(1, 2));
    }

    #[test]
    fn malformed_reports_position() {
        let e = decode(b"P2\n1 1\n255\n\x00", Path::new("bad.pgm")).unwrap_err();
        assert!(e.to_string().contains("byte 0"), "{e}");
        let e = decode(b"P5\n2 2\n255\n\x00\x00", Path::new("short.pgm")).unwrap_err();
        assert!(e.to_string().contains("byte 11"), "{e}");
        assert!(decode(b"P5\n2 2\n65535\n", Path::new("deep.pgm")).is_err());
    }

    #[test]
    fn mask_conversion() {
        let mut m = BinaryMask::new(Dims::new(2, 2));
        m.set(1, 0, true);
        let img = GrayImage::from_mask(&m);
        assert_eq!(img.pixels, vec![0, 255, 0, 0]);
        assert_eq!(img.to_mask(), m);
    }
}
