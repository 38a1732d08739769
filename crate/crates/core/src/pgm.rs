//! Binary PGM (P5) reading and writing, maxval 255.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major pixels, `height * width` bytes.
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Contract(format!(
                "pixel buffer length {} does not match {width}x{height}",
                pixels.len()
            )));
        }
        Ok(GrayImage { width, height, pixels })
    }

    /// Quantize unit-range reals to 8 bits (round, clamp).
    pub fn from_unit_range(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        let pixels = values
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        GrayImage::new(width, height, pixels)
    }
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{} {}\n255\n", image.width, image.height).map_err(|e| Error::io(path, e))?;
    w.write_all(&image.pixels).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes, path)
}

fn parse_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let fmt = |offset: usize, message: &str| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.to_string(),
    };
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(fmt(0, "bad magic, expected \"P5\""));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3]; // width, height, maxval
    for field in fields.iter_mut() {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(fmt(pos, "expected a decimal header field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are UTF-8");
        *field = text
            .parse()
            .map_err(|_| fmt(start, "header field out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(fmt(pos, "unsupported maxval, expected 255"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fmt(pos, "expected single whitespace after maxval"));
    }
    pos += 1;
    let expected = width * height;
    let data = &bytes[pos..];
    if data.len() < expected {
        return Err(fmt(bytes.len(), "truncated pixel data"));
    }
    GrayImage::new(width, height, data[..expected].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = GrayImage::new(3, 2, vec![0, 17, 255, 4, 128, 9]).unwrap();
        write_pgm(&path, &img).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), img);
        let first = std::fs::read(&path).unwrap();
        write_pgm(&path, &img).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let p = Path::new("mem.pgm");
        assert!(parse_pgm(b"P2\n1 1\n255\n0", p).is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\x00\x01", p).is_err());
    }

    #[test]
    fn handles_header_comments() {
        let p = Path::new("mem.pgm");
        let img = parse_pgm(b"P5\n# comment\n2 1\n255\n\x05\x06", p).unwrap();
        assert_eq!(img.pixels, vec![5, 6]);
    }
}
