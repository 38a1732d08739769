//! Flat binary weight format.
//!
//! Layout: magic `"OMAD"`, format version `u32` LE, parameter count `u32` LE,
//! then per parameter: name length `u16` LE + UTF-8 name, rank `u8`, dims as
//! `u32` LE, elements as IEEE-754 `f32` LE. Elements are stored in 32-bit
//! precision regardless of the in-memory scalar type.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"OMAD";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_params<F: Scalar, W: Write>(w: &mut W, params: &ParamSet<F>, path: &Path) -> Result<()> {
    let io_err = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(params.len() as u32).to_le_bytes()).map_err(io_err)?;
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes()).map_err(io_err)?;
        w.write_all(name_bytes).map_err(io_err)?;
        w.write_all(&[tensor.rank() as u8]).map_err(io_err)?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
        }
        for &v in tensor.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes()).map_err(io_err)?;
        }
    }
    Ok(())
}

/// Reader wrapper that tracks the byte offset for format-error reporting.
struct Counted<'a, R: Read> {
    inner: &'a mut R,
    offset: u64,
}

impl<'a, R: Read> Counted<'a, R> {
    fn exact(&mut self, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::Format {
                path: path.to_path_buf(),
                offset: self.offset,
                message: format!("truncated while reading {what}"),
            }),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

pub fn read_params<F: Scalar, R: Read>(r: &mut R, path: &Path) -> Result<ParamSet<F>> {
    read_params_at(r, path, 0)
}

/// As [`read_params`], with reported offsets shifted by `base_offset` (for
/// binary sections embedded after a text header).
pub fn read_params_at<F: Scalar, R: Read>(r: &mut R, path: &Path, base_offset: u64) -> Result<ParamSet<F>> {
    let mut c = Counted { inner: r, offset: base_offset };
    let fmt = |offset, message: String| Error::Format {
        path: path.to_path_buf(),
        offset,
        message,
    };

    let mut magic = [0u8; 4];
    c.exact(&mut magic, path, "magic bytes")?;
    if &magic != MAGIC {
        return Err(fmt(base_offset, format!("bad magic {magic:?}, expected \"OMAD\"")));
    }
    let mut u32buf = [0u8; 4];
    c.exact(&mut u32buf, path, "format version")?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(fmt(base_offset + 4, format!("unsupported format version {version}")));
    }
    c.exact(&mut u32buf, path, "parameter count")?;
    let count = u32::from_le_bytes(u32buf);

    let mut params = ParamSet::new();
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        c.exact(&mut u16buf, path, "name length")?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        let name_offset = c.offset;
        c.exact(&mut name_bytes, path, "parameter name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| fmt(name_offset, "parameter name is not UTF-8".into()))?;
        let mut rank_buf = [0u8; 1];
        c.exact(&mut rank_buf, path, "rank")?;
        let mut shape = Vec::with_capacity(rank_buf[0] as usize);
        for _ in 0..rank_buf[0] {
            c.exact(&mut u32buf, path, "dimension")?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            c.exact(&mut u32buf, path, "element")?;
            data.push(F::of_f64(f32::from_le_bytes(u32buf) as f64));
        }
        let shape_offset = c.offset;
        let tensor = Tensor::new(shape, data)
            .map_err(|e| fmt(shape_offset, e.to_string()))?;
        params
            .insert(name, tensor)
            .map_err(|e| fmt(shape_offset, e.to_string()))?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;
    use std::path::PathBuf;

    fn sample() -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![2, 2], vec![1.0, -2.5, 0.0, 3.25]).unwrap())
            .unwrap();
        p.insert("b", Tensor::from_vec(vec![0.5, -0.5])).unwrap();
        p
    }

    #[test]
    fn round_trip_is_bitwise_identical() {
        let params = sample();
        let path = PathBuf::from("mem");
        let mut buf = Vec::new();
        write_params(&mut buf, &params, &path).unwrap();
        let back: ParamSet<f32> = read_params(&mut Cursor::new(&buf), &path).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn bad_magic_is_reported() {
        let path = PathBuf::from("mem");
        let mut buf = Vec::new();
        write_params(&mut buf, &sample(), &path).unwrap();
        buf[0] = b'X';
        let err = read_params::<f32, _>(&mut Cursor::new(&buf), &path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn truncation_names_the_offset() {
        let path = PathBuf::from("mem");
        let mut buf = Vec::new();
        write_params(&mut buf, &sample(), &path).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_params::<f32, _>(&mut Cursor::new(&buf), &path).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert!(offset > 0),
            other => panic!("expected format error, got {other}"),
        }
    }
}
