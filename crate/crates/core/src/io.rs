//! Bit-exact file formats: raw tensors, PGM/PGM images, atomic writes.
//!
//! The raw tensor container is `TTNSR1` | rank | extents | payload, all
//! integers little-endian u64 and the payload little-endian f64, so files
//! round-trip bit-exactly across platforms. Images are binary PPM (P6) and
//! PGM (P5) only — no codecs, no compression, no platform variance.
//!
//! Writers go through [`write_atomic`]: temp file in the same directory,
//! then rename, so a failed command never leaves a partial file behind.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TENSOR_MAGIC: &[u8; 6] = b"TTNSR1";

/// Serialize a tensor into the raw container bytes.
pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 + 8 * t.rank() + 8 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parse one tensor from a byte stream, returning it and the bytes consumed.
pub fn tensor_from_bytes(bytes: &[u8]) -> Result<(Tensor, usize)> {
    if bytes.len() < 14 || &bytes[..6] != TENSOR_MAGIC {
        return Err(Error::Parse("raw tensor: bad magic".into()));
    }
    let mut pos = 6;
    let read_u64 = |p: &mut usize| -> Result<u64> {
        if *p + 8 > bytes.len() {
            return Err(Error::Parse("raw tensor: truncated header".into()));
        }
        let v = u64::from_le_bytes(bytes[*p..*p + 8].try_into().unwrap());
        *p += 8;
        Ok(v)
    };
    let rank = read_u64(&mut pos)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Parse(format!("raw tensor: implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(&mut pos)? as usize);
    }
    let n: usize = shape.iter().product();
    let need = pos + 8 * n;
    if bytes.len() < need {
        return Err(Error::Parse("raw tensor: truncated payload".into()));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let off = pos + 8 * i;
        data.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
    }
    let t = Tensor::new(&shape, data)?;
    Ok((t, need))
}

/// Write bytes to `path` via a temp file and rename, never leaving a
/// partial file on error.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".to_string(),
    });
    fs::write(&tmp, bytes).map_err(|e| Error::Io(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &tensor_to_bytes(t))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let (t, used) = tensor_from_bytes(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Parse(format!("{}: trailing bytes", path.display())));
    }
    Ok(t)
}

/// Binary PGM (P5, maxval 255) bytes from row-major grayscale pixels.
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::Shape(format!(
            "pgm: {width}x{height} needs {} pixels, got {}",
            width * height,
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    write_atomic(path, &pgm_bytes(width, height, pixels)?)
}

/// Binary PPM (P6, maxval 255) bytes from row-major interleaved RGB.
pub fn ppm_bytes(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != 3 * width * height {
        return Err(Error::Shape(format!(
            "ppm: {width}x{height} needs {} bytes, got {}",
            3 * width * height,
            rgb.len()
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    write_atomic(path, &ppm_bytes(width, height, rgb)?)
}

/// Parse a binary PPM (P6, maxval 255). Returns `(width, height, rgb)`.
pub fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let token = |pos: &mut usize| -> Result<String> {
        // skip whitespace and `#` comments
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Parse("ppm: truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if token(&mut pos)? != "P6" {
        return Err(Error::Parse("ppm: expected P6 magic".into()));
    }
    let width: usize = token(&mut pos)?.parse().map_err(|_| Error::Parse("ppm: bad width".into()))?;
    let height: usize =
        token(&mut pos)?.parse().map_err(|_| Error::Parse("ppm: bad height".into()))?;
    let maxval: usize =
        token(&mut pos)?.parse().map_err(|_| Error::Parse("ppm: bad maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Parse(format!("ppm: only maxval 255 supported, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Parse("ppm: zero dimension".into()));
    }
    pos += 1; // single whitespace after maxval
    let need = 3 * width * height;
    if bytes.len() < pos + need {
        return Err(Error::Parse("ppm: truncated pixel data".into()));
    }
    Ok((width, height, bytes[pos..pos + need].to_vec()))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_ppm(&bytes)
}
