//! Portable float maps.
//!
//! Header: `PF` (three channels) or `Pf` (one), then width and height, then a
//! scale whose sign gives the byte order (negative means little-endian),
//! each followed by whitespace. Rows are stored bottom to top.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Byte order of the payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

/// A decoded map: `[H, W, C]` floats in top-down order, plus `|scale|`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pfm {
    pub data: Tensor<f32>,
    pub scale: f32,
    pub endian: Endian,
}

fn malformed(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        format: "PFM",
        offset,
        msg: msg.into(),
    }
}

struct Header<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn token(&mut self, what: &str) -> Result<(usize, &str)> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.buf.len() && !self.buf[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(malformed(start, format!("missing {what}")));
        }
        let s = std::str::from_utf8(&self.buf[start..self.pos]).map_err(|_| malformed(start, format!("non-ASCII {what}")))?;
        Ok((start, s))
    }
}

/// Decodes a PFM byte buffer.
pub fn decode(buf: &[u8]) -> Result<Pfm> {
    let mut h = Header { buf, pos: 0 };
    let (at, magic) = h.token("magic")?;
    let channels = match magic {
        "PF" => 3,
        "Pf" => 1,
        m => return Err(malformed(at, format!("bad magic {m:?}"))),
    };
    let mut dim = |what| -> Result<usize> {
        let (at, s) = h.token(what)?;
        match s.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(malformed(at, format!("bad {what} {s:?}"))),
        }
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let (at, s) = h.token("scale")?;
    let scale: f32 = s.parse().map_err(|_| malformed(at, format!("bad scale {s:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(malformed(at, format!("scale must be finite and nonzero, got {s}")));
    }
    // exactly one whitespace byte separates the header from the payload
    if h.pos >= buf.len() || !buf[h.pos].is_ascii_whitespace() {
        return Err(malformed(h.pos, "missing whitespace after scale"));
    }
    let start = h.pos + 1;
    let endian = if scale < 0.0 { Endian::Little } else { Endian::Big };
    let n = width * height * channels;
    let need = n * 4;
    let have = buf.len() - start;
    if have < need {
        return Err(malformed(buf.len(), format!("truncated payload: need {need} bytes, have {have}")));
    }
    if have > need {
        return Err(malformed(start + need, format!("{} trailing bytes", have - need)));
    }
    let row = width * channels;
    let mut data = vec![0f32; n];
    for (i, chunk) in buf[start..].chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().unwrap();
        let v = match endian {
            Endian::Little => f32::from_le_bytes(b),
            Endian::Big => f32::from_be_bytes(b),
        };
        let (r, c) = (i / row, i % row);
        data[(height - 1 - r) * row + c] = v;
    }
    Ok(Pfm {
        data: Tensor::new(&[height, width, channels], data)?,
        scale: scale.abs(),
        endian,
    })
}

/// Encodes `[H, W]`, `[H, W, 1]` or `[H, W, 3]` floats.
pub fn encode(map: &Tensor<f32>, endian: Endian) -> Result<Vec<u8>> {
    let s = map.shape();
    let channels = match s.len() {
        2 => 1,
        3 if s[2] == 1 || s[2] == 3 => s[2],
        _ => {
            return Err(Error::shape("write_pfm", "map", "[H, W], [H, W, 1] or [H, W, 3]", format!("{s:?}")));
        }
    };
    let (height, width) = (s[0], s[1]);
    if height == 0 || width == 0 {
        return Err(Error::invalid("write_pfm", "empty map"));
    }
    let magic = if channels == 3 { "PF" } else { "Pf" };
    let scale = if endian == Endian::Little { "-1.0" } else { "1.0" };
    let mut out = format!("{magic}\n{width} {height}\n{scale}\n").into_bytes();
    let row = width * channels;
    out.reserve(map.len() * 4);
    for r in (0..height).rev() {
        for &v in &map.data()[r * row..(r + 1) * row] {
            out.extend_from_slice(&match endian {
                Endian::Little => v.to_le_bytes(),
                Endian::Big => v.to_be_bytes(),
            });
        }
    }
    Ok(out)
}

pub fn read_pfm(path: &Path) -> Result<Pfm> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

pub fn write_pfm(map: &Tensor<f32>, path: &Path, endian: Endian) -> Result<()> {
    super::write_atomic(path, &encode(map, endian)?)
}

/// Reads a single-channel map as `[H, W]` doubles.
pub fn read_map(path: &Path) -> Result<Tensor<f64>> {
    let pfm = read_pfm(path)?;
    let s = pfm.data.shape().to_vec();
    if s[2] != 1 {
        return Err(Error::shape("read_map", "channels", 1, s[2]));
    }
    pfm.data.cast::<f64>().reshape(&s[..2])
}

/// Writes an `[H, W]` map of doubles, rounded to single precision.
pub fn write_map(map: &Tensor<f64>, path: &Path) -> Result<()> {
    write_pfm(&map.cast::<f32>(), path, Endian::Little)
}
