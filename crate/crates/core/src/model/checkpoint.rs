//! Binary checkpoints: configuration plus every named tensor as `f32`.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "GCN1"  u32 version
//! u32 config length, config as key=value text
//! u32 tensor count
//! per tensor: u32 name length, name, u32 rank, rank × u32 extents, f32 data
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::tensor::{Scalar, Tensor};

use super::config::ModelConfig;
use super::network::GcNet;
use super::params::{BnParams, LayerParams, ModelParams};

const MAGIC: &[u8; 4] = b"GCN1";
const VERSION: u32 = 1;

fn named<T: Scalar>(params: &ModelParams<T>) -> Vec<(String, &Tensor<T>)> {
    let mut out = Vec::new();
    for (&id, l) in &params.layers {
        out.push((format!("L{id:02}.weight"), &l.weight));
        out.push((format!("L{id:02}.bias"), &l.bias));
        if let Some(bn) = &l.bn {
            out.push((format!("L{id:02}.gamma"), &bn.gamma));
            out.push((format!("L{id:02}.beta"), &bn.beta));
            out.push((format!("L{id:02}.running_mean"), &bn.running_mean));
            out.push((format!("L{id:02}.running_var"), &bn.running_var));
        }
    }
    out
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Serializes a model.
pub fn to_bytes<T: Scalar>(net: &GcNet<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION as usize);
    let cfg = net.config.to_kv().to_string();
    put_u32(&mut buf, cfg.len());
    buf.extend_from_slice(cfg.as_bytes());
    let tensors = named(&net.params);
    put_u32(&mut buf, tensors.len());
    for (name, t) in tensors {
        put_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.rank());
        for &e in t.shape() {
            put_u32(&mut buf, e);
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            format: "checkpoint",
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} more bytes, {} left", self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let start = self.pos;
        let b = self.bytes(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format {
            format: "checkpoint",
            offset: start,
            msg: "invalid UTF-8".into(),
        })
    }
}

/// Parses a model, checking every tensor against the stored configuration.
pub fn from_bytes<T: Scalar>(buf: &[u8]) -> Result<GcNet<T>> {
    let mut r = Reader { buf, pos: 0 };
    if r.bytes(4)? != MAGIC {
        return Err(Error::Format {
            format: "checkpoint",
            offset: 0,
            msg: "bad magic".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format {
            format: "checkpoint",
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let cfg_at = r.pos;
    let text = r.string()?;
    let mut kv = KeyValues::parse(&text)?;
    let config = ModelConfig::from_kv(&mut kv).map_err(|e| Error::Format {
        format: "checkpoint",
        offset: cfg_at,
        msg: e.to_string(),
    })?;
    kv.finish()?;

    let mut params = ModelParams::<T>::zeros(&config);
    let expected: Vec<(String, Vec<usize>)> = named(&params)
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = r.u32()?;
    if count != expected.len() {
        return Err(r.err(format!("expected {} tensors, found {count}", expected.len())));
    }
    let mut loaded = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let at = r.pos;
        let got = r.string()?;
        if &got != name {
            return Err(Error::Format {
                format: "checkpoint",
                offset: at,
                msg: format!("expected tensor {name}, found {got}"),
            });
        }
        let rank = r.u32()?;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()?);
        }
        if &dims != shape {
            return Err(r.err(format!("{name}: expected shape {shape:?}, found {dims:?}")));
        }
        let n: usize = dims.iter().product();
        let raw = r.bytes(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        loaded.push(Tensor::new(&dims, data)?);
    }
    if r.pos != buf.len() {
        return Err(r.err(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let mut it = loaded.into_iter();
    for l in params.layers.values_mut() {
        let LayerParams { weight, bias, bn } = l;
        *weight = it.next().unwrap();
        *bias = it.next().unwrap();
        if let Some(BnParams {
            gamma,
            beta,
            running_mean,
            running_var,
        }) = bn
        {
            *gamma = it.next().unwrap();
            *beta = it.next().unwrap();
            *running_mean = it.next().unwrap();
            *running_var = it.next().unwrap();
        }
    }
    GcNet::from_params(config, params)
}

/// Writes atomically: a sibling temporary file is renamed into place.
pub fn save<T: Scalar>(net: &GcNet<T>, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &to_bytes(net))
}

pub fn load<T: Scalar>(path: &Path) -> Result<GcNet<T>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}
