//! RGC1 checkpoint: run config plus every trainable tensor.
//!
//! ```text
//! "RGC1" | u32 version (=1) | u32 config length | config JSON (UTF-8)
//! then per tensor: u32 rank | rank x u32 dims | f32 entries (row-major)
//! ```
//! Tensor order: image projection W `[n, d_img]`, b `[n]`; text projection
//! W `[n, d_txt]`, b `[n]`; each pre-output layer W `[n, n]`, b `[n]`; head
//! w `[n]`; head bias as a rank-0 scalar. All little-endian.

use std::path::Path;

use crate::config::RunConfig;
use crate::encoder::{ClassifierHead, Model, VlEncoderParams};
use crate::error::{Error, Result};
use crate::neural::LinearLayer;

pub const MAGIC: &[u8; 4] = b"RGC1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
}

impl Checkpoint {
    /// Rounds every parameter to f32, i.e. what a save/load round trip yields.
    pub fn quantized(&self) -> Checkpoint {
        let mut model = self.model.clone();
        use crate::neural::ParamSet;
        for t in model.tensors_mut() {
            for v in t.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        Checkpoint { config: self.config.clone(), model }
    }
}

fn put_tensor(out: &mut Vec<u8>, dims: &[usize], data: &[f64]) {
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let cfg = ck.config.to_json();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let enc = &ck.model.encoder;
    for l in [&enc.img_proj, &enc.txt_proj].into_iter().chain(&enc.pre_output) {
        put_tensor(&mut out, &[l.out_dim, l.in_dim], &l.weight);
        put_tensor(&mut out, &[l.out_dim], &l.bias);
    }
    put_tensor(&mut out, &[ck.model.head.w.len()], &ck.model.head.w);
    put_tensor(&mut out, &[], &[ck.model.head.b]);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::TruncatedFile { offset: self.bytes.len() as u64, what: what.to_string() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn tensor(&mut self, expected: &[usize], name: &str) -> Result<Vec<f64>> {
        let at = self.pos as u64;
        let rank = self.u32(name)? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(self.u32(name)? as usize);
        }
        if dims != expected {
            return Err(Error::DimensionMismatch {
                offset: at,
                what: format!("{name}: expected dims {expected:?}, found {dims:?}"),
            });
        }
        let count: usize = dims.iter().product();
        let start = self.pos;
        let raw = self.take(count.checked_mul(4).ok_or_else(|| Error::TruncatedFile {
            offset: at,
            what: name.to_string(),
        })?, name)?;
        let mut out = Vec::with_capacity(count);
        for (k, chunk) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::NonFiniteValue { offset: (start + 4 * k) as u64 });
            }
            out.push(v as f64);
        }
        Ok(out)
    }

    /// Reads a linear layer whose input width is taken from the file.
    fn linear(&mut self, out_dim: usize, in_dim: Option<usize>, name: &str) -> Result<LinearLayer> {
        let in_dim = match in_dim {
            Some(d) => d,
            None => {
                // peek at the weight dims to learn the feature width
                let save = self.pos;
                let rank = self.u32(name)?;
                let d0 = if rank == 2 { self.u32(name)? } else { 0 };
                let d1 = if rank == 2 { self.u32(name)? as usize } else { 0 };
                self.pos = save;
                if rank != 2 || d0 as usize != out_dim {
                    return Err(Error::DimensionMismatch {
                        offset: save as u64,
                        what: format!("{name}: expected a [{out_dim}, d] matrix"),
                    });
                }
                d1
            }
        };
        let weight = self.tensor(&[out_dim, in_dim], &format!("{name}.weight"))?;
        let bias = self.tensor(&[out_dim], &format!("{name}.bias"))?;
        LinearLayer::new(in_dim, out_dim, weight, bias)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::BadMagic { offset: 0, expected: "RGC1" });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { offset: 4, found: version.to_string() });
    }
    let len = r.u32("config length")? as usize;
    let cfg_bytes = r.take(len, "config")?;
    let cfg_text = std::str::from_utf8(cfg_bytes).map_err(|e| Error::ParseError(e.to_string()))?;
    let config = RunConfig::from_json_str(cfg_text)?;

    let n = config.projection_dim;
    let img_proj = r.linear(n, None, "img_proj")?;
    let txt_proj = r.linear(n, None, "txt_proj")?;
    let pre_output = (0..config.pre_output_layers)
        .map(|i| r.linear(n, Some(n), &format!("pre_output.{i}")))
        .collect::<Result<Vec<_>>>()?;
    let w = r.tensor(&[n], "head.w")?;
    let b = r.tensor(&[], "head.b")?[0];
    if r.pos != bytes.len() {
        return Err(Error::DimensionMismatch {
            offset: r.pos as u64,
            what: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    let encoder = VlEncoderParams { img_proj, txt_proj, pre_output, dropout_rate: config.dropout_rate };
    Ok(Checkpoint { config, model: Model { encoder, head: ClassifierHead { w, b } } })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
