//! Model checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "MMLQCKPT" | version u32
//! config_len u32 | config bytes (UTF-8 key=value lines)
//! tensor_count u32 | tensor*          parameters in canonical order
//! [ "ADAMSTAT" | t u64 | beta1 f64 | beta2 f64 | eps f64 | tensor* (m) | tensor* (v) ]
//! crc32 u32 over every preceding byte
//! tensor = ndim u32 | dims u32* | f32 data
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Mmlq, ModelConfig};
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"MMLQCKPT";
pub const VERSION: u32 = 1;
const ADAM_TAG: [u8; 8] = *b"ADAMSTAT";

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn to_bytes(model: &Mmlq<f32>, adam: Option<&Adam<f32>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = model.config().to_kv_string();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let params = model.named_parameters();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, p) in &params {
        put_tensor(&mut out, p);
    }
    if let Some(a) = adam {
        out.extend_from_slice(&ADAM_TAG);
        out.extend_from_slice(&a.t.to_le_bytes());
        for x in [a.beta1, a.beta2, a.eps] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for t in a.m.iter().chain(&a.v) {
            put_tensor(&mut out, t);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::Truncated {
            expected: (self.pos + n) as u64,
            actual: self.buf.len() as u64,
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let ndim = self.u32()? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(Error::Format(format!("tensor rank {ndim}")));
        }
        let shape = (0..ndim).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let raw = self.bytes(n.checked_mul(4).ok_or_else(|| Error::Format("tensor size overflows".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<(Mmlq<f32>, Option<Adam<f32>>)> {
    if buf.len() < 8 {
        return Err(Error::Truncated { expected: 8, actual: buf.len() as u64 });
    }
    if buf[..8] != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found: buf[..8].try_into().expect("8 bytes") });
    }
    let mut r = Reader { buf, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { found: version, supported: VERSION });
    }
    if buf.len() < 16 {
        return Err(Error::Truncated { expected: 16, actual: buf.len() as u64 });
    }
    let body_len = buf.len() - 4;
    let stored = u32::from_le_bytes(buf[body_len..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&buf[..body_len]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let r = &mut Reader { buf: &buf[..body_len], pos: r.pos };
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.bytes(cfg_len)?).map_err(|_| Error::Format("config is not UTF-8".into()))?;
    let config = ModelConfig::from_kv_str(cfg_text)?;
    let count = r.u32()? as usize;
    let params = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    let model = Mmlq::from_tensors(config, params)?;
    let adam = if r.pos == body_len {
        None
    } else {
        if r.bytes(8)? != ADAM_TAG {
            return Err(Error::Format("unknown section after parameters".into()));
        }
        let t = r.u64()?;
        let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
        let m = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let v = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        for (i, (_, p)) in model.named_parameters().iter().enumerate() {
            if m[i].shape() != p.shape() || v[i].shape() != p.shape() {
                return Err(Error::Format(format!("optimizer moment {i} does not match its parameter")));
            }
        }
        Some(Adam { beta1, beta2, eps, t, m, v })
    };
    if r.pos != body_len {
        return Err(Error::TrailingData { expected: r.pos as u64 + 4, actual: buf.len() as u64 });
    }
    Ok((model, adam))
}

pub fn save(path: impl AsRef<Path>, model: &Mmlq<f32>, adam: Option<&Adam<f32>>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model, adam)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Mmlq<f32>, Option<Adam<f32>>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
