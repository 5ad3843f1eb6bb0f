//! Versioned binary checkpoints of network parameters.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "MGCK" | version=1 | element bytes (4 or 8) | flags (bit 0: attention)
//! encoder[3] | mlp_hidden[2] | embed_dim | decoder[2]
//! tensor count
//! per tensor: name length | name (UTF-8) | rank | dims[rank] | values (element bytes each)
//! ```
//!
//! Optimizer moments are not stored; a loaded network restarts Adam at step 0.

use std::io::{Read, Write};

use super::{NetConfig, NetParams, Param, Real};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MGCK";
const VERSION: u32 = 1;

fn put(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(Error::Truncated {
                expected: self.pos.saturating_add(n),
                found: self.buf.len(),
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl<T: Real> NetParams<T> {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put(&mut out, VERSION);
        put(&mut out, T::BYTES as u32);
        put(&mut out, self.config.attention as u32);
        let c = &self.config;
        for v in c
            .encoder
            .iter()
            .chain(&c.mlp_hidden)
            .chain([&c.embed_dim])
            .chain(&c.decoder)
        {
            put(&mut out, *v as u32);
        }
        put(&mut out, self.params.len() as u32);
        for p in &self.params {
            put(&mut out, p.name.len() as u32);
            out.extend_from_slice(p.name.as_bytes());
            put(&mut out, p.shape.len() as u32);
            for &d in &p.shape {
                put(&mut out, d as u32);
            }
            for &v in &p.value {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn save_checkpoint<W: Write>(&self, mut writer: W) -> Result<()> {
        writer.write_all(&self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load_checkpoint<R: Read>(mut reader: R) -> Result<Self> {
        let mut buf = Vec::new();
        reader.read_to_end(&mut buf)?;
        Self::from_checkpoint_bytes(&buf)
    }

    pub fn from_checkpoint_bytes(buf: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let elem = cur.u32()? as usize;
        if elem != 4 && elem != 8 {
            return Err(Error::Checkpoint(format!("unsupported element size {elem}")));
        }
        let flags = cur.u32()?;
        let mut dims = [0usize; 8];
        for d in &mut dims {
            *d = cur.u32()? as usize;
        }
        let config = NetConfig {
            encoder: [dims[0], dims[1], dims[2]],
            mlp_hidden: [dims[3], dims[4]],
            embed_dim: dims[5],
            decoder: [dims[6], dims[7]],
            attention: flags & 1 == 1,
        };
        let layout = config.layout();
        let count = cur.u32()? as usize;
        if count != layout.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {count}",
                layout.len()
            )));
        }
        let mut params = Vec::with_capacity(count);
        for (name, shape, _) in layout {
            let len = cur.u32()? as usize;
            let stored = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            if stored != name {
                return Err(Error::Checkpoint(format!("expected tensor {name}, found {stored}")));
            }
            let rank = cur.u32()? as usize;
            let stored_shape = (0..rank)
                .map(|_| cur.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if stored_shape != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {stored_shape:?}, expected {shape:?}"
                )));
            }
            let n: usize = shape.iter().product();
            let raw = cur.take(n * elem)?;
            let value: Vec<T> = raw
                .chunks_exact(elem)
                .map(|b| {
                    let v = if elem == 4 {
                        f32::read_le(b) as f64
                    } else {
                        f64::read_le(b)
                    };
                    T::from_f64(v).unwrap()
                })
                .collect();
            if !value.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("checkpoint tensor {name}")));
            }
            params.push(Param::new(name, shape, value));
        }
        Ok(NetParams {
            config,
            params,
            step: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetConfig {
        NetConfig {
            encoder: [2, 3, 4],
            mlp_hidden: [4, 4],
            embed_dim: 2,
            decoder: [3, 2],
            attention: false,
        }
    }

    #[test]
    fn roundtrip_preserves_values() {
        let net = NetParams::<f32>::init(small(), 4);
        let bytes = net.to_checkpoint_bytes();
        assert_eq!(&bytes[..4], b"MGCK");
        let back = NetParams::<f32>::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, net);
        let wide = NetParams::<f64>::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(wide.params()[0].value[0], net.params()[0].value[0] as f64);
    }

    #[test]
    fn rejects_corruption() {
        let net = NetParams::<f64>::init(small(), 4);
        let bytes = net.to_checkpoint_bytes();
        assert!(NetParams::<f64>::from_checkpoint_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            NetParams::<f64>::from_checkpoint_bytes(&bad),
            Err(Error::Checkpoint(_))
        ));
    }
}
