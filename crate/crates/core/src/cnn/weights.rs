//! `AMQC` weights files.
//!
//! Layout (all integers little-endian): magic `AMQC`, `u32` version, `u32`
//! count of parameterised layers, then per layer a `u8` kind tag (1 conv,
//! 2 dense), `u32` rank, `u32` dims of the weight tensor, the weights as
//! `f32`, and the bias (`dims[0]` values) as `f32`.

use std::path::Path;

use super::network::{LayerParams, LayerSpec, Network};
use super::{Architecture, CnnError};
use crate::tensor::{Real, Tensor};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"AMQC";
pub const WEIGHTS_VERSION: u32 = 1;

const TAG_CONV: u8 = 1;
const TAG_DENSE: u8 = 2;

pub fn encode_weights<T: Real>(net: &Network<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    let count = net.params().iter().flatten().count() as u32;
    out.extend_from_slice(&count.to_le_bytes());
    for (spec, p) in net.layers().iter().zip(net.params()) {
        let Some(p) = p else { continue };
        out.push(if matches!(spec, LayerSpec::Conv { .. }) { TAG_CONV } else { TAG_DENSE });
        out.extend_from_slice(&(p.weights.shape().len() as u32).to_le_bytes());
        for &d in p.weights.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.weights.data().iter().chain(p.bias.data()) {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CnnError> {
        let have = self.bytes.len() - self.pos;
        if have < n {
            return Err(CnnError::Format {
                offset: self.pos,
                reason: format!("truncated {what}: need {n} bytes, {have} left"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CnnError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn floats<T: Real>(&mut self, n: usize, what: &str) -> Result<Vec<T>, CnnError> {
        let start = self.pos;
        let raw = self.take(n * 4, what)?;
        let mut out = Vec::with_capacity(n);
        for (i, c) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(CnnError::Format {
                    offset: start + 4 * i,
                    reason: format!("non-finite {what} value"),
                });
            }
            out.push(T::from_f64(v as f64));
        }
        Ok(out)
    }
}

/// Parses a weights file against the architecture it must describe.
pub fn decode_weights<T: Real>(bytes: &[u8], arch: &Architecture) -> Result<Network<T>, CnnError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != WEIGHTS_MAGIC {
        return Err(CnnError::Format {
            offset: 0,
            reason: "bad magic (expected AMQC)".into(),
        });
    }
    let version = cur.u32("version")?;
    if version != WEIGHTS_VERSION {
        return Err(CnnError::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let expected = arch.param_shapes()?;
    let want = expected.iter().flatten().count();
    let count = cur.u32("layer count")? as usize;
    if count != want {
        return Err(CnnError::Format {
            offset: 8,
            reason: format!("{count} parameterised layers, architecture has {want}"),
        });
    }
    let mut params = Vec::with_capacity(expected.len());
    for (spec, shape) in arch.layers.iter().zip(&expected) {
        let Some(shape) = shape else {
            params.push(None);
            continue;
        };
        let at = cur.pos;
        let tag = cur.take(1, "kind tag")?[0];
        let want_tag = if matches!(spec, LayerSpec::Conv { .. }) { TAG_CONV } else { TAG_DENSE };
        if tag != want_tag {
            return Err(CnnError::Format {
                offset: at,
                reason: format!("kind tag {tag}, expected {want_tag} for {}", spec.kind()),
            });
        }
        let at = cur.pos;
        let rank = cur.u32("rank")? as usize;
        if rank != shape.len() {
            return Err(CnnError::Format {
                offset: at,
                reason: format!("rank {rank}, expected {}", shape.len()),
            });
        }
        let at = cur.pos;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32("dims")? as usize);
        }
        if &dims != shape {
            return Err(CnnError::Format {
                offset: at,
                reason: format!("dims {dims:?}, expected {shape:?}"),
            });
        }
        let n: usize = dims.iter().product();
        let weights = Tensor::from_parts(dims.clone(), cur.floats(n, "weight")?);
        let bias = Tensor::from_parts(vec![dims[0]], cur.floats(dims[0], "bias")?);
        params.push(Some(LayerParams { weights, bias }));
    }
    if cur.pos != bytes.len() {
        return Err(CnnError::Format {
            offset: cur.pos,
            reason: format!("{} trailing bytes", bytes.len() - cur.pos),
        });
    }
    Network::from_params(arch.clone(), params)
}

pub fn save_weights<T: Real>(net: &Network<T>, path: &Path) -> Result<(), CnnError> {
    std::fs::write(path, encode_weights(net))?;
    Ok(())
}

pub fn load_weights<T: Real>(path: &Path, arch: &Architecture) -> Result<Network<T>, CnnError> {
    decode_weights(&std::fs::read(path)?, arch)
}
