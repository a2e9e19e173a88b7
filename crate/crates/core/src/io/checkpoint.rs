//! Binary checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "AQCK"  u32 version
//! u32 bits, width, levels, heads, branches, tokens, ffn_hidden
//! levels × (u32 channels, u32 width, u32 height)
//! f64 beta, f64 gamma, u64 seed, u64 iterations
//! u8 positional (1 = fixed sinusoidal table)
//! u32 tensor count
//! per tensor: u16 name length, name, u32 rows, u32 cols, rows·cols f32
//! u32 CRC-32 of every preceding byte
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Tensor;
use crate::pyramid::{LevelShape, PyramidGeometry};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AQCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingMeta {
    pub beta: f64,
    pub gamma: f64,
    pub seed: u64,
    pub iterations: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: TrainingMeta,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::data(self.path, format!("truncated at byte {} (needed {n} more)", self.at))
        })?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.model.config;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [
            c.bits,
            c.width,
            c.geometry.levels.len(),
            c.heads,
            c.branches,
            c.tokens(),
            c.ffn_hidden,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for l in &c.geometry.levels {
            for v in [l.channels, l.width, l.height] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
        }
        out.extend_from_slice(&self.meta.beta.to_le_bytes());
        out.extend_from_slice(&self.meta.gamma.to_le_bytes());
        out.extend_from_slice(&self.meta.seed.to_le_bytes());
        out.extend_from_slice(&self.meta.iterations.to_le_bytes());
        out.push(1);
        let params = self.model.named_params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, t) in params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::data(path, "not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 12 {
            return Err(Error::data(path, "truncated checkpoint"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::data(
                path,
                format!("checksum mismatch (stored {stored:08x}, computed {actual:08x})"),
            ));
        }
        let mut r = Reader { bytes: body, at: 8, path };
        let bits = r.usize()?;
        let width = r.usize()?;
        let levels = r.usize()?;
        let heads = r.usize()?;
        let branches = r.usize()?;
        let tokens = r.usize()?;
        let ffn_hidden = r.usize()?;
        let mut shapes = Vec::with_capacity(levels.min(64));
        for _ in 0..levels {
            shapes.push(LevelShape {
                channels: r.usize()?,
                width: r.usize()?,
                height: r.usize()?,
            });
        }
        let config = ModelConfig {
            geometry: PyramidGeometry::new(shapes).map_err(|e| Error::data(path, e.to_string()))?,
            width,
            heads,
            ffn_hidden,
            bits,
            branches,
        };
        config.validate().map_err(|e| Error::data(path, e.to_string()))?;
        if config.tokens() != tokens {
            return Err(Error::data(
                path,
                format!("token count {tokens} disagrees with geometry ({})", config.tokens()),
            ));
        }
        let meta = TrainingMeta {
            beta: r.f64()?,
            gamma: r.f64()?,
            seed: r.u64()?,
            iterations: r.u64()?,
        };
        if r.u8()? != 1 {
            return Err(Error::data(path, "unsupported positional encoding flag"));
        }
        let count = r.usize()?;
        let expected = Model::param_count(&config);
        if count != expected {
            return Err(Error::data(path, format!("{count} tensors, expected {expected}")));
        }
        let mut names = Vec::with_capacity(count);
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::data(path, "tensor name is not UTF-8"))?;
            let rows = r.usize()?;
            let cols = r.usize()?;
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::data(path, format!("tensor {name} is too large")))?;
            let data = r
                .take(n)?
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            names.push(name);
            tensors.push(Tensor::matrix(rows, cols, data)?);
        }
        if r.at != body.len() {
            return Err(Error::data(path, format!("{} trailing bytes", body.len() - r.at)));
        }
        let model = Model::from_tensors(config, tensors).map_err(|e| Error::data(path, e.to_string()))?;
        for ((expected, _), got) in model.named_params().iter().zip(&names) {
            if expected != got {
                return Err(Error::data(path, format!("tensor '{got}' where '{expected}' was expected")));
            }
        }
        Ok(Checkpoint { model, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{random_image, tiny_config};

    fn sample() -> Checkpoint {
        Checkpoint {
            model: Model::init(tiny_config(2), 8).unwrap(),
            meta: TrainingMeta {
                beta: 1.0,
                gamma: 200.0,
                seed: 8,
                iterations: 3,
            },
        }
    }

    #[test]
    fn round_trip_preserves_codes_bitwise() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("ck")).unwrap();
        assert_eq!(back, ck);
        for s in 0..4 {
            let img = random_image(&ck.model.config, s);
            let a = ck.model.forward_logits(&img).unwrap();
            let b = back.model.forward_logits(&img).unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        let p = Path::new("ck");
        for at in [0usize, 10, 40, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[at] ^= 0x01;
            assert!(Checkpoint::from_bytes(&bad, p).is_err(), "byte {at}");
        }
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9], p).is_err());
    }

    #[test]
    fn newer_version_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("ck")),
            Err(Error::Version { found: 2, supported: 1 })
        ));
    }
}
