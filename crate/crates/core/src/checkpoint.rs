//! Binary training snapshots in the "CFMR" layout. All integers and floats
//! are little-endian regardless of host.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use conformer_tensor::Tensor;

use crate::config::ConformerConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CFMR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ConformerConfig,
    /// Optimizer updates applied so far.
    pub step: u64,
    /// Parameters, buffers and optimizer moments, keyed by name.
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub rng: [u8; 32],
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let json = self.config.to_json();
        out.extend_from_slice(&u32::try_from(json.len()).map_err(|_| too_big("config"))?.to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(&u32::try_from(self.tensors.len()).map_err(|_| too_big("tensor count"))?.to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&u16::try_from(name.len()).map_err(|_| too_big(name))?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::try_from(t.rank()).map_err(|_| too_big(name))?);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.rng);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}, expected {VERSION}")));
        }
        let step = r.u64("step")?;
        let len = r.u32("config length")? as usize;
        let json =
            std::str::from_utf8(r.take(len, "config")?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = ConformerConfig::from_json(json)?;
        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(nlen, "name")?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64("dimension")?).map_err(|_| too_big(&name))?);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| too_big(&name))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| too_big(&name))?, "tensor payload")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
        }
        let mut rng = [0u8; 32];
        rng.copy_from_slice(r.take(32, "rng state")?);
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, step, tensors, rng })
    }

    /// Writes via a temporary file and rename, so readers never see a half-written file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn too_big(what: &str) -> Error {
    Error::Checkpoint(format!("`{what}` exceeds the format's field width"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
                Error::Checkpoint(format!("file truncated while reading {what} at byte {}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "a.weight".to_string(),
            Tensor::new([2, 3], vec![1.0, -2.0, 0.5, 3.25, f32::MIN_POSITIVE, -0.0]).unwrap(),
        );
        tensors.insert("b".to_string(), Tensor::scalar(7.0));
        Checkpoint { config: ConformerConfig::preset("micro").unwrap(), step: 42, tensors, rng: [9; 32] }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"CFMR");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..16], &[42, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[bytes.len() - 32..], &[9; 32]);
    }

    #[test]
    fn every_truncation_is_an_error() {
        let bytes = sample().to_bytes().unwrap();
        for cut in 0..bytes.len() {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_)) | Err(Error::Json(_))),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn version_mismatch_refused() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 2;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
    }
}
