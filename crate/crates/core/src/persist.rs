//! Checkpoint serialization and crash-safe file output.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "LUPI" | version | echo length | echo bytes | tensor count
//!   per tensor: name length | name bytes | rank | extents... | f32 payload
//! CRC32 of everything above
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LUPI";
pub const FORMAT_VERSION: u32 = 1;

/// Writes `bytes` to a sibling temporary file, then renames it over `path`,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Trained parameters plus the canonical config text that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_echo: String,
    pub params: ModelParams,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 text".into()))
    }
}

impl Checkpoint {
    /// Parameters are stored as 32-bit reals.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION as usize)?;
        put_u32(&mut out, self.config_echo.len())?;
        out.extend_from_slice(self.config_echo.as_bytes());
        let tensors: Vec<_> = self.params.iter().collect();
        put_u32(&mut out, tensors.len())?;
        for (name, t) in tensors {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len())?;
            for &e in t.shape() {
                put_u32(&mut out, e)?;
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Checkpoint(format!(
                "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let config_echo = r.string()?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let payload = r.take(len.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let config = infer_config(&tensors)?;
        Ok(Checkpoint {
            config_echo,
            params: ModelParams::from_tensors(config, tensors)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn infer_config(tensors: &BTreeMap<String, Tensor>) -> Result<ModelConfig> {
    let shape = |name: &str| {
        tensors
            .get(name)
            .map(|t| t.shape())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    };
    let proj = shape("trunk.proj.weight")?;
    let classifier = shape("classifier.weight")?;
    let stem = shape("stem_v.weight")?;
    if proj.len() != 2 || classifier.len() != 2 || stem.is_empty() {
        return Err(Error::Checkpoint("unexpected parameter ranks".into()));
    }
    Ok(ModelConfig {
        dim: proj[1],
        num_classes: classifier[1],
        stem_width: stem[0],
        trunk_width: proj[0],
    })
}
