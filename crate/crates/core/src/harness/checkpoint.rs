//! Named-tensor checkpoints with an embedded JSON config.

use std::path::Path;

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SANW";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub config: ExperimentConfig,
}

impl Checkpoint {
    pub fn new(params: ParamSet, config: ExperimentConfig) -> Self {
        Self { params, config }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.params.len()).map_err(|_| Error::InvalidArgument("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in self.params.iter() {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::InvalidArgument(format!("tensor name '{name}' is too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank()).map_err(|_| Error::InvalidArgument(format!("rank of '{name}'")))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension of '{name}'")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let json = serde_json::to_vec(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        let len = u32::try_from(json.len()).map_err(|_| Error::InvalidArgument("config too large".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.error(0, "bad magic, expected SANW"));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(r.error(4, format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")?;
        let mut params = ParamSet::new();
        for i in 0..count {
            let start = r.pos;
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| r.error(start as u64, format!("tensor {i} name is not UTF-8")))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| r.error(start as u64, format!("tensor '{name}': {e}")))?;
            if params.contains(&name) {
                return Err(r.error(start as u64, format!("duplicate tensor '{name}'")));
            }
            params.insert(name, t);
        }
        let start = r.pos;
        let len = r.u32("config length")? as usize;
        let json = r.take(len, "config")?;
        let config = serde_json::from_slice(json).map_err(|e| r.error(start as u64, format!("config: {e}")))?;
        if r.pos != bytes.len() {
            return Err(r.error(r.pos as u64, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { params, config })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: u64, detail: impl Into<String>) -> Error {
        Error::Format {
            what: "checkpoint",
            offset,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.error(self.pos as u64, format!("truncated while reading {field}")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }
}
