//! `FDCK` checkpoint container.
//!
//! ```text
//! "FDCK"                       4 bytes
//! version                      u32 LE (= 1)
//! config length, config text   u32 LE, UTF-8 bytes
//! parameter count              u32 LE
//! per parameter:
//!   name length, name          u32 LE, UTF-8 bytes
//!   ndim, dims[ndim]           u32 LE each
//!   values                     f32 LE, prod(dims) entries
//! ```
//!
//! Values are stored as f32, so a save rounds the in-memory f64 parameters.
//! Loading and saving again reproduces the file byte for byte.

use std::path::Path;

use super::params::ParamStore;
use crate::binio::{put_u32, read_file, to_u32, write_file, Reader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FDCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Resolved run configuration in `key = value` form.
    pub config_text: String,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, to_u32(self.config_text.len(), "config length")?);
        out.extend_from_slice(self.config_text.as_bytes());
        put_u32(&mut out, to_u32(self.params.len(), "parameter count")?);
        for id in self.params.ids() {
            let name = self.params.name(id);
            put_u32(&mut out, to_u32(name.len(), "name length")?);
            out.extend_from_slice(name.as_bytes());
            let shape = self.params.shape(id);
            put_u32(&mut out, to_u32(shape.len(), "ndim")?);
            for &d in shape {
                put_u32(&mut out, to_u32(d, "dim")?);
            }
            for &v in self.params.data(id) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        if r.take(4)? != MAGIC {
            return Err(Error::BadMagic { path: path.to_path_buf(), expected: "FDCK" });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::BadVersion { path: path.to_path_buf(), found: version });
        }
        let n = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| r.malformed("config is not UTF-8"))?;
        let count = r.u32()?;
        let mut params = ParamStore::default();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| r.malformed("name is not UTF-8"))?;
            if params.id(&name).is_some() {
                return Err(r.malformed(format!("duplicate parameter {name}")));
            }
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let want = numel * 4;
            if r.remaining() < want {
                return Err(Error::PayloadShort { path: r.path().to_path_buf(), expected: want, found: r.remaining() });
            }
            let raw = r.take(want)?;
            let data: Vec<f64> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(r.malformed(format!("non-finite value in {name}")));
            }
            params.add(name, shape, data);
        }
        if r.remaining() != 0 {
            return Err(r.malformed(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { config_text, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?, path)
    }
}
