//! `FVOL` volume files.
//!
//! ```text
//! "FVOL"        4 bytes
//! version       u32 LE (= 1)
//! X, Y, Z, C    u32 LE each
//! dtype         u32 LE: 0 = f32, 1 = u8 mask
//! payload       flat order ((c·Z + z)·Y + y)·X + x, little-endian
//! ```

use std::path::Path;

use crate::binio::{put_u32, read_file, to_u32, write_file, Reader};
use crate::error::{invalid, Error, Result};
use crate::volume::{BinaryMask, ChannelVolume};

pub const MAGIC: &[u8; 4] = b"FVOL";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    pub fn code(self) -> u32 {
        match self {
            Dtype::F32 => 0,
            Dtype::U8 => 1,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FvolHeader {
    pub dims: (usize, usize, usize),
    pub channels: usize,
    pub dtype: Dtype,
}

impl FvolHeader {
    pub fn payload_bytes(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2 * self.channels * self.dtype.size()
    }
}

/// Decoded file contents.
#[derive(Debug, Clone, PartialEq)]
pub enum Fvol {
    Volume(ChannelVolume),
    Mask(BinaryMask),
}

fn header_bytes(h: &FvolHeader) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_BYTES + h.payload_bytes());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, to_u32(h.dims.0, "X")?);
    put_u32(&mut out, to_u32(h.dims.1, "Y")?);
    put_u32(&mut out, to_u32(h.dims.2, "Z")?);
    put_u32(&mut out, to_u32(h.channels, "C")?);
    put_u32(&mut out, h.dtype.code());
    Ok(out)
}

/// Encodes a volume as f32. Values must be representable; they are rounded.
pub fn encode_volume(vol: &ChannelVolume) -> Result<Vec<u8>> {
    let h = FvolHeader { dims: vol.dims(), channels: vol.channels(), dtype: Dtype::F32 };
    let mut out = header_bytes(&h)?;
    for &v in vol.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn encode_mask(mask: &BinaryMask) -> Result<Vec<u8>> {
    let h = FvolHeader { dims: mask.dims(), channels: 1, dtype: Dtype::U8 };
    let mut out = header_bytes(&h)?;
    out.extend_from_slice(mask.data());
    Ok(out)
}

fn decode_header(r: &mut Reader<'_>) -> Result<FvolHeader> {
    let path = r.path().to_path_buf();
    if r.take(4)? != MAGIC {
        return Err(Error::BadMagic { path, expected: "FVOL" });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::BadVersion { path, found: version });
    }
    let (x, y, z, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let dtype = match r.u32()? {
        0 => Dtype::F32,
        1 => Dtype::U8,
        found => return Err(Error::BadDtype { path, found }),
    };
    Ok(FvolHeader { dims: (x, y, z), channels: c, dtype })
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Fvol> {
    let mut r = Reader::new(bytes, path);
    let h = decode_header(&mut r)?;
    let want = h.payload_bytes();
    if r.remaining() < want {
        return Err(Error::PayloadShort { path: path.to_path_buf(), expected: want, found: r.remaining() });
    }
    if r.remaining() > want {
        return Err(r.malformed(format!("{} trailing bytes", r.remaining() - want)));
    }
    let payload = r.take(want)?;
    match h.dtype {
        Dtype::F32 => {
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            let vol = ChannelVolume::from_vec(h.dims, h.channels, data).map_err(|e| r.malformed(e.to_string()))?;
            Ok(Fvol::Volume(vol))
        }
        Dtype::U8 => {
            if h.channels != 1 {
                return Err(r.malformed(format!("mask with {} channels", h.channels)));
            }
            let mask = BinaryMask::new(h.dims, payload.to_vec()).map_err(|e| r.malformed(e.to_string()))?;
            Ok(Fvol::Mask(mask))
        }
    }
}

pub fn write_volume(vol: &ChannelVolume, path: &Path) -> Result<()> {
    write_file(path, &encode_volume(vol)?)
}

pub fn write_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    write_file(path, &encode_mask(mask)?)
}

pub fn read(path: &Path) -> Result<Fvol> {
    decode(&read_file(path)?, path)
}

pub fn read_volume(path: &Path) -> Result<ChannelVolume> {
    match read(path)? {
        Fvol::Volume(v) => Ok(v),
        Fvol::Mask(_) => Err(invalid!("{} holds a mask, expected a float volume", path.display())),
    }
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    match read(path)? {
        Fvol::Mask(m) => Ok(m),
        Fvol::Volume(_) => Err(invalid!("{} holds a float volume, expected a mask", path.display())),
    }
}
