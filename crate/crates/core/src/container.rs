//! The XSFC binary container used for model checkpoints (`.xsfc`) and
//! single/multi-tensor files (`.xst`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "XSFC" | version u32 | config text length u32 | config UTF-8 bytes
//! | record count u32
//! | per record: name length u32, name UTF-8, tag u8, ndim u32,
//!               dims u64 each, raw f32 data
//! ```
//!
//! Readers report the byte offset of the first malformed field.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"XSFC";
pub const FORMAT_VERSION: u32 = 1;

/// Partition tag byte stored with every record.
pub const TAG_LN: u8 = 0;
pub const TAG_ADAPTED: u8 = 1;
pub const TAG_FROZEN: u8 = 2;

/// One named tensor inside a container.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub tag: u8,
    pub tensor: Tensor,
}

#[derive(Debug)]
pub enum ContainerError {
    Io { path: String, source: io::Error },
    BadMagic { offset: u64 },
    UnsupportedVersion { version: u32, offset: u64 },
    Truncated { offset: u64, needed: usize },
    Malformed { offset: u64, detail: String },
}

impl fmt::Display for ContainerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContainerError::Io { path, source } => write!(f, "i/o error on {path}: {source}"),
            ContainerError::BadMagic { offset } => {
                write!(f, "corrupt container: bad magic at byte {offset}")
            }
            ContainerError::UnsupportedVersion { version, offset } => {
                write!(f, "corrupt container: unsupported version {version} at byte {offset}")
            }
            ContainerError::Truncated { offset, needed } => {
                write!(f, "corrupt container: truncated at byte {offset} ({needed} bytes needed)")
            }
            ContainerError::Malformed { offset, detail } => {
                write!(f, "corrupt container: {detail} at byte {offset}")
            }
        }
    }
}

impl std::error::Error for ContainerError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            ContainerError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// Serialize `config_text` plus named tensor records into container bytes.
pub fn encode(config_text: &str, records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let cfg = config_text.as_bytes();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for rec in records {
        let name = rec.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(rec.tag);
        let dims = rec.tensor.dims();
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in rec.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        if self.pos + n > self.buf.len() {
            return Err(ContainerError::Truncated { offset: self.pos as u64, needed: n });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, ContainerError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parse container bytes into the config text and records.
pub fn decode(bytes: &[u8]) -> Result<(String, Vec<Record>), ContainerError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic_off = r.pos as u64;
    if r.take(4)? != MAGIC {
        return Err(ContainerError::BadMagic { offset: magic_off });
    }
    let ver_off = r.pos as u64;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(ContainerError::UnsupportedVersion { version, offset: ver_off });
    }
    let cfg_len = r.u32()? as usize;
    let cfg_off = r.pos as u64;
    let cfg = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|e| ContainerError::Malformed {
            offset: cfg_off,
            detail: format!("config text is not UTF-8: {e}"),
        })?
        .to_string();
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u32()? as usize;
        let name_off = r.pos as u64;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| ContainerError::Malformed {
                offset: name_off,
                detail: format!("record {i} name is not UTF-8: {e}"),
            })?
            .to_string();
        let tag_off = r.pos as u64;
        let tag = r.u8()?;
        if tag > TAG_FROZEN {
            return Err(ContainerError::Malformed {
                offset: tag_off,
                detail: format!("record {i} has unknown tag {tag}"),
            });
        }
        let ndim = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let dim_off = r.pos as u64;
            let d = r.u64()?;
            if d == 0 || d > usize::MAX as u64 {
                return Err(ContainerError::Malformed {
                    offset: dim_off,
                    detail: format!("record {i} ({name}) has invalid dim {d}"),
                });
            }
            dims.push(d as usize);
        }
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f32()?);
        }
        let data_off = r.pos as u64;
        let tensor = Tensor::new(dims, data).map_err(|e| ContainerError::Malformed {
            offset: data_off,
            detail: format!("record {i} ({name}): {e}"),
        })?;
        records.push(Record { name, tag, tensor });
    }
    if r.pos != bytes.len() {
        return Err(ContainerError::Malformed {
            offset: r.pos as u64,
            detail: format!("{} trailing bytes after last record", bytes.len() - r.pos),
        });
    }
    Ok((cfg, records))
}

pub fn write_file(
    path: &Path,
    config_text: &str,
    records: &[Record],
) -> Result<(), ContainerError> {
    fs::write(path, encode(config_text, records)).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_file(path: &Path) -> Result<(String, Vec<Record>), ContainerError> {
    let bytes = fs::read(path).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

/// Write a single unnamed-config tensor, the `.xst` convention used by
/// dataset images and embedding exports.
pub fn write_single_tensor(path: &Path, name: &str, tensor: &Tensor) -> Result<(), ContainerError> {
    write_file(
        path,
        "",
        &[Record { name: name.to_string(), tag: TAG_FROZEN, tensor: tensor.clone() }],
    )
}

/// Read a `.xst` file expected to hold exactly one tensor.
pub fn read_single_tensor(path: &Path) -> Result<Record, ContainerError> {
    let (_, mut records) = read_file(path)?;
    if records.len() != 1 {
        return Err(ContainerError::Malformed {
            offset: 0,
            detail: format!("expected exactly one tensor in {}, found {}", path.display(), records.len()),
        });
    }
    Ok(records.pop().unwrap())
}
