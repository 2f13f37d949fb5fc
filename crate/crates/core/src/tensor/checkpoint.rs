//! Checkpoint serialization.
//!
//! Layout: magic bytes `EQPF`, a `u32` format version, a manifest of
//! entries (name, dtype, shape, byte offset, byte length), then the raw
//! little-endian buffers. Offsets are relative to the start of the payload
//! section. All integers in the header are little-endian.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Dtype;

pub const MAGIC: [u8; 4] = *b"EQPF";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes {0:?}, expected \"EQPF\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("corrupt manifest: {0}")]
    Corrupt(String),
    #[error("entry {0:?} not found in checkpoint")]
    Missing(String),
}

/// One named buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Buf,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Buf {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Buf {
    pub fn dtype(&self) -> Dtype {
        match self {
            Buf::F32(_) => Dtype::F32,
            Buf::F64(_) => Dtype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Buf::F32(v) => v.len(),
            Buf::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            Buf::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Buf::F64(v) => v.clone(),
        }
    }
}

pub fn save(path: &Path, entries: &[Entry]) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    let mut offset = 0u64;
    for e in entries {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[e.data.dtype().tag()])?;
        w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
        for &d in &e.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let byte_len = (e.data.len() * e.data.dtype().byte_len()) as u64;
        w.write_all(&offset.to_le_bytes())?;
        w.write_all(&byte_len.to_le_bytes())?;
        offset += byte_len;
    }
    for e in entries {
        match &e.data {
            Buf::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            Buf::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<Entry>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = read_u32(&mut r)? as usize;
    struct Header {
        name: String,
        dtype: Dtype,
        shape: Vec<usize>,
        offset: u64,
        byte_len: u64,
    }
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| CheckpointError::Corrupt(format!("entry name not utf8: {e}")))?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let dtype = Dtype::from_tag(tag[0]).ok_or(CheckpointError::BadDtype(tag[0]))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let offset = read_u64(&mut r)?;
        let byte_len = read_u64(&mut r)?;
        let expected = shape.iter().product::<usize>() * dtype.byte_len();
        if expected as u64 != byte_len {
            return Err(CheckpointError::Corrupt(format!(
                "entry {name:?}: shape {shape:?} implies {expected} bytes, manifest says {byte_len}"
            )));
        }
        headers.push(Header {
            name,
            dtype,
            shape,
            offset,
            byte_len,
        });
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut entries = Vec::with_capacity(count);
    for h in headers {
        let start = h.offset as usize;
        let end = start + h.byte_len as usize;
        if end > payload.len() {
            return Err(CheckpointError::Corrupt(format!(
                "entry {:?} extends past end of payload",
                h.name
            )));
        }
        let bytes = &payload[start..end];
        let data = match h.dtype {
            Dtype::F32 => Buf::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F64 => Buf::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        entries.push(Entry {
            name: h.name,
            shape: h.shape,
            data,
        });
    }
    Ok(entries)
}

pub fn find<'a>(entries: &'a [Entry], name: &str) -> Result<&'a Entry, CheckpointError> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| CheckpointError::Missing(name.to_string()))
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.eqpf");
        let entries = vec![
            Entry {
                name: "w".into(),
                shape: vec![2, 3],
                data: Buf::F32(vec![1.5, -2.25, 0.0, 3.5e-8, 1e20, -0.125]),
            },
            Entry {
                name: "meta.seed".into(),
                shape: vec![],
                data: Buf::F64(vec![42.0]),
            },
        ];
        save(&path, &entries).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, entries);
    }

    #[test]
    fn magic_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"NOPE_____").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic(_))));
    }

    #[test]
    fn file_starts_with_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.eqpf");
        save(&path, &[]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"EQPF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }
}
