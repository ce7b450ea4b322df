//! Flat tensor-archive container used for checkpoints and datasets.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "ISGN" | u32 version = 1 | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 rank | u32 × rank dims | f64 × numel payload
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"ISGN";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("bad magic bytes {0:?}, expected \"ISGN\"")]
    BadMagic([u8; 4]),
    #[error("unsupported archive version {0}, expected {VERSION}")]
    BadVersion(u32),
    #[error("archive truncated while reading {0}")]
    Truncated(String),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("duplicate tensor name '{0}'")]
    DuplicateName(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArchiveError + '_ {
    move |source| ArchiveError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_archive(path: &Path, entries: &[(String, &Tensor)]) -> Result<(), ArchiveError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let inner = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(entries.len() as u32).to_le_bytes())?;
        for (name, tensor) in entries {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[tensor.rank() as u8])?;
            for &d in tensor.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    };
    inner(&mut w).map_err(io_err(path))
}

pub fn read_archive(path: &Path) -> Result<Vec<(String, Tensor)>, ArchiveError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(ArchiveError::BadMagic(magic));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(ArchiveError::BadVersion(version));
    }
    let count = read_u32(&mut r, "tensor count")? as usize;

    let mut entries = Vec::with_capacity(count);
    let mut seen = std::collections::BTreeSet::new();
    for i in 0..count {
        let ctx = || format!("tensor {i}");
        let name_len = read_u16(&mut r, &ctx())? as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact(&mut r, &mut name_buf, &format!("{} name", ctx()))?;
        let name = String::from_utf8(name_buf).map_err(|_| ArchiveError::BadName)?;
        if !seen.insert(name.clone()) {
            return Err(ArchiveError::DuplicateName(name));
        }
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank, &format!("'{name}' rank"))?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r, &format!("'{name}' dims"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f64; numel];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            read_exact(&mut r, &mut buf, &format!("'{name}' payload"))?;
            *v = f64::from_le_bytes(buf);
        }
        entries.push((name, Tensor::new(shape, data).expect("consistent shape")));
    }
    Ok(entries)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), ArchiveError> {
    r.read_exact(buf)
        .map_err(|_| ArchiveError::Truncated(what.to_string()))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32, ArchiveError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16(r: &mut impl Read, what: &str) -> Result<u16, ArchiveError> {
    let mut buf = [0u8; 2];
    read_exact(r, &mut buf, what)?;
    Ok(u16::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.isgn");
        let a = Tensor::new(vec![2, 3], vec![1.5, -2.25, 0.0, 3.5e-300, 1e300, -0.0]).unwrap();
        let b = Tensor::scalar(42.0);
        write_archive(&path, &[("a".into(), &a), ("b.scalar".into(), &b)]).unwrap();
        let back = read_archive(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "a");
        assert_eq!(back[0].1.shape(), &[2, 3]);
        assert_eq!(
            back[0].1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back[1].1.rank(), 0);
        assert_eq!(back[1].1.item(), 42.0);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.isgn");
        let a = Tensor::scalar(1.0);
        write_archive(&path, &[("a".into(), &a)]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_archive(&path),
            Err(ArchiveError::BadMagic(_))
        ));
    }

    #[test]
    fn truncation_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.isgn");
        let a = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_archive(&path, &[("a".into(), &a)]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = read_archive(&path).unwrap_err();
        assert!(matches!(err, ArchiveError::Truncated(_)), "{err}");
    }

    #[test]
    fn bad_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.isgn");
        write_archive(&path, &[("a".into(), &Tensor::scalar(0.0))]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_archive(&path),
            Err(ArchiveError::BadVersion(9))
        ));
    }
}
