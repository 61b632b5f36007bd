//! Little-endian read/write primitives shared by the binary file formats.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f32<W: Write>(w: &mut W, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::TruncatedFile
        } else {
            Error::Io(e)
        }
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or_truncated(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(r, &mut b)?;
    Ok(f32::from_le_bytes(b))
}

/// Check the 4-byte magic at the current position.
pub(crate) fn expect_magic<R: Read>(r: &mut R, expected: [u8; 4]) -> Result<()> {
    let mut found = [0u8; 4];
    read_exact_or_truncated(r, &mut found)?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

pub(crate) fn expect_version<R: Read>(r: &mut R, expected: u32) -> Result<()> {
    let found = read_u32(r)?;
    if found != expected {
        return Err(Error::VersionMismatch { expected, found });
    }
    Ok(())
}

/// Write `bytes` to `path` atomically: write a sibling temp file, then rename.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp_path = dir.join(
        Path::new(&tmp)
            .file_name()
            .ok_or_else(|| Error::InvalidParams(format!("bad path: {}", path.display())))?,
    );
    std::fs::write(&tmp_path, bytes)?;
    std::fs::rename(&tmp_path, path)?;
    Ok(())
}
