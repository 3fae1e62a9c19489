//! Little-endian read/write helpers shared by the on-disk formats.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub fn write_u16<W: Write>(w: &mut W, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f32<W: Write>(w: &mut W, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_bytes<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("truncated while reading {what}")))?;
    Ok(buf)
}

pub fn read_u8<R: Read>(r: &mut R, what: &str) -> Result<u8> {
    Ok(read_bytes::<R, 1>(r, what)?[0])
}

pub fn read_u16<R: Read>(r: &mut R, what: &str) -> Result<u16> {
    Ok(u16::from_le_bytes(read_bytes(r, what)?))
}

pub fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_bytes(r, what)?))
}

pub fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_bytes(r, what)?))
}

pub fn read_f32<R: Read>(r: &mut R, what: &str) -> Result<f32> {
    Ok(f32::from_le_bytes(read_bytes(r, what)?))
}

pub fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 8], what: &str) -> Result<()> {
    let got = read_bytes::<R, 8>(r, what)?;
    if &got != magic {
        return Err(Error::Format(format!(
            "bad magic for {what}: expected {:?}, got {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&got)
        )));
    }
    Ok(())
}
