//! Named-tensor container and its on-disk format.
//!
//! Layout: magic "MUSECKPT" | u32 count | per entry: u16 name length, name
//! bytes, u8 rank, u32 dims..., payload of little-endian f32.
//!
//! Non-tensor state (counters, RNG words) rides along as small tensors;
//! u64 words are split into four 16-bit chunks, each exactly representable
//! in f32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::diffcore::{Tensor, Value};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::wire;

const CKPT_MAGIC: &[u8; 8] = b"MUSECKPT";

/// Ordered collection of named f32 tensors.
#[derive(Default)]
pub struct TensorSink {
    entries: Vec<(String, Tensor<f32>)>,
}

impl TensorSink {
    pub fn new() -> Self {
        TensorSink { entries: Vec::new() }
    }

    pub fn push(&mut self, name: String, t: Tensor<f32>) {
        debug_assert!(
            !self.entries.iter().any(|(n, _)| n == &name),
            "duplicate checkpoint entry {name}"
        );
        self.entries.push((name, t));
    }

    pub fn push_vec<T: Scalar>(&mut self, name: String, v: &[T]) {
        let data: Vec<f32> = v.iter().map(|x| x.to_f64().unwrap() as f32).collect();
        self.push(name, Tensor::from_parts(vec![data.len()], data));
    }

    pub fn push_scalar(&mut self, name: String, v: f64) {
        self.push(name, Tensor::scalar(v as f32));
    }

    /// Store a u64 as four 16-bit chunks, most significant first.
    pub fn push_u64(&mut self, name: String, v: u64) {
        let chunks: Vec<f32> = (0..4).map(|i| ((v >> (48 - 16 * i)) & 0xFFFF) as f32).collect();
        self.push(name, Tensor::from_parts(vec![4], chunks));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name).ok_or_else(|| Error::Format(format!("checkpoint entry {name} missing")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.require(name)?.item() as f64)
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        let t = self.require(name)?;
        if t.len() != 4 {
            return Err(Error::Format(format!("{name} is not a packed u64")));
        }
        let mut v: u64 = 0;
        for &c in t.data() {
            v = (v << 16) | (c as u64 & 0xFFFF);
        }
        Ok(v)
    }

    /// Overwrite a graph value's data from the stored tensor of this name.
    pub fn load_into<T: Scalar>(&self, name: &str, value: &Value<T>) -> Result<()> {
        let t = self.require(name)?;
        if t.shape() != value.shape().as_slice() {
            return Err(Error::Format(format!(
                "checkpoint entry {name} has shape {:?}, expected {:?}",
                t.shape(),
                value.shape()
            )));
        }
        value.set_data(t.cast());
        Ok(())
    }

    pub fn load_vec<T: Scalar>(&self, name: &str, dst: &mut Vec<T>) -> Result<()> {
        let t = self.require(name)?;
        if t.len() != dst.len() {
            return Err(Error::Format(format!(
                "checkpoint entry {name} has {} elements, expected {}",
                t.len(),
                dst.len()
            )));
        }
        for (d, &s) in dst.iter_mut().zip(t.data()) {
            *d = crate::scalar::cast(s as f64);
        }
        Ok(())
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        wire::write_u32(&mut w, self.entries.len() as u32)?;
        for (name, t) in &self.entries {
            let bytes = name.as_bytes();
            if bytes.len() > u16::MAX as usize {
                return Err(Error::InvalidArgument(format!("tensor name too long: {name}")));
            }
            wire::write_u16(&mut w, bytes.len() as u16)?;
            w.write_all(bytes)?;
            let rank = t.shape().len();
            if rank > u8::MAX as usize {
                return Err(Error::InvalidArgument("tensor rank exceeds u8".into()));
            }
            w.write_all(&[rank as u8])?;
            for &d in t.shape() {
                wire::write_u32(&mut w, d as u32)?;
            }
            for &v in t.data() {
                wire::write_f32(&mut w, v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<TensorSink> {
        let mut r = BufReader::new(File::open(path)?);
        wire::expect_magic(&mut r, CKPT_MAGIC, "checkpoint")?;
        let count = wire::read_u32(&mut r, "checkpoint entry count")?;
        let mut sink = TensorSink::new();
        for _ in 0..count {
            let name_len = wire::read_u16(&mut r, "checkpoint name length")? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)
                .map_err(|_| Error::Format("truncated checkpoint name".into()))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Format("checkpoint name is not UTF-8".into()))?;
            let rank = wire::read_u8(&mut r, "checkpoint rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(wire::read_u32(&mut r, "checkpoint dim")? as usize);
            }
            let n: usize = dims.iter().product();
            let mut data = vec![0f32; n];
            for v in data.iter_mut() {
                *v = wire::read_f32(&mut r, "checkpoint payload")?;
            }
            sink.entries.push((name, Tensor::from_parts(dims, data)));
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint payload".into()));
        }
        Ok(sink)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = std::env::temp_dir().join(format!("muse_ckpt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.museckpt");
        let mut sink = TensorSink::new();
        sink.push("a/w".into(), Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-9, 7.0]).unwrap());
        sink.push_scalar("meta/acc".into(), 97.31);
        sink.push_u64("rng/gen".into(), 0xDEAD_BEEF_CAFE_F00D);
        sink.save(&path).unwrap();
        let loaded = TensorSink::load(&path).unwrap();
        assert_eq!(loaded.entries().len(), 3);
        assert_eq!(loaded.get("a/w").unwrap().data(), sink.get("a/w").unwrap().data());
        assert_eq!(loaded.scalar("meta/acc").unwrap(), 97.31f32 as f64);
        assert_eq!(loaded.u64("rng/gen").unwrap(), 0xDEAD_BEEF_CAFE_F00D);
        // second save of the loaded sink is byte-identical
        let path2 = dir.join("t2.museckpt");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_magic_and_truncation_rejected() {
        let dir = std::env::temp_dir().join(format!("muse_ckpt_bad_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.museckpt");
        std::fs::write(&path, b"WRONGMAG\x00\x00\x00\x00").unwrap();
        assert!(TensorSink::load(&path).is_err());
        let mut sink = TensorSink::new();
        sink.push("x".into(), Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        sink.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(TensorSink::load(&path), Err(Error::Format(_))));
        std::fs::remove_dir_all(&dir).ok();
    }
}
