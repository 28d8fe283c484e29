//! Binary tensor files (`BVT1`) and named-tensor archives.
//!
//! A tensor file is the magic `BVT1`, a little-endian `u32` rank, `rank`
//! little-endian `u32` extents, then row-major little-endian `f32` values.
//! An archive is the magic `BVA1`, a `u32` entry count, then per entry a
//! `u32` name length, the UTF-8 name, and one tensor file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"BVT1";
pub const ARCHIVE_MAGIC: &[u8; 4] = b"BVA1";

fn format_err(msg: impl Into<String>) -> TensorError {
    TensorError::Format(msg.into())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| truncated(e, "u32"))?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error, what: &str) -> TensorError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        format_err(format!("truncated stream while reading {what}"))
    } else {
        TensorError::Io(e)
    }
}

pub fn write_tensor<T: Real, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for x in t.data() {
        buf.extend_from_slice(&x.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<T: Real, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| truncated(e, "magic"))?;
    if &magic != TENSOR_MAGIC {
        return Err(format_err(format!("bad tensor magic {magic:?}")));
    }
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(format_err(format!("unsupported rank {rank}")));
    }
    let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let numel = numel.filter(|&n| n > 0 && n < (1 << 32)).ok_or_else(|| format_err("bad extents"))?;
    let mut bytes = vec![0u8; numel * 4];
    r.read_exact(&mut bytes).map_err(|e| truncated(e, "tensor data"))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(&shape, data).map_err(|e| format_err(e.to_string()))
}

pub fn save_tensor<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    read_tensor(&mut BufReader::new(File::open(path)?))
}

pub fn write_archive<T: Real, W: Write>(w: &mut W, entries: &[(String, Tensor<T>)]) -> Result<()> {
    w.write_all(ARCHIVE_MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_archive<T: Real, R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<T>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| truncated(e, "magic"))?;
    if &magic != ARCHIVE_MAGIC {
        return Err(format_err(format!("bad archive magic {magic:?}")));
    }
    let count = read_u32(r)?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        if len > 4096 {
            return Err(format_err(format!("entry name length {len} too large")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| truncated(e, "entry name"))?;
        let name = String::from_utf8(name).map_err(|_| format_err("entry name not UTF-8"))?;
        out.push((name, read_tensor(r)?));
    }
    Ok(out)
}

pub fn save_archive<T: Real>(path: impl AsRef<Path>, entries: &[(String, Tensor<T>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_archive(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn load_archive<T: Real>(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<T>)>> {
    read_archive(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::from_f64(&[2, 1], &[1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut expect = b"BVT1".to_vec();
        for v in [2u32, 2, 1] {
            expect.extend_from_slice(&v.to_le_bytes());
        }
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(read_tensor::<f32, _>(&mut &b"NOPE"[..]), Err(TensorError::Format(_))));
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::<f32>::ones(&[4])).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(matches!(read_tensor::<f32, _>(&mut &buf[..]), Err(TensorError::Format(_))));
    }

    proptest! {
        #[test]
        fn archive_roundtrip(values in prop::collection::vec(-1e6f32..1e6, 1..40), names in prop::collection::vec("[a-z.]{1,12}", 1..4)) {
            let entries: Vec<(String, Tensor<f32>)> = names
                .iter()
                .map(|n| (n.clone(), Tensor::new(&[values.len()], values.clone()).unwrap()))
                .collect();
            let mut buf = Vec::new();
            write_archive(&mut buf, &entries).unwrap();
            let back = read_archive::<f32, _>(&mut &buf[..]).unwrap();
            prop_assert_eq!(back, entries);
        }
    }
}
