//! Shared checkpoint container: a fixed header followed by named tensors,
//! each shape-prefixed, stored as little-endian f32.
//!
//! Layout: magic [4], version u16, schema hash u64, G u8, K_g u16 per group,
//! d_0 u16, M u8, V u32; then per tensor: name length u16, name bytes,
//! rank u8, dims u32 each, f32 payload.

use crate::error::{Result, SifError};
use crate::tensor::Tensor;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CKPT_VERSION: u16 = 1;
pub const TOKENIZER_MAGIC: &[u8; 4] = b"SIFC";
pub const MIXER_MAGIC: &[u8; 4] = b"SIFM";

#[derive(Clone, Debug, PartialEq)]
pub struct CkptHeader {
    pub version: u16,
    pub schema_hash: u64,
    /// K_g per group in canonical group order.
    pub group_counts: Vec<u16>,
    pub d0: u16,
    pub m: u8,
    pub v: u32,
}

pub fn write_ckpt(
    path: &Path,
    magic: &[u8; 4],
    header: &CkptHeader,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(magic)?;
    w.write_all(&header.version.to_le_bytes())?;
    w.write_all(&header.schema_hash.to_le_bytes())?;
    w.write_all(&[header.group_counts.len() as u8])?;
    for &k in &header.group_counts {
        w.write_all(&k.to_le_bytes())?;
    }
    w.write_all(&header.d0.to_le_bytes())?;
    w.write_all(&[header.m])?;
    w.write_all(&header.v.to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[t.shape().len() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_ckpt(path: &Path, magic: &[u8; 4]) -> Result<(CkptHeader, Vec<(String, Tensor)>)> {
    let file = path.display().to_string();
    let fmt = |msg: String| SifError::Format {
        file: file.clone(),
        msg,
    };
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut got = [0u8; 4];
    r.read_exact(&mut got)?;
    if &got != magic {
        return Err(fmt(format!(
            "bad magic {:?}, expected {:?}",
            got,
            std::str::from_utf8(magic).unwrap_or("?")
        )));
    }
    let version = read_u16(&mut r)?;
    if version != CKPT_VERSION {
        return Err(fmt(format!("unsupported version {}", version)));
    }
    let schema_hash = read_u64(&mut r)?;
    let g = read_u8(&mut r)? as usize;
    let mut group_counts = Vec::with_capacity(g);
    for _ in 0..g {
        group_counts.push(read_u16(&mut r)?);
    }
    let d0 = read_u16(&mut r)?;
    let m = read_u8(&mut r)?;
    let v = read_u32(&mut r)?;
    let header = CkptHeader {
        version,
        schema_hash,
        group_counts,
        d0,
        m,
        v,
    };
    let mut tensors = Vec::new();
    loop {
        let mut len_buf = [0u8; 2];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u16::from_le_bytes(len_buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| fmt("tensor name is not utf-8".into()))?;
        let rank = read_u8(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        tensors.push((name, Tensor::from_vec(&shape, data)));
    }
    Ok((header, tensors))
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_names_shapes_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.sifc");
        let header = CkptHeader {
            version: CKPT_VERSION,
            schema_hash: 0xdead_beef,
            group_counts: vec![2, 5, 1],
            d0: 16,
            m: 3,
            v: 256,
        };
        let a = Tensor::from_vec(&[2, 3], vec![1.5, -2.25, 0.0, 4.0, 0.0009765625, -7.0]);
        let b = Tensor::from_vec(&[4], vec![0.25; 4]);
        write_ckpt(
            &path,
            TOKENIZER_MAGIC,
            &header,
            &[("w.0".into(), &a), ("bias".into(), &b)],
        )
        .unwrap();
        let (h2, tensors) = read_ckpt(&path, TOKENIZER_MAGIC).unwrap();
        assert_eq!(header, h2);
        assert_eq!(tensors.len(), 2);
        assert_eq!(tensors[0].0, "w.0");
        assert_eq!(tensors[0].1, a);
        assert_eq!(tensors[1].1, b);
        // wrong magic rejected
        assert!(read_ckpt(&path, MIXER_MAGIC).is_err());
    }
}
