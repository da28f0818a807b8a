//! Binary checkpoint format: magic "PSQC", version, then named f64 tensors.
//! Optimizer state lives under the reserved "adam/" name prefix and
//! metadata under "meta/".

use super::Tensor;
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PSQC";
const VERSION: u32 = 1;

pub fn write_checkpoint(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[tensor.shape().len() as u8])?;
        for d in tensor.shape() {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Malformed {
            line: 0,
            msg: "bad checkpoint magic".into(),
        });
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Malformed {
            line: 0,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Malformed {
            line: 0,
            msg: "non-utf8 tensor name".into(),
        })?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        entries.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(entries)
}

/// Encode a short string as a rank-1 tensor of code points, for metadata
/// entries like "meta/arch".
pub fn string_tensor(s: &str) -> Tensor {
    let data: Vec<f64> = s.chars().map(|c| c as u32 as f64).collect();
    Tensor::from_vec(&[data.len()], data).expect("rank-1 shape always consistent")
}

pub fn tensor_string(t: &Tensor) -> String {
    t.data()
        .iter()
        .filter_map(|&v| char::from_u32(v as u32))
        .collect()
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_named_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.psqc");
        let a = Tensor::from_vec(&[2, 2], vec![1.0, -0.5, 3.25, 0.0]).unwrap();
        let b = string_tensor("plain");
        write_checkpoint(&path, &[("w".into(), &a), ("meta/arch".into(), &b)]).unwrap();
        let entries = read_checkpoint(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].1, a);
        assert_eq!(tensor_string(&entries[1].1), "plain");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
