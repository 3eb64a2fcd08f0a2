//! Binary parameter checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "FXCK" | version: u16 | count: u32 |
//!   count x ( name_len: u16 | name: utf-8 | ndim: u8 | dims: ndim x u32 |
//!             payload: prod(dims) x f32 )
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FXCK";
const VERSION: u16 = 1;

pub type NamedTensor = (String, Tensor<f32>);

pub fn write_checkpoint(mut w: impl Write, params: &[NamedTensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(params.len())
        .map_err(|_| Error::invalid("too many parameters for a checkpoint"))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in params {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::invalid(format!("parameter name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let ndim = u8::try_from(t.shape().len())
            .map_err(|_| Error::invalid("tensor rank exceeds 255"))?;
        w.write_all(&[ndim])?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::invalid("extent exceeds u32"))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::format("checkpoint", format!("truncated: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Vec<NamedTensor>> {
    if &read_exact::<4>(&mut r)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = u16::from_le_bytes(read_exact(&mut r)?);
    if version != VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported version {version}"),
        ));
    }
    let count = u32::from_le_bytes(read_exact(&mut r)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::format("checkpoint", format!("truncated name: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format("checkpoint", "parameter name is not utf-8"))?;
        let ndim = read_exact::<1>(&mut r)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(read_exact(&mut r)?) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)
            .map_err(|e| Error::format("checkpoint", format!("truncated payload: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &[NamedTensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            raw in proptest::collection::vec(any::<u32>(), 1..64),
            split in 1usize..8,
        ) {
            // Arbitrary bit patterns, NaN payloads included.
            let data: Vec<f32> = raw.iter().map(|&b| f32::from_bits(b)).collect();
            let n = data.len();
            let rows = split.min(n);
            let params = vec![
                ("a.weight".to_string(), Tensor { shape: vec![n], data: data.clone() }),
                ("scalar".to_string(), Tensor { shape: vec![], data: vec![data[0]] }),
                ("m".to_string(), Tensor { shape: vec![rows, 1], data: data[..rows].to_vec() }),
            ];
            let mut bytes = Vec::new();
            write_checkpoint(&mut bytes, &params).unwrap();
            let back = read_checkpoint(bytes.as_slice()).unwrap();
            prop_assert_eq!(back.len(), params.len());
            for ((n0, t0), (n1, t1)) in params.iter().zip(&back) {
                prop_assert_eq!(n0, n1);
                prop_assert_eq!(t0.shape(), t1.shape());
                let b0: Vec<u32> = t0.data().iter().map(|v| v.to_bits()).collect();
                let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b0, b1);
            }
            let mut again = Vec::new();
            write_checkpoint(&mut again, &back).unwrap();
            prop_assert_eq!(bytes, again);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_checkpoint(&b"NOPE\x01\x00"[..]).is_err());
        let params = vec![("w".to_string(), Tensor::<f32>::zeros(vec![4]))];
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &params).unwrap();
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }
}
