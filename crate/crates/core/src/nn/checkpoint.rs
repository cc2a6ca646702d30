//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PSLW" | version: u16 | record count: u16
//! per record: layer index: u16 | rank: u8 | dims: rank x u32 | payload: f64 LE
//! ```
//!
//! Each parameterized layer is stored as two consecutive records sharing a
//! layer index: the weight tensor followed by the bias tensor.

use std::io::{Read, Write};

use super::params::{LayerParams, ParameterSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PSLW";
pub const VERSION: u16 = 1;

pub fn write_checkpoint<W: Write>(params: &ParameterSet, mut w: W) -> Result<()> {
    let records = params.layer_count() * 2;
    let count = u16::try_from(records)
        .map_err(|_| Error::format(format!("{records} records exceed the u16 header field")))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    for (idx, layer) in params.iter() {
        let idx = u16::try_from(idx)
            .map_err(|_| Error::format(format!("layer index {idx} exceeds u16")))?;
        for t in [&layer.weight, &layer.bias] {
            w.write_all(&idx.to_le_bytes())?;
            w.write_all(&[t.rank() as u8])?;
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::format("dimension exceeds u32"))?;
                w.write_all(&d.to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn to_bytes(params: &ParameterSet) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(format!("checkpoint truncated while reading {what}")))
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(u16, Tensor)> {
    let mut b2 = [0u8; 2];
    read_exact(r, &mut b2, "layer index")?;
    let idx = u16::from_le_bytes(b2);
    let mut b1 = [0u8; 1];
    read_exact(r, &mut b1, "rank")?;
    let mut shape = Vec::with_capacity(b1[0] as usize);
    for _ in 0..b1[0] {
        let mut b4 = [0u8; 4];
        read_exact(r, &mut b4, "dims")?;
        shape.push(u32::from_le_bytes(b4) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut b8 = [0u8; 8];
    for _ in 0..n {
        read_exact(r, &mut b8, "payload")?;
        data.push(f64::from_le_bytes(b8));
    }
    let t = Tensor::new(shape, data).map_err(|e| Error::format(e.to_string()))?;
    Ok((idx, t))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParameterSet> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::format(format!("bad checkpoint magic {magic:?}")));
    }
    let mut b2 = [0u8; 2];
    read_exact(&mut r, &mut b2, "version")?;
    let version = u16::from_le_bytes(b2);
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    read_exact(&mut r, &mut b2, "record count")?;
    let count = u16::from_le_bytes(b2) as usize;
    if !count.is_multiple_of(2) {
        return Err(Error::format(
            "odd record count; expected weight/bias pairs",
        ));
    }
    let mut set = ParameterSet::new();
    for _ in 0..count / 2 {
        let (wi, weight) = read_tensor(&mut r)?;
        let (bi, bias) = read_tensor(&mut r)?;
        if wi != bi {
            return Err(Error::format(format!(
                "weight record for layer {wi} followed by bias for layer {bi}"
            )));
        }
        if set.get(wi as usize).is_some() {
            return Err(Error::format(format!("duplicate layer {wi}")));
        }
        set.insert(wi as usize, LayerParams { weight, bias });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format("trailing bytes after last record"));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::LayerSpec;
    use crate::nn::network::NetworkSpec;
    use crate::nn::params::init_parameters;

    fn sample() -> ParameterSet {
        let spec = NetworkSpec::new(
            vec![1, 4, 4],
            vec![
                LayerSpec::Conv2d {
                    channels: 2,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 3 },
            ],
        );
        init_parameters(&spec, 4).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = to_bytes(&sample());
        assert_eq!(&bytes[..4], b"PSLW");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..8], &[4, 0]);
        // first record: layer 0, rank 4, dims 2,1,3,3
        assert_eq!(&bytes[8..11], &[0, 0, 4]);
        assert_eq!(&bytes[11..15], &2u32.to_le_bytes());
        let expected_len =
            8 + (3 + 16 + 18 * 8) + (3 + 4 + 2 * 8) + (3 + 8 + 96 * 8) + (3 + 4 + 3 * 8);
        assert_eq!(bytes.len(), expected_len);
    }

    #[test]
    fn round_trip_and_corruption() {
        let p = sample();
        let bytes = to_bytes(&p);
        assert!(read_checkpoint(bytes.as_slice()).unwrap().bitwise_eq(&p));
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_checkpoint(bad.as_slice()),
            Err(Error::Format(_))
        ));
        let mut long = bytes;
        long.push(0);
        assert!(read_checkpoint(long.as_slice()).is_err());
        assert!(read_checkpoint(&[][..]).is_err());
    }
}
