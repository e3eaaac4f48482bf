//! The `NRB1` array container.
//!
//! Layout: magic `NRB1`, `u32` LE rank, `rank` x `u32` LE dims, then the
//! row-major payload as `f64` LE. Used for images, kernels, latents,
//! perturbations and codebooks.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Kernel4, Shape3, Tensor};

pub const MAGIC: &[u8; 4] = b"NRB1";

/// An array of arbitrary rank as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawArray {
    pub dims: Vec<u32>,
    pub data: Vec<f64>,
}

impl RawArray {
    pub fn new(dims: Vec<u32>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().map(|&d| d as usize).product();
        if n != data.len() {
            return Err(Error::shape("NRB1 payload", n, data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn encoded_len(&self) -> usize {
        8 + 4 * self.dims.len() + 8 * self.data.len()
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for d in &self.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Decodes one array from the front of `bytes`, returning it and the bytes consumed.
    pub fn decode(bytes: &[u8]) -> std::result::Result<(Self, usize), String> {
        let mut cur = bytes;
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(|_| "truncated header".to_string())?;
        if &magic != MAGIC {
            return Err(format!("bad magic {magic:?}"));
        }
        let rank = read_u32(&mut cur)? as usize;
        if rank > 16 {
            return Err(format!("implausible rank {rank}"));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut cur)?);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or("element count overflows")?;
        let need = n.checked_mul(8).ok_or("payload size overflows")?;
        if cur.len() < need {
            return Err(format!("payload truncated: need {need} bytes, have {}", cur.len()));
        }
        let data = cur[..need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let used = 8 + 4 * rank + need;
        Ok((Self { dims, data }, used))
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        Self {
            dims: vec![s.c as u32, s.h as u32, s.w as u32],
            data: t.data().to_vec(),
        }
    }

    pub fn into_tensor(self) -> Result<Tensor> {
        match self.dims[..] {
            [c, h, w] => Tensor::new(Shape3::new(c as usize, h as usize, w as usize), self.data),
            _ => Err(Error::shape("NRB1 tensor rank", 3, self.dims.len())),
        }
    }

    pub fn from_kernel(k: &Kernel4) -> Self {
        Self {
            dims: k.dims().iter().map(|&d| d as u32).collect(),
            data: k.data().to_vec(),
        }
    }

    pub fn into_kernel(self) -> Result<Kernel4> {
        match self.dims[..] {
            [o, i, kh, kw] => Kernel4::new(o as usize, i as usize, kh as usize, kw as usize, self.data),
            _ => Err(Error::shape("NRB1 kernel rank", 4, self.dims.len())),
        }
    }
}

fn read_u32(cur: &mut &[u8]) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    cur.read_exact(&mut b).map_err(|_| "truncated header".to_string())?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_array(path: &Path) -> Result<RawArray> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })?;
    let (arr, used) = RawArray::decode(&bytes).map_err(|reason| Error::Format {
        path: path.to_owned(),
        reason,
    })?;
    if used != bytes.len() {
        return Err(Error::Format {
            path: path.to_owned(),
            reason: format!("{} trailing bytes", bytes.len() - used),
        });
    }
    Ok(arr)
}

pub fn write_array(path: &Path, arr: &RawArray) -> Result<()> {
    std::fs::write(path, arr.to_bytes()).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    read_array(path)?.into_tensor()
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_array(path, &RawArray::from_tensor(t))
}

/// Reads every `*.nrb` file in `dir`, ordered by the numeric value of the file stem.
pub fn read_tensor_dir(dir: &Path) -> Result<Vec<Tensor>> {
    let io_err = |source| Error::Io {
        path: dir.to_owned(),
        source,
    };
    let mut entries = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err)? {
        let path = entry.map_err(io_err)?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("nrb") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let index: u64 = stem.parse().map_err(|_| Error::Format {
            path: path.clone(),
            reason: "frame file names must be numeric".into(),
        })?;
        entries.push((index, path));
    }
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Format {
            path: dir.to_owned(),
            reason: "no .nrb files".into(),
        });
    }
    entries.iter().map(|(_, p)| read_tensor(p)).collect()
}

/// Writes tensors as `00000.nrb`, `00001.nrb`, ...
pub fn write_tensor_dir(dir: &Path, tensors: &[Tensor]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_owned(),
        source,
    })?;
    for (i, t) in tensors.iter().enumerate() {
        write_tensor(&dir.join(format!("{i:05}.nrb")), t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(Shape3::new(1, 1, 2), vec![1.0, -0.5]).unwrap();
        let bytes = RawArray::from_tensor(&t).to_bytes();
        let mut expect = b"NRB1".to_vec();
        for v in [3u32, 1, 1, 2] {
            expect.extend_from_slice(&v.to_le_bytes());
        }
        expect.extend_from_slice(&1.0f64.to_le_bytes());
        expect.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(RawArray::decode(b"NRB2\0\0\0\0").is_err());
        let mut bytes = RawArray::new(vec![2], vec![1.0, 2.0]).unwrap().to_bytes();
        bytes.pop();
        assert!(RawArray::decode(&bytes).is_err());
    }

    #[test]
    fn directory_order_is_numeric() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |v: f64| Tensor::new(Shape3::new(1, 1, 1), vec![v]).unwrap();
        write_tensor(&dir.path().join("10.nrb"), &mk(10.0)).unwrap();
        write_tensor(&dir.path().join("9.nrb"), &mk(9.0)).unwrap();
        write_tensor(&dir.path().join("0002.nrb"), &mk(2.0)).unwrap();
        let got: Vec<f64> = read_tensor_dir(dir.path()).unwrap().iter().map(|t| t.data()[0]).collect();
        assert_eq!(got, vec![2.0, 9.0, 10.0]);
    }

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(dims in prop::collection::vec(1u32..4, 0..5), seed in any::<u64>()) {
            let n: usize = dims.iter().map(|&d| d as usize).product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
            let arr = RawArray::new(dims, data).unwrap();
            let (back, used) = RawArray::decode(&arr.to_bytes()).unwrap();
            prop_assert_eq!(used, arr.encoded_len());
            prop_assert_eq!(back.dims, arr.dims);
            prop_assert!(back.data.iter().zip(&arr.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
