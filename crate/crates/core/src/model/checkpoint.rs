//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `CATFLOW1`, a little-endian `u64` header length,
//! the JSON header, a `u64` array count, then per array: `u64` name length,
//! UTF-8 name, `u64` rank, `rank` x `u64` dims and the `f64` data, all
//! little-endian.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"CATFLOW1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    /// Run configuration as written by the user (TOML text).
    pub config: String,
    pub seed: u64,
    pub step: u64,
    /// Anything else needed to rebuild the run.
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub arrays: Vec<(String, Tensor)>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|_| corrupt("truncated file"))?;
    Ok(u64::from_le_bytes(buf))
}

/// Length prefix with a sanity bound so corrupt files cannot request huge buffers.
fn read_len(r: &mut impl Read, what: &str) -> Result<usize> {
    let n = read_u64(r)?;
    if n > (1 << 40) {
        return Err(corrupt(format!("implausible {what} {n}")));
    }
    Ok(n as usize)
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| corrupt(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| corrupt("truncated file"))?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic; not a checkpoint file"));
        }
        let header_len = read_len(&mut r, "header length")?;
        if header_len > r.len() {
            return Err(corrupt("truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&r[..header_len]).map_err(|e| corrupt(format!("header: {e}")))?;
        r = &r[header_len..];
        let count = read_len(&mut r, "array count")?;
        let mut arrays = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = read_len(&mut r, "name length")?;
            if name_len > r.len() {
                return Err(corrupt("truncated array name"));
            }
            let name = std::str::from_utf8(&r[..name_len])
                .map_err(|_| corrupt("array name is not UTF-8"))?
                .to_string();
            r = &r[name_len..];
            let rank = read_len(&mut r, "rank")?;
            let shape = (0..rank)
                .map(|_| read_len(&mut r, "dimension"))
                .collect::<Result<Vec<usize>>>()?;
            let n: usize = shape.iter().product();
            if n.checked_mul(8).is_none_or(|b| b > r.len()) {
                return Err(corrupt(format!("truncated data for {name}")));
            }
            let data = r[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            r = &r[n * 8..];
            arrays.push((name, Tensor::new(shape, data)?));
        }
        if !r.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { header, arrays })
    }

    /// Write through a temporary file and rename, so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                config: "seed = 3\n".into(),
                seed: 3,
                step: 17,
                meta: serde_json::json!({"objective": "catflow"}),
            },
            arrays: vec![
                (
                    "w".into(),
                    Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
                ),
                ("s".into(), Tensor::scalar(0.1 + 0.2)),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.header, c.header);
        for ((n1, a), (n2, b)) in back.arrays.iter().zip(&c.arrays) {
            assert_eq!(n1, n2);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
