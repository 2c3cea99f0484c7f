//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BSPRUNE1"
//! u64 topology length, topology JSON (GraphRecord)
//! u64 tensor count, then per tensor:
//!   u32 name length, name (UTF-8)
//!   u8 dtype (0 = f32, 1 = f64), u8 rank, rank × u64 extents
//!   raw payload
//! ```

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, IoAt, Result};
use crate::graph::{GraphRecord, NetGraph};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BSPRUNE1";

pub fn encode_checkpoint<T: Scalar>(g: &NetGraph<T>) -> Result<Vec<u8>> {
    let (record, tensors) = g.to_record();
    let topology = serde_json::to_vec(&record)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(topology.len() as u64).to_le_bytes());
    out.extend_from_slice(&topology);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(format!("checkpoint ends inside {what}")))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

fn read_tensor<T: Scalar>(r: &mut Reader<'_>) -> Result<(String, Tensor<T>)> {
    let len = r.u32("tensor name")? as usize;
    let name = String::from_utf8(r.take(len, "tensor name")?.to_vec())
        .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
    let code = r.u8("tensor header")?;
    let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code} for {name}")))?;
    let rank = r.u8("tensor header")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u64("tensor extents")? as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| Error::Format(format!("extents of {name} overflow")))?;
    let bytes = count
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::Format(format!("payload of {name} overflows")))?;
    let payload = r.take(bytes, &format!("payload of {name}"))?;
    let data: Vec<T> = match dtype {
        DType::F32 => payload.chunks_exact(4).map(|c| T::from_f64(f32::read_le(c).as_f64())).collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
    };
    Ok((name, Tensor::new(shape, data)?))
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<NetGraph<T>> {
    let mut r = Reader { bytes, at: 0 };
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            actual: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let len = r.u64("topology length")? as usize;
    let topology = r.take(len, "topology")?;
    let record: GraphRecord = serde_json::from_slice(topology).map_err(|e| {
        Error::Format(format!(
            "unreadable topology ({e}); the checkpoint may come from a newer version"
        ))
    })?;
    let count = r.u64("tensor count")? as usize;
    let mut tensors = HashMap::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let (name, t) = read_tensor::<T>(&mut r)?;
        tensors.insert(name, t);
    }
    if r.at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    NetGraph::from_record(&record, &mut tensors)
}

pub fn save_checkpoint<T: Scalar>(g: &NetGraph<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(g)?;
    let mut f = std::fs::File::create(path).at(path)?;
    f.write_all(&bytes).at(path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<NetGraph<T>> {
    let path = path.as_ref();
    decode_checkpoint(&std::fs::read(path).at(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::decompose_all;
    use crate::graph::{build_template, replace_head, Template, WeightInit};

    fn sample() -> NetGraph {
        let g = build_template(Template::TinyResNet, [8, 8, 1], 2, WeightInit::HeNormal { seed: 3 }).unwrap();
        decompose_all(&replace_head(&g, 2, 3).unwrap(), 0.5).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let g = sample();
        let back: NetGraph = decode_checkpoint(&encode_checkpoint(&g).unwrap()).unwrap();
        assert_eq!(back.nodes(), g.nodes());
        assert_eq!(back.output(), g.output());
    }

    #[test]
    fn every_truncation_fails() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        for cut in [0, 4, 8, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode_checkpoint::<f32>(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn bad_magic_is_named() {
        let mut bytes = encode_checkpoint(&sample()).unwrap();
        bytes[7] = b'9';
        let err = decode_checkpoint::<f32>(&bytes).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
        assert!(err.to_string().contains("BSPRUNE9"));
    }

    #[test]
    fn unknown_kind_is_rejected() {
        let mut bytes = encode_checkpoint(&sample()).unwrap();
        let needle = b"\"kind\":\"relu\"";
        let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        bytes[at + 8] = b'g';
        let err = decode_checkpoint::<f32>(&bytes).unwrap_err();
        assert!(err.to_string().contains("newer version"), "{err}");
    }
}
