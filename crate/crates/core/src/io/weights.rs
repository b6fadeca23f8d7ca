//! The S4FW tensor container.
//!
//! ```text
//! "S4FW"  version:u32  count:u32
//! count x { name_len:u32 name dtype:u8 rank:u8 <pad to 8> dims:u64*rank payload <pad to 8> }
//! crc32:u32   (over every preceding byte)
//! ```
//!
//! All integers and payload values are little-endian. Records are sorted by
//! name and padding is zero-filled, so equal contents give equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::network::{FusionConfig, ModelWeights};
use crate::params::Params;
use crate::tensor::{DType, Tensor};

pub const MAGIC: [u8; 4] = *b"S4FW";
pub const VERSION: u32 = 1;
const ALIGN: usize = 8;

fn pad(out: &mut Vec<u8>) {
    out.resize(out.len().next_multiple_of(ALIGN), 0);
}

/// Serialises named tensors, storing every payload as `dtype`.
pub fn encode_tensors(tensors: &BTreeMap<String, Tensor>, dtype: DType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| Error::WeightFormat("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let name_len = u32::try_from(name.len()).map_err(|_| Error::WeightFormat(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::WeightFormat(format!("rank of `{name}` exceeds 255")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype.code());
        out.push(rank);
        pad(&mut out);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match dtype {
            DType::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            DType::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        }
        pad(&mut out);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::WeightFormat(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn align(&mut self) -> Result<()> {
        let target = self.pos.next_multiple_of(ALIGN);
        let gap = self.take(target - self.pos, "padding")?;
        if gap.iter().any(|&b| b != 0) {
            return Err(Error::WeightFormat("non-zero padding".into()));
        }
        Ok(())
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        let mut m = [0u8; 4];
        let n = bytes.len().min(4);
        m[..n].copy_from_slice(&bytes[..n]);
        return Err(Error::BadMagic(m));
    }
    if bytes.len() < 16 {
        return Err(Error::WeightFormat("file shorter than its fixed header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader { bytes: body, pos: 8 };
    let count = r.u32("tensor count")?;
    let mut out = BTreeMap::new();
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::WeightFormat("tensor name is not UTF-8".into()))?
            .to_string();
        if prev.as_ref().is_some_and(|p| p >= &name) {
            return Err(Error::WeightFormat(format!("tensor `{name}` is out of order or duplicated")));
        }
        let code = r.u8("dtype")?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::WeightFormat(format!("unknown dtype code {code} for `{name}`")))?;
        let rank = r.u8("rank")? as usize;
        r.align()?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(r.take(8, "extent")?.try_into().unwrap());
            shape.push(usize::try_from(d).map_err(|_| Error::WeightFormat(format!("extent {d} too large")))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::WeightFormat(format!("`{name}` is too large")))?;
        let raw = r.take(n, "payload")?;
        let data: Vec<f64> = match dtype {
            DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        };
        r.align()?;
        let t = Tensor::new(shape, data).map_err(|e| Error::WeightFormat(format!("`{name}`: {e}")))?;
        prev = Some(name.clone());
        out.insert(name, t);
    }
    if r.pos != body.len() {
        return Err(Error::WeightFormat(format!("{} trailing bytes after the last record", body.len() - r.pos)));
    }
    Ok(out)
}

pub fn save_tensors(path: impl AsRef<Path>, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    atomic_write(path, &encode_tensors(tensors, DType::F64)?)
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::at_path(path, e))?;
    decode_tensors(&bytes)
}

pub fn weights_save(path: impl AsRef<Path>, weights: &ModelWeights) -> Result<()> {
    save_tensors(path, &weights.named_tensors()?)
}

/// Loads and checks every tensor against the extents implied by `cfg`.
pub fn weights_load(path: impl AsRef<Path>, cfg: &FusionConfig) -> Result<ModelWeights> {
    ModelWeights::from_tensors(cfg, load_tensors(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("b.w".to_string(), Tensor::from_fn(&[2, 3], |k| k as f64 * 0.1 - 0.2));
        m.insert("a".to_string(), Tensor::scalar(-1.5));
        m.insert("c".to_string(), Tensor::from_vec(vec![f64::MIN_POSITIVE, 1e300, -0.0]));
        m
    }

    #[test]
    fn scalar_record_layout() {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), Tensor::scalar(2.0));
        let b = encode_tensors(&m, DType::F64).unwrap();
        // 12 header + 4 name_len + 1 name + 2 dtype/rank = 19, padded to 24
        assert_eq!(b.len(), 24 + 8 + 4);
        assert_eq!(&b[..4], b"S4FW");
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!((b[16], b[17], b[18]), (b'a', 1, 0));
        assert_eq!(&b[24..32], &2.0f64.to_le_bytes());
        assert_eq!(&b[32..], &crc32fast::hash(&b[..32]).to_le_bytes());
    }

    #[test]
    fn roundtrip_bit_identical() {
        let m = sample();
        let b = encode_tensors(&m, DType::F64).unwrap();
        let back = decode_tensors(&b).unwrap();
        for (k, t) in &m {
            let u = &back[k];
            assert_eq!(t.shape(), u.shape());
            assert!(t.data().iter().zip(u.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(encode_tensors(&back, DType::F64).unwrap(), b);
        assert_eq!(b.len() % 8, 4);
    }

    #[test]
    fn f32_payloads_load_as_f64() {
        let mut m = BTreeMap::new();
        m.insert("x".to_string(), Tensor::from_vec(vec![0.5, -3.25, 7.0]));
        let back = decode_tensors(&encode_tensors(&m, DType::F32).unwrap()).unwrap();
        assert_eq!(back["x"], m["x"]);
    }

    #[test]
    fn distinct_errors() {
        let b = encode_tensors(&sample(), DType::F64).unwrap();

        let mut corrupt = b.clone();
        *corrupt.last_mut().unwrap() ^= 0x01;
        assert!(matches!(decode_tensors(&corrupt), Err(Error::Checksum { .. })));

        let mut payload = b.clone();
        payload[30] ^= 0x10;
        assert!(matches!(decode_tensors(&payload), Err(Error::Checksum { .. })));

        let mut magic = b.clone();
        magic[0] = b'X';
        assert!(matches!(decode_tensors(&magic), Err(Error::BadMagic(m)) if &m == b"X4FW"));

        let mut version = b.clone();
        version[4] = 2;
        assert!(matches!(decode_tensors(&version), Err(Error::UnsupportedVersion(2))));

        assert!(matches!(decode_tensors(b"S4"), Err(Error::BadMagic(_))));
    }

    fn reseal(mut body: Vec<u8>) -> Vec<u8> {
        let crc = crc32fast::hash(&body);
        body.extend_from_slice(&crc.to_le_bytes());
        body
    }

    #[test]
    fn structural_errors_behind_a_valid_checksum() {
        let b = encode_tensors(&sample(), DType::F64).unwrap();
        let body = b[..b.len() - 4].to_vec();

        let mut truncated = body.clone();
        truncated.truncate(body.len() - 8);
        assert!(matches!(decode_tensors(&reseal(truncated)), Err(Error::WeightFormat(m)) if m.contains("truncated")));

        let mut dtype = body.clone();
        dtype[17] = 9; // dtype byte of the first record ("a")
        assert!(matches!(decode_tensors(&reseal(dtype)), Err(Error::WeightFormat(m)) if m.contains("dtype")));

        let mut extra = body.clone();
        extra.extend_from_slice(&[0; 8]);
        assert!(matches!(decode_tensors(&reseal(extra)), Err(Error::WeightFormat(m)) if m.contains("trailing")));
    }

    #[test]
    fn weights_file_roundtrip_and_extent_check() {
        let cfg = FusionConfig {
            n_layers: 2,
            k_blocks: 1,
            vss_counts: vec![1, 1],
            channels: vec![4, 8],
            hidden: 3,
            seed: 5,
            ..FusionConfig::default()
        };
        let w = ModelWeights::init(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.s4fw");
        weights_save(&p, &w).unwrap();
        let first = std::fs::read(&p).unwrap();
        assert_eq!(weights_load(&p, &cfg).unwrap(), w);
        weights_save(&p, &weights_load(&p, &cfg).unwrap()).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);

        let wider = FusionConfig { channels: vec![4, 12], ..cfg.clone() };
        assert!(matches!(weights_load(&p, &wider), Err(Error::Extent { .. })));
        let deeper = FusionConfig { k_blocks: 2, ..cfg };
        assert!(matches!(weights_load(&p, &deeper), Err(Error::MissingTensor(_))));
    }
}
