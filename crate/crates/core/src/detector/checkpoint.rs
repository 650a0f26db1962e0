//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `LPDCKPT\0`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the UTF-8 JSON header, then
//! every parameter tensor's values as little-endian IEEE-754 `f64` in
//! header order. Values round-trip bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DetectorConfig, DetectorParams, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

const MAGIC: &[u8; 8] = b"LPDCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub detector: DetectorConfig,
    pub params: DetectorParams,
    pub iteration: usize,
    pub train: TrainConfig,
    /// Species names; entry `k` is classifier class `k + 1`.
    pub vocabulary: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    detector: DetectorConfig,
    iteration: usize,
    train: TrainConfig,
    vocabulary: Vec<String>,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        detector: ckpt.detector.clone(),
        iteration: ckpt.iteration,
        train: ckpt.train.clone(),
        vocabulary: ckpt.vocabulary.clone(),
        tensors: ckpt
            .params
            .tensors()
            .iter()
            .zip(PARAM_NAMES)
            .map(|(t, name)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * ckpt.params.num_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in ckpt.params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20 + header_len)
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
    header.detector.validate()?;
    let mut offset = 20 + header_len;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 8 * n)
            .ok_or_else(|| bad(format!("truncated tensor {}", entry.name)))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::from_vec(&entry.shape, values)?);
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
    }
    let params = DetectorParams::from_tensors(&header.detector, tensors)?;
    if header.vocabulary.len() != header.detector.num_classes {
        return Err(bad(format!(
            "vocabulary has {} species, classifier has {}",
            header.vocabulary.len(),
            header.detector.num_classes
        )));
    }
    Ok(Checkpoint {
        detector: header.detector,
        params,
        iteration: header.iteration,
        train: header.train,
        vocabulary: header.vocabulary,
    })
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ckpt)?).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let detector = DetectorConfig::desk(2);
        let mut params = DetectorParams::init(&detector, 9);
        params.tensors_mut()[0].data_mut()[0] = f64::MIN_POSITIVE / 3.0;
        params.tensors_mut()[1].data_mut()[0] = -0.0;
        let ckpt = Checkpoint {
            detector,
            params,
            iteration: 42,
            train: TrainConfig::default(),
            vocabulary: vec!["a".into(), "b".into()],
        };
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        for (a, b) in ckpt.params.tensors().iter().zip(back.params.tensors()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back, ckpt);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let detector = DetectorConfig::desk(1);
        let ckpt = Checkpoint {
            params: DetectorParams::zeros(&detector),
            detector,
            iteration: 0,
            train: TrainConfig::default(),
            vocabulary: vec!["a".into()],
        };
        let bytes = encode_checkpoint(&ckpt).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint(b"not a checkpoint at all").is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(decode_checkpoint(&longer).is_err());
    }
}
