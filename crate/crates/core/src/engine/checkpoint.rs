//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic `MNLABCKP`, `u32` format version, `u64` header
//! length, a UTF-8 JSON header (graph, dtype, tensor table), then the
//! tensor blobs as little-endian floats in table order. All integers are
//! little-endian.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::ArchGraph;
use crate::scalar::{DType, Scalar};

use super::{ModelState, Moments, Param, Tensor, TensorError};

pub const MAGIC: &[u8; 8] = b"MNLABCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Slot {
    Param,
    Buffer,
    FirstMoment,
    SecondMoment,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    slot: Slot,
    shape: Vec<usize>,
    #[serde(default)]
    decay: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: DType,
    seed: u64,
    step: u64,
    graph: ArchGraph,
    tensors: Vec<Entry>,
}

pub fn to_bytes<T: Scalar>(g: &ArchGraph, state: &ModelState<T>) -> Result<Vec<u8>, TensorError> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    let mut push = |name: &str, slot: Slot, t: &Tensor<T>, decay: bool| {
        tensors.push(Entry {
            name: name.to_string(),
            slot,
            shape: t.shape().to_vec(),
            decay,
        });
        for &v in t.data() {
            v.write_le(&mut blob);
        }
    };
    for (k, p) in &state.params {
        push(k, Slot::Param, &p.value, p.decay);
    }
    for (k, b) in &state.buffers {
        push(k, Slot::Buffer, b, false);
    }
    for (k, m) in &state.moments {
        push(k, Slot::FirstMoment, &m.first, false);
        push(k, Slot::SecondMoment, &m.second, false);
    }
    let header = Header {
        version: FORMAT_VERSION,
        dtype: T::DTYPE,
        seed: state.seed,
        step: state.step,
        graph: g.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Parses a checkpoint, converting stored elements to `T` if the dtype differs.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(ArchGraph, ModelState<T>), TensorError> {
    let bad = |m: &str| TensorError::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let hend = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..hend])?;
    header
        .graph
        .validate()
        .map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    let width = header.dtype.size();
    let mut off = hend;
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    let mut firsts: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    let mut seconds: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let end = off + n * width;
        if end > bytes.len() {
            return Err(TensorError::Checkpoint(format!("truncated tensor `{}`", e.name)));
        }
        let data: Vec<T> = bytes[off..end]
            .chunks_exact(width)
            .map(|c| match header.dtype {
                DType::F32 => T::of(f32::read_le(c) as f64),
                DType::F64 => T::of(f64::read_le(c)),
            })
            .collect();
        off = end;
        let t = Tensor::from_vec(&e.shape, data)?;
        match e.slot {
            Slot::Param => {
                params.insert(
                    e.name,
                    Param {
                        value: t,
                        grad: None,
                        decay: e.decay,
                    },
                );
            }
            Slot::Buffer => {
                buffers.insert(e.name, t);
            }
            Slot::FirstMoment => {
                firsts.insert(e.name, t);
            }
            Slot::SecondMoment => {
                seconds.insert(e.name, t);
            }
        }
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let mut moments = BTreeMap::new();
    for (k, first) in firsts {
        let second = seconds.remove(&k).ok_or_else(|| bad("unpaired moment"))?;
        moments.insert(k, Moments { first, second });
    }
    let state = ModelState {
        params,
        buffers,
        moments,
        seed: header.seed,
        step: header.step,
    };
    state.check_shapes(&header.graph)?;
    Ok((header.graph, state))
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, g: &ArchGraph, state: &ModelState<T>) -> Result<(), TensorError> {
    let bytes = to_bytes(g, state)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<(ArchGraph, ModelState<T>), TensorError> {
    from_bytes(&std::fs::read(path)?)
}

/// Element type recorded in a checkpoint header.
pub fn stored_dtype(path: impl AsRef<Path>) -> Result<DType, TensorError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(
        bytes
            .get(20..20 + hlen)
            .ok_or(TensorError::Checkpoint("truncated header".into()))?,
    )?;
    Ok(header.dtype)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::build_micro_cnn;
    use crate::engine::InitOptions;

    #[test]
    fn round_trip_is_exact() {
        let g = build_micro_cnn(&[4, 8], 3);
        let mut s = ModelState::<f32>::init(&g, 9, InitOptions::default());
        s.step = 17;
        s.moments.insert(
            "s1.conv.weight".into(),
            Moments {
                first: Tensor::filled(&[4, 3, 3, 3], 0.25),
                second: Tensor::filled(&[4, 3, 3, 3], 0.5),
            },
        );
        let bytes = to_bytes(&g, &s).unwrap();
        let (g2, s2) = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(g, g2);
        assert_eq!(s, s2);
        assert_eq!(to_bytes(&g2, &s2).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let g = build_micro_cnn(&[4], 2);
        let s = ModelState::<f64>::init(&g, 0, InitOptions::default());
        let mut bytes = to_bytes(&g, &s).unwrap();
        bytes.pop();
        assert!(from_bytes::<f64>(&bytes).is_err());
        bytes[0] = b'X';
        assert!(from_bytes::<f64>(&bytes).is_err());
    }

    #[test]
    fn widens_f32_to_f64() {
        let g = build_micro_cnn(&[4], 2);
        let s = ModelState::<f32>::init(&g, 3, InitOptions::default());
        let (_, wide) = from_bytes::<f64>(&to_bytes(&g, &s).unwrap()).unwrap();
        let key = "s1.conv.weight";
        assert_eq!(
            wide.param(key).unwrap().data()[0],
            s.param(key).unwrap().data()[0] as f64
        );
    }
}
