//! Binary weight files.
//!
//! Layout: magic `DNNVLP01`, a u32 length and JSON descriptor, a u32 tensor
//! count, then per tensor a u16 name length, the name, a u8 rank, u32 dims
//! and little-endian f64 data.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelSpec, ModelWeights, TrainHistory};
use crate::error::{Error, Result};
use crate::fingerprint::NormStats;

pub const MAGIC: &[u8; 8] = b"DNNVLP01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Descriptor {
    spec: ModelSpec,
    init_seed: u64,
    train_seed: Option<u64>,
    epochs: usize,
    param_count: usize,
    format_version: u32,
}

fn push_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(w: &ModelWeights) -> Vec<u8> {
    let desc = Descriptor {
        spec: w.spec.clone(),
        init_seed: w.init_seed,
        train_seed: w.train_seed,
        epochs: w.history.train_mae.len(),
        param_count: w.params.len(),
        format_version: FORMAT_VERSION,
    };
    let json = serde_json::to_vec(&desc).expect("descriptor serializes");
    let mut out = Vec::with_capacity(64 + json.len() + 8 * w.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);

    let mut tensors: Vec<(String, Vec<usize>, &[f64])> = w.tensors();
    if let Some(n) = &w.norm {
        tensors.push(("norm.mean".into(), vec![9], &n.mean));
        tensors.push(("norm.std".into(), vec![9], &n.std));
    }
    let h = &w.history;
    tensors.push((
        "history.train_mae".into(),
        vec![h.train_mae.len()],
        &h.train_mae,
    ));
    tensors.push(("history.val_mae".into(), vec![h.val_mae.len()], &h.val_mae));
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in &tensors {
        push_tensor(&mut out, name, shape, data);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Format(format!(
                "weight file truncated at byte {}",
                self.at
            )));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode(buf: &[u8]) -> Result<ModelWeights> {
    let mut r = Reader { buf, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a weight file (bad magic)".into()));
    }
    let len = r.u32()? as usize;
    let desc: Descriptor = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Format(format!("bad descriptor: {e}")))?;
    if desc.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {}",
            desc.format_version
        )));
    }
    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let nlen = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if tensors.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    if r.at != buf.len() {
        return Err(Error::Format("trailing bytes after tensors".into()));
    }

    let mut w = super::model::build_model(&desc.spec, desc.init_seed)?;
    if w.params.len() != desc.param_count {
        return Err(Error::Format(format!(
            "descriptor declares {} parameters, architecture has {}",
            desc.param_count,
            w.params.len()
        )));
    }
    let mut params = Vec::with_capacity(w.params.len());
    for (name, shape, _) in w.tensors() {
        let (s, data) = tensors
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if s != shape {
            return Err(Error::Format(format!(
                "tensor {name} has shape {s:?}, expected {shape:?}"
            )));
        }
        params.extend(data);
    }
    w.params = params;
    w.train_seed = desc.train_seed;
    let mut vec9 = |name: &str| -> Result<Option<[f64; 9]>> {
        match tensors.remove(name) {
            None => Ok(None),
            Some((_, d)) => d
                .try_into()
                .map(Some)
                .map_err(|_| Error::Format(format!("tensor {name} must hold 9 values"))),
        }
    };
    w.norm = match (vec9("norm.mean")?, vec9("norm.std")?) {
        (Some(mean), Some(std)) => Some(NormStats { mean, std }),
        (None, None) => None,
        _ => return Err(Error::Format("incomplete normalization tensors".into())),
    };
    let mut hist = |name: &str| tensors.remove(name).map(|(_, d)| d).unwrap_or_default();
    w.history = TrainHistory {
        train_mae: hist("history.train_mae"),
        val_mae: hist("history.val_mae"),
    };
    if w.history.train_mae.len() != desc.epochs {
        return Err(Error::Format(
            "history length disagrees with descriptor".into(),
        ));
    }
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {name}")));
    }
    Ok(w)
}

pub fn save_weights(w: &ModelWeights, path: &Path) -> Result<()> {
    std::fs::write(path, encode(w)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::model::build_model;

    fn sample() -> ModelWeights {
        let mut w = build_model(&ModelSpec::unet(), 11).unwrap();
        w.train_seed = Some(4);
        w.norm = Some(NormStats {
            mean: [0.5; 9],
            std: [2.0; 9],
        });
        w.history = TrainHistory {
            train_mae: vec![1.0, 0.5],
            val_mae: vec![1.1, 0.6],
        };
        w
    }

    #[test]
    fn round_trip_is_exact() {
        let w = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.dnnw");
        save_weights(&w, &p).unwrap();
        let back = load_weights(&p).unwrap();
        assert_eq!(back, w);
        let x = [0.1, -0.2, 0.3, 0.0, 1.0, 2.0, -1.0, 0.5, 0.25];
        assert_eq!(back.predict(&x).unwrap(), w.predict(&x).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode(&sample());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        assert!(decode(b"").is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_weights(Path::new("/nonexistent/m.dnnw")).unwrap_err();
        assert!(!err.is_validation());
    }
}
