//! Binary checkpoint: a magic line, one JSON header line (config,
//! vocabulary and a tensor manifest), then every tensor as little-endian
//! `f64` in row-major order.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::MoEModel;
use crate::params::ParamStore;
use crate::vocab::Vocab;

pub const MAGIC: &str = "MOEPRUNE1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    /// Offset in values from the start of the data section.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocab,
    manifest: Vec<TensorEntry>,
}

pub fn to_bytes(model: &MoEModel) -> Vec<u8> {
    let mut manifest = Vec::new();
    let mut offset = 0;
    for id in model.params.ids() {
        let v = model.params.value(id);
        manifest.push(TensorEntry {
            name: model.params.name(id).into(),
            shape: [v.nrows(), v.ncols()],
            offset,
        });
        offset += v.len();
    }
    let header = Header {
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        manifest,
    };
    let mut out = format!("{MAGIC}\n").into_bytes();
    out.extend(serde_json::to_vec(&header).expect("header serializes"));
    out.push(b'\n');
    out.reserve(offset * 8);
    for id in model.params.ids() {
        for x in model.params.value(id).iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<MoEModel> {
    let bad = |line: usize, msg: &str| Error::parse("checkpoint", line, msg);
    let mut lines = bytes.splitn(3, |&b| b == b'\n');
    if lines.next() != Some(MAGIC.as_bytes()) {
        return Err(bad(1, "missing MOEPRUNE1 magic"));
    }
    let header_bytes = lines.next().ok_or_else(|| bad(2, "missing header"))?;
    let data = lines.next().ok_or_else(|| bad(3, "missing tensor data"))?;
    let mut header: Header = serde_json::from_slice(header_bytes).map_err(|e| bad(2, &e.to_string()))?;
    header.vocab.rebuild_index();
    if data.len() % 8 != 0 {
        return Err(bad(3, "tensor data is not a whole number of f64 values"));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut store = ParamStore::default();
    for t in &header.manifest {
        let n = t.shape[0] * t.shape[1];
        let slice = values
            .get(t.offset..t.offset + n)
            .ok_or_else(|| bad(3, &format!("tensor `{}` runs past the end of the data", t.name)))?;
        let arr = Array2::from_shape_vec((t.shape[0], t.shape[1]), slice.to_vec()).expect("shape matches length");
        store.insert(t.name.clone(), arr);
    }
    MoEModel::from_params(header.config, header.vocab, store)
}

pub fn save(model: &MoEModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<MoEModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> MoEModel {
        let vocab = Vocab::new(vec!["aa".into(), "bb".into()], 10);
        let mut c = ModelConfig::toy(vocab.len());
        c.d_model = 8;
        c.d_ffn = 8;
        MoEModel::new(c, vocab, 9).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.config, m.config);
        assert_eq!(back.vocab.lang_id("bb").unwrap(), m.vocab.lang_id("bb").unwrap());
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = model();
        save(&m, &path).unwrap();
        assert_eq!(load(&path).unwrap().params, m.params);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = to_bytes(&model());
        assert!(from_bytes(b"MOEPRUNE0\n{}\n").is_err());
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }
}
