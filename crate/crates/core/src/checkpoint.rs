//! Checkpoint directories: `manifest.json` plus `params.bin`, the latter
//! holding little-endian `f64` arrays for the parameters, then Adam's first
//! moments, then its second moments, each in manifest tensor order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::distill::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::params::ParamGroup;
use crate::tensor::Mat;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";
const SECTIONS: [&str; 3] = ["params", "adam_m", "adam_v"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: TrainConfig,
    pub step: u64,
    pub adam_steps: u64,
    pub best_valid: Option<f64>,
    pub bad_epochs: usize,
    pub vocab: Option<Vocab>,
    pub sections: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

pub fn save(dir: &Path, state: &TrainState, vocab: Option<&Vocab>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: state.cfg.clone(),
        step: state.step,
        adam_steps: state.adam.t,
        best_valid: state.best_valid,
        bad_epochs: state.bad_epochs,
        vocab: vocab.cloned(),
        sections: SECTIONS.iter().map(|s| s.to_string()).collect(),
        tensors: state
            .model
            .store
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                group: p.group,
                shape: [p.value.rows, p.value.cols],
            })
            .collect(),
    };
    let mut bytes = Vec::with_capacity(3 * 8 * state.model.store.num_scalars());
    let values = state.model.store.iter().map(|(_, p)| &p.value);
    for m in values.chain(&state.adam.m).chain(&state.adam.v) {
        for v in &m.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    // write data first so a manifest never points at a missing payload
    let params_path = dir.join(PARAMS);
    fs::write(&params_path, &bytes).map_err(|e| Error::io(&params_path, e))?;
    let manifest_path = dir.join(MANIFEST);
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n").map_err(|e| Error::io(&manifest_path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    if m.sections != SECTIONS {
        return Err(Error::Checkpoint(format!("unexpected sections {:?}", m.sections)));
    }
    Ok(m)
}

/// Rebuilds the training state (and vocabulary, if one was stored).
pub fn load(dir: &Path) -> Result<(TrainState, Option<Vocab>)> {
    let manifest = read_manifest(dir)?;
    let mut state = TrainState::new(&manifest.config)?;
    let store = &state.model.store;
    if store.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, the configured model has {}",
            manifest.tensors.len(),
            store.len()
        )));
    }
    for ((_, p), t) in store.iter().zip(&manifest.tensors) {
        if p.name != t.name || p.group != t.group || [p.value.rows, p.value.cols] != t.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match model tensor {} {:?}",
                t.name,
                t.shape,
                p.name,
                p.value.shape()
            )));
        }
    }

    let path = dir.join(PARAMS);
    let mut bytes = Vec::new();
    fs::File::open(&path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&path, e))?;
    let n = store.num_scalars();
    if bytes.len() != 3 * 8 * n {
        return Err(Error::Checkpoint(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            3 * 8 * n
        )));
    }
    let mut floats = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")));
    let mut fill = |m: &mut Mat<f64>| {
        for v in m.data.iter_mut() {
            *v = floats.next().expect("length checked above");
        }
    };
    for p in state.model.store.iter_mut() {
        fill(&mut p.value);
    }
    state.adam.m.iter_mut().for_each(&mut fill);
    state.adam.v.iter_mut().for_each(&mut fill);
    if !state.model.store.all_finite() {
        return Err(Error::Checkpoint("non-finite parameter values".into()));
    }
    state.step = manifest.step;
    state.adam.t = manifest.adam_steps;
    state.best_valid = manifest.best_valid;
    state.bad_epochs = manifest.bad_epochs;
    Ok((state, manifest.vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq2seq::ModelConfig;

    fn state() -> TrainState {
        let cfg = TrainConfig {
            model: ModelConfig {
                vocab_size: 12,
                d_model: 4,
                heads: 1,
                mapper_hidden: 4,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        let mut s = TrainState::new(&cfg).unwrap();
        s.step = 7;
        s.adam.t = 7;
        s.best_valid = Some(3.5);
        s.adam.m[0].data[0] = 0.25;
        s.adam.v[1].data[0] = 1e-9;
        s
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = state();
        let vocab = Vocab::from_words(["x", "y"]);
        save(dir.path(), &s, Some(&vocab)).unwrap();
        let (back, v) = load(dir.path()).unwrap();
        assert_eq!(back, s);
        assert_eq!(v, Some(vocab));
        let len = fs::metadata(dir.path().join(PARAMS)).unwrap().len();
        assert_eq!(len as usize, 24 * s.model.store.num_scalars());
    }

    #[test]
    fn rejects_damage() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &state(), None).unwrap();
        let p = dir.path().join(PARAMS);
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Checkpoint(_))));

        save(dir.path(), &state(), None).unwrap();
        let mp = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&mp).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&mp, text).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Checkpoint(_))));
        assert!(load(&dir.path().join("missing")).is_err());
    }
}
