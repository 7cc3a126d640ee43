use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, StackedLstm};
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

const CHECKPOINT_FORMAT: &str = "partsmine-lstm/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub seed: u64,
    pub config: EncoderConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Writes one tensor container per parameter plus `manifest.json`.
/// Parameters are stored as 32-bit floats.
pub fn save_checkpoint(dir: impl AsRef<Path>, net: &StackedLstm, cfg: &EncoderConfig, seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for (name, shape, data) in net.tensors() {
        let file = format!("{name}.pmt");
        Tensor3::new(1, shape[0], shape[1], data.to_vec())?.save(dir.join(&file))?;
        tensors.push(TensorEntry {
            name: name.into(),
            file,
            shape,
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        input_dim: net.input_dim(),
        hidden: net.hidden(),
        classes: net.classes,
        seed,
        config: cfg.clone(),
        tensors,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(StackedLstm, CheckpointManifest)> {
    let dir = dir.as_ref();
    let m: CheckpointManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format {:?}", m.format)));
    }
    let mut net = StackedLstm::zeros(m.input_dim, m.hidden, m.classes);
    let expected: Vec<(&str, [usize; 2])> = net.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
    if m.tensors.len() != expected.len() {
        return Err(Error::CorruptModel(format!("{} tensors in manifest, expected {}", m.tensors.len(), expected.len())));
    }
    let mut loaded = Vec::new();
    for (entry, (name, shape)) in m.tensors.iter().zip(expected) {
        if entry.name != name || entry.shape != shape {
            return Err(Error::CorruptModel(format!("tensor {} {:?}, expected {name} {shape:?}", entry.name, entry.shape)));
        }
        let t = Tensor3::load(dir.join(&entry.file))?;
        if (t.channels(), t.height(), t.width()) != (1, shape[0], shape[1]) {
            return Err(Error::CorruptModel(format!("tensor file {} has the wrong shape", entry.file)));
        }
        loaded.push(t.into_data());
    }
    for (buf, data) in net.buffers_mut().into_iter().zip(loaded) {
        buf.copy_from_slice(&data);
    }
    net.validate()?;
    Ok((net, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = StackedLstm::init(3, 4, 2, &mut stream(1, "init")).unwrap();
        let cfg = EncoderConfig::default();
        save_checkpoint(dir.path().join("a"), &net, &cfg, 7).unwrap();
        let (back, m) = load_checkpoint(dir.path().join("a")).unwrap();
        assert_eq!((m.seed, m.hidden, m.tensors.len()), (7, 4, 8));
        for ((_, _, a), (_, _, b)) in net.tensors().into_iter().zip(back.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        save_checkpoint(dir.path().join("b"), &back, &cfg, 7).unwrap();
        for e in &m.tensors {
            assert_eq!(fs::read(dir.path().join("a").join(&e.file)).unwrap(), fs::read(dir.path().join("b").join(&e.file)).unwrap());
        }
    }

    #[test]
    fn tampered_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let net = StackedLstm::init(3, 4, 2, &mut stream(1, "init")).unwrap();
        save_checkpoint(dir.path(), &net, &EncoderConfig::default(), 7).unwrap();
        let path = dir.path().join("manifest.json");
        let text = fs::read_to_string(&path).unwrap().replace("\"hidden\": 4", "\"hidden\": 5");
        fs::write(&path, text).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
