//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json   model config, vocabulary file, step, tensor groups
//! <dir>/vocab.txt       one token per line
//! <dir>/model.bin       little-endian f32 tensors, concatenated
//! <dir>/model.json      {name: {"offset": bytes, "shape": [rows, cols]}}
//! ```
//!
//! Optional extra groups (optimizer moments) use the same `<stem>.bin` /
//! `<stem>.json` pair.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::mat::Mat;
use super::model::{Model, ModelConfig};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::text::Vocab;

pub const MANIFEST: &str = "manifest.json";
pub const MODEL_STEM: &str = "model";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    pub vocab: String,
    pub step: u64,
    /// Extra tensor groups stored next to the model, by stem.
    #[serde(default)]
    pub extras: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexEntry {
    offset: u64,
    shape: [usize; 2],
}

/// Tensor index in insertion order; the JSON object keeps names sorted but
/// offsets record the blob order.
fn write_group(dir: &Path, stem: &str, store: &ParamStore) -> Result<()> {
    let mut blob = Vec::with_capacity(store.num_elements() * 4);
    let mut index = BTreeMap::new();
    for (name, t) in store.iter() {
        index.insert(
            name.to_string(),
            IndexEntry {
                offset: blob.len() as u64,
                shape: [t.rows(), t.cols()],
            },
        );
        for &x in t.data() {
            blob.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let bin = dir.join(format!("{stem}.bin"));
    std::fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
    let idx = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(&index).expect("index serializes");
    std::fs::write(&idx, json).map_err(|e| Error::io(&idx, e))
}

fn read_group(dir: &Path, stem: &str) -> Result<ParamStore> {
    let idx_path = dir.join(format!("{stem}.json"));
    let text = std::fs::read_to_string(&idx_path).map_err(|e| Error::io(&idx_path, e))?;
    let index: BTreeMap<String, IndexEntry> =
        serde_json::from_str(&text).map_err(|e| Error::malformed(&idx_path, e.line(), e.to_string()))?;
    let bin_path = dir.join(format!("{stem}.bin"));
    let blob = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut entries: Vec<(&String, &IndexEntry)> = index.iter().collect();
    entries.sort_by_key(|(_, e)| e.offset);
    let mut store = ParamStore::new();
    for (name, entry) in entries {
        let [rows, cols] = entry.shape;
        let start = entry.offset as usize;
        let end = start + rows * cols * 4;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!("tensor `{name}` runs past the end of {}", bin_path.display())));
        }
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        store.insert(name.clone(), Mat::from_vec(rows, cols, data))?;
    }
    Ok(store)
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: Model,
    pub vocab: Vocab,
}

pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    vocab: &Vocab,
    step: u64,
    extras: &[(&str, &ParamStore)],
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_group(dir, MODEL_STEM, &model.params)?;
    for (stem, store) in extras {
        if *stem == MODEL_STEM {
            return Err(Error::Checkpoint("extra group may not be named `model`".into()));
        }
        write_group(dir, stem, store)?;
    }
    vocab.save(&dir.join(VOCAB_FILE))?;
    let manifest = CheckpointManifest {
        model: model.config.clone(),
        vocab: VOCAB_FILE.to_string(),
        step,
        extras: extras.iter().map(|(s, _)| s.to_string()).collect(),
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::malformed(&path, e.line(), e.to_string()))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let params = read_group(dir, MODEL_STEM)?;
    let model = Model::from_params(manifest.model.clone(), params)?;
    let vocab_path: PathBuf = dir.join(&manifest.vocab);
    let vocab = Vocab::load(&vocab_path)?;
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    Ok(Checkpoint { manifest, model, vocab })
}

pub fn load_extra(dir: &Path, stem: &str) -> Result<ParamStore> {
    read_group(dir, stem)
}

/// Writes an encoder-only copy of the checkpoint at `src` to `dst`.
pub fn strip_decoder(src: &Path, dst: &Path) -> Result<()> {
    let ckpt = load_checkpoint(src)?;
    let encoder = ckpt.model.without_decoder();
    save_checkpoint(dst, &encoder, &ckpt.vocab, ckpt.manifest.step, &[])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::build_vocab;

    fn tiny() -> (Model, Vocab) {
        let vocab = build_vocab("a b c d e".split(' '), 1);
        let mut cfg = ModelConfig::desk(vocab.len(), vocab.first_output_id());
        cfg.hidden_size = 8;
        cfg.num_heads = 2;
        cfg.ffn_size = 16;
        cfg.encoder_layers = 1;
        cfg.max_position = 16;
        (Model::new(cfg).unwrap(), vocab)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (model, vocab) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        save_checkpoint(&a, &model, &vocab, 7, &[]).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded.model.params, model.params);
        assert_eq!(loaded.manifest.step, 7);
        save_checkpoint(&b, &loaded.model, &loaded.vocab, 7, &[]).unwrap();
        for f in ["model.bin", "model.json", "vocab.txt", "manifest.json"] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn stripped_checkpoint_has_no_decoder_tensors() {
        let (model, vocab) = tiny();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&dir.path().join("full"), &model, &vocab, 1, &[]).unwrap();
        strip_decoder(&dir.path().join("full"), &dir.path().join("enc")).unwrap();
        let enc = load_checkpoint(&dir.path().join("enc")).unwrap();
        assert!(!enc.model.has_decoder());
        assert!(enc.model.params.names().iter().all(|n| !n.starts_with("dec.")));
    }

    #[test]
    fn truncated_blob_is_an_error() {
        let (model, vocab) = tiny();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, &vocab, 1, &[]).unwrap();
        let bin = dir.path().join("model.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
    }
}
