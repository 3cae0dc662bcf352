use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unter_core::Error;

/// Record of one command invocation, written as `<out>/run-<command>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    /// Input label to content hash (see [`hash_path`]).
    pub inputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn path(out: &Path, command: &str) -> PathBuf {
        out.join(format!("run-{command}.json"))
    }

    pub fn write(&self, out: &Path) -> Result<PathBuf, Error> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = Self::path(out, &self.command);
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.line(), e.to_string()))
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of `blob <len>\0<bytes>`, as git does for file objects.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

/// Blob hash for a file; for a directory, the hash of a sorted
/// `<hash> <relative path>` listing of every file below it. Run manifests
/// are skipped since their timestamps change on every run.
pub fn hash_path(path: &Path) -> Result<String, Error> {
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if !meta.is_dir() {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        return Ok(blob_hash(&bytes));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut listing = String::new();
    for rel in files {
        let hash = hash_path(&path.join(&rel))?;
        listing.push_str(&format!("{hash} {}\n", rel.display()));
    }
    let mut h = Sha256::new();
    h.update(format!("tree {}\0", listing.len()).as_bytes());
    h.update(listing.as_bytes());
    Ok(hex(&h.finalize()))
}

fn is_manifest(path: &Path) -> bool {
    let name = path.file_name().unwrap_or_default().to_string_lossy();
    name.starts_with("run-") && name.ends_with(".json")
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), Error> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if !is_manifest(&path) {
            out.push(path.strip_prefix(root).expect("below root").to_path_buf());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_sha256_object_format() {
        // printf 'blob 0\0' | sha256sum
        assert_eq!(blob_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
    }

    #[test]
    fn directory_hash_ignores_creation_order() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        std::fs::write(a.path().join("x"), "1").unwrap();
        std::fs::write(a.path().join("y"), "2").unwrap();
        std::fs::write(b.path().join("y"), "2").unwrap();
        std::fs::write(b.path().join("x"), "1").unwrap();
        assert_eq!(hash_path(a.path()).unwrap(), hash_path(b.path()).unwrap());
        std::fs::write(b.path().join("x"), "3").unwrap();
        assert_ne!(hash_path(a.path()).unwrap(), hash_path(b.path()).unwrap());
    }

    #[test]
    fn directory_hash_skips_run_manifests() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("x"), "1").unwrap();
        let before = hash_path(dir.path()).unwrap();
        std::fs::write(dir.path().join("run-pretrain.json"), "{}").unwrap();
        assert_eq!(hash_path(dir.path()).unwrap(), before);
    }
}
