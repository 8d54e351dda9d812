use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const INDEX_FILE: &str = "outputs.json";

#[derive(Serialize)]
struct Entry {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct Index<'a> {
    command: &'a str,
    files: Vec<Entry>,
}

/// Collects the files a command writes under its output directory and
/// records them in `outputs.json`.
pub struct Outputs {
    root: PathBuf,
    command: &'static str,
    files: Vec<PathBuf>,
}

impl Outputs {
    pub fn create(root: &Path, command: &'static str) -> anyhow::Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root: root.to_path_buf(), command, files: Vec::new() })
    }

    /// Path for `rel`, creating parent directories, and registers it.
    pub fn path(&mut self, rel: impl AsRef<Path>) -> anyhow::Result<PathBuf> {
        let rel = rel.as_ref().to_path_buf();
        let full = self.root.join(&rel);
        if let Some(dir) = full.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        if !self.files.contains(&rel) {
            self.files.push(rel);
        }
        Ok(full)
    }

    pub fn write(&mut self, rel: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> anyhow::Result<PathBuf> {
        let path = self.path(rel)?;
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Registers a file something else already wrote.
    pub fn register(&mut self, full: &Path) {
        let rel = full.strip_prefix(&self.root).unwrap_or(full).to_path_buf();
        if !self.files.contains(&rel) {
            self.files.push(rel);
        }
    }

    pub fn finish(self) -> anyhow::Result<PathBuf> {
        let files = self
            .files
            .iter()
            .map(|rel| {
                let full = self.root.join(rel);
                let bytes = std::fs::read(&full).with_context(|| format!("indexing {}", full.display()))?;
                let digest = Sha256::digest(&bytes);
                Ok(Entry {
                    path: rel.to_string_lossy().replace('\\', "/"),
                    bytes: bytes.len() as u64,
                    sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
                })
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        let index = Index { command: self.command, files };
        let path = self.root.join(INDEX_FILE);
        let json = serde_json::to_string_pretty(&index).expect("index serializes") + "\n";
        std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
