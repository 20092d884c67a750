//! Output manifests: one line per file with a git-style SHA-256 blob hash.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use docnmt::{Error, Result};
use sha2::{Digest, Sha256};

/// SHA-256 of `"blob <len>\0"` followed by the content.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

pub struct Manifest {
    command: &'static str,
    header: Vec<(String, String)>,
    inputs: Vec<(String, String, usize)>,
    outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: &'static str) -> Self {
        Manifest { command, header: Vec::new(), inputs: Vec::new(), outputs: Vec::new() }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.header.push((key.to_string(), value.to_string()));
    }

    /// Records an input by file name and hash, so manifests do not depend on
    /// where the inputs live.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        self.inputs.push((name, blob_hash(&bytes), bytes.len()));
        Ok(())
    }

    /// Writes `bytes` to `dir/name` and records it.
    pub fn write(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        self.outputs.push(path.clone());
        Ok(path)
    }

    pub fn render(&self) -> Result<String> {
        let mut s = format!("docnmt-manifest 1\ncommand {}\n", self.command);
        for (k, v) in &self.header {
            let _ = writeln!(s, "{k} {v}");
        }
        for (name, hash, len) in &self.inputs {
            let _ = writeln!(s, "input {hash} {len} {name}");
        }
        for path in &self.outputs {
            let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            let name = path.file_name().unwrap_or_default().to_string_lossy();
            let _ = writeln!(s, "output {} {} {name}", blob_hash(&bytes), bytes.len());
        }
        Ok(s)
    }

    pub fn finish(self, dir: &Path) -> Result<()> {
        let text = self.render()?;
        let path = dir.join(format!("{}.manifest", self.command));
        std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
    }
}
