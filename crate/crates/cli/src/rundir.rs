//! Append-only run directories and their manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::settings::Settings;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Command arguments other than the configuration.
    pub args: BTreeMap<String, String>,
    pub config: Settings,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Files under `path`, or `path` itself, in sorted order.
fn files_under(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("listing {}", path.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for e in entries {
        out.extend(files_under(&e)?);
    }
    Ok(out)
}

pub fn records(path: &Path) -> Result<Vec<FileRecord>> {
    files_under(path)?
        .into_iter()
        .map(|f| {
            Ok(FileRecord {
                sha256: sha256_file(&f)?,
                path: f.display().to_string(),
            })
        })
        .collect()
}

pub struct RunDir {
    pub path: PathBuf,
    manifest: Manifest,
}

impl RunDir {
    /// Creates `<root>/<command>-<NNN>` with the first unused index; an
    /// existing run directory is never reused.
    pub fn create(root: &Path, command: &str, settings: &Settings, seed: u64) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let mut index = 0;
        let path = loop {
            let candidate = root.join(format!("{command}-{index:03}"));
            match std::fs::create_dir(&candidate) {
                Ok(()) => break candidate,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => index += 1,
                Err(e) => return Err(e).with_context(|| format!("creating {}", candidate.display())),
            }
        };
        Ok(RunDir {
            path,
            manifest: Manifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                seed,
                args: BTreeMap::new(),
                config: settings.clone(),
                inputs: Vec::new(),
                outputs: Vec::new(),
            },
        })
    }

    pub fn arg(&mut self, key: &str, value: impl ToString) {
        self.manifest.args.insert(key.to_string(), value.to_string());
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest.inputs.extend(records(path)?);
        Ok(())
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.file(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    /// Hashes everything in the directory and writes the manifest. Output
    /// paths are relative to the run directory.
    pub fn finish(mut self) -> Result<PathBuf> {
        let prefix = self.path.display().to_string() + std::path::MAIN_SEPARATOR_STR;
        let mut outputs = records(&self.path)?;
        outputs.retain(|r| !r.path.ends_with(MANIFEST));
        for r in &mut outputs {
            r.path = r.path.trim_start_matches(&prefix).to_string();
        }
        self.manifest.outputs = outputs;
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(self.path.join(MANIFEST), text + "\n")?;
        Ok(self.path)
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
