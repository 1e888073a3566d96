//! Run directories: a resolved config snapshot, the run's artifacts and,
//! on completion, a manifest of content hashes. A completed directory is
//! never written again.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use lizard::pipeline::RunConfig;
use lizard::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const SNAPSHOT: &str = "config.json";

pub struct RunDir {
    root: PathBuf,
}

#[derive(Serialize)]
struct Manifest {
    /// SHA-256 over the sorted `<hash>  <name>` lines of `files`.
    content_hash: String,
    config_hash: String,
    files: BTreeMap<String, String>,
}

impl RunDir {
    /// Opens `root` for a new run and writes the config snapshot.
    pub fn create(root: &Path, cfg: &RunConfig) -> Result<Self> {
        if root.join(MANIFEST).exists() {
            return Err(Error::Config(format!(
                "{} holds a completed run; choose another --out",
                root.display()
            )));
        }
        fs::create_dir_all(root)?;
        let rd = Self { root: root.to_path_buf() };
        rd.write(SNAPSHOT, cfg.snapshot()?.as_bytes())?;
        Ok(rd)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.path(name), bytes)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        self.write(name, &serde_json::to_vec_pretty(value)?)
    }

    /// Hashes every file, writes the manifest and marks the files read-only.
    pub fn finish(self, cfg: &RunConfig) -> Result<PathBuf> {
        let mut files = BTreeMap::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            if entry.file_type()?.is_file() {
                let name = entry.file_name().to_string_lossy().into_owned();
                files.insert(name, hex::encode(Sha256::digest(fs::read(entry.path())?)));
            }
        }
        let listing: String = files.iter().map(|(n, h)| format!("{h}  {n}\n")).collect();
        let manifest = Manifest {
            content_hash: hex::encode(Sha256::digest(listing.as_bytes())),
            config_hash: cfg.content_hash()?,
            files,
        };
        self.write_json(MANIFEST, &manifest)?;
        for name in manifest.files.keys().map(String::as_str).chain([MANIFEST]) {
            let p = self.path(name);
            let mut perm = fs::metadata(&p)?.permissions();
            perm.set_readonly(true);
            fs::set_permissions(&p, perm)?;
        }
        eprintln!("content hash {}", manifest.content_hash);
        Ok(self.root)
    }
}
