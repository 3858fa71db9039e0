//! Artifact manifests and output-directory locking.
//!
//! Every command output directory carries a `manifest.json` listing the
//! SHA-256 of each artifact file, the tool version, creation time, and the
//! hashes of the inputs it was derived from. Loading a manifest re-hashes
//! every listed file, so corruption and tampering surface as errors rather
//! than as silently wrong results.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.resolved";
const LOCK_FILE: &str = ".lock";

/// Provenance record for one output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    /// Producing tool and version, from the crate metadata.
    pub tool: String,
    pub version: String,
    /// Subcommand that produced the directory.
    pub command: String,
    /// Creation time, seconds since the Unix epoch.
    pub created_unix_s: u64,
    /// SHA-256 per artifact, keyed by path relative to the directory.
    pub artifacts: BTreeMap<String, String>,
    /// SHA-256 of the inputs this run consumed (checkpoints, dataset
    /// manifests), for lineage tracing.
    pub parents: Vec<String>,
}

/// SHA-256 of a file's contents, as lowercase hex.
pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Collects every file under `dir` (recursively) as a sorted list of
/// relative paths, skipping the manifest itself and the lock file.
fn artifact_paths(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            artifact_paths(&path, base, out)?;
            continue;
        }
        let rel = path.strip_prefix(base).expect("path under base").to_path_buf();
        let name = rel.to_string_lossy();
        if name == MANIFEST_FILE || name == LOCK_FILE {
            continue;
        }
        out.push(rel);
    }
    Ok(())
}

/// Hashes every artifact under `dir` and writes `manifest.json`.
pub fn write_manifest(dir: &Path, command: &str, parents: Vec<String>) -> Result<Manifest, CliError> {
    let mut rels = Vec::new();
    artifact_paths(dir, dir, &mut rels)?;
    rels.sort();
    let mut artifacts = BTreeMap::new();
    for rel in rels {
        let hash = sha256_file(&dir.join(&rel))?;
        artifacts.insert(rel.to_string_lossy().replace('\\', "/"), hash);
    }
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        created_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        artifacts,
        parents,
    };
    let mut f = File::create(dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    Ok(manifest)
}

/// Reads `manifest.json` under `dir` and verifies every artifact hash.
pub fn load_manifest(dir: &Path) -> Result<Manifest, CliError> {
    let path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_reader(File::open(&path).map_err(|e| {
        CliError::Integrity(format!("no manifest at '{}': {e}", path.display()))
    })?)?;
    for (rel, expect) in &manifest.artifacts {
        let actual = sha256_file(&dir.join(rel)).map_err(|e| {
            CliError::Integrity(format!("missing artifact '{rel}': {e}"))
        })?;
        if actual != *expect {
            return Err(CliError::Integrity(format!(
                "artifact '{rel}' hash mismatch: manifest {expect}, file {actual}"
            )));
        }
    }
    Ok(manifest)
}

/// SHA-256 of a directory's manifest file — the identity other manifests
/// record as a parent.
pub fn manifest_id(dir: &Path) -> Result<String, CliError> {
    sha256_file(&dir.join(MANIFEST_FILE))
}

/// An output directory claimed for exclusive use via an advisory lock
/// file. The lock is released on [`OutDir::finish`] or drop; a left-over
/// lock from a crashed run must be removed by hand.
#[derive(Debug)]
pub struct OutDir {
    path: PathBuf,
}

impl OutDir {
    /// Creates `path` if needed and claims its lock.
    pub fn claim(path: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(path)?;
        let lock = path.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path: path.to_path_buf() })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked {
                dir: path.display().to_string(),
                lock: lock.display().to_string(),
            }),
            Err(e) => Err(e.into()),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, rel: &str) -> PathBuf {
        self.path.join(rel)
    }

    /// Writes the resolved config and manifest, then releases the lock.
    pub fn finish(
        self,
        cfg: &RunConfig,
        command: &str,
        parents: Vec<String>,
    ) -> Result<Manifest, CliError> {
        fs::write(self.path.join(CONFIG_FILE), cfg.to_kv())?;
        write_manifest(&self.path, command, parents)
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK_FILE));
    }
}
