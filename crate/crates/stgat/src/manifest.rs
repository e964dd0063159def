//! Run directories and the `manifest.json` written at the end of every
//! command.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Environment variable naming the directory that holds run directories.
pub const ARTIFACT_ROOT_ENV: &str = "STGAT_ARTIFACT_ROOT";
pub const DEFAULT_ARTIFACT_ROOT: &str = "runs";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Why one seeded run stopped training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopRecord {
    pub method: String,
    pub seed: u64,
    pub stop_reason: String,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand and the arguments it was invoked with.
    pub command: Vec<String>,
    /// The effective configuration, or the generator settings for `synth`.
    pub config: serde_json::Value,
    /// SHA-256 of the input corpus, or of the generated one for `synth`.
    pub corpus_sha256: String,
    pub seeds: Vec<u64>,
    pub started_at: String,
    pub finished_at: String,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    pub stop_reasons: Vec<StopRecord>,
    /// How the artifacts are laid out.
    pub layout: String,
    /// Free-form facts about the run, such as dropped input rows.
    #[serde(default)]
    pub notes: Vec<String>,
}

pub fn timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl RunManifest {
    /// Checks that every listed artifact exists under `dir`, then writes the
    /// manifest through a temporary file and a rename so that readers never
    /// see a partial file.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        self.write_named(dir, MANIFEST_FILE)
    }

    /// [`RunManifest::write`] under another file name.
    pub fn write_named(&self, dir: &Path, file_name: &str) -> Result<PathBuf> {
        for a in &self.artifacts {
            let p = dir.join(a);
            if !p.exists() {
                return Err(Error::Format(format!("manifest lists missing artifact {}", p.display())));
            }
        }
        let path = dir.join(file_name);
        let tmp = dir.join(format!(".{file_name}.tmp"));
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// The run directory: `out` when given, otherwise
/// `$STGAT_ARTIFACT_ROOT/<UTC timestamp>-<config hash>` (root defaults to
/// `./runs`). A numeric suffix avoids clobbering an existing directory.
pub fn run_dir(out: Option<&Path>, started: DateTime<Utc>, hash: &str) -> Result<PathBuf> {
    let dir = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(ARTIFACT_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_ARTIFACT_ROOT));
            let stem = format!("{}-{hash}", started.format("%Y%m%dT%H%M%SZ"));
            let mut candidate = root.join(&stem);
            let mut n = 2;
            while candidate.exists() {
                candidate = root.join(format!("{stem}-{n}"));
                n += 1;
            }
            candidate
        }
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// `path` relative to `base` for manifest listings.
pub fn relative(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(artifacts: Vec<String>) -> RunManifest {
        RunManifest {
            command: vec!["train".into()],
            config: serde_json::json!({"k": 1}),
            corpus_sha256: "00".into(),
            seeds: vec![1],
            started_at: "a".into(),
            finished_at: "b".into(),
            artifacts,
            stop_reasons: vec![],
            layout: String::new(),
            notes: vec![],
        }
    }

    #[test]
    fn writes_atomically_and_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("model.stgat"), b"x").unwrap();
        let m = manifest(vec!["model.stgat".into()]);
        m.write(dir.path()).unwrap();
        assert_eq!(RunManifest::read(dir.path()).unwrap(), m);
        assert!(!dir.path().join(".manifest.json.tmp").exists());
    }

    #[test]
    fn refuses_to_list_missing_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        assert!(manifest(vec!["nope".into()]).write(dir.path()).is_err());
        assert!(!dir.path().join(MANIFEST_FILE).exists());
    }

    #[test]
    fn explicit_out_is_used_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("x/y");
        assert_eq!(run_dir(Some(&out), Utc::now(), "abcd1234").unwrap(), out);
        assert!(out.is_dir());
    }
}
