//! Workdir layout, writer lock, artifact headers and run manifests.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const ARTIFACT_SCHEMA_VERSION: u32 = 1;
pub const LOCK_FILE: &str = ".physiodecode.lock";

pub const EPOCHS: &str = "epochs.epb";
pub const EPOCH_MANIFEST: &str = "epochs.csv";
pub const FEATURES: &str = "features.csv";
pub const SCREENING: &str = "screening.json";
pub const SPLIT: &str = "split.json";
pub const IMPORTANCE: &str = "importance.csv";
pub const ELITE: &str = "elite.txt";
pub const TUNING: &str = "tuning.json";
pub const MODEL: &str = "model.json";
pub const REPORT: &str = "report.json";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const EXPLAIN: &str = "explain.csv";
pub const SHARES: &str = "modality_shares.json";

pub fn journal_name(study: &str) -> String {
    format!("study_{study}.jsonl")
}

/// Exclusive writer access to a workdir; released on drop.
#[derive(Debug)]
pub struct Workdir {
    root: PathBuf,
    lock: PathBuf,
    config_hash: String,
}

impl Workdir {
    pub fn open(root: &Path, config_hash: String) -> Result<Self, CliError> {
        fs::create_dir_all(root)?;
        let lock = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(CliError::Locked(lock));
            }
            Err(e) => return Err(e.into()),
        }
        Ok(Self {
            root: root.to_path_buf(),
            lock,
            config_hash,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// First line of every text artifact.
    pub fn header(&self) -> String {
        format!(
            "# physiodecode schema_version={ARTIFACT_SCHEMA_VERSION} config_hash={}\n",
            self.config_hash
        )
    }

    /// Path of an artifact produced by `stage`, or MissingArtifact.
    pub fn require(&self, name: &str, stage: &str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::MissingArtifact {
                stage: stage.into(),
                path: p,
            })
        }
    }

    pub fn read_text(&self, name: &str, stage: &str) -> Result<String, CliError> {
        Ok(fs::read_to_string(self.require(name, stage)?)?)
    }

    /// Text artifact body with the header line removed.
    pub fn read_body(&self, name: &str, stage: &str) -> Result<String, CliError> {
        Ok(strip_header(&self.read_text(name, stage)?).to_string())
    }

    /// Payload of a JSON envelope written by [`Workdir::write_json`].
    pub fn read_json(&self, name: &str, stage: &str) -> Result<Value, CliError> {
        let text = self.read_text(name, stage)?;
        let mut v: Value = serde_json::from_str(&text).map_err(|e| CliError::Data(e.into()))?;
        let version = v.get("schema_version").and_then(Value::as_u64);
        if version != Some(ARTIFACT_SCHEMA_VERSION as u64) {
            return Err(CliError::Data(physiodecode::Error::SchemaVersionMismatch {
                expected: ARTIFACT_SCHEMA_VERSION,
                found: version,
            }));
        }
        v.get_mut("payload")
            .map(Value::take)
            .ok_or_else(|| CliError::Data(physiodecode::Error::InvalidArgument(format!("{name} has no payload"))))
    }

    pub fn write_text(&self, name: &str, body: &str) -> Result<(), CliError> {
        let mut text = self.header();
        text.push_str(body);
        self.write_raw(name, text.as_bytes())
    }

    pub fn write_json(&self, name: &str, payload: Value) -> Result<(), CliError> {
        let envelope = serde_json::json!({
            "schema_version": ARTIFACT_SCHEMA_VERSION,
            "config_hash": self.config_hash,
            "payload": payload,
        });
        let mut text = serde_json::to_string_pretty(&envelope).map_err(|e| CliError::Data(e.into()))?;
        text.push('\n');
        self.write_raw(name, text.as_bytes())
    }

    /// Write through a temporary file and rename.
    pub fn write_raw(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let dest = self.path(name);
        let tmp = self.path(&format!(".{name}.tmp"));
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, &dest)?;
        Ok(())
    }
}

impl Drop for Workdir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

pub fn strip_header(text: &str) -> &str {
    if text.starts_with("# physiodecode ") {
        text.split_once('\n').map_or("", |(_, rest)| rest)
    } else {
        text
    }
}

/// `config_hash` recorded in a text artifact's header line.
pub fn header_hash(text: &str) -> Option<&str> {
    let first = text.lines().next()?;
    first
        .strip_prefix("# physiodecode ")?
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("config_hash="))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut hasher = Sha256::new();
    let mut f = File::open(path)?;
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub created_unix_s: u64,
}

impl RunManifest {
    pub fn new(stage: &str, seed: u64, config_hash: &str, config: String) -> Self {
        Self {
            schema_version: ARTIFACT_SCHEMA_VERSION,
            stage: stage.into(),
            seed,
            config_hash: config_hash.into(),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            created_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }

    pub fn input(&mut self, label: &str, path: &Path) -> Result<(), CliError> {
        self.inputs.insert(label.into(), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, wd: &Workdir, name: &str) -> Result<(), CliError> {
        self.outputs.insert(name.into(), sha256_file(&wd.path(name))?);
        Ok(())
    }

    pub fn write(&self, wd: &Workdir) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| CliError::Data(e.into()))?;
        text.push('\n');
        wd.write_raw(&format!("manifest_{}.json", self.stage), text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let a = Workdir::open(dir.path(), "h".into()).unwrap();
        assert!(matches!(Workdir::open(dir.path(), "h".into()), Err(CliError::Locked(_))));
        drop(a);
        assert!(Workdir::open(dir.path(), "h".into()).is_ok());
    }

    #[test]
    fn headers_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let wd = Workdir::open(dir.path(), "abc".into()).unwrap();
        wd.write_text("x.txt", "a\nb\n").unwrap();
        let text = wd.read_text("x.txt", "s").unwrap();
        assert_eq!(header_hash(&text), Some("abc"));
        assert_eq!(strip_header(&text), "a\nb\n");
        wd.write_json("x.json", serde_json::json!({"k": 1})).unwrap();
        assert_eq!(wd.read_json("x.json", "s").unwrap()["k"], 1);
        assert!(matches!(
            wd.read_text("missing", "train"),
            Err(CliError::MissingArtifact { ref stage, .. }) if stage == "train"
        ));
    }
}
