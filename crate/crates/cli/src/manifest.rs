use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use dualproc::hashing::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MANIFEST_DIR: &str = "manifests";

/// Record of one command run. Paths are relative to the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

pub fn manifest_path(out: &Path, command: &str) -> PathBuf {
    out.join(MANIFEST_DIR).join(format!("{command}.json"))
}

impl RunManifest {
    pub fn load(out: &Path, command: &str) -> Option<Self> {
        let text = std::fs::read_to_string(manifest_path(out, command)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        let path = manifest_path(out, &self.command);
        std::fs::create_dir_all(path.parent().expect("manifest has a parent"))?;
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// True when the recorded run used the same config and inputs and its
    /// outputs are still on disk unchanged.
    pub fn is_current(&self, out: &Path, config_hash: &str, inputs: &BTreeMap<String, String>) -> bool {
        self.config_hash == config_hash
            && &self.inputs == inputs
            && self
                .outputs
                .iter()
                .all(|(rel, h)| file_sha256(&out.join(rel)).ok().as_deref() == Some(h.as_str()))
    }
}

/// Every manifest in `out`, keyed by command.
pub fn all_manifests(out: &Path) -> BTreeMap<String, RunManifest> {
    let mut found = BTreeMap::new();
    let Ok(dir) = std::fs::read_dir(out.join(MANIFEST_DIR)) else {
        return found;
    };
    for entry in dir.flatten() {
        let p = entry.path();
        if p.extension().is_some_and(|e| e == "json") {
            if let Some(m) = std::fs::read_to_string(&p)
                .ok()
                .and_then(|t| serde_json::from_str::<RunManifest>(&t).ok())
            {
                found.insert(m.command.clone(), m);
            }
        }
    }
    found
}

/// Checks that `rel` still hashes to what the command that produced it
/// recorded.
pub fn check_against_producer(out: &Path, rel: &str, found: &str) -> Result<()> {
    for m in all_manifests(out).values() {
        if let Some(expected) = m.outputs.get(rel) {
            if expected != found {
                return Err(CliError::Provenance(format!(
                    "{rel} does not match the `{}` run that produced it: expected sha256 {expected}, found {found}",
                    m.command
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stale_outputs_are_not_current() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), "a").unwrap();
        let m = RunManifest {
            command: "x".into(),
            tool_version: "0".into(),
            config_hash: "c".into(),
            inputs: BTreeMap::new(),
            outputs: [("a.txt".to_string(), file_sha256(&dir.path().join("a.txt")).unwrap())].into(),
            started_unix: 0,
            finished_unix: 0,
        };
        m.save(dir.path()).unwrap();
        let back = RunManifest::load(dir.path(), "x").unwrap();
        assert_eq!(back, m);
        assert!(back.is_current(dir.path(), "c", &BTreeMap::new()));
        assert!(!back.is_current(dir.path(), "d", &BTreeMap::new()));
        std::fs::write(dir.path().join("a.txt"), "b").unwrap();
        assert!(!back.is_current(dir.path(), "c", &BTreeMap::new()));
        let h = file_sha256(&dir.path().join("a.txt")).unwrap();
        assert!(matches!(
            check_against_producer(dir.path(), "a.txt", &h),
            Err(CliError::Provenance(_))
        ));
    }
}
