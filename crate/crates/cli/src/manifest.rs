//! Run manifests: what was run, on which inputs, producing which files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anchorchain_core::experiment::AblationSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::FileConfig;
use crate::error::Failure;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Inputs {
    pub qa: Option<InputFile>,
    /// Ingested chunk store directory; the digest is the store digest.
    pub index: Option<InputFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<InputFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traces: Option<InputFile>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunCounts {
    pub n_queries: usize,
    pub computed: usize,
    pub resumed: usize,
    pub errored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub run_id: String,
    pub command: String,
    pub started_at: String,
    pub finished_at: String,
    /// Resolved configuration. The API key is never part of it.
    pub config: FileConfig,
    pub backend_id: String,
    pub prompts_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationSpec>,
    pub inputs: Inputs,
    /// Artifact name to path, relative to the manifest's directory.
    pub artifacts: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<RunCounts>,
}

impl RunManifest {
    pub fn begin(command: &str, config: FileConfig, backend_id: String, prompts_version: String) -> Self {
        Self {
            manifest_version: MANIFEST_VERSION,
            run_id: uuid::Uuid::new_v4().to_string(),
            command: command.into(),
            started_at: now(),
            finished_at: String::new(),
            config,
            backend_id,
            prompts_version,
            ablation: None,
            inputs: Inputs::default(),
            artifacts: BTreeMap::new(),
            counts: None,
        }
    }

    pub fn artifact(&mut self, name: &str, rel: impl Into<PathBuf>) {
        self.artifacts.insert(name.into(), rel.into());
    }

    /// Stamps the finish time and writes `manifest.json` into `dir`.
    pub fn finish(&mut self, dir: &Path) -> Result<PathBuf, Failure> {
        self.finished_at = now();
        self.artifact("manifest", MANIFEST_FILE);
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        if m.manifest_version != MANIFEST_VERSION {
            return Err(Failure::Data(format!(
                "{}: manifest version {} is not supported",
                path.display(),
                m.manifest_version
            )));
        }
        Ok(m)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Lowercase hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String, Failure> {
    let mut f = fs::File::open(path).map_err(|e| Failure::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf).map_err(|e| Failure::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn input_file(path: &Path) -> Result<InputFile, Failure> {
    Ok(InputFile {
        path: absolute(path)?,
        digest: file_digest(path)?,
    })
}

pub fn absolute(path: &Path) -> Result<PathBuf, Failure> {
    std::path::absolute(path).map_err(|e| Failure::io(path, e))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Failure::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Failure::io(path, e))
}
