//! Output directory handling and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::FileConfig;
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.txt";
const PROBE: &str = ".more-write-probe";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectiveRank {
    pub text: usize,
    pub projector: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// Hex digest of the generated edit stream.
    pub stream_checksum: String,
    /// Digest of every output that does not depend on wall-clock time.
    pub content_sha256: String,
    pub nominal_rank: usize,
    pub effective_rank: EffectiveRank,
    /// File name to sha256, for every artifact except the manifest itself.
    pub files: BTreeMap<String, String>,
    pub sources: BTreeMap<String, String>,
    pub config: FileConfig,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("manifest: {e}")))
    }
}

pub struct OutputDir {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

impl OutputDir {
    /// Create `root` if needed and confirm it accepts writes.
    pub fn prepare(root: &Path) -> Result<Self, CliError> {
        let fail = |source| CliError::Output {
            path: root.to_path_buf(),
            source,
        };
        fs::create_dir_all(root).map_err(fail)?;
        let probe = root.join(PROBE);
        fs::write(&probe, b"").map_err(fail)?;
        fs::remove_file(&probe).map_err(fail)?;
        Ok(Self {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.root.join(name);
        fs::write(&path, contents).map_err(|source| CliError::Output { path, source })?;
        self.files.insert(name.to_string(), sha256_hex(contents.as_bytes()));
        Ok(())
    }

    pub fn files(&self) -> &BTreeMap<String, String> {
        &self.files
    }

    /// Write the manifest through a temporary file and rename it into place.
    pub fn finish(self, manifest: &Manifest) -> Result<PathBuf, CliError> {
        let text = toml::to_string(manifest).map_err(|e| CliError::Config(format!("manifest: {e}")))?;
        let tmp = self.root.join(format!("{MANIFEST}.tmp"));
        let path = self.root.join(MANIFEST);
        fs::write(&tmp, text).map_err(|source| CliError::Output {
            path: tmp.clone(),
            source,
        })?;
        fs::rename(&tmp, &path).map_err(|source| CliError::Output {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }
}
