//! Provenance manifests: every artifact gets a `<file>.manifest.json`
//! sibling naming the command that produced it, the SHA-256 of each input
//! it was derived from, its own hash, and the hash of the effective run
//! configuration. File references are basenames, so a run directory can
//! be relocated or diffed wholesale; two runs with equal manifests are
//! byte-identical by construction.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tenorsel::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    /// Command-specific parameters not captured by the config file
    /// (e.g. the backtest policy). Sorted map for stable bytes.
    pub args: BTreeMap<String, String>,
    pub config_sha256: String,
    pub inputs: Vec<FileHash>,
    pub output: FileHash,
}

/// Streaming SHA-256 of a file.
pub fn sha256_file(path: &Path) -> Result<String> {
    let loc = path.display().to_string();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(loc.clone(), e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(loc.clone(), e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn basename(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn file_hash(path: &Path) -> Result<FileHash> {
    Ok(FileHash {
        file: basename(path),
        sha256: sha256_file(path)?,
    })
}

/// Hash `output` and its `inputs` and write `<output>.manifest.json`.
pub fn write_manifest(
    command: &str,
    args: &[(&str, String)],
    config_sha256: &str,
    inputs: &[&Path],
    output: &Path,
) -> Result<()> {
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        args: args.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        config_sha256: config_sha256.to_string(),
        inputs: inputs.iter().map(|p| file_hash(p)).collect::<Result<_>>()?,
        output: file_hash(output)?,
    };
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Validation(format!("manifest serialization: {e}")))?;
    text.push('\n');
    let manifest_path = manifest_path_for(output);
    std::fs::write(&manifest_path, text)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))
}

/// `<file>.manifest.json` beside the file.
pub fn manifest_path_for(output: &Path) -> std::path::PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}
