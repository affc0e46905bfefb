use std::fs::File;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

pub fn digest(path: &Path) -> Result<InputDigest> {
    let mut file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file
            .read(&mut buf)
            .with_context(|| format!("reading {}", path.display()))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(InputDigest {
        path: path.to_owned(),
        sha256: hex::encode(hasher.finalize()),
    })
}

pub fn digests<'a>(paths: impl IntoIterator<Item = &'a Path>) -> Result<Vec<InputDigest>> {
    paths.into_iter().map(digest).collect()
}

/// Reproducibility header shared by every report.
pub fn envelope(
    command: &str,
    fingerprint: &str,
    config: Value,
    inputs: Vec<InputDigest>,
    result: Value,
) -> Value {
    json!({
        "tool": "conceptscope",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "pipeline_fingerprint": fingerprint,
        "config": config,
        "inputs": inputs,
        "result": result,
    })
}

/// Writes pretty JSON to `out`, or to stdout when no path is given.
pub fn emit(report: &Value, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    match out {
        Some(path) => {
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            use io::Write;
            io::stdout().lock().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}
