//! Report files and the resolved-config sidecar every run writes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// Write-temp-then-rename, so readers never observe a half-written file.
pub fn atomic_write(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Append a suffix to a path's file name ("out/report" -> "out/report.txt").
pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

/// FNV-1a over the serialized config; recorded so a manifest can be checked
/// against the config that allegedly produced it.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

/// Serialize the resolved run configuration next to the run's outputs.
///
/// `base` is the run's primary output path; the config lands at
/// `<base>.config.json` and embeds its own FNV-1a hash.
pub fn write_config<T: Serialize>(base: &Path, config: &T) -> Result<()> {
    let value = serde_json::to_value(config)?;
    let hash = fnv1a_hex(serde_json::to_string(&value)?.as_bytes());
    let envelope = serde_json::json!({ "config": value, "config_hash": hash });
    let mut pretty = serde_json::to_string_pretty(&envelope)?;
    pretty.push('\n');
    atomic_write(&with_suffix(base, ".config.json"), pretty.as_bytes())
}
