//! Run manifests written next to every output.
//!
//! A manifest is plain text: the command, tool versions, the argument
//! vector, the full configuration snapshot and the SHA-256 of each output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::archive::sha256_hex;
use crate::config::RunConfig;
use crate::{Error, Result};

pub const FILE_NAME: &str = "manifest.txt";

/// `<dir>/manifest.txt` for a directory output, `<file>.manifest.txt` otherwise.
pub fn manifest_path(output: &Path) -> PathBuf {
    if output.is_dir() {
        output.join(FILE_NAME)
    } else {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.txt");
        output.with_file_name(name)
    }
}

pub fn render(command: &str, argv: &[String], cfg: &RunConfig, outputs: &[PathBuf]) -> Result<String> {
    let mut s = String::new();
    let _ = writeln!(s, "[run]");
    let _ = writeln!(s, "command = {command}");
    let _ = writeln!(s, "pfr = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "argv = {}", argv.join(" "));
    let _ = writeln!(s, "\n[config]");
    s.push_str(&cfg.to_text());
    let _ = writeln!(s, "\n[outputs]");
    for p in outputs {
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        let _ = writeln!(s, "{} = {}", p.display(), sha256_hex(&bytes));
    }
    Ok(s)
}

/// Writes the manifest for `output` and returns its path.
pub fn write(output: &Path, command: &str, argv: &[String], cfg: &RunConfig, outputs: &[PathBuf]) -> Result<PathBuf> {
    let path = manifest_path(output);
    let text = render(command, argv, cfg, outputs)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// The `[config]` section of a manifest.
pub fn config_section(text: &str) -> Option<&str> {
    let start = text.find("[config]\n")? + "[config]\n".len();
    let end = text[start..].find("\n[").map_or(text.len(), |e| start + e);
    Some(&text[start..end])
}
