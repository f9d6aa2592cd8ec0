use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde::de::DeserializeOwned;
use sha2::{Digest, Sha256};

use crate::failure::{CliResult, Failure};

pub fn open(path: &Path) -> CliResult<BufReader<fs::File>> {
    fs::File::open(path).map(BufReader::new).map_err(|e| Failure::from(e).context(format!("opening {}", path.display())))
}

pub fn create(path: &Path) -> CliResult<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::from(e).context(format!("creating {}", dir.display())))?;
    }
    fs::File::create(path).map(BufWriter::new).map_err(|e| Failure::from(e).context(format!("creating {}", path.display())))
}

pub fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| Failure::from(e).context(format!("reading {}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Failure::from(e).context(format!("parsing {}", path.display())))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> CliResult<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

/// Accepts either a file or a directory containing `default_name`.
pub fn resolve_in_dir(path: &Path, default_name: &str) -> PathBuf {
    if path.is_dir() { path.join(default_name) } else { path.to_path_buf() }
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}
