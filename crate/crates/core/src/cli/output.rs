//! Output handling: a sibling lock file per output target, and directories
//! that are assembled next to their destination and then renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::graph::format::{self, write_atomic, MODEL_FILE, WEIGHTS_FILE};
use crate::graph::ModelGraph;

use super::error::CliError;

/// Exclusive claim on an output path, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(target: &Path) -> Result<Self, CliError> {
        let path = sibling(target, "", ".lock");
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(OutputLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(path)),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// `<parent>/<prefix><name><suffix>` for a target path `<parent>/<name>`.
fn sibling(target: &Path, prefix: &str, suffix: &str) -> PathBuf {
    let name = target
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    target.with_file_name(format!("{prefix}{name}{suffix}"))
}

/// A directory that was not written by us must not be replaced wholesale.
fn replaceable(dir: &Path) -> Result<bool, CliError> {
    if !dir.exists() {
        return Ok(true);
    }
    if !dir.is_dir() {
        return Ok(false);
    }
    let mut entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    Ok(dir.join(MODEL_FILE).is_file() || entries.next().is_none())
}

/// Writes `files` into a fresh directory and renames it over `dir`. Readers
/// see either the previous contents or the complete new set.
pub fn publish_dir(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<(), CliError> {
    if !replaceable(dir)? {
        return Err(CliError::Invalid(format!(
            "refusing to replace {}: it exists and does not hold a resfuse model",
            dir.display()
        )));
    }
    let pid = std::process::id();
    let tmp = sibling(dir, ".", &format!(".tmp-{pid}"));
    let old = sibling(dir, ".", &format!(".old-{pid}"));
    let _ = fs::remove_dir_all(&tmp);
    let result = (|| -> Result<(), CliError> {
        fs::create_dir_all(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        for (name, bytes) in files {
            write_atomic(&tmp.join(name), bytes)?;
        }
        if dir.exists() {
            fs::rename(dir, &old).map_err(|e| CliError::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| CliError::io(dir, e))
    })();
    if result.is_err() {
        let _ = fs::remove_dir_all(&tmp);
        if old.exists() && !dir.exists() {
            let _ = fs::rename(&old, dir);
        }
    }
    let _ = fs::remove_dir_all(&old);
    result
}

pub fn model_files(g: &ModelGraph) -> Result<Vec<(String, Vec<u8>)>, CliError> {
    let (json, bin) = format::encode(g)?;
    Ok(vec![
        (MODEL_FILE.to_string(), json.into_bytes()),
        (WEIGHTS_FILE.to_string(), bin),
    ])
}

/// Writes each file atomically into `dir`, leaving other files alone.
pub fn write_files(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for (name, bytes) in files {
        write_atomic(&dir.join(name), bytes)?;
    }
    Ok(())
}

pub fn json_bytes<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("report values serialize");
    s.push('\n');
    s.into_bytes()
}

pub fn load_model(dir: &Path) -> Result<ModelGraph, CliError> {
    if !dir.join(MODEL_FILE).is_file() {
        return Err(CliError::Invalid(format!("{} does not contain {MODEL_FILE}", dir.display())));
    }
    Ok(format::load(dir)?)
}
