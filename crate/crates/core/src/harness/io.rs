//! File helpers for stage artifacts. Every read made on behalf of a stage goes through an
//! [`AccessLog`] so the manifest can list exactly what each stage saw.

use std::cell::RefCell;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use tch::Tensor;

use crate::error::{Error, Result};
use crate::tensor::ImageBatch;

/// Ordered, de-duplicated list of files read.
#[derive(Debug, Default)]
pub struct AccessLog {
    paths: RefCell<Vec<PathBuf>>,
}

impl AccessLog {
    pub fn record(&self, path: &Path) {
        let p = fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
        let mut v = self.paths.borrow_mut();
        if !v.contains(&p) {
            v.push(p);
        }
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        self.paths.borrow().clone()
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path, log: &AccessLog) -> Result<T> {
    log.record(path);
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    t.write_npy(path)?;
    Ok(())
}

pub fn read_tensor(path: &Path, log: &AccessLog) -> Result<Tensor> {
    log.record(path);
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing artifact"),
        ));
    }
    Ok(Tensor::read_npy(path)?)
}

pub fn write_images(path: &Path, x: &ImageBatch) -> Result<()> {
    write_tensor(path, x.tensor())
}

pub fn read_images(path: &Path, log: &AccessLog) -> Result<ImageBatch> {
    ImageBatch::new(read_tensor(path, log)?)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    write_tensor(
        path,
        &Tensor::from_slice(&labels.iter().map(|&l| l as i64).collect::<Vec<_>>()),
    )
}

pub fn read_labels(path: &Path, log: &AccessLog) -> Result<Vec<usize>> {
    let t = read_tensor(path, log)?;
    Ok(Vec::<i64>::try_from(&t)?
        .into_iter()
        .map(|v| v as usize)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensors_roundtrip_and_reads_are_logged() {
        let dir = tempfile::tempdir().unwrap();
        let x = ImageBatch::full([2, 3, 4, 4], 0.25);
        let p = dir.path().join("a/x.npy");
        write_images(&p, &x).unwrap();
        write_labels(&dir.path().join("l.npy"), &[3, 1]).unwrap();
        let log = AccessLog::default();
        assert_eq!(read_images(&p, &log).unwrap(), x);
        assert_eq!(
            read_labels(&dir.path().join("l.npy"), &log).unwrap(),
            vec![3, 1]
        );
        read_images(&p, &log).unwrap();
        assert_eq!(log.paths().len(), 2);
        assert!(read_images(&dir.path().join("missing.npy"), &log).is_err());
    }
}
