use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use log::trace;
use serde::{Deserialize, Serialize};

use super::wire::WireRequest;
use super::Transport;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    /// Serve hits, forward misses and store their responses.
    #[default]
    ReadWrite,
    /// Serve hits only; a miss is an error and the inner transport is never called.
    Replay,
}

/// Content-addressed response cache: `dir/<first-2-hex>/<digest>.json` holds
/// the raw response body of the request whose canonical digest is `<digest>`.
///
/// Writes go through a temp file and an atomic rename, so concurrent writers
/// of one key leave exactly one complete body (last writer wins).
pub struct CachedTransport<T> {
    inner: T,
    dir: PathBuf,
    mode: CacheMode,
}

impl<T: Transport> CachedTransport<T> {
    pub fn new(inner: T, dir: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            dir: dir.into(),
            mode: CacheMode::ReadWrite,
        }
    }

    pub fn with_mode(mut self, mode: CacheMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    fn store(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        let parent = path.parent().expect("cache entries live in a shard directory");
        fs::create_dir_all(parent)?;
        let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
        tmp.write_all(bytes)?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }
}

impl<T: Transport> Transport for CachedTransport<T> {
    fn send(&self, req: &WireRequest) -> Result<Vec<u8>> {
        if !req.is_deterministic() {
            return self.inner.send(req);
        }
        let key = req.cache_key();
        let path = self.entry_path(&key);
        match fs::read(&path) {
            Ok(bytes) => {
                trace!("cache hit {key}");
                return Ok(bytes);
            }
            Err(e) if e.kind() == ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        if self.mode == CacheMode::Replay {
            return Err(Error::CacheMiss { key });
        }
        let bytes = self.inner.send(req)?;
        self.store(&path, &bytes)?;
        Ok(bytes)
    }
}

/// Digest over every entry (relative path and bytes) under a cache directory,
/// in sorted path order. A missing directory hashes like an empty one.
pub fn cache_dir_digest(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    files.sort();
    let mut builder = crate::digest::DigestBuilder::new();
    for file in files {
        let rel = file.strip_prefix(dir).unwrap_or(&file);
        builder = builder
            .part(rel.to_string_lossy().as_bytes())
            .part(fs::read(&file)?);
    }
    Ok(builder.finish())
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e.into()),
    };
    for entry in entries {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if path.extension().is_some_and(|x| x == "json") {
            out.push(path);
        }
    }
    Ok(())
}
