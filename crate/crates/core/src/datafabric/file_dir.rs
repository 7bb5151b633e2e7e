use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use super::{FabricError, MetricCounters, ObjectStore, StoreKind, StoreMetrics};

#[derive(Serialize, Deserialize)]
struct Meta {
    size: u64,
    hash: String,
}

/// Object store backed by a shared directory: `<dir>/<key>.bin` holds the
/// bytes and `<dir>/<key>.meta` their size and hash. Both files are written
/// to a temporary name first and renamed into place.
#[derive(Debug)]
pub struct FileDirStore {
    dir: PathBuf,
    metrics: MetricCounters,
}

impl FileDirStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, FabricError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)
            .map_err(|e| FabricError::Unreachable(format!("{}: {e}", dir.display())))?;
        Ok(FileDirStore {
            dir,
            metrics: MetricCounters::default(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str, ext: &str) -> Result<PathBuf, FabricError> {
        if key.is_empty()
            || !key
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
        {
            return Err(FabricError::Protocol(format!("invalid key {key:?}")));
        }
        Ok(self.dir.join(format!("{key}.{ext}")))
    }

    fn write_atomic(&self, target: &Path, bytes: &[u8]) -> io::Result<()> {
        let tmp = self.dir.join(format!(".{}.tmp", Uuid::new_v4().simple()));
        let result = (|| {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            fs::rename(&tmp, target)
        })();
        if result.is_err() {
            let _ = fs::remove_file(&tmp);
        }
        result
    }

    fn unreachable(&self, e: io::Error) -> FabricError {
        FabricError::Unreachable(format!("{}: {e}", self.dir.display()))
    }
}

impl ObjectStore for FileDirStore {
    fn kind(&self) -> StoreKind {
        StoreKind::FileDir
    }

    fn locator(&self) -> String {
        self.dir.to_string_lossy().into_owned()
    }

    fn put_bytes(&self, key: &str, bytes: &[u8], content_hash: &str) -> Result<(), FabricError> {
        let bin = self.path(key, "bin")?;
        let meta = self.path(key, "meta")?;
        let meta_json = serde_json::to_vec(&Meta {
            size: bytes.len() as u64,
            hash: content_hash.to_owned(),
        })
        .map_err(|e| FabricError::Protocol(e.to_string()))?;
        // Data before metadata: a visible .meta implies a complete .bin.
        self.write_atomic(&bin, bytes).map_err(|e| self.unreachable(e))?;
        self.write_atomic(&meta, &meta_json)
            .map_err(|e| self.unreachable(e))?;
        MetricCounters::add(&self.metrics.puts, 1);
        MetricCounters::add(&self.metrics.bytes_in, bytes.len() as u64);
        Ok(())
    }

    fn get_bytes(&self, key: &str) -> Result<Vec<u8>, FabricError> {
        let bin = self.path(key, "bin")?;
        match fs::read(&bin) {
            Ok(bytes) => {
                MetricCounters::add(&self.metrics.gets, 1);
                MetricCounters::add(&self.metrics.bytes_out, bytes.len() as u64);
                Ok(bytes)
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                if self.dir.is_dir() {
                    Err(FabricError::MissingKey(key.to_owned()))
                } else {
                    Err(self.unreachable(e))
                }
            }
            Err(e) => Err(self.unreachable(e)),
        }
    }

    fn evict(&self, key: &str) -> Result<(), FabricError> {
        let meta = self.path(key, "meta")?;
        let bin = self.path(key, "bin")?;
        let mut removed = false;
        for p in [meta, bin] {
            match fs::remove_file(&p) {
                Ok(()) => removed = true,
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => return Err(self.unreachable(e)),
            }
        }
        if removed {
            MetricCounters::add(&self.metrics.evictions, 1);
        }
        Ok(())
    }

    fn exists(&self, key: &str) -> Result<bool, FabricError> {
        Ok(self.path(key, "meta")?.is_file())
    }

    fn metrics(&self) -> StoreMetrics {
        self.metrics.snapshot()
    }
}
